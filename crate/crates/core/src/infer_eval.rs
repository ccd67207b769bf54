//! Inference and evaluation: classification over a candidate set of
//! address texts, exact and street-level retrieval metrics, prior-
//! constrained search, and similarity-map export.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::EncoderParams;
use crate::error::{Error, Result};
use crate::geodata::{
    address_to_text, address_tokens, hex_string, location_addresses, Address, Dataset, Sample,
    SplitAssignment,
};

/// Candidate address classes with their text embeddings, sorted by
/// canonical address text so the index is deterministic. Embedding rows
/// are unit-norm (the text encoder normalizes), so dot products below are
/// cosine similarities.
#[derive(Debug, Clone)]
pub struct CandidateIndex {
    pub addresses: Vec<Address>,
    pub texts: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
}

impl CandidateIndex {
    pub fn len(&self) -> usize {
        self.addresses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.addresses.is_empty()
    }
}

/// The distinct addresses of the train-split locations: the candidate set
/// a trained model classifies over.
pub fn train_candidates(ds: &Dataset, split: &SplitAssignment) -> Result<Vec<Address>> {
    let addrs = location_addresses(ds)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for id in &split.train {
        let a = addrs
            .get(id)
            .ok_or_else(|| Error::Invalid(format!("split names unknown location {id}")))?;
        if seen.insert(address_to_text(a)) {
            out.push(a.clone());
        }
    }
    Ok(out)
}

/// Builds the candidate index: deduplicates addresses by canonical text,
/// sorts them, and encodes each text exactly once.
pub fn build_candidate_index(addresses: &[Address], p: &EncoderParams) -> Result<CandidateIndex> {
    if addresses.is_empty() {
        return Err(Error::EmptyInput("candidate address list".into()));
    }
    let by_text: BTreeMap<String, &Address> = addresses
        .iter()
        .map(|a| (address_to_text(a), a))
        .collect();
    let mut texts = Vec::with_capacity(by_text.len());
    let mut out_addresses = Vec::with_capacity(by_text.len());
    let mut embeddings = Vec::with_capacity(by_text.len());
    for (text, a) in by_text {
        embeddings.push(p.encode_text(&address_tokens(a))?);
        texts.push(text);
        out_addresses.push(a.clone());
    }
    Ok(CandidateIndex {
        addresses: out_addresses,
        texts,
        embeddings,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A ranked prediction: candidate indices with their similarity scores,
/// scores non-increasing. Addresses are distinct because the index is
/// deduplicated.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl Prediction {
    pub fn addresses<'a>(&self, index: &'a CandidateIndex) -> Vec<&'a Address> {
        self.indices.iter().map(|&i| &index.addresses[i]).collect()
    }
}

/// Ranks the top `k` candidates by similarity to a query embedding,
/// ties breaking toward the smaller candidate index.
pub fn predict_topk(index: &CandidateIndex, query_emb: &[f64], k: usize) -> Result<Prediction> {
    if k == 0 {
        return Err(Error::Invalid("prediction depth k must be >= 1".into()));
    }
    if k > index.len() {
        return Err(Error::Invalid(format!(
            "prediction depth {k} exceeds the {} candidates",
            index.len()
        )));
    }
    Ok(rank_subset(index, query_emb, k, |_| true))
}

/// Location prior restricting which candidates may compete: either a
/// neighborhood name or a set of allowed main streets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidatePrior {
    Neighborhood(String),
    Streets(BTreeSet<String>),
}

impl CandidatePrior {
    fn admits(&self, a: &Address) -> bool {
        match self {
            CandidatePrior::Neighborhood(n) => a.neighborhood == *n,
            CandidatePrior::Streets(set) => set.contains(&a.main_street),
        }
    }
}

/// Like [`predict_topk`] but only candidates admitted by the prior
/// compete; `k` deeper than the admitted pool returns the whole pool.
/// Errors if the prior eliminates every candidate.
pub fn constrained_predict(
    index: &CandidateIndex,
    query_emb: &[f64],
    k: usize,
    prior: &CandidatePrior,
) -> Result<Prediction> {
    if k == 0 {
        return Err(Error::Invalid("prediction depth k must be >= 1".into()));
    }
    let pred = rank_subset(index, query_emb, k, |a| prior.admits(a));
    if pred.indices.is_empty() {
        return Err(Error::PriorMatchesNoCandidates);
    }
    Ok(pred)
}

fn rank_subset(
    index: &CandidateIndex,
    query_emb: &[f64],
    k: usize,
    admit: impl Fn(&Address) -> bool,
) -> Prediction {
    let mut scored: Vec<(f64, usize)> = index
        .embeddings
        .iter()
        .enumerate()
        .filter(|(i, _)| admit(&index.addresses[*i]))
        .map(|(i, e)| (dot(query_emb, e), i))
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("scores are finite")
            .then(a.1.cmp(&b.1))
    });
    scored.truncate(k);
    Prediction {
        indices: scored.iter().map(|&(_, i)| i).collect(),
        scores: scored.iter().map(|&(s, _)| s).collect(),
    }
}

/// Hit flags for one query against a ranked candidate list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictionScore {
    /// Exact address match at rank 1 / within the top 5.
    pub ssa1: bool,
    pub ssa5: bool,
    /// Street-level match (same main street and neighborhood).
    pub sa1: bool,
    pub sa5: bool,
}

/// Scores a ranked prediction list against the true address. Exact match
/// is full-address equality (cross streets compared as sets); street
/// match ignores the bounding cross streets.
pub fn score_predictions(gt: &Address, ranked: &[&Address]) -> PredictionScore {
    let mut score = PredictionScore {
        ssa1: false,
        ssa5: false,
        sa1: false,
        sa5: false,
    };
    for (rank, cand) in ranked.iter().take(5).enumerate() {
        let exact = *cand == gt;
        let street = cand.same_street(gt);
        if rank == 0 {
            score.ssa1 = exact;
            score.sa1 = street;
        }
        score.ssa5 |= exact;
        score.sa5 |= street;
    }
    score
}

/// Aggregate retrieval metrics over a query set.
///
/// `query_digest` commits to the exact ordered query list so two reports
/// can prove they measured the same thing; `confusion` counts, per true
/// address text, how often each address text was predicted at rank 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ssa1: f64,
    pub ssa5: f64,
    pub sa1: f64,
    pub sa5: f64,
    pub total_queries: usize,
    pub query_digest: String,
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
}

/// Pure metric computation over (ground truth, ranked predictions) pairs.
/// Rank windows deeper than a prediction list simply see fewer entries.
pub fn metrics_from_predictions(
    pairs: &[(Address, Vec<Address>)],
    digest: &str,
) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no queries to score".into()));
    }
    let mut sums = [0usize; 4];
    let mut confusion: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for (gt, ranked) in pairs {
        let refs: Vec<&Address> = ranked.iter().collect();
        let s = score_predictions(gt, &refs);
        sums[0] += s.ssa1 as usize;
        sums[1] += s.ssa5 as usize;
        sums[2] += s.sa1 as usize;
        sums[3] += s.sa5 as usize;
        if let Some(top1) = ranked.first() {
            *confusion
                .entry(address_to_text(gt))
                .or_default()
                .entry(address_to_text(top1))
                .or_default() += 1;
        }
    }
    let n = pairs.len() as f64;
    Ok(MetricsReport {
        ssa1: sums[0] as f64 / n,
        ssa5: sums[1] as f64 / n,
        sa1: sums[2] as f64 / n,
        sa5: sums[3] as f64 / n,
        total_queries: pairs.len(),
        query_digest: digest.to_string(),
        confusion,
    })
}

/// Query samples in evaluation order: every sample of a query-split
/// location, sorted by (location id, image id).
pub fn query_samples<'a>(ds: &'a Dataset, split: &SplitAssignment) -> Vec<&'a Sample> {
    let query_set: BTreeSet<&String> = split.query.iter().collect();
    let mut queries: Vec<&Sample> = ds
        .samples
        .iter()
        .filter(|s| query_set.contains(&s.location_id))
        .collect();
    queries.sort_by(|a, b| (&a.location_id, &a.image_id).cmp(&(&b.location_id, &b.image_id)));
    queries
}

/// SHA-256 over the ordered query list, one `location_id\timage_id` line
/// per query.
pub fn query_digest(queries: &[&Sample]) -> String {
    let mut hasher = Sha256::new();
    for q in queries {
        hasher.update(q.location_id.as_bytes());
        hasher.update(b"\t");
        hasher.update(q.image_id.as_bytes());
        hasher.update(b"\n");
    }
    hex_string(&hasher.finalize())
}

/// Evaluates top-1/top-5 exact and street-level accuracy of the model's
/// image-to-address retrieval over the query split, classifying against
/// the train split's distinct addresses. With fewer than 5 candidates the
/// top-5 window covers the whole pool.
pub fn evaluate(p: &EncoderParams, ds: &Dataset, split: &SplitAssignment) -> Result<MetricsReport> {
    evaluate_inner(p, ds, split, None)
}

/// [`evaluate`] with per-location priors: a query location with a prior
/// ranks only the admitted candidates; locations without one rank
/// unconstrained.
pub fn constrained_evaluate(
    p: &EncoderParams,
    ds: &Dataset,
    split: &SplitAssignment,
    priors: &BTreeMap<String, CandidatePrior>,
) -> Result<MetricsReport> {
    evaluate_inner(p, ds, split, Some(priors))
}

fn evaluate_inner(
    p: &EncoderParams,
    ds: &Dataset,
    split: &SplitAssignment,
    priors: Option<&BTreeMap<String, CandidatePrior>>,
) -> Result<MetricsReport> {
    let index = build_candidate_index(&train_candidates(ds, split)?, p)?;
    let queries = query_samples(ds, split);
    if queries.is_empty() {
        return Err(Error::EmptyInput("query split selects no samples".into()));
    }
    let digest = query_digest(&queries);
    let k = 5.min(index.len());

    let mut pairs = Vec::with_capacity(queries.len());
    for q in &queries {
        let gt = q
            .address
            .as_ref()
            .ok_or_else(|| Error::MissingAddress(q.location_id.clone()))?;
        let emb = p.encode_image(&q.features)?;
        let pred = match priors.and_then(|m| m.get(&q.location_id)) {
            Some(prior) => constrained_predict(&index, &emb, 5, prior)?,
            None => predict_topk(&index, &emb, k)?,
        };
        let ranked: Vec<Address> = pred.addresses(&index).into_iter().cloned().collect();
        pairs.push((gt.clone(), ranked));
    }
    metrics_from_predictions(&pairs, &digest)
}

/// One row of a similarity map: a sample's coordinate and its image
/// embedding's similarity to a fixed address embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMapRow {
    pub east: f64,
    pub north: f64,
    pub similarity: f64,
}

/// Scores every sample in the dataset against one address: cosine
/// similarity between the address embedding and each sample's image
/// embedding. One row per sample, in dataset order.
pub fn similarity_map(p: &EncoderParams, ds: &Dataset, address: &Address) -> Result<Vec<SimMapRow>> {
    if ds.samples.is_empty() {
        return Err(Error::EmptyInput("dataset has no samples".into()));
    }
    let addr_emb = p.encode_text(&address_tokens(address))?;
    ds.samples
        .iter()
        .map(|s| {
            Ok(SimMapRow {
                east: s.coord.easting,
                north: s.coord.northing,
                similarity: dot(&addr_emb, &p.encode_image(&s.features)?),
            })
        })
        .collect()
}

pub fn write_metrics(path: &Path, report: &MetricsReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })
}

/// Writes a similarity map as CSV (`east,north,similarity`, 9 significant
/// digits) for plotting outside the toolkit.
pub fn write_simmap_csv(path: &Path, rows: &[SimMapRow]) -> Result<()> {
    let mut out = String::from("east,north,similarity\n");
    for r in rows {
        out.push_str(&format!(
            "{:.8e},{:.8e},{:.8e}\n",
            r.east, r.north, r.similarity
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
