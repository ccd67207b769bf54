//! Geo-addressed data model and dataset-level operations.
//!
//! A [`Dataset`] is a flat list of image samples tied to metric (UTM-style)
//! coordinates, each optionally carrying a semantic [`Address`]. The
//! operations here are the deterministic plumbing shared by every later
//! stage: canonical address text, location-level train/database/query
//! splits, subsampling, dataset merging, and line-oriented file IO.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Planar metric coordinate (easting/northing in meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtmCoord {
    pub easting: f64,
    pub northing: f64,
}

impl UtmCoord {
    pub fn new(easting: f64, northing: f64) -> Self {
        UtmCoord { easting, northing }
    }

    pub fn dist(&self, other: &UtmCoord) -> f64 {
        let de = self.easting - other.easting;
        let dn = self.northing - other.northing;
        (de * de + dn * dn).sqrt()
    }
}

/// Semantic sub-street address: a main street, the cross streets bounding
/// the sub-street (0, 1, or 2 of them), and a neighborhood name.
///
/// Cross streets are kept sorted lexicographically, so structural equality
/// coincides with set equality of the bounding streets and the text form is
/// unique per address.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Address {
    pub main_street: String,
    pub cross_streets: Vec<String>,
    pub neighborhood: String,
}

impl Address {
    /// Builds a canonical address: cross streets deduplicated and sorted.
    pub fn new(main_street: &str, cross_streets: &[&str], neighborhood: &str) -> Self {
        let mut crosses: Vec<String> = cross_streets.iter().map(|s| s.to_string()).collect();
        crosses.sort();
        crosses.dedup();
        Address {
            main_street: main_street.to_string(),
            cross_streets: crosses,
            neighborhood: neighborhood.to_string(),
        }
    }

    /// Re-sorts cross streets in place (used after deserialization).
    pub fn canonicalize(&mut self) {
        self.cross_streets.sort();
        self.cross_streets.dedup();
    }

    /// True when two addresses agree at street level (main street and
    /// neighborhood), ignoring the sub-street bounds.
    pub fn same_street(&self, other: &Address) -> bool {
        self.main_street == other.main_street && self.neighborhood == other.neighborhood
    }

    /// Parses the canonical text form produced by [`address_to_text`].
    ///
    /// Street and neighborhood names must not contain the reserved
    /// separators `", "`, `" between "`, `" near "`, or `" and "`.
    pub fn parse_text(text: &str) -> Result<Address> {
        let (left, neighborhood) = text.rsplit_once(", ").ok_or_else(|| {
            Error::Invalid(format!("address text {text:?} has no neighborhood part"))
        })?;
        if neighborhood.is_empty() || left.is_empty() {
            return Err(Error::Invalid(format!("address text {text:?} is incomplete")));
        }
        let addr = if let Some((main, rest)) = left.split_once(" between ") {
            let (c0, c1) = rest.split_once(" and ").ok_or_else(|| {
                Error::Invalid(format!("address text {text:?} names only one bound after 'between'"))
            })?;
            Address::new(main, &[c0, c1], neighborhood)
        } else if let Some((main, c0)) = left.split_once(" near ") {
            Address::new(main, &[c0], neighborhood)
        } else {
            Address::new(left, &[], neighborhood)
        };
        Ok(addr)
    }
}

/// Renders the canonical, unique text form of an address.
///
/// Two bounds: `"<main> between <a> and <b>, <neighborhood>"`.
/// One bound: `"<main> near <a>, <neighborhood>"`.
/// No bounds: `"<main>, <neighborhood>"`.
pub fn address_to_text(a: &Address) -> String {
    match a.cross_streets.len() {
        2 => format!(
            "{} between {} and {}, {}",
            a.main_street, a.cross_streets[0], a.cross_streets[1], a.neighborhood
        ),
        1 => format!("{} near {}, {}", a.main_street, a.cross_streets[0], a.neighborhood),
        0 => format!("{}, {}", a.main_street, a.neighborhood),
        n => unreachable!("address with {n} cross streets"),
    }
}

/// Whitespace tokenization with commas stripped; used for both address text
/// and captions so the vocabulary is shared.
pub fn tokenize(text: &str) -> Vec<String> {
    text.replace(',', " ")
        .split_whitespace()
        .map(|t| t.to_string())
        .collect()
}

/// Tokens of an address's canonical text form.
pub fn address_tokens(a: &Address) -> Vec<String> {
    tokenize(&address_to_text(a))
}

/// One geo-tagged image: its feature vector, caption tokens, the location it
/// depicts, and (after annotation) that location's address.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image_id: String,
    pub location_id: String,
    pub coord: UtmCoord,
    pub features: Vec<f64>,
    pub caption_tokens: Vec<String>,
    pub address: Option<Address>,
}

/// A collection of samples with a shared feature dimension and vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub vocab: Vec<String>,
    pub city_tag: String,
    pub samples: Vec<Sample>,
}

/// Street centerline: an ordered polyline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Street {
    pub name: String,
    pub polyline: Vec<UtmCoord>,
}

/// Neighborhood region: a simple polygon (vertices listed once, implicitly
/// closed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub name: String,
    pub polygon: Vec<UtmCoord>,
}

/// Street centerlines plus neighborhood polygons for one city.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreetGraph {
    pub streets: Vec<Street>,
    pub neighborhoods: Vec<Neighborhood>,
}

/// Location-level split assignment. `dropped_queries` lists query locations
/// removed because their address never occurs among train locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub database: Vec<String>,
    pub query: Vec<String>,
    pub dropped_queries: Vec<String>,
}

/// Hex SHA-256 of a vocabulary (tokens joined by newlines). Ties checkpoints
/// to the dataset they were trained on.
pub fn vocab_sha256(vocab: &[String]) -> String {
    let mut hasher = Sha256::new();
    for token in vocab {
        hasher.update(token.as_bytes());
        hasher.update(b"\n");
    }
    hex_string(&hasher.finalize())
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Unique location ids in first-appearance order.
pub fn location_ids(ds: &Dataset) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut ids = Vec::new();
    for s in &ds.samples {
        if seen.insert(s.location_id.clone()) {
            ids.push(s.location_id.clone());
        }
    }
    ids
}

/// Coordinate of every location. Errors if two samples of one location
/// disagree about where it is.
pub fn location_coords(ds: &Dataset) -> Result<BTreeMap<String, UtmCoord>> {
    let mut coords: BTreeMap<String, UtmCoord> = BTreeMap::new();
    for s in &ds.samples {
        match coords.get(&s.location_id) {
            None => {
                coords.insert(s.location_id.clone(), s.coord);
            }
            Some(c) if *c == s.coord => {}
            Some(c) => {
                return Err(Error::Invalid(format!(
                    "location {} has inconsistent coordinates ({:?} vs {:?})",
                    s.location_id, c, s.coord
                )))
            }
        }
    }
    Ok(coords)
}

/// Address of every location. Errors if a location is unannotated or its
/// samples disagree.
pub fn location_addresses(ds: &Dataset) -> Result<BTreeMap<String, Address>> {
    let mut addrs: BTreeMap<String, Address> = BTreeMap::new();
    for s in &ds.samples {
        let a = s
            .address
            .as_ref()
            .ok_or_else(|| Error::MissingAddress(s.location_id.clone()))?;
        match addrs.get(&s.location_id) {
            None => {
                addrs.insert(s.location_id.clone(), a.clone());
            }
            Some(existing) if existing == a => {}
            Some(existing) => {
                return Err(Error::Invalid(format!(
                    "location {} has inconsistent addresses ({} vs {})",
                    s.location_id,
                    address_to_text(existing),
                    address_to_text(a)
                )))
            }
        }
    }
    Ok(addrs)
}

/// Splits locations 7:2:1 into train/database/query with a seeded shuffle,
/// then drops query locations whose address has no train occurrence.
///
/// Counts are exact integer floors: `7n/10` train, `2n/10` database, rest
/// query. Requires an annotated dataset.
pub fn split_dataset(ds: &Dataset, seed: u64) -> Result<SplitAssignment> {
    if ds.samples.is_empty() {
        return Err(Error::EmptyInput("dataset has no samples".into()));
    }
    let addrs = location_addresses(ds)?;
    let mut ids: Vec<String> = addrs.keys().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let n = ids.len();
    let n_train = n * 7 / 10;
    let n_db = n * 2 / 10;
    let train: Vec<String> = ids[..n_train].to_vec();
    let database: Vec<String> = ids[n_train..n_train + n_db].to_vec();
    let raw_query = &ids[n_train + n_db..];

    let train_texts: BTreeSet<String> = train
        .iter()
        .map(|id| address_to_text(&addrs[id]))
        .collect();
    let mut query = Vec::new();
    let mut dropped = Vec::new();
    for id in raw_query {
        if train_texts.contains(&address_to_text(&addrs[id])) {
            query.push(id.clone());
        } else {
            dropped.push(id.clone());
        }
    }
    Ok(SplitAssignment {
        train,
        database,
        query,
        dropped_queries: dropped,
    })
}

/// Keeps `ceil(fraction * location_count)` seeded-random locations with all
/// their samples; vocabulary, tag, and feature dimension are untouched.
pub fn subsample(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "subsample fraction must be in (0, 1], got {fraction}"
        )));
    }
    let mut ids: Vec<String> = location_ids(ds);
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let keep_n = ((fraction * ids.len() as f64).ceil() as usize).min(ids.len());
    let keep: BTreeSet<&String> = ids[..keep_n].iter().collect();
    let samples: Vec<Sample> = ds
        .samples
        .iter()
        .filter(|s| keep.contains(&s.location_id))
        .cloned()
        .collect();
    Ok(Dataset {
        feature_dim: ds.feature_dim,
        vocab: ds.vocab.clone(),
        city_tag: ds.city_tag.clone(),
        samples,
    })
}

fn namespace_id(tag: &str, id: &str) -> String {
    if id.contains(':') {
        id.to_string()
    } else {
        format!("{tag}:{id}")
    }
}

fn namespace_neighborhood(tag: &str, name: &str) -> String {
    if name.contains(':') {
        name.to_string()
    } else {
        format!("{name}:{tag}")
    }
}

fn namespace_samples(ds: &Dataset) -> Vec<Sample> {
    ds.samples
        .iter()
        .map(|s| {
            let mut out = s.clone();
            out.image_id = namespace_id(&ds.city_tag, &s.image_id);
            out.location_id = namespace_id(&ds.city_tag, &s.location_id);
            if let Some(a) = &mut out.address {
                a.neighborhood = namespace_neighborhood(&ds.city_tag, &a.neighborhood);
            }
            out
        })
        .collect()
}

/// Merges two datasets of equal feature dimension into one.
///
/// Ids and neighborhood names that are not yet namespaced get the source
/// city tag attached, so merging is associative: the same samples come out
/// regardless of grouping, and re-merging never double-prefixes.
pub fn merge_datasets(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    if a.feature_dim != b.feature_dim {
        return Err(Error::FeatureDimMismatch {
            expected: a.feature_dim,
            got: b.feature_dim,
        });
    }
    let mut samples = namespace_samples(a);
    samples.extend(namespace_samples(b));

    let mut seen_images = BTreeSet::new();
    for s in &samples {
        if !seen_images.insert(s.image_id.clone()) {
            return Err(Error::Invalid(format!(
                "duplicate image id after merge: {}",
                s.image_id
            )));
        }
    }

    let mut vocab = a.vocab.clone();
    let mut present: BTreeSet<String> = vocab.iter().cloned().collect();
    for token in &b.vocab {
        if present.insert(token.clone()) {
            vocab.push(token.clone());
        }
    }
    // Namespaced neighborhoods introduce tokens absent from either source
    // vocabulary; append them in sample order.
    for s in &samples {
        if let Some(addr) = &s.address {
            for token in address_tokens(addr) {
                if present.insert(token.clone()) {
                    vocab.push(token);
                }
            }
        }
    }

    Ok(Dataset {
        feature_dim: a.feature_dim,
        vocab,
        city_tag: format!("{}+{}", a.city_tag, b.city_tag),
        samples,
    })
}

/// Attaches an address to every sample via its location and extends the
/// vocabulary with any unseen address tokens (in sample order).
pub fn apply_annotations(ds: &Dataset, labels: &BTreeMap<String, Address>) -> Result<Dataset> {
    let mut out = ds.clone();
    let mut present: BTreeSet<String> = out.vocab.iter().cloned().collect();
    for s in &mut out.samples {
        let addr = labels
            .get(&s.location_id)
            .ok_or_else(|| Error::MissingAddress(s.location_id.clone()))?;
        for token in address_tokens(addr) {
            if present.insert(token.clone()) {
                out.vocab.push(token);
            }
        }
        s.address = Some(addr.clone());
    }
    Ok(out)
}

/// Restricts a split to locations with a given city prefix (as produced by
/// [`merge_datasets`]), keeping order.
pub fn filter_split_by_city(split: &SplitAssignment, city_tag: &str) -> SplitAssignment {
    let prefix = format!("{city_tag}:");
    let keep = |ids: &[String]| -> Vec<String> {
        ids.iter().filter(|id| id.starts_with(&prefix)).cloned().collect()
    };
    SplitAssignment {
        train: keep(&split.train),
        database: keep(&split.database),
        query: keep(&split.query),
        dropped_queries: keep(&split.dropped_queries),
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    feature_dim: usize,
    vocab: Vec<String>,
    city_tag: String,
}

/// Writes a dataset as JSONL: one header line, then one sample per line.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut out = String::new();
    let header = DatasetHeader {
        feature_dim: ds.feature_dim,
        vocab: ds.vocab.clone(),
        city_tag: ds.city_tag.clone(),
    };
    out.push_str(&serde_json::to_string(&header).expect("header serializes"));
    out.push('\n');
    for s in &ds.samples {
        out.push_str(&serde_json::to_string(s).expect("sample serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a dataset written by [`write_dataset`], validating feature
/// dimensions, finiteness, and address canonical form.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let parse_err = |line: usize, msg: String| Error::Parse {
        file: path.display().to_string(),
        line: line + 1,
        msg,
    };

    let (_, first) = lines
        .next()
        .ok_or_else(|| parse_err(0, "missing header line".into()))?;
    let first = first.map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| parse_err(0, e.to_string()))?;

    let mut samples = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut sample: Sample =
            serde_json::from_str(&line).map_err(|e| parse_err(idx, e.to_string()))?;
        if sample.features.len() != header.feature_dim {
            return Err(Error::FeatureDimMismatch {
                expected: header.feature_dim,
                got: sample.features.len(),
            });
        }
        if !sample.coord.easting.is_finite()
            || !sample.coord.northing.is_finite()
            || sample.features.iter().any(|v| !v.is_finite())
        {
            return Err(parse_err(idx, format!("non-finite value in sample {}", sample.image_id)));
        }
        if let Some(a) = &mut sample.address {
            a.canonicalize();
        }
        samples.push(sample);
    }
    Ok(Dataset {
        feature_dim: header.feature_dim,
        vocab: header.vocab,
        city_tag: header.city_tag,
        samples,
    })
}

/// Writes a street graph as pretty JSON.
pub fn write_graph(path: &Path, graph: &StreetGraph) -> Result<()> {
    let text = serde_json::to_string_pretty(graph).expect("graph serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_graph(path: &Path) -> Result<StreetGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Writes a split assignment as pretty JSON.
pub fn write_split(path: &Path, split: &SplitAssignment) -> Result<()> {
    let text = serde_json::to_string_pretty(split).expect("split serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_split(path: &Path) -> Result<SplitAssignment> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn addr(main: &str, crosses: &[&str], nbhd: &str) -> Address {
        Address::new(main, crosses, nbhd)
    }

    fn tiny_dataset(n_locations: usize, views: usize, annotated: bool) -> Dataset {
        let mut samples = Vec::new();
        for i in 0..n_locations {
            let address = if annotated {
                // Two address classes so query filtering stays non-trivial.
                let nbhd = if i % 2 == 0 { "NE" } else { "SW" };
                Some(addr(&format!("H{:02}", i % 3), &["V01"], nbhd))
            } else {
                None
            };
            for v in 0..views {
                samples.push(Sample {
                    image_id: format!("loc{i}-v{v}"),
                    location_id: format!("loc{i}"),
                    coord: UtmCoord::new(i as f64 * 10.0, 5.0),
                    features: vec![i as f64, v as f64],
                    caption_tokens: vec!["a".into(), "street".into()],
                    address: address.clone(),
                });
            }
        }
        Dataset {
            feature_dim: 2,
            vocab: vec!["a".into(), "street".into()],
            city_tag: "t".into(),
            samples,
        }
    }

    #[test]
    fn address_text_two_bounds() {
        let a = addr("H00", &["V02", "V01"], "NW");
        assert_eq!(address_to_text(&a), "H00 between V01 and V02, NW");
    }

    #[test]
    fn address_text_one_bound() {
        let a = addr("H00", &["V01"], "NW");
        assert_eq!(address_to_text(&a), "H00 near V01, NW");
    }

    #[test]
    fn address_text_no_bounds() {
        let a = addr("H00", &[], "SE");
        assert_eq!(address_to_text(&a), "H00, SE");
    }

    #[test]
    fn cross_street_order_is_canonical() {
        assert_eq!(addr("H", &["B", "A"], "N"), addr("H", &["A", "B"], "N"));
    }

    #[test]
    fn parse_text_roundtrips() {
        for a in [
            addr("H00", &["V01", "V02"], "NW"),
            addr("H00", &["V01"], "NE:cityA"),
            addr("V03", &[], "SW"),
        ] {
            let text = address_to_text(&a);
            assert_eq!(Address::parse_text(&text).unwrap(), a, "text {text:?}");
        }
    }

    #[test]
    fn parse_text_rejects_garbage() {
        assert!(Address::parse_text("no separator here").is_err());
        assert!(Address::parse_text("H00 between V01, NW").is_err());
    }

    #[test]
    fn tokenize_strips_commas() {
        assert_eq!(
            tokenize("H00 between V01 and V02, NW"),
            vec!["H00", "between", "V01", "and", "V02", "NW"]
        );
    }

    #[test]
    fn split_is_seven_two_one_by_floor() {
        let ds = tiny_dataset(10, 2, true);
        let split = split_dataset(&ds, 3).unwrap();
        assert_eq!(split.train.len(), 7);
        assert_eq!(split.database.len(), 2);
        assert_eq!(split.query.len() + split.dropped_queries.len(), 1);
        // Disjoint and complete.
        let mut all: Vec<String> = split
            .train
            .iter()
            .chain(&split.database)
            .chain(&split.query)
            .chain(&split.dropped_queries)
            .cloned()
            .collect();
        all.sort();
        let mut expected = location_ids(&ds);
        expected.sort();
        assert_eq!(all, expected);
    }

    #[test]
    fn split_filters_uncovered_queries() {
        // One location per address class: whichever class lands in query
        // cannot also be in train, so the query must be dropped.
        let mut ds = tiny_dataset(10, 1, true);
        for (i, s) in ds.samples.iter_mut().enumerate() {
            s.address = Some(addr(&format!("U{i:02}"), &[], "NE"));
        }
        let split = split_dataset(&ds, 11).unwrap();
        assert_eq!(split.query.len(), 0);
        assert_eq!(split.dropped_queries.len(), 1);
    }

    #[test]
    fn split_kept_queries_are_train_covered() {
        let ds = tiny_dataset(40, 1, true);
        let split = split_dataset(&ds, 5).unwrap();
        let addrs = location_addresses(&ds).unwrap();
        let train_texts: BTreeSet<String> = split
            .train
            .iter()
            .map(|id| address_to_text(&addrs[id]))
            .collect();
        for q in &split.query {
            assert!(train_texts.contains(&address_to_text(&addrs[q])));
        }
    }

    #[test]
    fn split_requires_annotations() {
        let ds = tiny_dataset(5, 1, false);
        assert!(matches!(split_dataset(&ds, 0), Err(Error::MissingAddress(_))));
    }

    #[test]
    fn split_is_deterministic() {
        let ds = tiny_dataset(20, 2, true);
        assert_eq!(split_dataset(&ds, 9).unwrap(), split_dataset(&ds, 9).unwrap());
    }

    #[test]
    fn subsample_keeps_ceil_fraction_of_locations() {
        let ds = tiny_dataset(10, 3, true);
        let sub = subsample(&ds, 0.25, 7).unwrap();
        let kept = location_ids(&sub);
        assert_eq!(kept.len(), 3); // ceil(2.5)
        // All views of kept locations survive.
        assert_eq!(sub.samples.len(), 9);
        assert_eq!(sub.vocab, ds.vocab);
    }

    #[test]
    fn subsample_rejects_bad_fraction() {
        let ds = tiny_dataset(4, 1, true);
        assert!(subsample(&ds, 0.0, 1).is_err());
        assert!(subsample(&ds, 1.5, 1).is_err());
    }

    #[test]
    fn merge_namespaces_ids_and_neighborhoods() {
        let a = tiny_dataset(2, 1, true);
        let mut b = tiny_dataset(2, 1, true);
        b.city_tag = "u".into();
        let merged = merge_datasets(&a, &b).unwrap();
        assert_eq!(merged.city_tag, "t+u");
        assert_eq!(merged.samples[0].location_id, "t:loc0");
        assert_eq!(merged.samples[2].location_id, "u:loc0");
        let nbhd = &merged.samples[0].address.as_ref().unwrap().neighborhood;
        assert_eq!(nbhd, "NE:t");
        // Every address token made it into the vocabulary.
        let vocab: BTreeSet<&String> = merged.vocab.iter().collect();
        for s in &merged.samples {
            for token in address_tokens(s.address.as_ref().unwrap()) {
                assert!(vocab.contains(&token), "missing token {token}");
            }
        }
    }

    #[test]
    fn merge_rejects_dim_mismatch_and_duplicates() {
        let a = tiny_dataset(2, 1, true);
        let mut b = tiny_dataset(2, 1, true);
        b.feature_dim = 3;
        assert!(matches!(
            merge_datasets(&a, &b),
            Err(Error::FeatureDimMismatch { .. })
        ));
        let c = tiny_dataset(2, 1, true); // same tag as a: ids collide
        assert!(merge_datasets(&a, &c).is_err());
    }

    #[test]
    fn merge_is_associative_on_samples() {
        let mut a = tiny_dataset(2, 1, true);
        let mut b = tiny_dataset(3, 1, true);
        let mut c = tiny_dataset(4, 1, true);
        a.city_tag = "a".into();
        b.city_tag = "b".into();
        c.city_tag = "c".into();
        let left = merge_datasets(&merge_datasets(&a, &b).unwrap(), &c).unwrap();
        let right = merge_datasets(&a, &merge_datasets(&b, &c).unwrap()).unwrap();
        assert_eq!(left.samples, right.samples);
        assert_eq!(left.city_tag, right.city_tag);
        let lv: BTreeSet<&String> = left.vocab.iter().collect();
        let rv: BTreeSet<&String> = right.vocab.iter().collect();
        assert_eq!(lv, rv);
    }

    #[test]
    fn filter_split_by_city_keeps_prefix_only() {
        let split = SplitAssignment {
            train: vec!["a:l0".into(), "b:l0".into()],
            database: vec!["a:l1".into()],
            query: vec!["b:l2".into(), "a:l2".into()],
            dropped_queries: vec![],
        };
        let f = filter_split_by_city(&split, "a");
        assert_eq!(f.train, vec!["a:l0".to_string()]);
        assert_eq!(f.database, vec!["a:l1".to_string()]);
        assert_eq!(f.query, vec!["a:l2".to_string()]);
    }

    #[test]
    fn dataset_roundtrips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let ds = tiny_dataset(3, 2, true);
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn dataset_read_rejects_dim_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let mut ds = tiny_dataset(2, 1, true);
        ds.samples[1].features = vec![1.0, 2.0, 3.0];
        // Bypass write-side invariants by writing lines directly.
        let mut text = String::new();
        text.push_str(r#"{"feature_dim":2,"vocab":[],"city_tag":"t"}"#);
        text.push('\n');
        for s in &ds.samples {
            text.push_str(&serde_json::to_string(s).unwrap());
            text.push('\n');
        }
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            read_dataset(&path),
            Err(Error::FeatureDimMismatch { .. })
        ));
    }

    #[test]
    fn split_roundtrips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        let ds = tiny_dataset(10, 1, true);
        let split = split_dataset(&ds, 2).unwrap();
        write_split(&path, &split).unwrap();
        assert_eq!(read_split(&path).unwrap(), split);
    }

    #[test]
    fn vocab_hash_is_order_sensitive() {
        let a = vocab_sha256(&["x".into(), "y".into()]);
        let b = vocab_sha256(&["y".into(), "x".into()]);
        assert_ne!(a, b);
        assert_eq!(a, vocab_sha256(&["x".into(), "y".into()]));
    }
}
