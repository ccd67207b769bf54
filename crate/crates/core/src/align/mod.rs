//! Image/text alignment model: two small encoders into a shared embedding
//! space, the three-part training objective, analytic gradients, a
//! finite-difference gradient checker, and checkpoint IO.
//!
//! Image encoder: affine projection of the feature vector, then L2
//! normalization. Text encoder: token embedding lookup, mean pooling,
//! affine projection, L2 normalization. One text encoder is shared by the
//! address and caption paths; the caption path consumes the caption tokens
//! followed by the address tokens. Similarity logits are scaled by a
//! learnable temperature stored as `log_temp`.

mod checkpoint;
mod fdcheck;
mod grads;
mod loss;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use fdcheck::{
    finite_diff_check, finite_diff_negative_control, random_fd_suite, FdReport, FdSuiteEntry,
    FD_CONTROL_MIN, FD_MAX_REL,
};
pub use grads::{total_loss_and_grads, Gradients};
pub use loss::{
    contrastive_loss, geography_loss, spatial_distance_matrix, total_loss, LossBreakdown,
};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{Sample, UtmCoord};

/// Temperature at initialization.
pub const INIT_TEMPERATURE: f64 = 0.07;
/// Hard clamp range for the temperature.
pub const TEMPERATURE_RANGE: (f64, f64) = (0.01, 100.0);
/// Norms below this are refused rather than normalized.
pub const NORM_FLOOR: f64 = 1e-12;

/// All learnable parameters of both encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub token_dim: usize,
    pub vocab: Vec<String>,
    /// feature_dim x embed_dim.
    pub image_proj: Vec<Vec<f64>>,
    /// embed_dim.
    pub image_bias: Vec<f64>,
    /// vocab.len() x token_dim.
    pub token_table: Vec<Vec<f64>>,
    /// token_dim x embed_dim.
    pub text_proj: Vec<Vec<f64>>,
    /// embed_dim.
    pub text_bias: Vec<f64>,
    /// Temperature is exp(log_temp); training clamps it into
    /// [`TEMPERATURE_RANGE`] after every step.
    pub log_temp: f64,
}

/// Loss term weights (address, caption, geography).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.2,
            gamma: 0.8,
        }
    }
}

/// Ablation switches for the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossToggles {
    pub address: bool,
    pub caption: bool,
    pub geography: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            address: true,
            caption: true,
            geography: true,
        }
    }
}

/// What the geography term regresses the embedding cosine matrix onto:
/// the raw normalized spatial L1 distance, or `1 - distance/2` so nearby
/// pairs target high cosine similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeoTarget {
    Raw,
    Inverted,
}

impl Default for GeoTarget {
    fn default() -> Self {
        GeoTarget::Raw
    }
}

impl std::str::FromStr for GeoTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(GeoTarget::Raw),
            "inverted" => Ok(GeoTarget::Inverted),
            other => Err(Error::InvalidConfig(format!(
                "geo_target must be 'raw' or 'inverted', got {other:?}"
            ))),
        }
    }
}

/// Token-to-id lookup built once per vocabulary.
pub struct TokenIndex(BTreeMap<String, usize>);

impl TokenIndex {
    pub fn new(vocab: &[String]) -> Self {
        TokenIndex(
            vocab
                .iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), i))
                .collect(),
        )
    }

    pub fn resolve(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.0
                    .get(t)
                    .copied()
                    .ok_or_else(|| Error::OutOfVocabulary(t.clone()))
            })
            .collect()
    }
}

/// One training batch with token ids already resolved. `caption_tokens`
/// holds the caption followed by the address tokens.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Vec<Vec<f64>>,
    pub address_tokens: Vec<Vec<usize>>,
    pub caption_tokens: Vec<Vec<usize>>,
    pub coords: Vec<UtmCoord>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Resolves samples into a batch. Every sample must carry an address.
pub fn build_batch(index: &TokenIndex, samples: &[&Sample]) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("batch has no samples".into()));
    }
    let mut batch = Batch {
        features: Vec::with_capacity(samples.len()),
        address_tokens: Vec::with_capacity(samples.len()),
        caption_tokens: Vec::with_capacity(samples.len()),
        coords: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        let addr = s
            .address
            .as_ref()
            .ok_or_else(|| Error::MissingAddress(s.location_id.clone()))?;
        let addr_ids = index.resolve(&crate::geodata::address_tokens(addr))?;
        let mut cap_ids = index.resolve(&s.caption_tokens)?;
        cap_ids.extend(&addr_ids);
        batch.features.push(s.features.clone());
        batch.address_tokens.push(addr_ids);
        batch.caption_tokens.push(cap_ids);
        batch.coords.push(s.coord);
    }
    Ok(batch)
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    z * std
                })
                .collect()
        })
        .collect()
}

/// Fresh parameters: gaussian projections scaled by 1/sqrt(fan-in), unit
/// gaussian token embeddings, zero biases, temperature 0.07.
pub fn init_params(
    feature_dim: usize,
    embed_dim: usize,
    token_dim: usize,
    vocab: Vec<String>,
    seed: u64,
) -> Result<EncoderParams> {
    if feature_dim == 0 || embed_dim == 0 || token_dim == 0 {
        return Err(Error::InvalidConfig(
            "encoder dimensions must all be >= 1".into(),
        ));
    }
    if vocab.is_empty() {
        return Err(Error::EmptyInput("vocabulary is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image_proj = normal_matrix(&mut rng, feature_dim, embed_dim, 1.0 / (feature_dim as f64).sqrt());
    let token_table = normal_matrix(&mut rng, vocab.len(), token_dim, 1.0);
    let text_proj = normal_matrix(&mut rng, token_dim, embed_dim, 1.0 / (token_dim as f64).sqrt());
    Ok(EncoderParams {
        feature_dim,
        embed_dim,
        token_dim,
        vocab,
        image_proj,
        image_bias: vec![0.0; embed_dim],
        token_table,
        text_proj,
        text_bias: vec![0.0; embed_dim],
        log_temp: INIT_TEMPERATURE.ln(),
    })
}

impl EncoderParams {
    pub fn token_index(&self) -> TokenIndex {
        TokenIndex::new(&self.vocab)
    }

    /// Effective temperature: exp(log_temp), clamped into the valid range.
    pub fn temperature(&self) -> f64 {
        self.log_temp
            .exp()
            .clamp(TEMPERATURE_RANGE.0, TEMPERATURE_RANGE.1)
    }

    /// Image embedding: affine projection then L2 normalization.
    pub fn encode_image(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.feature_dim {
            return Err(Error::FeatureDimMismatch {
                expected: self.feature_dim,
                got: features.len(),
            });
        }
        let (v, _) = self.encode_image_raw(features)?;
        Ok(v)
    }

    /// Image embedding plus pre-normalization norm (needed by backprop).
    pub(crate) fn encode_image_raw(&self, features: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut y = self.image_bias.clone();
        for (f, row) in features.iter().zip(&self.image_proj) {
            for (yk, w) in y.iter_mut().zip(row) {
                *yk += f * w;
            }
        }
        normalized(y)
    }

    /// Text embedding from token strings: lookup, mean pool, affine, L2
    /// normalize.
    pub fn encode_text(&self, tokens: &[String]) -> Result<Vec<f64>> {
        let ids = self.token_index().resolve(tokens)?;
        let (v, _, _) = self.encode_token_ids(&ids)?;
        Ok(v)
    }

    /// Text embedding from resolved ids, plus pre-normalization norm and
    /// the mean-pooled token vector (both needed by backprop).
    pub(crate) fn encode_token_ids(&self, ids: &[usize]) -> Result<(Vec<f64>, f64, Vec<f64>)> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("token list is empty".into()));
        }
        let mut pooled = vec![0.0; self.token_dim];
        for &id in ids {
            let row = self.token_table.get(id).ok_or_else(|| {
                Error::Invalid(format!("token id {id} exceeds vocabulary size"))
            })?;
            for (p, e) in pooled.iter_mut().zip(row) {
                *p += e;
            }
        }
        let inv = 1.0 / ids.len() as f64;
        for p in &mut pooled {
            *p *= inv;
        }
        let mut z = self.text_bias.clone();
        for (m, row) in pooled.iter().zip(&self.text_proj) {
            for (zk, w) in z.iter_mut().zip(row) {
                *zk += m * w;
            }
        }
        let (v, norm) = normalized(z)?;
        Ok((v, norm, pooled))
    }

    /// Number of scalar parameters (including log_temp).
    pub fn param_count(&self) -> usize {
        self.feature_dim * self.embed_dim
            + self.embed_dim
            + self.vocab.len() * self.token_dim
            + self.token_dim * self.embed_dim
            + self.embed_dim
            + 1
    }

    /// Flattens all parameters in a fixed order: image projection
    /// (row-major), image bias, token table (row-major), text projection
    /// (row-major), text bias, log_temp.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for row in &self.image_proj {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&self.image_bias);
        for row in &self.token_table {
            out.extend_from_slice(row);
        }
        for row in &self.text_proj {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&self.text_bias);
        out.push(self.log_temp);
        out
    }

    /// Writes a flat vector (in [`flatten`](Self::flatten) order) back into
    /// the parameter tensors.
    pub fn assign_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Invalid(format!(
                "flat parameter vector has {} values, expected {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut it = flat.iter().copied();
        let mut take = |n: usize, into: &mut [f64]| {
            for slot in into.iter_mut().take(n) {
                *slot = it.next().expect("length checked");
            }
        };
        for row in &mut self.image_proj {
            take(row.len(), row);
        }
        take(self.embed_dim, &mut self.image_bias);
        for row in &mut self.token_table {
            take(row.len(), row);
        }
        for row in &mut self.text_proj {
            take(row.len(), row);
        }
        take(self.embed_dim, &mut self.text_bias);
        self.log_temp = it.next().expect("length checked");
        Ok(())
    }

    /// Index range of image-encoder parameters in the flat layout.
    pub fn image_param_range(&self) -> std::ops::Range<usize> {
        0..self.feature_dim * self.embed_dim + self.embed_dim
    }

    /// Index range of text-encoder parameters in the flat layout.
    pub fn text_param_range(&self) -> std::ops::Range<usize> {
        let start = self.feature_dim * self.embed_dim + self.embed_dim;
        let len = self.vocab.len() * self.token_dim + self.token_dim * self.embed_dim + self.embed_dim;
        start..start + len
    }
}

/// L2-normalizes a vector, returning it with its original norm.
pub(crate) fn normalized(v: Vec<f64>) -> Result<(Vec<f64>, f64)> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < NORM_FLOOR {
        return Err(Error::DegenerateEmbedding);
    }
    let out = v.into_iter().map(|x| x / norm).collect();
    Ok((out, norm))
}

/// Batch forward pass: everything backprop needs.
pub(crate) struct Forward {
    /// Image embeddings (unit rows) and pre-normalization norms.
    pub v: Vec<Vec<f64>>,
    pub v_norm: Vec<f64>,
    /// Address embeddings, norms, pooled token means.
    pub ta: Vec<Vec<f64>>,
    pub ta_norm: Vec<f64>,
    pub ta_pooled: Vec<Vec<f64>>,
    /// Caption embeddings, norms, pooled token means.
    pub tc: Vec<Vec<f64>>,
    pub tc_norm: Vec<f64>,
    pub tc_pooled: Vec<Vec<f64>>,
}

pub(crate) fn forward_batch(p: &EncoderParams, batch: &Batch) -> Result<Forward> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptyInput("batch has no samples".into()));
    }
    if batch.address_tokens.len() != n || batch.caption_tokens.len() != n || batch.coords.len() != n
    {
        return Err(Error::Invalid("batch field lengths disagree".into()));
    }
    let mut fwd = Forward {
        v: Vec::with_capacity(n),
        v_norm: Vec::with_capacity(n),
        ta: Vec::with_capacity(n),
        ta_norm: Vec::with_capacity(n),
        ta_pooled: Vec::with_capacity(n),
        tc: Vec::with_capacity(n),
        tc_norm: Vec::with_capacity(n),
        tc_pooled: Vec::with_capacity(n),
    };
    for i in 0..n {
        if batch.features[i].len() != p.feature_dim {
            return Err(Error::FeatureDimMismatch {
                expected: p.feature_dim,
                got: batch.features[i].len(),
            });
        }
        let (v, vn) = p.encode_image_raw(&batch.features[i])?;
        fwd.v.push(v);
        fwd.v_norm.push(vn);
        let (a, an, am) = p.encode_token_ids(&batch.address_tokens[i])?;
        fwd.ta.push(a);
        fwd.ta_norm.push(an);
        fwd.ta_pooled.push(am);
        let (c, cn, cm) = p.encode_token_ids(&batch.caption_tokens[i])?;
        fwd.tc.push(c);
        fwd.tc_norm.push(cn);
        fwd.tc_pooled.push(cm);
    }
    Ok(fwd)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two_params() -> EncoderParams {
        EncoderParams {
            feature_dim: 2,
            embed_dim: 2,
            token_dim: 2,
            vocab: vec!["a".into(), "b".into()],
            image_proj: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            image_bias: vec![0.0, 0.0],
            token_table: vec![vec![1.0, 0.0], vec![0.0, 2.0]],
            text_proj: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            text_bias: vec![0.0, 0.0],
            log_temp: (0.07f64).ln(),
        }
    }

    #[test]
    fn image_encoding_matches_hand_computation() {
        let p = two_by_two_params();
        let v = p.encode_image(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15);
        assert!((v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn text_encoding_matches_hand_computation() {
        let p = two_by_two_params();
        // mean of [1,0] and [0,2] is [0.5,1]; identity affine; norm sqrt(1.25)
        let v = p.encode_text(&["a".into(), "b".into()]).unwrap();
        let norm = (1.25f64).sqrt();
        assert!((v[0] - 0.5 / norm).abs() < 1e-15);
        assert!((v[1] - 1.0 / norm).abs() < 1e-15);
    }

    #[test]
    fn repeated_tokens_weight_the_mean() {
        let p = two_by_two_params();
        // mean of [a, a, b] = [2/3, 2/3]
        let v = p
            .encode_text(&["a".into(), "a".into(), "b".into()])
            .unwrap();
        let norm = ((2.0f64 / 3.0).powi(2) * 2.0).sqrt();
        assert!((v[0] - (2.0 / 3.0) / norm).abs() < 1e-15);
    }

    #[test]
    fn encoders_reject_bad_input() {
        let p = two_by_two_params();
        assert!(matches!(
            p.encode_image(&[1.0]),
            Err(Error::FeatureDimMismatch { .. })
        ));
        assert!(matches!(
            p.encode_text(&["zebra".into()]),
            Err(Error::OutOfVocabulary(_))
        ));
        assert!(matches!(
            p.encode_text(&[]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn zero_feature_vector_is_degenerate() {
        let p = two_by_two_params();
        assert!(matches!(
            p.encode_image(&[0.0, 0.0]),
            Err(Error::DegenerateEmbedding)
        ));
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let p = init_params(6, 4, 3, vec!["x".into(), "y".into(), "z".into()], 11).unwrap();
        let v = p.encode_image(&[0.3, -1.0, 2.0, 0.1, 0.0, 0.7]).unwrap();
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let t = p.encode_text(&["y".into(), "z".into()]).unwrap();
        let n: f64 = t.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn init_is_seeded_and_temperature_starts_at_default() {
        let vocab = vec!["a".into(), "b".into()];
        let p1 = init_params(3, 2, 2, vocab.clone(), 5).unwrap();
        let p2 = init_params(3, 2, 2, vocab.clone(), 5).unwrap();
        let p3 = init_params(3, 2, 2, vocab, 6).unwrap();
        assert_eq!(p1, p2);
        assert_ne!(p1.image_proj, p3.image_proj);
        assert!((p1.temperature() - INIT_TEMPERATURE).abs() < 1e-15);
    }

    #[test]
    fn flatten_roundtrips() {
        let p = init_params(3, 2, 4, vec!["a".into(), "b".into(), "c".into()], 9).unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.param_count());
        let mut q = p.clone();
        let mut shifted = flat.clone();
        for x in &mut shifted {
            *x += 1.0;
        }
        q.assign_from_flat(&shifted).unwrap();
        assert_ne!(p, q);
        q.assign_from_flat(&flat).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn param_ranges_tile_the_flat_vector() {
        let p = init_params(3, 2, 4, vec!["a".into(), "b".into()], 9).unwrap();
        let img = p.image_param_range();
        let txt = p.text_param_range();
        assert_eq!(img.start, 0);
        assert_eq!(img.end, txt.start);
        assert_eq!(txt.end, p.param_count() - 1); // log_temp is last
    }

    #[test]
    fn temperature_is_clamped() {
        let mut p = two_by_two_params();
        p.log_temp = 10.0; // exp ~ 22026
        assert_eq!(p.temperature(), TEMPERATURE_RANGE.1);
        p.log_temp = -10.0;
        assert_eq!(p.temperature(), TEMPERATURE_RANGE.0);
    }

    #[test]
    fn build_batch_concatenates_caption_and_address() {
        use crate::geodata::{Address, Sample};
        let p = EncoderParams {
            vocab: vec![
                "H00".into(),
                "NW".into(),
                "a".into(),
                "street".into(),
            ],
            ..two_by_two_params()
        };
        let sample = Sample {
            image_id: "i".into(),
            location_id: "l".into(),
            coord: UtmCoord::new(0.0, 0.0),
            features: vec![1.0, 0.0],
            caption_tokens: vec!["a".into(), "street".into()],
            address: Some(Address::new("H00", &[], "NW")),
        };
        let batch = build_batch(&p.token_index(), &[&sample]).unwrap();
        assert_eq!(batch.address_tokens[0], vec![0, 1]);
        assert_eq!(batch.caption_tokens[0], vec![2, 3, 0, 1]);
    }
}
