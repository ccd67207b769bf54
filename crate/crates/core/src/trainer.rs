//! Training loop: seeded batching, Adam with bias correction, cosine
//! learning-rate decay, optional encoder freezing, and a replayable
//! per-epoch loss log.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{
    build_batch, init_params, total_loss, total_loss_and_grads, Batch, EncoderParams, GeoTarget,
    LossToggles, LossWeights, TEMPERATURE_RANGE,
};
use crate::error::{Error, Result};
use crate::geodata::{Dataset, Sample, SplitAssignment};
use crate::seeding::derive_seed;

/// Full training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Cosine schedule endpoints, before `lr_scale` is applied.
    pub lr_start: f64,
    pub lr_end: f64,
    /// Desk-scale knob: multiplies both endpoints. The published schedule
    /// endpoints suit million-sample corpora; small synthetic cities need
    /// proportionally larger steps to converge in minutes.
    pub lr_scale: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub toggles: LossToggles,
    pub geo_target: GeoTarget,
    pub freeze_image: bool,
    pub freeze_text: bool,
    pub embed_dim: usize,
    pub token_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 45,
            batch_size: 32,
            lr_start: 2.4e-5,
            lr_end: 2.4e-8,
            lr_scale: 1000.0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            toggles: LossToggles::default(),
            geo_target: GeoTarget::Raw,
            freeze_image: false,
            freeze_text: false,
            embed_dim: 16,
            token_dim: 16,
            seed: 17,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch_size must be >= 2 (pairwise losses need pairs)".into(),
            ));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(Error::InvalidConfig(
                "learning rates must satisfy lr_start >= lr_end > 0".into(),
            ));
        }
        if !(self.lr_scale > 0.0) {
            return Err(Error::InvalidConfig("lr_scale must be > 0".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig("adam_eps must be > 0".into()));
        }
        if self.embed_dim == 0 || self.token_dim == 0 {
            return Err(Error::InvalidConfig("encoder dimensions must be >= 1".into()));
        }
        if !self.toggles.address && !self.toggles.caption && !self.toggles.geography {
            return Err(Error::InvalidConfig("at least one loss term must be enabled".into()));
        }
        Ok(())
    }
}

/// Cosine decay from `lr_start` to `lr_end`:
/// `lr_end + (lr_start - lr_end) * (1 + cos(pi * step / total_steps)) / 2`.
/// Step 0 yields exactly `lr_start`; the curve decreases monotonically
/// toward `lr_end` at `step == total_steps`. A schedule of zero total
/// steps is rejected rather than defaulted.
pub fn lr_at(step: usize, total_steps: usize, lr_start: f64, lr_end: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidConfig(
            "lr schedule needs total_steps >= 1".into(),
        ));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// First- and second-moment accumulators for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }
}

/// One Adam update with bias correction, in place on a flat parameter
/// vector.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grads[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Seeded epoch batching: shuffles sample indices with a stream keyed by
/// (seed, epoch) and keeps only full batches, so every kept batch has
/// exactly `batch_size` samples and the trailing remainder is dropped.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::InvalidConfig("batch_size must be >= 2".into()));
    }
    if batch_size > n {
        return Err(Error::InvalidConfig(format!(
            "batch_size {batch_size} exceeds sample count {n}"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch-{epoch}")));
    indices.shuffle(&mut rng);
    Ok(indices
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect())
}

/// One line of the training log. Component losses are unweighted epoch
/// means under the end-of-epoch parameters, so any record can be replayed
/// exactly from (dataset, split, config). `epoch` 0 is the pre-training
/// evaluation; `lr` is the rate of the epoch's last update (the initial
/// rate for epoch 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_address: f64,
    pub l_caption: f64,
    pub l_geography: f64,
    pub l_total: f64,
    pub lr: f64,
}

fn epoch_eval(
    p: &EncoderParams,
    batches: &[Batch],
    cfg: &TrainConfig,
    epoch: usize,
    lr: f64,
) -> Result<EpochRecord> {
    let mut rec = EpochRecord {
        epoch,
        l_address: 0.0,
        l_caption: 0.0,
        l_geography: 0.0,
        l_total: 0.0,
        lr,
    };
    for batch in batches {
        let bd = total_loss(p, batch, cfg.weights, cfg.toggles, cfg.geo_target)?;
        rec.l_address += bd.address;
        rec.l_caption += bd.caption;
        rec.l_geography += bd.geography;
        rec.l_total += bd.total;
    }
    let inv = 1.0 / batches.len() as f64;
    rec.l_address *= inv;
    rec.l_caption *= inv;
    rec.l_geography *= inv;
    rec.l_total *= inv;
    Ok(rec)
}

/// Trains encoders on the train-split samples of an annotated dataset.
///
/// Returns the final parameters plus the loss log: one pre-training record
/// (epoch 0, evaluated over the first epoch's batch layout) followed by one
/// record per epoch under that epoch's end-of-epoch parameters. Freezing an
/// encoder masks its gradients; the temperature always trains and is
/// clamped into its valid range after every step.
pub fn train(
    ds: &Dataset,
    split: &SplitAssignment,
    cfg: &TrainConfig,
) -> Result<(EncoderParams, Vec<EpochRecord>)> {
    cfg.validate()?;
    let train_set: std::collections::BTreeSet<&String> = split.train.iter().collect();
    let samples: Vec<&Sample> = ds
        .samples
        .iter()
        .filter(|s| train_set.contains(&s.location_id))
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptyInput("train split selects no samples".into()));
    }

    let mut params = init_params(
        ds.feature_dim,
        cfg.embed_dim,
        cfg.token_dim,
        ds.vocab.clone(),
        derive_seed(cfg.seed, "init"),
    )?;
    let index = params.token_index();

    let n = samples.len();
    let batches_per_epoch = n / cfg.batch_size;
    if batches_per_epoch == 0 {
        return Err(Error::InvalidConfig(format!(
            "batch_size {} exceeds train sample count {n}",
            cfg.batch_size
        )));
    }
    let total_steps = cfg.epochs * batches_per_epoch;
    let lr_start = cfg.lr_start * cfg.lr_scale;
    let lr_end = cfg.lr_end * cfg.lr_scale;

    let materialize = |epoch: usize| -> Result<Vec<Batch>> {
        make_batches(n, cfg.batch_size, cfg.seed, epoch)?
            .iter()
            .map(|idxs| {
                let chosen: Vec<&Sample> = idxs.iter().map(|&i| samples[i]).collect();
                build_batch(&index, &chosen)
            })
            .collect()
    };

    let image_range = params.image_param_range();
    let text_range = params.text_param_range();
    let mut flat = params.flatten();
    let mut adam = AdamState::new(flat.len());
    let (temp_lo, temp_hi) = (TEMPERATURE_RANGE.0.ln(), TEMPERATURE_RANGE.1.ln());

    let mut log = Vec::with_capacity(cfg.epochs + 1);
    log.push(epoch_eval(
        &params,
        &materialize(1)?,
        cfg,
        0,
        lr_at(0, total_steps, lr_start, lr_end)?,
    )?);

    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let batches = materialize(epoch)?;
        let mut last_lr = lr_at(step, total_steps, lr_start, lr_end)?;
        for (batch_idx, batch) in batches.iter().enumerate() {
            let (bd, grads) =
                total_loss_and_grads(&params, batch, cfg.weights, cfg.toggles, cfg.geo_target)?;
            if !bd.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    address: bd.address,
                    caption: bd.caption,
                    geography: bd.geography,
                });
            }
            let mut g = grads.flatten();
            if cfg.freeze_image {
                g[image_range.clone()].fill(0.0);
            }
            if cfg.freeze_text {
                g[text_range.clone()].fill(0.0);
            }
            last_lr = lr_at(step, total_steps, lr_start, lr_end)?;
            adam_step(
                &mut flat,
                &g,
                &mut adam,
                last_lr,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
            );
            let lt = flat.len() - 1;
            flat[lt] = flat[lt].clamp(temp_lo, temp_hi);
            params.assign_from_flat(&flat)?;
            step += 1;
        }
        log.push(epoch_eval(&params, &batches, cfg, epoch, last_lr)?);
    }
    Ok((params, log))
}

/// Writes the loss log as JSONL, one record per line.
pub fn write_train_log(path: &std::path::Path, log: &[EpochRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in log {
        out.push_str(&serde_json::to_string(rec).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::split_dataset;
    use crate::synthcity::{generate_city, oracle_labels, CityConfig};

    #[test]
    fn lr_schedule_hits_its_endpoints_and_midpoint() {
        let (s, e) = (2.4e-5, 2.4e-8);
        assert_eq!(lr_at(0, 100, s, e).unwrap(), s);
        let mid = lr_at(50, 100, s, e).unwrap();
        assert!((mid - (s + e) / 2.0).abs() < 1e-18);
        let end = lr_at(100, 100, s, e).unwrap();
        assert!((end - e).abs() < 1e-18);
    }

    #[test]
    fn lr_schedule_is_strictly_decreasing() {
        let (s, e) = (1e-3, 1e-6);
        let mut prev = lr_at(0, 57, s, e).unwrap();
        for step in 1..=57 {
            let cur = lr_at(step, 57, s, e).unwrap();
            assert!(cur < prev, "step {step}: {cur} !< {prev}");
            prev = cur;
        }
    }

    #[test]
    fn lr_schedule_rejects_zero_total_steps() {
        assert!(matches!(
            lr_at(0, 0, 1e-3, 1e-6),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn adam_matches_hand_stepped_quadratic() {
        // f(w) = w0^2 + 10 w1^2 from (1, 2), lr 0.1, betas (0.9, 0.98).
        let mut w = vec![1.0, 2.0];
        let mut state = AdamState::new(2);
        let expected = [
            [0.9000000005, 1.900000000025],
            [0.8003620050853384, 1.8001419157623266],
            [0.7013970369450757, 1.7005319345031937],
        ];
        for exp in expected {
            let g = vec![2.0 * w[0], 20.0 * w[1]];
            adam_step(&mut w, &g, &mut state, 0.1, 0.9, 0.98, 1e-8);
            assert!((w[0] - exp[0]).abs() < 1e-12, "w0 {} vs {}", w[0], exp[0]);
            assert!((w[1] - exp[1]).abs() < 1e-12, "w1 {} vs {}", w[1], exp[1]);
        }
    }

    #[test]
    fn batches_are_full_sized_and_cover_distinct_indices() {
        let batches = make_batches(100, 32, 5, 1).unwrap();
        assert_eq!(batches.len(), 3); // 4 trailing samples dropped
        let mut seen = std::collections::BTreeSet::new();
        for b in &batches {
            assert_eq!(b.len(), 32);
            for &i in b {
                assert!(i < 100);
                assert!(seen.insert(i), "index {i} repeated");
            }
        }
    }

    #[test]
    fn batch_layout_is_keyed_by_seed_and_epoch() {
        let a = make_batches(50, 8, 5, 1).unwrap();
        let b = make_batches(50, 8, 5, 1).unwrap();
        let c = make_batches(50, 8, 5, 2).unwrap();
        let d = make_batches(50, 8, 6, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn make_batches_validates_sizes() {
        assert!(make_batches(10, 1, 0, 0).is_err());
        assert!(make_batches(10, 11, 0, 0).is_err());
    }

    fn trainable_city() -> (Dataset, crate::geodata::SplitAssignment) {
        let cfg = CityConfig {
            rows: 2,
            cols: 3,
            spacing_m: 100.0,
            locations_per_segment: 4,
            views_per_location: 3,
            feature_dim: 8,
            noise_sigma: 0.05,
            signature_scale: 1.0,
            seed: 13,
            city_tag: "t".into(),
        };
        let (ds, _) = generate_city(&cfg).unwrap();
        let labels = oracle_labels(&cfg).unwrap();
        let ds = crate::geodata::apply_annotations(&ds, &labels).unwrap();
        let split = split_dataset(&ds, 1).unwrap();
        (ds, split)
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            batch_size: 8,
            embed_dim: 8,
            token_dim: 8,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_reduces_the_loss_and_logs_every_epoch() {
        let (ds, split) = trainable_city();
        let cfg = quick_cfg();
        let (_, log) = train(&ds, &split, &cfg).unwrap();
        assert_eq!(log.len(), cfg.epochs + 1);
        assert_eq!(log[0].epoch, 0);
        assert!(log.last().unwrap().l_total < log[0].l_total);
        for rec in &log {
            assert!(rec.l_total.is_finite());
            assert!(rec.lr > 0.0);
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (ds, split) = trainable_city();
        let cfg = quick_cfg();
        let (p1, log1) = train(&ds, &split, &cfg).unwrap();
        let (p2, log2) = train(&ds, &split, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(log1, log2);
        for (a, b) in p1.flatten().iter().zip(p2.flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn freezing_both_encoders_leaves_only_the_temperature_trainable() {
        let (ds, split) = trainable_city();
        let mut cfg = quick_cfg();
        cfg.freeze_image = true;
        cfg.freeze_text = true;
        let (p, _) = train(&ds, &split, &cfg).unwrap();
        let init = init_params(
            ds.feature_dim,
            cfg.embed_dim,
            cfg.token_dim,
            ds.vocab.clone(),
            derive_seed(cfg.seed, "init"),
        )
        .unwrap();
        assert_eq!(p.image_proj, init.image_proj);
        assert_eq!(p.image_bias, init.image_bias);
        assert_eq!(p.token_table, init.token_table);
        assert_eq!(p.text_proj, init.text_proj);
        assert_eq!(p.text_bias, init.text_bias);
        assert_ne!(p.log_temp, init.log_temp);
    }

    #[test]
    fn freezing_the_text_encoder_pins_every_text_parameter() {
        let (ds, split) = trainable_city();
        let mut cfg = quick_cfg();
        cfg.freeze_text = true;
        let (p, _) = train(&ds, &split, &cfg).unwrap();
        let init = init_params(
            ds.feature_dim,
            cfg.embed_dim,
            cfg.token_dim,
            ds.vocab.clone(),
            derive_seed(cfg.seed, "init"),
        )
        .unwrap();
        // Text side is bit-identical to initialization; image side moved.
        assert_eq!(p.token_table, init.token_table);
        assert_eq!(p.text_proj, init.text_proj);
        assert_eq!(p.text_bias, init.text_bias);
        assert_ne!(p.image_proj, init.image_proj);
        assert_ne!(p.image_bias, init.image_bias);
    }

    #[test]
    fn temperature_stays_in_range_during_training() {
        let (ds, split) = trainable_city();
        let mut cfg = quick_cfg();
        cfg.lr_scale = 1e7; // absurd rate to slam the temperature around
        let result = train(&ds, &split, &cfg);
        if let Ok((p, _)) = result {
            let tau = p.temperature();
            assert!((TEMPERATURE_RANGE.0..=TEMPERATURE_RANGE.1).contains(&tau));
            // The raw parameter is also pinned to the range bounds (within
            // one rounding of exp(ln(bound))), not wandering beyond them.
            assert!(p.log_temp >= TEMPERATURE_RANGE.0.ln());
            assert!(p.log_temp <= TEMPERATURE_RANGE.1.ln());
        }
        // A non-finite loss error is also acceptable at this rate; the
        // invariant under test is only that success implies a valid tau.
    }

    #[test]
    fn epoch_records_are_replayable() {
        let (ds, split) = trainable_city();
        let cfg = quick_cfg();
        let (params, log) = train(&ds, &split, &cfg).unwrap();
        // Re-evaluate the final epoch's batches under the final params.
        let train_set: std::collections::BTreeSet<&String> = split.train.iter().collect();
        let samples: Vec<&Sample> = ds
            .samples
            .iter()
            .filter(|s| train_set.contains(&s.location_id))
            .collect();
        let index = params.token_index();
        let batches: Vec<Batch> = make_batches(samples.len(), cfg.batch_size, cfg.seed, cfg.epochs)
            .unwrap()
            .iter()
            .map(|idxs| {
                let chosen: Vec<&Sample> = idxs.iter().map(|&i| samples[i]).collect();
                build_batch(&index, &chosen).unwrap()
            })
            .collect();
        let replayed = epoch_eval(&params, &batches, &cfg, cfg.epochs, log.last().unwrap().lr).unwrap();
        let last = log.last().unwrap();
        assert!((replayed.l_total - last.l_total).abs() < 1e-12);
        assert!((replayed.l_address - last.l_address).abs() < 1e-12);
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let (ds, split) = trainable_city();
        for mutate in [
            |c: &mut TrainConfig| c.epochs = 0,
            |c: &mut TrainConfig| c.batch_size = 1,
            |c: &mut TrainConfig| c.lr_start = -1.0,
            |c: &mut TrainConfig| c.adam_beta1 = 1.0,
            |c: &mut TrainConfig| {
                c.toggles = LossToggles {
                    address: false,
                    caption: false,
                    geography: false,
                }
            },
        ] {
            let mut cfg = quick_cfg();
            mutate(&mut cfg);
            assert!(train(&ds, &split, &cfg).is_err());
        }
    }
}
