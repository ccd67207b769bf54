//! Central finite-difference verification of the analytic gradients.
//!
//! Every scalar parameter is perturbed by ±step; the centered difference of
//! the total loss is compared against the analytic derivative with the
//! relative error |a - n| / max(|a| + |n|, 1e-6). The negative control
//! doubles the largest-magnitude analytic coordinate and must make the
//! check fail, guarding against a checker that trivially passes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::loss::total_loss;
use super::{total_loss_and_grads, Batch, EncoderParams, GeoTarget, LossToggles, LossWeights};

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub n_params: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

fn numeric_gradient(
    p: &EncoderParams,
    batch: &Batch,
    weights: LossWeights,
    toggles: LossToggles,
    geo_target: GeoTarget,
    step: f64,
    index: usize,
    flat: &[f64],
) -> Result<f64> {
    let mut probe = p.clone();
    let mut values = flat.to_vec();
    values[index] = flat[index] + step;
    probe.assign_from_flat(&values)?;
    let plus = total_loss(&probe, batch, weights, toggles, geo_target)?.total;
    values[index] = flat[index] - step;
    probe.assign_from_flat(&values)?;
    let minus = total_loss(&probe, batch, weights, toggles, geo_target)?.total;
    Ok((plus - minus) / (2.0 * step))
}

/// Compares the analytic gradient of every parameter against a centered
/// finite difference of the total loss.
pub fn finite_diff_check(
    p: &EncoderParams,
    batch: &Batch,
    weights: LossWeights,
    toggles: LossToggles,
    geo_target: GeoTarget,
    step: f64,
) -> Result<FdReport> {
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("fd step must be > 0, got {step}")));
    }
    let (_, grads) = total_loss_and_grads(p, batch, weights, toggles, geo_target)?;
    let analytic = grads.flatten();
    let flat = p.flatten();

    let mut report = FdReport {
        n_params: flat.len(),
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for i in 0..flat.len() {
        let numeric = numeric_gradient(p, batch, weights, toggles, geo_target, step, i, &flat)?;
        let err = rel_error(analytic[i], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// Relative-error threshold an analytic gradient must stay under.
pub const FD_MAX_REL: f64 = 1e-4;
/// Error a corrupted gradient must exceed for the control to count.
pub const FD_CONTROL_MIN: f64 = 0.1;

/// One sampled configuration of the randomized gradient sweep, with its
/// finite-difference result and negative-control error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdSuiteEntry {
    pub config_index: usize,
    pub batch_n: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub token_dim: usize,
    pub vocab_size: usize,
    pub geo_target: GeoTarget,
    pub weights: LossWeights,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub negative_control: f64,
    pub pass: bool,
}

/// Runs the finite-difference check over `n_configs` seeded-random
/// configurations: batch size 2–6, feature dim 2–10, embedding dim 2–8,
/// vocabulary 4–20 tokens, random loss weights and geography target, all
/// three loss terms enabled. Each entry passes when the analytic gradient
/// stays under [`FD_MAX_REL`] and the corrupted-gradient control exceeds
/// [`FD_CONTROL_MIN`].
pub fn random_fd_suite(n_configs: usize, seed: u64, step: f64) -> Result<Vec<FdSuiteEntry>> {
    use rand::{Rng, SeedableRng};

    use crate::geodata::{Address, Sample, UtmCoord};
    use crate::seeding::derive_seed;

    if n_configs == 0 {
        return Err(Error::EmptyInput("n_configs must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(n_configs);
    for i in 0..n_configs {
        let mut rng =
            rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("fdcheck-{i}")));
        let batch_n = rng.gen_range(2..=6);
        let feature_dim = rng.gen_range(2..=10);
        let embed_dim = rng.gen_range(2..=8);
        let token_dim = rng.gen_range(2..=8);
        let vocab_size = rng.gen_range(4..=20);
        let vocab: Vec<String> = (0..vocab_size).map(|t| format!("w{t:02}")).collect();
        let geo_target = if rng.gen_bool(0.5) {
            GeoTarget::Raw
        } else {
            GeoTarget::Inverted
        };
        let weights = LossWeights {
            alpha: rng.gen_range(0.1..2.0),
            beta: rng.gen_range(0.1..2.0),
            gamma: rng.gen_range(0.1..2.0),
        };
        let toggles = LossToggles {
            address: true,
            caption: true,
            geography: true,
        };

        let params = super::init_params(
            feature_dim,
            embed_dim,
            token_dim,
            vocab.clone(),
            derive_seed(seed, &format!("fdcheck-params-{i}")),
        )?;
        let samples: Vec<Sample> = (0..batch_n)
            .map(|s| Sample {
                image_id: format!("i{s}"),
                location_id: format!("l{s}"),
                coord: UtmCoord::new(rng.gen_range(0.0..800.0), rng.gen_range(0.0..800.0)),
                features: (0..feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                caption_tokens: (0..rng.gen_range(1..4))
                    .map(|_| vocab[rng.gen_range(0..vocab.len())].clone())
                    .collect(),
                address: Some(Address::new(
                    &vocab[rng.gen_range(0..vocab.len())],
                    &[],
                    &vocab[rng.gen_range(0..vocab.len())],
                )),
            })
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let batch = super::build_batch(&params.token_index(), &refs)?;

        let report = finite_diff_check(&params, &batch, weights, toggles, geo_target, step)?;
        let control =
            finite_diff_negative_control(&params, &batch, weights, toggles, geo_target, step)?;
        out.push(FdSuiteEntry {
            config_index: i,
            batch_n,
            feature_dim,
            embed_dim,
            token_dim,
            vocab_size,
            geo_target,
            weights,
            max_rel_error: report.max_rel_error,
            worst_index: report.worst_index,
            negative_control: control,
            pass: report.max_rel_error < FD_MAX_REL && control >= FD_CONTROL_MIN,
        });
    }
    Ok(out)
}

/// Sanity check on the checker itself: doubles the largest-magnitude
/// analytic gradient coordinate and returns that coordinate's relative
/// error, which must come out large (>= 0.1 for any non-trivial gradient).
pub fn finite_diff_negative_control(
    p: &EncoderParams,
    batch: &Batch,
    weights: LossWeights,
    toggles: LossToggles,
    geo_target: GeoTarget,
    step: f64,
) -> Result<f64> {
    let (_, grads) = total_loss_and_grads(p, batch, weights, toggles, geo_target)?;
    let analytic = grads.flatten();
    let (index, largest) = analytic
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite gradients"))
        .ok_or_else(|| Error::EmptyInput("no parameters".into()))?;
    if *largest == 0.0 {
        return Err(Error::Invalid(
            "gradient is identically zero; negative control is meaningless".into(),
        ));
    }
    let flat = p.flatten();
    let numeric = numeric_gradient(p, batch, weights, toggles, geo_target, step, index, &flat)?;
    Ok(rel_error(2.0 * largest, numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{build_batch, init_params};
    use crate::geodata::{Address, Sample, UtmCoord};

    fn check_batch(p: &EncoderParams, n: usize, seed: u64) -> Batch {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let index = p.token_index();
        let samples: Vec<Sample> = (0..n)
            .map(|i| Sample {
                image_id: format!("i{i}"),
                location_id: format!("l{i}"),
                coord: UtmCoord::new(rng.gen_range(0.0..800.0), rng.gen_range(0.0..800.0)),
                features: (0..p.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                caption_tokens: (0..rng.gen_range(1..4))
                    .map(|_| p.vocab[rng.gen_range(0..p.vocab.len())].clone())
                    .collect(),
                address: Some(Address::new(
                    &p.vocab[rng.gen_range(0..p.vocab.len())],
                    &[],
                    &p.vocab[rng.gen_range(0..p.vocab.len())],
                )),
            })
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        build_batch(&index, &refs).unwrap()
    }

    #[test]
    fn analytic_gradient_survives_the_check() {
        let vocab: Vec<String> = (0..6).map(|i| format!("w{i}")).collect();
        let p = init_params(5, 4, 3, vocab, 31).unwrap();
        let batch = check_batch(&p, 4, 31);
        let report = finite_diff_check(
            &p,
            &batch,
            LossWeights::default(),
            LossToggles::default(),
            GeoTarget::Raw,
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "max rel error {} at {}",
            report.max_rel_error,
            report.worst_index
        );
    }

    #[test]
    fn negative_control_fails_loudly() {
        let vocab: Vec<String> = (0..6).map(|i| format!("w{i}")).collect();
        let p = init_params(5, 4, 3, vocab, 32).unwrap();
        let batch = check_batch(&p, 4, 32);
        let err = finite_diff_negative_control(
            &p,
            &batch,
            LossWeights::default(),
            LossToggles::default(),
            GeoTarget::Raw,
            1e-5,
        )
        .unwrap();
        assert!(err >= 0.1, "control error {err}");
    }

    #[test]
    fn random_suite_is_deterministic_and_passes() {
        let a = random_fd_suite(3, 5, 1e-5).unwrap();
        let b = random_fd_suite(3, 5, 1e-5).unwrap();
        assert_eq!(a, b);
        for entry in &a {
            assert!(entry.pass, "config {} failed: {entry:?}", entry.config_index);
            assert!(entry.max_rel_error < FD_MAX_REL);
            assert!(entry.negative_control >= FD_CONTROL_MIN);
        }
        assert!(random_fd_suite(0, 5, 1e-5).is_err());
    }

    #[test]
    fn linear_probe_is_exact() {
        // A loss that is linear in one parameter: perturb only the image
        // bias through a single fixed embedding direction. The centered
        // difference of a linear function is exact up to rounding, so the
        // relative error must be tiny.
        let f = |x: f64| 3.0 * x + 1.0;
        let h = 1e-5;
        let numeric = (f(2.0 + h) - f(2.0 - h)) / (2.0 * h);
        assert!(rel_error(3.0, numeric) < 1e-9);
    }
}
