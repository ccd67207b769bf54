//! Training objective: symmetric contrastive terms over image/address and
//! image/caption pairs, plus a geography matching term that regresses the
//! pairwise embedding cosine matrix onto normalized spatial distances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::UtmCoord;

use super::{forward_batch, Batch, EncoderParams, GeoTarget, LossToggles, LossWeights};

/// Per-term loss values. `address`/`caption`/`geography` are unweighted;
/// `total` applies the term weights (disabled terms contribute zero).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub address: f64,
    pub caption: f64,
    pub geography: f64,
    pub total: f64,
}

fn check_pairs(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::EmptyInput("contrastive batch is empty".into()));
    }
    if a.len() != b.len() {
        return Err(Error::Invalid(format!(
            "contrastive sides have {} vs {} rows",
            a.len(),
            b.len()
        )));
    }
    let dim = a[0].len();
    if a.iter().chain(b.iter()).any(|row| row.len() != dim) {
        return Err(Error::Invalid("embedding rows have mixed dimensions".into()));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// logsumexp with max subtraction.
fn lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE between paired embedding rows: the mean of the
/// row-wise and column-wise cross entropies of the similarity logits
/// `a_i . b_j / tau`, averaged over both directions.
///
/// Symmetric in its two sides: `contrastive_loss(a, b, tau) ==
/// contrastive_loss(b, a, tau)`. A single pair yields exactly zero.
pub fn contrastive_loss(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> Result<f64> {
    Ok(contrastive_parts(a, b, tau)?.0)
}

/// Loss plus gradients w.r.t. both embedding sides and tau.
pub(crate) fn contrastive_parts(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    tau: f64,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>, f64)> {
    check_pairs(a, b)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("temperature must be > 0, got {tau}")));
    }
    let n = a.len();
    let dim = a[0].len();
    let s: Vec<Vec<f64>> = a
        .iter()
        .map(|ai| b.iter().map(|bj| dot(ai, bj) / tau).collect())
        .collect();

    let mut loss = 0.0;
    for i in 0..n {
        let row_lse = lse(s[i].iter().copied());
        let col_lse = lse((0..n).map(|k| s[k][i]));
        loss += (row_lse - s[i][i]) + (col_lse - s[i][i]);
    }
    loss /= 2.0 * n as f64;

    // dL/dS = (row_softmax + col_softmax - 2I) / 2N.
    let mut ds = vec![vec![0.0; n]; n];
    for i in 0..n {
        let row_lse = lse(s[i].iter().copied());
        for j in 0..n {
            ds[i][j] += (s[i][j] - row_lse).exp();
        }
    }
    for j in 0..n {
        let col_lse = lse((0..n).map(|k| s[k][j]));
        for i in 0..n {
            ds[i][j] += (s[i][j] - col_lse).exp();
        }
    }
    let scale = 1.0 / (2.0 * n as f64);
    for i in 0..n {
        for j in 0..n {
            ds[i][j] -= if i == j { 2.0 } else { 0.0 };
            ds[i][j] *= scale;
        }
    }

    // S = M/tau: dL/dM = dS/tau, dL/dtau = -sum dS * M / tau^2
    //                                    = -sum dS * S / tau.
    let mut da = vec![vec![0.0; dim]; n];
    let mut db = vec![vec![0.0; dim]; n];
    let mut dtau = 0.0;
    for i in 0..n {
        for j in 0..n {
            let g = ds[i][j] / tau;
            for k in 0..dim {
                da[i][k] += g * b[j][k];
                db[j][k] += g * a[i][k];
            }
            dtau -= ds[i][j] * s[i][j] / tau;
        }
    }
    Ok((loss, da, db, dtau))
}

/// Pairwise L1 distance matrix of per-axis min-max normalized coordinates.
/// Values lie in [0, 2]; a degenerate axis (max == min) contributes zero.
/// Invariant under translation and uniform positive scaling.
pub fn spatial_distance_matrix(coords: &[UtmCoord]) -> Vec<Vec<f64>> {
    let n = coords.len();
    let mut normed = vec![(0.0, 0.0); n];
    if n > 0 {
        let (mut e_lo, mut e_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut n_lo, mut n_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for c in coords {
            e_lo = e_lo.min(c.easting);
            e_hi = e_hi.max(c.easting);
            n_lo = n_lo.min(c.northing);
            n_hi = n_hi.max(c.northing);
        }
        for (i, c) in coords.iter().enumerate() {
            let e = if e_hi > e_lo { (c.easting - e_lo) / (e_hi - e_lo) } else { 0.0 };
            let nn = if n_hi > n_lo { (c.northing - n_lo) / (n_hi - n_lo) } else { 0.0 };
            normed[i] = (e, nn);
        }
    }
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            out[i][j] = (normed[i].0 - normed[j].0).abs() + (normed[i].1 - normed[j].1).abs();
        }
    }
    out
}

fn geo_target_value(du: f64, mode: GeoTarget) -> f64 {
    match mode {
        GeoTarget::Raw => du,
        GeoTarget::Inverted => 1.0 - du / 2.0,
    }
}

/// Mean squared difference between the embedding cosine matrix `V V^T`
/// (unit rows assumed) and the geography target derived from `du`,
/// averaged over all N^2 entries.
pub fn geography_loss(v: &[Vec<f64>], du: &[Vec<f64>], mode: GeoTarget) -> Result<f64> {
    Ok(geography_parts(v, du, mode)?.0)
}

/// Loss plus gradient w.r.t. the embeddings. Diagonal entries of the
/// cosine matrix are constant (unit rows), so they affect the value but
/// never the gradient.
pub(crate) fn geography_parts(
    v: &[Vec<f64>],
    du: &[Vec<f64>],
    mode: GeoTarget,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = v.len();
    if n == 0 {
        return Err(Error::EmptyInput("geography batch is empty".into()));
    }
    if du.len() != n || du.iter().any(|row| row.len() != n) {
        return Err(Error::Invalid(format!(
            "distance matrix shape does not match {n} embeddings"
        )));
    }
    let dim = v[0].len();
    if v.iter().any(|row| row.len() != dim) {
        return Err(Error::Invalid("embedding rows have mixed dimensions".into()));
    }

    let mut loss = 0.0;
    let mut resid = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let dv = dot(&v[i], &v[j]);
            let f = dv - geo_target_value(du[i][j], mode);
            resid[i][j] = f;
            loss += f * f;
        }
    }
    let n2 = (n * n) as f64;
    loss /= n2;

    // dL/dv_k = (4/N^2) sum_{j != k} resid[k][j] * v_j, using the symmetry
    // of both the cosine matrix and the target.
    let mut dv = vec![vec![0.0; dim]; n];
    let scale = 4.0 / n2;
    for k in 0..n {
        for j in 0..n {
            if j == k {
                continue;
            }
            let g = scale * resid[k][j];
            for d in 0..dim {
                dv[k][d] += g * v[j][d];
            }
        }
    }
    Ok((loss, dv))
}

/// Full objective on one batch: weighted sum of the enabled terms.
pub fn total_loss(
    p: &EncoderParams,
    batch: &Batch,
    weights: LossWeights,
    toggles: LossToggles,
    geo_target: GeoTarget,
) -> Result<LossBreakdown> {
    let fwd = forward_batch(p, batch)?;
    let tau = p.temperature();
    let mut breakdown = LossBreakdown {
        address: 0.0,
        caption: 0.0,
        geography: 0.0,
        total: 0.0,
    };
    if toggles.address {
        breakdown.address = contrastive_loss(&fwd.v, &fwd.ta, tau)?;
    }
    if toggles.caption {
        breakdown.caption = contrastive_loss(&fwd.v, &fwd.tc, tau)?;
    }
    if toggles.geography {
        let du = spatial_distance_matrix(&batch.coords);
        breakdown.geography = geography_loss(&fwd.v, &du, geo_target)?;
    }
    breakdown.total = weights.alpha * breakdown.address
        + weights.beta * breakdown.caption
        + weights.gamma * breakdown.geography;
    Ok(breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rows: &[[f64; 2]]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                let n = (r[0] * r[0] + r[1] * r[1]).sqrt();
                vec![r[0] / n, r[1] / n]
            })
            .collect()
    }

    #[test]
    fn identity_similarity_matches_hand_value() {
        let a = unit_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let loss = contrastive_loss(&a, &a, 1.0).unwrap();
        // -log(e / (e + 1)) per direction and row.
        assert!((loss - 0.31326168751822286).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn uniform_similarity_gives_log_n() {
        let a = unit_rows(&[[1.0, 0.0], [1.0, 0.0]]);
        let loss = contrastive_loss(&a, &a, 1.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let a = unit_rows(&[[0.6, 0.8]]);
        let b = unit_rows(&[[1.0, 0.0]]);
        assert_eq!(contrastive_loss(&a, &b, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn contrastive_is_symmetric_in_its_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(2..6);
            let make = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..n)
                    .map(|_| {
                        let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
                        raw.iter().map(|x| x / norm).collect()
                    })
                    .collect()
            };
            let a = make(&mut rng);
            let b = make(&mut rng);
            let tau = rng.gen_range(0.05..2.0);
            let lab = contrastive_loss(&a, &b, tau).unwrap();
            let lba = contrastive_loss(&b, &a, tau).unwrap();
            assert!((lab - lba).abs() < 1e-12);
        }
    }

    #[test]
    fn contrastive_validates_input() {
        let a = unit_rows(&[[1.0, 0.0]]);
        let b = unit_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!(contrastive_loss(&a, &b, 1.0).is_err());
        assert!(contrastive_loss(&a, &a, 0.0).is_err());
        assert!(contrastive_loss(&[], &[], 1.0).is_err());
    }

    #[test]
    fn sharper_temperature_lowers_separable_loss() {
        let a = unit_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let sharp = contrastive_loss(&a, &a, 0.07).unwrap();
        let soft = contrastive_loss(&a, &a, 1.0).unwrap();
        assert!(sharp < soft);
    }

    #[test]
    fn spatial_matrix_matches_hand_example() {
        let coords = vec![
            UtmCoord::new(0.0, 0.0),
            UtmCoord::new(2.0, 0.0),
            UtmCoord::new(4.0, 0.0),
        ];
        let du = spatial_distance_matrix(&coords);
        let expected = [
            [0.0, 0.5, 1.0],
            [0.5, 0.0, 0.5],
            [1.0, 0.5, 0.0],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert!((du[i][j] - expected[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn spatial_matrix_is_translation_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let n = rng.gen_range(2..7);
            let coords: Vec<UtmCoord> = (0..n)
                .map(|_| UtmCoord::new(rng.gen_range(0.0..500.0), rng.gen_range(0.0..500.0)))
                .collect();
            let shift = (rng.gen_range(-1e4..1e4), rng.gen_range(-1e4..1e4));
            let scale = rng.gen_range(0.1..50.0);
            let moved: Vec<UtmCoord> = coords
                .iter()
                .map(|c| UtmCoord::new(c.easting * scale + shift.0, c.northing * scale + shift.1))
                .collect();
            let a = spatial_distance_matrix(&coords);
            let b = spatial_distance_matrix(&moved);
            for i in 0..n {
                for j in 0..n {
                    assert!((a[i][j] - b[i][j]).abs() < 1e-9, "entry {i},{j}");
                }
            }
        }
    }

    #[test]
    fn spatial_matrix_is_bounded_and_symmetric() {
        let coords = vec![
            UtmCoord::new(3.0, 9.0),
            UtmCoord::new(-2.0, 4.0),
            UtmCoord::new(10.0, 4.0),
            UtmCoord::new(3.0, -1.0),
        ];
        let du = spatial_distance_matrix(&coords);
        for i in 0..4 {
            assert_eq!(du[i][i], 0.0);
            for j in 0..4 {
                assert!(du[i][j] >= 0.0 && du[i][j] <= 2.0);
                assert_eq!(du[i][j], du[j][i]);
            }
        }
    }

    #[test]
    fn degenerate_axis_contributes_zero() {
        // All northings equal: only the easting axis separates points.
        let coords = vec![UtmCoord::new(0.0, 7.0), UtmCoord::new(4.0, 7.0)];
        let du = spatial_distance_matrix(&coords);
        assert_eq!(du[0][1], 1.0);
    }

    #[test]
    fn geography_matches_hand_example() {
        // Orthogonal unit embeddings, all spatial distances zero: cosine
        // matrix is I, target is 0, mean squared residual is 2/4.
        let v = unit_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let du = vec![vec![0.0; 2]; 2];
        let loss = geography_loss(&v, &du, GeoTarget::Raw).unwrap();
        assert!((loss - 0.5).abs() < 1e-15);
    }

    #[test]
    fn geography_modes_differ_on_nonzero_distances() {
        let v = unit_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let du = vec![vec![0.0, 2.0], vec![2.0, 0.0]];
        // Raw: residuals [[1,-2],[-2,1]] -> 10/4.
        let raw = geography_loss(&v, &du, GeoTarget::Raw).unwrap();
        assert!((raw - 2.5).abs() < 1e-15);
        // Inverted: target [[1,0],[0,1]] equals the cosine matrix.
        let inv = geography_loss(&v, &du, GeoTarget::Inverted).unwrap();
        assert!(inv.abs() < 1e-15);
    }

    #[test]
    fn geography_validates_shapes() {
        let v = unit_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let du = vec![vec![0.0; 3]; 3];
        assert!(geography_loss(&v, &du, GeoTarget::Raw).is_err());
    }
}
