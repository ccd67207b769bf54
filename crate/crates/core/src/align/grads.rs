//! Analytic gradients of the full objective.
//!
//! Backpropagation path: loss -> embedding gradients (contrastive and
//! geography terms) -> through L2 normalization -> affine projections,
//! pooled token means, and the token table. The L2 step uses
//! d/dy (y/|y|) applied to an upstream gradient g: (g - (g.v) v) / |y|,
//! where v is the normalized output. The temperature gradient is
//! d tau / d log_temp = tau, since the forward pass uses exp(log_temp)
//! directly and clamping happens between steps, not inside the loss.

use crate::error::Result;

use super::loss::{contrastive_parts, geography_parts, spatial_distance_matrix, LossBreakdown};
use super::{forward_batch, Batch, EncoderParams, GeoTarget, LossToggles, LossWeights};

/// Gradient tensors, shaped exactly like [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub image_proj: Vec<Vec<f64>>,
    pub image_bias: Vec<f64>,
    pub token_table: Vec<Vec<f64>>,
    pub text_proj: Vec<Vec<f64>>,
    pub text_bias: Vec<f64>,
    pub log_temp: f64,
}

impl Gradients {
    fn zeros(p: &EncoderParams) -> Self {
        Gradients {
            image_proj: vec![vec![0.0; p.embed_dim]; p.feature_dim],
            image_bias: vec![0.0; p.embed_dim],
            token_table: vec![vec![0.0; p.token_dim]; p.vocab.len()],
            text_proj: vec![vec![0.0; p.embed_dim]; p.token_dim],
            text_bias: vec![0.0; p.embed_dim],
            log_temp: 0.0,
        }
    }

    /// Flattens in the same order as [`EncoderParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
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
}

/// Backprops an embedding gradient through L2 normalization:
/// returns (g - (g.v) v) / norm.
fn through_normalization(g: &[f64], v: &[f64], norm: f64) -> Vec<f64> {
    let gv: f64 = g.iter().zip(v).map(|(a, b)| a * b).sum();
    g.iter()
        .zip(v)
        .map(|(gi, vi)| (gi - gv * vi) / norm)
        .collect()
}

fn add_scaled(acc: &mut [Vec<f64>], src: &[Vec<f64>], scale: f64) {
    for (arow, srow) in acc.iter_mut().zip(src) {
        for (a, s) in arow.iter_mut().zip(srow) {
            *a += scale * s;
        }
    }
}

/// Full objective value and analytic gradients for one batch.
pub fn total_loss_and_grads(
    p: &EncoderParams,
    batch: &Batch,
    weights: LossWeights,
    toggles: LossToggles,
    geo_target: GeoTarget,
) -> Result<(LossBreakdown, Gradients)> {
    let fwd = forward_batch(p, batch)?;
    let n = batch.len();
    let tau = p.temperature();

    let mut breakdown = LossBreakdown {
        address: 0.0,
        caption: 0.0,
        geography: 0.0,
        total: 0.0,
    };
    // Upstream gradients on the unit embeddings.
    let mut d_v = vec![vec![0.0; p.embed_dim]; n];
    let mut d_ta = vec![vec![0.0; p.embed_dim]; n];
    let mut d_tc = vec![vec![0.0; p.embed_dim]; n];
    let mut d_tau = 0.0;

    if toggles.address {
        let (loss, da, db, dt) = contrastive_parts(&fwd.v, &fwd.ta, tau)?;
        breakdown.address = loss;
        add_scaled(&mut d_v, &da, weights.alpha);
        add_scaled(&mut d_ta, &db, weights.alpha);
        d_tau += weights.alpha * dt;
    }
    if toggles.caption {
        let (loss, da, db, dt) = contrastive_parts(&fwd.v, &fwd.tc, tau)?;
        breakdown.caption = loss;
        add_scaled(&mut d_v, &da, weights.beta);
        add_scaled(&mut d_tc, &db, weights.beta);
        d_tau += weights.beta * dt;
    }
    if toggles.geography {
        let du = spatial_distance_matrix(&batch.coords);
        let (loss, dv) = geography_parts(&fwd.v, &du, geo_target)?;
        breakdown.geography = loss;
        add_scaled(&mut d_v, &dv, weights.gamma);
    }
    breakdown.total = weights.alpha * breakdown.address
        + weights.beta * breakdown.caption
        + weights.gamma * breakdown.geography;

    let mut g = Gradients::zeros(p);

    // Image path: dL/dy -> projection and bias.
    for i in 0..n {
        let dy = through_normalization(&d_v[i], &fwd.v[i], fwd.v_norm[i]);
        for (f, grow) in batch.features[i].iter().zip(&mut g.image_proj) {
            for (gk, dyk) in grow.iter_mut().zip(&dy) {
                *gk += f * dyk;
            }
        }
        for (bk, dyk) in g.image_bias.iter_mut().zip(&dy) {
            *bk += dyk;
        }
    }

    // Shared text path, applied to the address and caption passes.
    let text_backward = |d_t: &Vec<Vec<f64>>, emb: &[Vec<f64>], norms: &[f64], pooled: &[Vec<f64>], tokens: &[Vec<usize>], g: &mut Gradients| {
        for i in 0..n {
            let dz = through_normalization(&d_t[i], &emb[i], norms[i]);
            for (m, grow) in pooled[i].iter().zip(&mut g.text_proj) {
                for (gk, dzk) in grow.iter_mut().zip(&dz) {
                    *gk += m * dzk;
                }
            }
            for (ck, dzk) in g.text_bias.iter_mut().zip(&dz) {
                *ck += dzk;
            }
            // dL/d pooled = P dz; each token occurrence receives 1/len of it.
            let mut dm = vec![0.0; p.token_dim];
            for (t, prow) in p.text_proj.iter().enumerate() {
                dm[t] = prow.iter().zip(&dz).map(|(w, d)| w * d).sum();
            }
            let inv_len = 1.0 / tokens[i].len() as f64;
            for &tok in &tokens[i] {
                for (ek, dmk) in g.token_table[tok].iter_mut().zip(&dm) {
                    *ek += inv_len * dmk;
                }
            }
        }
    };
    if toggles.address {
        text_backward(&d_ta, &fwd.ta, &fwd.ta_norm, &fwd.ta_pooled, &batch.address_tokens, &mut g);
    }
    if toggles.caption {
        text_backward(&d_tc, &fwd.tc, &fwd.tc_norm, &fwd.tc_pooled, &batch.caption_tokens, &mut g);
    }

    // Clamped temperature is constant w.r.t. log_temp.
    let raw_tau = p.log_temp.exp();
    g.log_temp = if raw_tau == tau { d_tau * tau } else { 0.0 };

    Ok((breakdown, g))
}
