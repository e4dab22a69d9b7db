//! Predictive-entropy scores near the clean end of the process.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetItem;
use crate::denoiser::Denoiser;
use crate::diffusion::{corrupt, Prior};
use crate::error::{Error, Result};
use crate::grid::{ProbField, TokenGrid};
use crate::rng::Stream;
use crate::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GammaParams {
    pub t_eval: f64,
    pub rho: f64,
    /// Corruption draws averaged before taking the log.
    pub n_draws: usize,
    pub cond: Option<u32>,
}

impl Default for GammaParams {
    fn default() -> Self {
        GammaParams {
            t_eval: 1e-3,
            rho: 0.4,
            n_draws: 1,
            cond: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UncertaintyReport {
    /// Per-token entropy in nats, averaged over draws.
    pub entropies: Vec<f64>,
    /// Log of the thresholded mean entropy; `-inf` when nothing passes `rho`.
    pub gamma: f64,
    pub t_eval: f64,
    pub rho: f64,
    /// Tokens above `rho` in at least one draw.
    pub n_active: usize,
}

/// Entropy of every row, with `0 ln 0 = 0`.
pub fn token_entropy(field: &ProbField) -> Vec<f64> {
    field
        .rows()
        .map(|row| {
            row.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum::<f64>()
                .max(0.0)
        })
        .collect()
}

/// Mean over all tokens of the entropies exceeding `rho` (others count as zero).
pub fn thresholded_mean(entropies: &[f64], rho: f64) -> f64 {
    entropies.iter().filter(|&&h| h > rho).sum::<f64>() / entropies.len() as f64
}

/// Score one grid: corrupt slightly, predict once per draw, threshold and log.
pub fn gamma_score(
    x0: &TokenGrid,
    denoiser: &dyn Denoiser,
    schedule: &Schedule,
    params: &GammaParams,
    stream: &Stream,
) -> Result<UncertaintyReport> {
    if !(params.t_eval >= 0.0 && params.t_eval <= 1.0) || !(params.rho >= 0.0) {
        return Err(Error::Config("t_eval must be in [0, 1] and rho nonnegative".into()));
    }
    if params.n_draws == 0 {
        return Err(Error::Config("n_draws must be at least 1".into()));
    }
    if x0.shape() != denoiser.shape() || x0.k() != denoiser.classes() {
        return Err(Error::Shape(format!(
            "grid {:?} with K={} does not match denoiser {:?} with K={}",
            x0.shape().dims(),
            x0.k(),
            denoiser.shape().dims(),
            denoiser.classes()
        )));
    }
    let prior = Prior::uniform(x0.k());
    let alpha = schedule.alpha(params.t_eval)?;
    let len = x0.len();
    let mut entropies = vec![0.0; len];
    let mut active = vec![false; len];
    let mut pre_log = 0.0;
    for d in 0..params.n_draws {
        let x_t = corrupt(x0, &prior, alpha, &stream.child(d as u64))?;
        let h = token_entropy(&denoiser.predict(&x_t, params.t_eval, params.cond)?);
        pre_log += thresholded_mean(&h, params.rho);
        for i in 0..len {
            entropies[i] += h[i] / params.n_draws as f64;
            active[i] |= h[i] > params.rho;
        }
    }
    pre_log /= params.n_draws as f64;
    let gamma = if pre_log > 0.0 { pre_log.ln() } else { f64::NEG_INFINITY };
    Ok(UncertaintyReport {
        entropies,
        gamma,
        t_eval: params.t_eval,
        rho: params.rho,
        n_active: active.iter().filter(|&&a| a).count(),
    })
}

/// Score every item (seeded by item id) and sort by descending gamma, ties by id.
pub fn rank_dataset(
    items: &[DatasetItem],
    denoiser: &dyn Denoiser,
    schedule: &Schedule,
    params: &GammaParams,
    stream: &Stream,
) -> Result<Vec<(String, UncertaintyReport)>> {
    if items.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let mut scored: Vec<(String, UncertaintyReport)> = items
        .par_iter()
        .map(|item| {
            gamma_score(&item.grid, denoiser, schedule, params, &stream.child_str(&item.id))
                .map(|r| (item.id.clone(), r))
                .map_err(|e| e.context(&format!("item {}", item.id)))
        })
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.gamma.total_cmp(&a.1.gamma).then_with(|| a.0.cmp(&b.0)));
    Ok(scored)
}
