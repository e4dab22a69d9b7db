//! Negative-ELBO training objective for uniform-prior diffusion.
//!
//! Both integrands are written in terms of the scaled vectors
//! `xbar = K a onehot(x0) + (1 - a)` and `xbar_theta = K a p + (1 - a)`,
//! where `i` is the observed corrupted category and `m` the clean one.
//! The plain integrand sums a log-ratio over every category; the
//! Rao-Blackwellized one replaces the sum by its closed form in `kappa_t`
//! and is the default for training.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{validate_items, DatasetItem};
use crate::denoiser::Denoiser;
use crate::diffusion::{corrupt, Prior};
use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::rng::Stream;
use crate::schedule::{Schedule, TimeDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Integrand {
    Raw,
    #[default]
    Rb,
}

/// `(1 - a) / (K a + 1 - a)`.
pub fn kappa(alpha_t: f64, k: usize) -> f64 {
    (1.0 - alpha_t) / (k as f64 * alpha_t + 1.0 - alpha_t)
}

/// Positive time weight `-a' / (K a)`.
pub fn prefactor(alpha_t: f64, alpha_prime_t: f64, k: usize) -> f64 {
    -alpha_prime_t / (k as f64 * alpha_t)
}

fn check_args(xt: usize, x0: usize, x0row: &[f64], alpha_t: f64, k: usize) -> Result<()> {
    if x0row.len() != k || xt >= k || x0 >= k {
        return Err(Error::Shape(format!(
            "loss inputs out of range for K={k} (x_t={xt}, x_0={x0}, row len {})",
            x0row.len()
        )));
    }
    if !(alpha_t > 0.0 && alpha_t < 1.0) {
        return Err(Error::Domain(format!("alpha_t={alpha_t} outside (0, 1)")));
    }
    Ok(())
}

#[inline]
fn xbar_theta(x0row: &[f64], alpha_t: f64, k: usize) -> Result<Vec<f64>> {
    let ka = k as f64 * alpha_t;
    let v: Vec<f64> = x0row.iter().map(|&p| ka * p + 1.0 - alpha_t).collect();
    if v.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::Numeric("non-positive predicted ratio vector".into()));
    }
    Ok(v)
}

/// Plain integrand.
///
/// The bracket usually printed for this integrand is the *negative* of a
/// generalized KL divergence between the true ratio vector `xbar / xbar_i`
/// and the predicted one, so it is negated here: the integrand is
/// nonnegative and vanishes exactly when the prediction equals `x0`.
pub fn f_raw(
    xt: usize,
    x0: usize,
    x0row: &[f64],
    alpha_t: f64,
    alpha_prime_t: f64,
    k: usize,
) -> Result<f64> {
    check_args(xt, x0, x0row, alpha_t, k)?;
    let kf = k as f64;
    let xb = |j: usize| if j == x0 { kf * alpha_t } else { 0.0 } + 1.0 - alpha_t;
    let xbt = xbar_theta(x0row, alpha_t, k)?;
    let (xb_i, xbt_i) = (xb(xt), xbt[xt]);
    let log_sum: f64 = (0..k)
        .map(|j| xb(j) / xb_i * ((xbt_i * xb(j)) / (xbt[j] * xb_i)).ln())
        .sum();
    let bracket = kf / xb_i - kf / xbt_i - log_sum;
    Ok(-prefactor(alpha_t, alpha_prime_t, k) * bracket)
}

/// Rao-Blackwellized integrand (same sign convention as [`f_raw`]).
pub fn f_rb(
    xt: usize,
    x0: usize,
    x0row: &[f64],
    alpha_t: f64,
    alpha_prime_t: f64,
    k: usize,
) -> Result<f64> {
    check_args(xt, x0, x0row, alpha_t, k)?;
    let kf = k as f64;
    let kap = kappa(alpha_t, k);
    let same = xt == x0;
    let xb_i = if same { kf * alpha_t } else { 0.0 } + 1.0 - alpha_t;
    let xbt = xbar_theta(x0row, alpha_t, k)?;
    let xbt_i = xbt[xt];
    let log_ratio_sum: f64 = xbt.iter().map(|&v| (xbt_i / v).ln()).sum();
    let mut bracket = kf / xb_i - kf / xbt_i;
    if same {
        bracket -= kap * log_ratio_sum;
        bracket -= (kf - 1.0) * kap * kap.ln();
    } else {
        bracket -= log_ratio_sum;
        bracket -= kf * alpha_t / (1.0 - alpha_t) * (xbt_i / xbt[x0]).ln();
        bracket += kap.ln() / kap;
    }
    Ok(-prefactor(alpha_t, alpha_prime_t, k) * bracket)
}

/// Evaluate the chosen integrand.
pub fn integrand(
    which: Integrand,
    xt: usize,
    x0: usize,
    x0row: &[f64],
    alpha_t: f64,
    alpha_prime_t: f64,
    k: usize,
) -> Result<f64> {
    match which {
        Integrand::Raw => f_raw(xt, x0, x0row, alpha_t, alpha_prime_t, k),
        Integrand::Rb => f_rb(xt, x0, x0row, alpha_t, alpha_prime_t, k),
    }
}

/// Gradient of the integrand with respect to the predicted probabilities
/// `x0row` (treated as unconstrained coordinates); writes into `out`.
pub fn f_grad_probs(
    xt: usize,
    x0: usize,
    x0row: &[f64],
    alpha_t: f64,
    alpha_prime_t: f64,
    k: usize,
    out: &mut [f64],
) -> Result<()> {
    check_args(xt, x0, x0row, alpha_t, k)?;
    let kf = k as f64;
    let ka = kf * alpha_t;
    let xb = |j: usize| if j == x0 { ka } else { 0.0 } + 1.0 - alpha_t;
    let xbt = xbar_theta(x0row, alpha_t, k)?;
    let xb_i = xb(xt);
    let total_q = kf / xb_i;
    let c = prefactor(alpha_t, alpha_prime_t, k);
    for (j, o) in out.iter_mut().enumerate() {
        let mut d = -(xb(j) / xb_i) / xbt[j];
        if j == xt {
            d += -kf / (xbt[xt] * xbt[xt]) + total_q / xbt[xt];
        }
        *o = c * ka * d;
    }
    Ok(())
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NelboEstimate {
    /// Mean per-token value in nats.
    pub mean: f64,
    pub stderr: f64,
    pub n_mc: usize,
}

/// Neumaier-compensated sum; the result is independent of thread count
/// because inputs arrive in a fixed order.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = compensated_sum(values.iter().copied()) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Summed per-token integrand for one corrupted sample, divided by `L`.
pub fn per_token_loss(
    x0: &TokenGrid,
    x_t: &TokenGrid,
    pred: &crate::grid::ProbField,
    alpha_t: f64,
    alpha_prime_t: f64,
    which: Integrand,
) -> Result<f64> {
    let k = x0.k();
    let values: Vec<f64> = (0..x0.len())
        .into_par_iter()
        .with_min_len(crate::diffusion::PAR_CHUNK)
        .map(|i| {
            integrand(
                which,
                x_t.tokens()[i] as usize,
                x0.tokens()[i] as usize,
                pred.row(i),
                alpha_t,
                alpha_prime_t,
                k,
            )
        })
        .collect::<Result<_>>()?;
    Ok(compensated_sum(values) / x0.len() as f64)
}

/// Draw one `(t, x_t)` pair and evaluate the per-token loss.
///
/// With a non-uniform `time_dist` the value is importance-weighted by
/// `1 / pdf(t)` so that it stays an unbiased estimate of the uniform-time
/// objective.
#[allow(clippy::too_many_arguments)]
fn nelbo_draw(
    x0: &TokenGrid,
    cond: Option<u32>,
    denoiser: &dyn Denoiser,
    schedule: &Schedule,
    time_dist: &TimeDistribution,
    which: Integrand,
    stream: &Stream,
) -> Result<f64> {
    let t = if time_dist.is_uniform() {
        stream.uniform(0)
    } else {
        time_dist.sample(&mut stream.child(0).seq())?
    };
    let alpha_t = schedule.alpha(t)?;
    let alpha_prime_t = schedule.alpha_prime(t)?;
    let prior = Prior::uniform(x0.k());
    let x_t = corrupt(x0, &prior, alpha_t, &stream.child(1))?;
    let pred = denoiser.predict(&x_t, t, cond)?;
    let v = per_token_loss(x0, &x_t, &pred, alpha_t, alpha_prime_t, which)?;
    let w = if time_dist.is_uniform() {
        1.0
    } else {
        1.0 / time_dist.pdf(t)
    };
    let v = v * w;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at t={t}")));
    }
    Ok(v)
}

/// Monte Carlo negative ELBO of one clean grid, in nats per token.
#[allow(clippy::too_many_arguments)]
pub fn nelbo(
    x0: &TokenGrid,
    cond: Option<u32>,
    denoiser: &dyn Denoiser,
    schedule: &Schedule,
    time_dist: &TimeDistribution,
    n_mc: usize,
    which: Integrand,
    stream: &Stream,
) -> Result<NelboEstimate> {
    if n_mc == 0 {
        return Err(Error::Config("n_mc must be at least 1".into()));
    }
    time_dist.validate()?;
    let values: Vec<f64> = (0..n_mc)
        .into_par_iter()
        .map(|d| {
            nelbo_draw(
                x0,
                cond,
                denoiser,
                schedule,
                time_dist,
                which,
                &stream.child(d as u64),
            )
        })
        .collect::<Result<_>>()?;
    let (mean, stderr) = mean_and_stderr(&values);
    Ok(NelboEstimate { mean, stderr, n_mc })
}

/// Weighted average of per-item NELBO bounds (uniform time, Rao-Blackwellized
/// integrand). Item draws are keyed by item id, so duplicated ids see the
/// same corruption samples.
pub fn eval_nll(
    items: &[DatasetItem],
    denoiser: &dyn Denoiser,
    schedule: &Schedule,
    n_mc: usize,
    stream: &Stream,
) -> Result<NelboEstimate> {
    validate_items(items)?;
    let estimates: Vec<NelboEstimate> = items
        .par_iter()
        .map(|item| {
            nelbo(
                &item.grid,
                item.class,
                denoiser,
                schedule,
                &TimeDistribution::Uniform,
                n_mc,
                Integrand::Rb,
                &stream.child_str(&item.id),
            )
        })
        .collect::<Result<_>>()?;
    let total_w = compensated_sum(items.iter().map(|i| i.weight));
    let mean = compensated_sum(items.iter().zip(&estimates).map(|(i, e)| i.weight * e.mean)) / total_w;
    let var = compensated_sum(
        items
            .iter()
            .zip(&estimates)
            .map(|(i, e)| (i.weight * e.stderr).powi(2)),
    );
    Ok(NelboEstimate {
        mean,
        stderr: var.sqrt() / total_w,
        n_mc,
    })
}
