//! Categorical forward and reverse kernels, factorized over tokens.
//!
//! The forward marginal interpolates each token's one-hot vector with the
//! prior `pi`; the reverse posterior between two times `s < t` is evaluated
//! per token from the observed corrupted token and a distribution over clean
//! categories (a ground-truth one-hot or a model prediction).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{argmax_row, ProbField, TokenGrid};
use crate::rng::{draw_categorical, Stream};

/// Tokens per rayon task; small grids stay on one thread.
pub(crate) const PAR_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    #[default]
    Uniform,
    Mask,
}

/// Limiting distribution of the forward process.
///
/// The mask prior appends one reserved category with index `classes`, so the
/// corrupted state space has `classes + 1` states while clean categories keep
/// their indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prior {
    kind: PriorKind,
    classes: usize,
}

impl Prior {
    pub fn new(kind: PriorKind, classes: usize) -> Result<Self> {
        let max = if kind == PriorKind::Mask { 255 } else { 256 };
        if classes < 2 || classes > max {
            return Err(Error::Config(format!(
                "prior needs 2..={max} clean categories, got {classes}"
            )));
        }
        Ok(Prior { kind, classes })
    }

    pub fn uniform(classes: usize) -> Self {
        Self::new(PriorKind::Uniform, classes).expect("valid class count")
    }

    pub fn mask(classes: usize) -> Self {
        Self::new(PriorKind::Mask, classes).expect("valid class count")
    }

    pub fn kind(&self) -> PriorKind {
        self.kind
    }

    /// Number of clean data categories `K`.
    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Size of the corrupted state space.
    pub fn states(&self) -> usize {
        match self.kind {
            PriorKind::Uniform => self.classes,
            PriorKind::Mask => self.classes + 1,
        }
    }

    pub fn mask_token(&self) -> Option<u8> {
        (self.kind == PriorKind::Mask).then_some(self.classes as u8)
    }

    pub fn pi(&self) -> Vec<f64> {
        (0..self.states()).map(|j| self.pi_at(j)).collect()
    }

    #[inline]
    pub fn pi_at(&self, j: usize) -> f64 {
        match self.kind {
            PriorKind::Uniform => 1.0 / self.classes as f64,
            PriorKind::Mask => {
                if j == self.classes {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Draw a grid of i.i.d. prior tokens.
    pub fn sample_grid(&self, shape: &crate::grid::GridShape, stream: &Stream) -> TokenGrid {
        let pi = self.pi();
        let tokens: Vec<u8> = (0..shape.len())
            .into_par_iter()
            .with_min_len(PAR_CHUNK)
            .map(|i| draw_categorical(&pi, stream.uniform(i as u64)) as u8)
            .collect();
        TokenGrid::from_parts_unchecked(shape.clone(), self.states(), tokens)
    }
}

fn check_alpha(name: &str, alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name}={alpha} outside (0, 1]")))
    }
}

fn check_clean(x0: &TokenGrid, prior: &Prior) -> Result<()> {
    if x0.k() != prior.classes() {
        return Err(Error::Shape(format!(
            "grid has K={} but prior expects {} clean categories",
            x0.k(),
            prior.classes()
        )));
    }
    Ok(())
}

/// Write `alpha * onehot(x0) + (1 - alpha) * pi` into `out`.
#[inline]
pub fn forward_row(x0: usize, prior: &Prior, alpha: f64, out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = (1.0 - alpha) * prior.pi_at(j);
    }
    out[x0] += alpha;
}

/// Per-token distribution of the corrupted token at retention `alpha_t`.
pub fn forward_marginal(x0: &TokenGrid, prior: &Prior, alpha_t: f64) -> Result<ProbField> {
    check_clean(x0, prior)?;
    check_alpha("alpha_t", alpha_t)?;
    let s = prior.states();
    let mut probs = vec![0.0; x0.len() * s];
    for (row, &tok) in probs.chunks_exact_mut(s).zip(x0.tokens()) {
        forward_row(tok as usize, prior, alpha_t, row);
    }
    ProbField::new(x0.shape().clone(), s, probs)
}

#[inline]
fn corrupt_token(x0: u8, prior: &Prior, alpha: f64, u: f64) -> u8 {
    // keep with probability alpha, otherwise resample from the prior
    if u < alpha {
        return x0;
    }
    let v = (u - alpha) / (1.0 - alpha);
    match prior.kind() {
        PriorKind::Mask => prior.classes() as u8,
        PriorKind::Uniform => ((v * prior.classes() as f64) as usize).min(prior.classes() - 1) as u8,
    }
}

/// Sample a corrupted grid; token `i` uses counter `i` of `stream`.
pub fn corrupt(x0: &TokenGrid, prior: &Prior, alpha_t: f64, stream: &Stream) -> Result<TokenGrid> {
    corrupt_where(x0, prior, alpha_t, stream, |_| true)
}

/// Corrupt only tokens selected by `inside`; others are copied from `x0`.
///
/// Selected tokens consume exactly the same random numbers as in [`corrupt`].
pub fn corrupt_where<F>(
    x0: &TokenGrid,
    prior: &Prior,
    alpha_t: f64,
    stream: &Stream,
    inside: F,
) -> Result<TokenGrid>
where
    F: Fn(usize) -> bool + Sync,
{
    check_clean(x0, prior)?;
    check_alpha("alpha_t", alpha_t)?;
    let tokens: Vec<u8> = x0
        .tokens()
        .par_iter()
        .with_min_len(PAR_CHUNK)
        .enumerate()
        .map(|(i, &t)| {
            if inside(i) {
                corrupt_token(t, prior, alpha_t, stream.uniform(i as u64))
            } else {
                t
            }
        })
        .collect();
    Ok(TokenGrid::from_parts_unchecked(
        x0.shape().clone(),
        prior.states(),
        tokens,
    ))
}

fn check_pair(alpha_t: f64, alpha_s: f64) -> Result<()> {
    check_alpha("alpha_t", alpha_t)?;
    check_alpha("alpha_s", alpha_s)?;
    if alpha_t > alpha_s {
        return Err(Error::Domain(format!(
            "reverse step needs alpha_t <= alpha_s (got {alpha_t} > {alpha_s})"
        )));
    }
    Ok(())
}

/// Reverse posterior row for one token.
///
/// `x0row` may omit trailing categories (e.g. the mask state), which are then
/// treated as zero. The row is renormalized after evaluation.
#[inline]
pub fn posterior_row(
    xt: usize,
    x0row: &[f64],
    prior: &Prior,
    alpha_t: f64,
    alpha_s: f64,
    out: &mut [f64],
) -> Result<()> {
    let ratio = alpha_t / alpha_s;
    let pi_xt = prior.pi_at(xt);
    let p0 = |j: usize| x0row.get(j).copied().unwrap_or(0.0);
    let denom = alpha_t * p0(xt) + (1.0 - alpha_t) * pi_xt;
    if !(denom >= 1e-300) {
        return Err(Error::Numeric(format!(
            "posterior denominator {denom:e} vanished for token state {xt}"
        )));
    }
    let mut total = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        let transition = if j == xt { ratio } else { 0.0 } + (1.0 - ratio) * pi_xt;
        let marginal = alpha_s * p0(j) + (1.0 - alpha_s) * prior.pi_at(j);
        *o = transition * marginal;
        total += *o;
    }
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Numeric(format!("posterior row mass {total:e}")));
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}

fn check_posterior_inputs(x_t: &TokenGrid, x0_probs: &ProbField, prior: &Prior) -> Result<()> {
    if x_t.k() != prior.states() {
        return Err(Error::Shape(format!(
            "corrupted grid has K={} but prior has {} states",
            x_t.k(),
            prior.states()
        )));
    }
    if x0_probs.k() != prior.classes() && x0_probs.k() != prior.states() {
        return Err(Error::Shape(format!(
            "prediction has {} columns, expected {} or {}",
            x0_probs.k(),
            prior.classes(),
            prior.states()
        )));
    }
    if x0_probs.shape() != x_t.shape() {
        return Err(Error::Shape("prediction and grid shapes differ".into()));
    }
    Ok(())
}

/// Per-token reverse posterior `q(x_s | x_t, x_0)` with `x_0` replaced by `x0_probs`.
pub fn posterior(
    x_t: &TokenGrid,
    x0_probs: &ProbField,
    prior: &Prior,
    alpha_t: f64,
    alpha_s: f64,
) -> Result<ProbField> {
    check_posterior_inputs(x_t, x0_probs, prior)?;
    check_pair(alpha_t, alpha_s)?;
    let s = prior.states();
    let mut probs = vec![0.0; x_t.len() * s];
    probs
        .par_chunks_exact_mut(s)
        .with_min_len(PAR_CHUNK)
        .enumerate()
        .try_for_each(|(i, out)| {
            posterior_row(
                x_t.tokens()[i] as usize,
                x0_probs.row(i),
                prior,
                alpha_t,
                alpha_s,
                out,
            )
        })?;
    ProbField::new(x_t.shape().clone(), s, probs)
}

/// One ancestral step: draw every token from its posterior row.
///
/// Token `i` uses counter `i` of `stream`; callers derive one stream per step.
pub fn ancestral_step(
    x_t: &TokenGrid,
    x0_probs: &ProbField,
    prior: &Prior,
    alpha_t: f64,
    alpha_s: f64,
    stream: &Stream,
) -> Result<TokenGrid> {
    check_posterior_inputs(x_t, x0_probs, prior)?;
    check_pair(alpha_t, alpha_s)?;
    let s = prior.states();
    let tokens: Vec<u8> = (0..x_t.len())
        .into_par_iter()
        .with_min_len(PAR_CHUNK)
        .map_init(
            || vec![0.0; s],
            |row, i| {
                posterior_row(
                    x_t.tokens()[i] as usize,
                    x0_probs.row(i),
                    prior,
                    alpha_t,
                    alpha_s,
                    row,
                )?;
                Ok(draw_categorical(row, stream.uniform(i as u64)) as u8)
            },
        )
        .collect::<Result<_>>()?;
    Ok(TokenGrid::from_parts_unchecked(x_t.shape().clone(), s, tokens))
}

/// Deterministic final step: argmax of every posterior row (lowest index on ties).
pub fn argmax_step(
    x_t: &TokenGrid,
    x0_probs: &ProbField,
    prior: &Prior,
    alpha_t: f64,
    alpha_s: f64,
) -> Result<TokenGrid> {
    let post = posterior(x_t, x0_probs, prior, alpha_t, alpha_s)?;
    let tokens = post.rows().map(|r| argmax_row(r) as u8).collect();
    Ok(TokenGrid::from_parts_unchecked(
        x_t.shape().clone(),
        prior.states(),
        tokens,
    ))
}
