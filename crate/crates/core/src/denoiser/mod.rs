//! Predictive-posterior backends and their post-processing.

mod mlp;
mod oracle;
pub mod train;

pub use mlp::{MlpArch, MlpDenoiser, MlpGrad, TrainSample};
pub use oracle::{OracleDenoiser, OracleMode};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridShape, ProbField, TokenGrid};

/// Default truncation bound for [`process_logits`].
pub const DEFAULT_TAU: f64 = 5.0;

/// Logs below this are clamped before guidance arithmetic.
const LOG_FLOOR: f64 = -690.0;

/// Maps a corrupted grid, a time and an optional class label to per-token
/// distributions over the clean categories.
pub trait Denoiser: Sync {
    fn shape(&self) -> &GridShape;

    /// Number of clean categories `K` (columns of the prediction).
    fn classes(&self) -> usize;

    /// Number of condition labels accepted; zero for unconditional models.
    fn n_conditions(&self) -> usize;

    /// When false, the time argument is ignored.
    fn time_conditioned(&self) -> bool;

    fn predict(&self, x_t: &TokenGrid, t: f64, cond: Option<u32>) -> Result<ProbField>;

    /// Natural-log prediction, floored at a large negative value.
    fn predict_log(&self, x_t: &TokenGrid, t: f64, cond: Option<u32>) -> Result<ProbField> {
        let p = self.predict(x_t, t, cond)?;
        let shape = p.shape().clone();
        let k = p.k();
        let logs = p
            .into_vec()
            .into_iter()
            .map(|v| if v > 0.0 { v.ln().max(LOG_FLOOR) } else { LOG_FLOOR })
            .collect();
        ProbField::new(shape, k, logs)
    }
}

pub(crate) fn check_condition(cond: Option<u32>, n_conditions: usize) -> Result<()> {
    match cond {
        Some(c) if c as usize >= n_conditions => Err(Error::Config(format!(
            "condition {c} is not below the model's {n_conditions} classes"
        ))),
        _ => Ok(()),
    }
}

/// Center each row, then squash entries into `(-tau, tau)` with `tau * tanh(x / tau)`.
pub fn process_logits(raw: &mut [f64], k: usize, tau: f64) {
    for row in raw.chunks_exact_mut(k) {
        let mean = row.iter().sum::<f64>() / k as f64;
        for v in row.iter_mut() {
            *v = tau * ((*v - mean) / tau).tanh();
        }
    }
}

/// Stable softmax of one row, in place.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Classifier-free guidance in log space: `u + (1 + w) (c - u)`, then row softmax.
pub fn cfg_combine(cond_log: &ProbField, uncond_log: &ProbField, w: f64) -> Result<ProbField> {
    if cond_log.shape() != uncond_log.shape() || cond_log.k() != uncond_log.k() {
        return Err(Error::Shape("guidance inputs differ in shape".into()));
    }
    if !w.is_finite() {
        return Err(Error::Config(format!("guidance strength {w} is not finite")));
    }
    let k = cond_log.k();
    let mut out: Vec<f64> = cond_log
        .as_slice()
        .iter()
        .zip(uncond_log.as_slice())
        .map(|(&c, &u)| u + (1.0 + w) * (c - u))
        .collect();
    out.par_chunks_exact_mut(k).for_each(softmax_row);
    ProbField::new(cond_log.shape().clone(), k, out)
}

/// Piecewise-constant guidance strength over time.
///
/// `strengths[j]` applies when exactly `j` breakpoints lie strictly below `t`,
/// so `breakpoints = [0.5], strengths = [0.4, 0.7]` reads "0.7 if t > 0.5
/// else 0.4".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSchedule {
    pub breakpoints: Vec<f64>,
    pub strengths: Vec<f64>,
}

impl GuidanceSchedule {
    pub fn new(breakpoints: Vec<f64>, strengths: Vec<f64>) -> Result<Self> {
        let s = GuidanceSchedule {
            breakpoints,
            strengths,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(w: f64) -> Self {
        GuidanceSchedule {
            breakpoints: vec![],
            strengths: vec![w],
        }
    }

    /// Class- or image-conditioned generation.
    pub fn image() -> Self {
        GuidanceSchedule {
            breakpoints: vec![0.5],
            strengths: vec![0.4, 0.7],
        }
    }

    /// Text-conditioned generation.
    pub fn text() -> Self {
        GuidanceSchedule {
            breakpoints: vec![0.5],
            strengths: vec![0.4, 1.0],
        }
    }

    /// Editing and inpainting.
    pub fn edit() -> Self {
        Self::constant(0.45)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strengths.len() != self.breakpoints.len() + 1 {
            return Err(Error::Config(
                "guidance needs exactly one more strength than breakpoints".into(),
            ));
        }
        if self.strengths.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("guidance strengths must be finite".into()));
        }
        if self
            .breakpoints
            .iter()
            .any(|b| !(0.0..=1.0).contains(b))
            || self.breakpoints.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(
                "guidance breakpoints must be increasing within [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn strength(&self, t: f64) -> f64 {
        let j = self.breakpoints.iter().filter(|&&b| t > b).count();
        self.strengths[j]
    }
}

/// Single or guided prediction; guidance is skipped for unconditional calls.
pub fn guided_predict(
    denoiser: &dyn Denoiser,
    x_t: &TokenGrid,
    t: f64,
    cond: Option<u32>,
    w: Option<f64>,
) -> Result<ProbField> {
    match (cond, w) {
        (Some(_), Some(w)) if w != 0.0 => {
            let c = denoiser.predict_log(x_t, t, cond)?;
            let u = denoiser.predict_log(x_t, t, None)?;
            cfg_combine(&c, &u, w)
        }
        _ => denoiser.predict(x_t, t, cond),
    }
}
