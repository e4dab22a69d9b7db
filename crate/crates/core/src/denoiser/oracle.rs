use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_condition, Denoiser};
use crate::dataset::{validate_items, DatasetItem};
use crate::diffusion::{Prior, PAR_CHUNK};
use crate::error::{Error, Result};
use crate::grid::{GridShape, ProbField, TokenGrid};
use crate::schedule::Schedule;

/// Which clean-data expectation the oracle reports for token `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMode {
    /// `E[x0^i | x_t]`: every token of `x_t` is used as evidence.
    #[default]
    Posterior,
    /// `E[x0^i | x_t^{-i}]`: token `i`'s own observation is left out.
    /// This is the minimizer of the expected training loss and makes the
    /// reverse step reproduce the exact per-token reverse marginals.
    LeaveOneOut,
}

/// Exact Bayes denoiser over a finite weighted dataset.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    items: Vec<DatasetItem>,
    log_weights: Vec<f64>,
    shape: GridShape,
    prior: Prior,
    schedule: Schedule,
    mode: OracleMode,
    n_conditions: usize,
}

impl OracleDenoiser {
    pub fn new(items: Vec<DatasetItem>, prior: Prior, schedule: Schedule) -> Result<Self> {
        let (shape, k) = validate_items(&items)?;
        if k != prior.classes() {
            return Err(Error::Shape(format!(
                "dataset has K={k} but prior expects {}",
                prior.classes()
            )));
        }
        let log_weights = items.iter().map(|i| i.weight.ln()).collect();
        let n_conditions = items
            .iter()
            .filter_map(|i| i.class)
            .max()
            .map_or(0, |c| c as usize + 1);
        Ok(OracleDenoiser {
            items,
            log_weights,
            shape,
            prior,
            schedule,
            mode: OracleMode::Posterior,
            n_conditions,
        })
    }

    pub fn with_mode(mut self, mode: OracleMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn mode(&self) -> OracleMode {
        self.mode
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    /// `ln q(x_t^i = obs | x0^i = clean)`.
    #[inline]
    fn token_loglik(&self, clean: u8, obs: u8, table: &[f64; 3]) -> f64 {
        if clean == obs {
            table[0]
        } else if self.prior.mask_token() == Some(obs) {
            table[2]
        } else {
            table[1]
        }
    }

    /// Log-likelihoods for (match, mismatch to a clean state, observed mask).
    fn loglik_table(&self, alpha: f64) -> [f64; 3] {
        match self.prior.mask_token() {
            None => {
                let k = self.prior.classes() as f64;
                [
                    (alpha + (1.0 - alpha) / k).ln(),
                    ((1.0 - alpha) / k).ln(),
                    f64::NEG_INFINITY,
                ]
            }
            Some(_) => [alpha.ln(), f64::NEG_INFINITY, (1.0 - alpha).ln()],
        }
    }

    fn check_input(&self, x_t: &TokenGrid) -> Result<()> {
        if x_t.shape() != &self.shape || x_t.k() != self.prior.states() {
            return Err(Error::Shape(format!(
                "oracle expects shape {:?} with {} states, got {:?} with {}",
                self.shape.dims(),
                self.prior.states(),
                x_t.shape().dims(),
                x_t.k()
            )));
        }
        Ok(())
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Denoiser for OracleDenoiser {
    fn shape(&self) -> &GridShape {
        &self.shape
    }

    fn classes(&self) -> usize {
        self.prior.classes()
    }

    fn n_conditions(&self) -> usize {
        self.n_conditions
    }

    fn time_conditioned(&self) -> bool {
        true
    }

    fn predict(&self, x_t: &TokenGrid, t: f64, cond: Option<u32>) -> Result<ProbField> {
        self.check_input(x_t)?;
        check_condition(cond, self.n_conditions.max(1))?;
        let alpha = self.schedule.alpha(t)?;
        let table = self.loglik_table(alpha);
        let obs = x_t.tokens();

        let candidates: Vec<usize> = (0..self.items.len())
            .filter(|&d| cond.is_none() || self.items[d].class == cond)
            .collect();
        if candidates.is_empty() {
            return Err(Error::Config(format!("no dataset item has condition {cond:?}")));
        }
        let base: Vec<f64> = candidates
            .par_iter()
            .map(|&d| {
                let ll: f64 = self.items[d]
                    .grid
                    .tokens()
                    .iter()
                    .zip(obs)
                    .map(|(&c, &o)| self.token_loglik(c, o, &table))
                    .sum();
                self.log_weights[d] + ll
            })
            .collect();

        let k = self.prior.classes();
        let l = self.shape.len();
        let mut probs = vec![0.0; l * k];
        match self.mode {
            OracleMode::Posterior => {
                let z = log_sum_exp(base.iter().copied());
                if !z.is_finite() {
                    return Err(Error::Numeric("oracle posterior mass vanished".into()));
                }
                let post: Vec<f64> = base.iter().map(|b| (b - z).exp()).collect();
                probs
                    .par_chunks_exact_mut(k)
                    .with_min_len(PAR_CHUNK / k)
                    .enumerate()
                    .for_each(|(i, row)| {
                        for (&d, &w) in candidates.iter().zip(&post) {
                            row[self.items[d].grid.tokens()[i] as usize] += w;
                        }
                    });
            }
            OracleMode::LeaveOneOut => {
                probs
                    .par_chunks_exact_mut(k)
                    .enumerate()
                    .try_for_each_init(
                        || vec![0.0; candidates.len()],
                        |scratch, (i, row)| {
                            for ((s, &d), &b) in scratch.iter_mut().zip(&candidates).zip(&base) {
                                let own = self.token_loglik(self.items[d].grid.tokens()[i], obs[i], &table);
                                // an impossible own token contributes -inf to b; recompute without it
                                *s = if own == f64::NEG_INFINITY {
                                    self.log_weights[d]
                                        + self.items[d]
                                            .grid
                                            .tokens()
                                            .iter()
                                            .zip(obs)
                                            .enumerate()
                                            .filter(|&(j, _)| j != i)
                                            .map(|(_, (&c, &o))| self.token_loglik(c, o, &table))
                                            .sum::<f64>()
                                } else {
                                    b - own
                                };
                            }
                            let z = log_sum_exp(scratch.iter().copied());
                            if !z.is_finite() {
                                return Err(Error::Numeric(format!(
                                    "oracle posterior mass vanished at token {i}"
                                )));
                            }
                            for (&d, &s) in candidates.iter().zip(scratch.iter()) {
                                row[self.items[d].grid.tokens()[i] as usize] += (s - z).exp();
                            }
                            Ok(())
                        },
                    )?;
            }
        }
        for row in probs.chunks_exact_mut(k) {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= total);
        }
        ProbField::new(self.shape.clone(), k, probs)
    }
}
