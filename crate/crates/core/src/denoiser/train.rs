//! Mini-batch optimization of [`MlpDenoiser`] on the Rao-Blackwellized loss.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use super::{MlpDenoiser, TrainSample};
use crate::bsp::{compose_finetune_corruption, FinetuneCorruption};
use crate::dataset::{validate_items, DatasetItem};
use crate::diffusion::{corrupt, Prior};
use crate::error::{Error, Result};
use crate::loss::{eval_nll, NelboEstimate};
use crate::rng::Stream;
use crate::schedule::{Schedule, TimeDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Sgd { momentum: f64 },
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    pub cond_drop: f64,
    pub time_dist: TimeDistribution,
    /// Steps between held-out evaluations; 0 evaluates only at the ends.
    pub eval_every: usize,
    pub eval_mc: usize,
    /// Corruption mix for block-structured fine-tuning.
    pub finetune: Option<FinetuneCorruption>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-2,
            optimizer: Optimizer::default(),
            cond_drop: 0.1,
            time_dist: TimeDistribution::default(),
            eval_every: 0,
            eval_mc: 4,
            finetune: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalPoint {
    pub step: usize,
    pub nelbo: NelboEstimate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps_done: usize,
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    /// Set when training stopped on a non-finite loss; parameters are those
    /// from the last good step.
    pub aborted: Option<String>,
}

struct OptState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptState {
    fn new(n: usize) -> Self {
        OptState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn apply(&mut self, cfg: &TrainConfig, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        match cfg.optimizer {
            Optimizer::Sgd { momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grad).zip(&mut self.m) {
                    *m = momentum * *m + g;
                    *p -= cfg.lr * (*m + cfg.weight_decay * *p);
                }
            }
            Optimizer::AdamW { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.step as i32);
                let c2 = 1.0 - beta2.powi(self.step as i32);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                    *p -= cfg.lr * (update + cfg.weight_decay * *p);
                }
            }
        }
    }
}

fn validate(cfg: &TrainConfig) -> Result<()> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !(cfg.lr > 0.0) || !(cfg.weight_decay >= 0.0) {
        return Err(Error::Config("learning rate must be positive and decay nonnegative".into()));
    }
    if !(0.0..=1.0).contains(&cfg.cond_drop) {
        return Err(Error::Config("condition drop must lie in [0, 1]".into()));
    }
    cfg.time_dist.validate()
}

/// Draw one training batch; every random choice is keyed by `(step, slot)`.
pub fn make_batch(
    items: &[DatasetItem],
    picker: &WeightedIndex<f64>,
    prior: &Prior,
    schedule: &Schedule,
    cfg: &TrainConfig,
    conditional: bool,
    stream: &Stream,
) -> Result<Vec<TrainSample>> {
    let mut rng = stream.child(0).seq();
    (0..cfg.batch_size)
        .map(|b| {
            let item = &items[picker.sample(&mut rng)];
            let s = stream.child(1 + b as u64);
            let cond = if conditional && s.uniform(0) >= cfg.cond_drop {
                item.class
            } else {
                None
            };
            let (x_t, t) = match &cfg.finetune {
                Some(ft) => {
                    let c = compose_finetune_corruption(&item.grid, prior, schedule, ft, &s.child(1))?;
                    (c.x_t, c.t)
                }
                None => {
                    let t = cfg.time_dist.sample(&mut s.child(2).seq())?;
                    (corrupt(&item.grid, prior, schedule.alpha(t)?, &s.child(3))?, t)
                }
            };
            Ok(TrainSample {
                x0: item.grid.clone(),
                x_t,
                t,
                cond,
            })
        })
        .collect()
}

/// Train in place. `log` receives `(step, batch loss)` after every update.
pub fn train(
    model: &mut MlpDenoiser,
    train_items: &[DatasetItem],
    heldout: &[DatasetItem],
    schedule: &Schedule,
    cfg: &TrainConfig,
    stream: &Stream,
    mut log: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    validate(cfg)?;
    validate_items(train_items)?;
    let prior = Prior::uniform(model.arch().classes);
    if model.arch().input_states != prior.states() {
        return Err(Error::Config("training supports the uniform prior only".into()));
    }
    let conditional = model.arch().n_conditions > 0;
    let picker = WeightedIndex::new(train_items.iter().map(|i| i.weight))
        .map_err(|e| Error::Config(format!("item weights: {e}")))?;
    let eval_stream = stream.child_str("eval");
    let evaluate = |m: &MlpDenoiser| eval_nll(heldout, m, schedule, cfg.eval_mc, &eval_stream);

    let mut report = TrainReport::default();
    if !heldout.is_empty() {
        report.evals.push(EvalPoint {
            step: 0,
            nelbo: evaluate(model)?,
        });
    }
    let mut opt = OptState::new(model.n_params());
    let step_stream = stream.child_str("steps");
    for step in 0..cfg.steps {
        let batch = make_batch(train_items, &picker, &prior, schedule, cfg, conditional, &step_stream.child(step as u64))?;
        let g = match model.loss_and_grad(&batch, schedule) {
            Ok(g) => g,
            Err(Error::Numeric(msg)) => {
                report.aborted = Some(format!("step {step}: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let backup = model.params().to_vec();
        opt.apply(cfg, model.params_mut(), &g.grad);
        if model.params().iter().any(|p| !p.is_finite()) {
            model.params_mut().copy_from_slice(&backup);
            report.aborted = Some(format!("step {step}: non-finite parameters"));
            break;
        }
        report.losses.push(g.loss);
        report.steps_done = step + 1;
        log(step, g.loss);
        let at_eval = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps;
        if at_eval && !heldout.is_empty() {
            report.evals.push(EvalPoint {
                step: step + 1,
                nelbo: evaluate(model)?,
            });
        }
    }
    if !heldout.is_empty() && report.steps_done > 0 {
        report.evals.push(EvalPoint {
            step: report.steps_done,
            nelbo: evaluate(model)?,
        });
    }
    Ok(report)
}

/// Deterministic train/held-out split keyed by item id.
pub fn split_heldout(items: &[DatasetItem], fraction: f64, stream: &Stream) -> (Vec<DatasetItem>, Vec<DatasetItem>) {
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for item in items {
        if stream.child_str(&item.id).uniform(0) < fraction {
            held.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    (train, held)
}
