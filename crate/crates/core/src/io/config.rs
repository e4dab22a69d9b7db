//! Engine configuration document (TOML). Every key is optional; unknown keys
//! are rejected.
//!
//! ```toml
//! seed = 0
//! [schedule]     kind = "linear", eps0 = 1e-4, eps1 = 1e-4
//! [time_dist]    kind = "beta", params = [3.0, 1.0]
//! [grid]         kind = "cosine", steps = 256, inpaint_steps = 128, t_min = 1e-3
//! [prior]        kind = "uniform"
//! [guidance]     breakpoints = [0.5], strengths = [0.4, 0.7]
//! [sampler]      apply_step1 = true, apply_step2 = true, apply_step3 = true
//! [model]        hidden = 128, tau = 5.0, time_conditioned = true
//! [train]        steps = 2000, batch_size = 16, lr = 1e-3, ...
//! [bsp]          scales = [4, 8, 16, 32], target_fraction = 0.5
//! [uncertainty]  t_eval = 1e-3, rho = 0.4, n_draws = 1
//! [nll]          n_mc = 16
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bsp::BlockMaskConfig;
use crate::denoiser::train::Optimizer;
use crate::denoiser::{GuidanceSchedule, DEFAULT_TAU};
use crate::diffusion::{Prior, PriorKind};
use crate::error::{Error, Result};
use crate::schedule::{GridKind, Schedule, ScheduleKind, TimeDistribution, TimeGrid};
use crate::uncertainty::GammaParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub eps0: f64,
    pub eps1: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            kind: ScheduleKind::Linear,
            eps0: 1e-4,
            eps1: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeDistSection {
    /// `uniform`, `logit-normal` (params `[mu, sigma]`) or `beta` (params `[a, b]`).
    pub kind: String,
    pub params: Vec<f64>,
}

impl Default for TimeDistSection {
    fn default() -> Self {
        TimeDistSection {
            kind: "beta".into(),
            params: vec![3.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub kind: GridKind,
    pub steps: usize,
    pub inpaint_steps: usize,
    pub t_min: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            kind: GridKind::Cosine,
            steps: 256,
            inpaint_steps: 128,
            t_min: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub kind: PriorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub apply_step1: bool,
    pub apply_step2: bool,
    pub apply_step3: bool,
    /// Guidance schedule used by inpainting.
    pub inpaint_guidance: GuidanceSchedule,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            apply_step1: true,
            apply_step2: true,
            apply_step3: true,
            inpaint_guidance: GuidanceSchedule::edit(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: usize,
    pub tau: f64,
    pub time_conditioned: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: 128,
            tau: DEFAULT_TAU,
            time_conditioned: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    pub cond_drop: f64,
    pub eval_every: usize,
    pub eval_mc: usize,
    pub heldout_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-2,
            optimizer: Optimizer::default(),
            cond_drop: 0.1,
            eval_every: 500,
            eval_mc: 4,
            heldout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NllSection {
    pub n_mc: usize,
}

impl Default for NllSection {
    fn default() -> Self {
        NllSection { n_mc: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub seed: u64,
    pub schedule: ScheduleSection,
    pub time_dist: TimeDistSection,
    pub grid: GridSection,
    pub prior: PriorSection,
    pub guidance: GuidanceSchedule,
    pub sampler: SamplerSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub bsp: BlockMaskConfig,
    pub uncertainty: GammaParams,
    pub nll: NllSection,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            seed: 0,
            schedule: ScheduleSection::default(),
            time_dist: TimeDistSection::default(),
            grid: GridSection::default(),
            prior: PriorSection::default(),
            guidance: GuidanceSchedule::image(),
            sampler: SamplerSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            bsp: BlockMaskConfig::default(),
            uncertainty: GammaParams::default(),
            nll: NllSection::default(),
        }
    }
}

impl EngineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: EngineConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &span_note(&e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(&path.display().to_string()))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable config")
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.time_distribution()?;
        self.time_grid(self.grid.steps)?;
        self.time_grid(self.grid.inpaint_steps)?;
        self.guidance.validate()?;
        self.sampler.inpaint_guidance.validate()?;
        if self.model.hidden == 0 || !(self.model.tau > 0.0) {
            return Err(Error::Config("model.hidden and model.tau must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.train.heldout_fraction) {
            return Err(Error::Config("train.heldout_fraction must lie in [0, 1)".into()));
        }
        if self.nll.n_mc == 0 || self.uncertainty.n_draws == 0 {
            return Err(Error::Config("nll.n_mc and uncertainty.n_draws must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.schedule.kind, self.schedule.eps0, self.schedule.eps1)
    }

    pub fn time_distribution(&self) -> Result<TimeDistribution> {
        let p = &self.time_dist.params;
        let two = || -> Result<(f64, f64)> {
            match p.as_slice() {
                [a, b] => Ok((*a, *b)),
                _ => Err(Error::Config(format!(
                    "time_dist.params for {} needs two values",
                    self.time_dist.kind
                ))),
            }
        };
        match self.time_dist.kind.as_str() {
            "uniform" => Ok(TimeDistribution::Uniform),
            "logit-normal" => {
                let (mu, sigma) = two()?;
                TimeDistribution::logit_normal(mu, sigma)
            }
            "beta" => {
                let (a, b) = two()?;
                TimeDistribution::beta(a, b)
            }
            other => Err(Error::Config(format!("unknown time_dist.kind {other:?}"))),
        }
    }

    pub fn time_grid(&self, steps: usize) -> Result<TimeGrid> {
        TimeGrid::new(steps, self.grid.kind, self.grid.t_min)
    }

    pub fn prior(&self, classes: usize) -> Result<Prior> {
        Prior::new(self.prior.kind, classes)
    }
}

fn span_note(e: &toml::de::Error) -> String {
    e.span().map(|s| format!(" (at byte {})", s.start)).unwrap_or_default()
}
