//! Reverse-process driver with optional inpainting and guidance.
//!
//! Inpainting adds three independently switchable steps to each iteration:
//! rescaling the model time by the free fraction of the grid (step 1),
//! substituting one-hot targets into the prediction at clamped tokens
//! (step 2) and overwriting clamped tokens of the new state (step 3).

use serde::{Deserialize, Serialize};

use crate::denoiser::{guided_predict, Denoiser, GuidanceSchedule};
use crate::diffusion::{ancestral_step, argmax_step, Prior};
use crate::error::{Error, Result};
use crate::grid::{GridShape, ProbField, TokenGrid};
use crate::rng::Stream;
use crate::schedule::{Schedule, TimeGrid};

/// Inpainting constraint: tokens with `mask[i]` are tied to `targets[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClampSpec {
    shape: GridShape,
    mask: Vec<bool>,
    targets: Vec<u8>,
}

impl ClampSpec {
    pub fn new(shape: GridShape, mask: Vec<bool>, targets: Vec<u8>, classes: usize) -> Result<Self> {
        if mask.len() != shape.len() || targets.len() != shape.len() {
            return Err(Error::Shape("clamp mask or targets do not match the grid".into()));
        }
        if let Some(i) = (0..mask.len()).find(|&i| mask[i] && targets[i] as usize >= classes) {
            return Err(Error::Validation(format!(
                "clamp target {} at token {i} is not below K={classes}",
                targets[i]
            )));
        }
        Ok(ClampSpec { shape, mask, targets })
    }

    /// Clamp the tokens selected by `mask` to the values of `source`.
    pub fn from_source(source: &TokenGrid, mask: Vec<bool>) -> Result<Self> {
        Self::new(source.shape().clone(), mask, source.tokens().to_vec(), source.k())
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn targets(&self) -> &[u8] {
        &self.targets
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Model time after rescaling by the free fraction; exact at both ends.
    pub fn rescale_time(&self, t: f64) -> f64 {
        let len = self.mask.len();
        let free = len - self.count();
        if free == len {
            t
        } else {
            t * (free as f64 / len as f64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Low,
    High,
}

/// Clamp the `side` half of `axis` to `source`; the other half is free.
///
/// The low half holds indices `[0, n/2)` along the axis.
pub fn half_space_clamp(source: &TokenGrid, axis: usize, side: Side) -> Result<ClampSpec> {
    let shape = source.shape();
    if axis >= shape.ndim() {
        return Err(Error::Config(format!(
            "axis {axis} out of range for a {}-D grid",
            shape.ndim()
        )));
    }
    let half = shape.dims()[axis] / 2;
    let mask = (0..shape.len())
        .map(|i| {
            let low = shape.coord(i)[axis] < half;
            low == (side == Side::Low)
        })
        .collect();
    ClampSpec::from_source(source, mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub schedule: Schedule,
    pub grid: TimeGrid,
    pub prior: Prior,
    pub guidance: Option<GuidanceSchedule>,
    pub cond: Option<u32>,
    pub clamp: Option<ClampSpec>,
    pub seed: u64,
    pub apply_step1: bool,
    pub apply_step2: bool,
    pub apply_step3: bool,
}

impl SamplerConfig {
    pub fn new(schedule: Schedule, grid: TimeGrid, prior: Prior, seed: u64) -> Self {
        SamplerConfig {
            schedule,
            grid,
            prior,
            guidance: None,
            cond: None,
            clamp: None,
            seed,
            apply_step1: true,
            apply_step2: true,
            apply_step3: true,
        }
    }
}

/// Recorded model prediction at one step of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub t: f64,
    pub field: ProbField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub snapshots: Vec<Snapshot>,
    /// One-hot view of the returned grid at the last grid time.
    pub final_snapshot: Snapshot,
    pub grid: TokenGrid,
}

fn check(denoiser: &dyn Denoiser, cfg: &SamplerConfig, init: Option<&TokenGrid>) -> Result<()> {
    if denoiser.classes() != cfg.prior.classes() {
        return Err(Error::Shape(format!(
            "denoiser predicts {} categories but prior has {}",
            denoiser.classes(),
            cfg.prior.classes()
        )));
    }
    if let Some(c) = &cfg.clamp {
        if c.shape() != denoiser.shape() {
            return Err(Error::Shape("clamp shape differs from the denoiser grid".into()));
        }
    }
    if let Some(x) = init {
        if x.shape() != denoiser.shape() || x.k() != cfg.prior.states() {
            return Err(Error::Shape("initial grid does not match the denoiser and prior".into()));
        }
    }
    if let Some(g) = &cfg.guidance {
        g.validate()?;
    }
    Ok(())
}

fn overwrite(x: &mut TokenGrid, clamp: &ClampSpec) {
    for ((t, &m), &c) in x.tokens_mut().iter_mut().zip(clamp.mask()).zip(clamp.targets()) {
        if m {
            *t = c;
        }
    }
}

fn run(
    denoiser: &dyn Denoiser,
    cfg: &SamplerConfig,
    init: Option<TokenGrid>,
    mut observe: impl FnMut(usize, f64, &ProbField),
) -> Result<TokenGrid> {
    check(denoiser, cfg, init.as_ref())?;
    let root = Stream::new(cfg.seed);
    let mut x = match init {
        Some(x) => x,
        None => cfg.prior.sample_grid(denoiser.shape(), &root.child_str("init")),
    };
    let steps_stream = root.child_str("steps");
    let times = cfg.grid.values();
    let n_steps = cfg.grid.steps();
    let k = cfg.prior.classes();
    for step in 0..n_steps {
        let (t, s) = (times[step], times[step + 1]);
        let model_t = match &cfg.clamp {
            Some(c) if cfg.apply_step1 => c.rescale_time(t),
            _ => t,
        };
        let w = cfg.guidance.as_ref().map(|g| g.strength(model_t));
        let mut pred = guided_predict(denoiser, &x, model_t, cfg.cond, w)?;
        if let (Some(c), true) = (&cfg.clamp, cfg.apply_step2) {
            for (i, (&m, &target)) in c.mask().iter().zip(c.targets()).enumerate() {
                if m {
                    let row = pred.row_mut(i);
                    row.iter_mut().for_each(|p| *p = 0.0);
                    if (target as usize) < k {
                        row[target as usize] = 1.0;
                    }
                }
            }
        }
        observe(step, t, &pred);
        let alpha_t = cfg.schedule.alpha(t)?;
        let alpha_s = cfg.schedule.alpha(s)?;
        x = if step + 1 < n_steps {
            ancestral_step(&x, &pred, &cfg.prior, alpha_t, alpha_s, &steps_stream.child(step as u64))?
        } else {
            argmax_step(&x, &pred, &cfg.prior, alpha_t, alpha_s)?
        };
        if let (Some(c), true) = (&cfg.clamp, cfg.apply_step3) {
            overwrite(&mut x, c);
        }
    }
    Ok(x)
}

/// Draw one grid. Without `init`, the start is an i.i.d. prior draw.
pub fn sample(denoiser: &dyn Denoiser, cfg: &SamplerConfig, init: Option<TokenGrid>) -> Result<TokenGrid> {
    run(denoiser, cfg, init, |_, _, _| {})
}

/// [`sample`] that also records the prediction every `record_every` steps.
pub fn trace_sample(
    denoiser: &dyn Denoiser,
    cfg: &SamplerConfig,
    init: Option<TokenGrid>,
    record_every: usize,
) -> Result<Trace> {
    if record_every == 0 {
        return Err(Error::Config("record_every must be at least 1".into()));
    }
    let mut snapshots = Vec::new();
    let grid = run(denoiser, cfg, init, |step, t, field| {
        if step % record_every == 0 {
            snapshots.push(Snapshot {
                step,
                t,
                field: field.clone(),
            });
        }
    })?;
    let final_snapshot = Snapshot {
        step: cfg.grid.steps(),
        t: *cfg.grid.values().last().expect("nonempty grid"),
        field: ProbField::one_hot(&grid, grid.k()),
    };
    Ok(Trace {
        snapshots,
        final_snapshot,
        grid,
    })
}

/// Source grid with every free (unclamped) token replaced by prior noise.
pub fn inpaint_init(source: &TokenGrid, clamp: &ClampSpec, prior: &Prior, seed: u64) -> Result<TokenGrid> {
    if source.shape() != clamp.shape() {
        return Err(Error::Shape("source and clamp shapes differ".into()));
    }
    let noise = prior.sample_grid(source.shape(), &Stream::new(seed).child_str("inpaint-init"));
    let tokens = source
        .tokens()
        .iter()
        .zip(noise.tokens())
        .zip(clamp.mask())
        .map(|((&s, &n), &m)| if m { s } else { n })
        .collect();
    TokenGrid::new(source.shape().clone(), prior.states(), tokens)
}
