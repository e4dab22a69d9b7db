//! Block-structured perturbation masks and the fine-tuning corruption mix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{corrupt, corrupt_where, Prior};
use crate::error::{Error, Result};
use crate::grid::{GridShape, TokenGrid};
use crate::rng::Stream;
use crate::schedule::{Schedule, TimeDistribution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockMaskConfig {
    /// Block side lengths.
    pub scales: Vec<usize>,
    /// Target masked fraction `t_b`.
    pub target_fraction: f64,
    /// Sample starts anywhere and clip blocks at the border instead of
    /// sampling only starts where the block fits.
    pub allow_clipped_blocks: bool,
}

impl Default for BlockMaskConfig {
    fn default() -> Self {
        BlockMaskConfig {
            scales: vec![4, 8, 16, 32],
            target_fraction: 0.5,
            allow_clipped_blocks: false,
        }
    }
}

impl BlockMaskConfig {
    pub fn new(scales: Vec<usize>, target_fraction: f64) -> Self {
        BlockMaskConfig {
            scales,
            target_fraction,
            allow_clipped_blocks: false,
        }
    }

    pub fn validate(&self, shape: &GridShape) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("at least one block scale is required".into()));
        }
        let min_side = *shape.dims().iter().min().expect("nonempty dims");
        if let Some(&l) = self.scales.iter().find(|&&l| l == 0 || l > min_side) {
            return Err(Error::Config(format!(
                "block side {l} must be in 1..={min_side}"
            )));
        }
        if !(0.0..=1.0).contains(&self.target_fraction) {
            return Err(Error::Config(format!(
                "target fraction {} outside [0, 1]",
                self.target_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockMask {
    pub shape: GridShape,
    pub cells: Vec<bool>,
    pub blocks_per_scale: Vec<usize>,
    /// `sum_j m_j * A_j / V`.
    pub union_bound: f64,
}

impl BlockMask {
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn realized_fraction(&self) -> f64 {
        self.count() as f64 / self.cells.len() as f64
    }
}

/// Union of randomly placed axis-aligned hypercubes covering roughly `t_b` of the grid.
pub fn generate_block_mask(shape: &GridShape, cfg: &BlockMaskConfig, stream: &Stream) -> Result<BlockMask> {
    cfg.validate(shape)?;
    let dims = shape.dims();
    let dim = dims.len() as i32;
    let volume = shape.len() as f64;
    let mut rng = stream.seq();

    let u: Vec<f64> = cfg.scales.iter().map(|_| rng.random::<f64>()).collect();
    let total_u: f64 = u.iter().sum();
    let counts: Vec<usize> = cfg
        .scales
        .iter()
        .zip(&u)
        .map(|(&l, &uj)| {
            let area = (l as f64).powi(dim);
            let m_max = (cfg.target_fraction * volume / area).ceil();
            let w = if total_u > 0.0 { uj / total_u } else { 1.0 / u.len() as f64 };
            (w * m_max).ceil() as usize
        })
        .collect();

    let mut cells = vec![false; shape.len()];
    let mut start = [0usize; 3];
    let mut end = [1usize; 3];
    for (&l, &m) in cfg.scales.iter().zip(&counts) {
        for _ in 0..m {
            for (d, &n) in dims.iter().enumerate() {
                let s = if cfg.allow_clipped_blocks {
                    rng.random_range(0..n)
                } else {
                    rng.random_range(0..=n - l)
                };
                start[d] = s;
                end[d] = (s + l).min(n);
            }
            fill_box(shape, &mut cells, &start, &end);
        }
    }
    let union_bound = cfg
        .scales
        .iter()
        .zip(&counts)
        .map(|(&l, &m)| m as f64 * (l as f64).powi(dim))
        .sum::<f64>()
        / volume;
    Ok(BlockMask {
        shape: shape.clone(),
        cells,
        blocks_per_scale: counts,
        union_bound,
    })
}

fn fill_box(shape: &GridShape, cells: &mut [bool], start: &[usize; 3], end: &[usize; 3]) {
    let dims = shape.dims();
    let nd = dims.len();
    let mut c = [0usize; 3];
    let size = |d: usize| if d < nd { end[d] - start[d] } else { 1 };
    for a in 0..size(0) {
        for b in 0..size(1) {
            for e in 0..size(2) {
                c[0] = start[0] + a;
                if nd > 1 {
                    c[1] = start[1] + b;
                }
                if nd > 2 {
                    c[2] = start[2] + e;
                }
                cells[shape.index(&c[..nd])] = true;
            }
        }
    }
}

/// How [`compose_finetune_corruption`] picks its branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Branch {
    #[default]
    Random,
    Homogeneous,
    Block,
}

/// Fine-tuning corruption settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneCorruption {
    pub scales: Vec<usize>,
    pub allow_clipped_blocks: bool,
    /// Time law of the homogeneous branch.
    pub time_dist: TimeDistribution,
    /// Time law inside blocks.
    pub block_time_dist: TimeDistribution,
    pub branch: Branch,
    /// Fixed `t_b` instead of `U[0, 1]`.
    pub target_fraction: Option<f64>,
}

impl FinetuneCorruption {
    pub fn new(scales: Vec<usize>, time_dist: TimeDistribution) -> Self {
        FinetuneCorruption {
            scales,
            allow_clipped_blocks: false,
            time_dist,
            block_time_dist: TimeDistribution::Beta { a: 3.0, b: 1.0 },
            branch: Branch::Random,
            target_fraction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corrupted {
    pub x_t: TokenGrid,
    /// Time used for the loss weight.
    pub t: f64,
    pub used_bsp: bool,
    /// Block mask of the BSP branch.
    pub mask: Option<Vec<bool>>,
}

/// Either homogeneous corruption at a training time, or corruption confined to
/// a random block mask at a block-time draw; each with probability 1/2.
pub fn compose_finetune_corruption(
    x0: &TokenGrid,
    prior: &Prior,
    schedule: &Schedule,
    cfg: &FinetuneCorruption,
    stream: &Stream,
) -> Result<Corrupted> {
    let use_bsp = match cfg.branch {
        Branch::Random => stream.uniform(0) < 0.5,
        Branch::Homogeneous => false,
        Branch::Block => true,
    };
    let noise = stream.child(2);
    if !use_bsp {
        let t = cfg.time_dist.sample(&mut stream.child(1).seq())?;
        let x_t = corrupt(x0, prior, schedule.alpha(t)?, &noise)?;
        return Ok(Corrupted {
            x_t,
            t,
            used_bsp: false,
            mask: None,
        });
    }
    let t_b = match cfg.target_fraction {
        Some(f) => f,
        None => stream.uniform(3),
    };
    let mask_cfg = BlockMaskConfig {
        scales: cfg.scales.clone(),
        target_fraction: t_b,
        allow_clipped_blocks: cfg.allow_clipped_blocks,
    };
    let mask = generate_block_mask(x0.shape(), &mask_cfg, &stream.child(4))?;
    let t = cfg.block_time_dist.sample(&mut stream.child(1).seq())?;
    let x_t = corrupt_where(x0, prior, schedule.alpha(t)?, &noise, |i| mask.cells[i])?;
    Ok(Corrupted {
        x_t,
        t,
        used_bsp: true,
        mask: Some(mask.cells),
    })
}
