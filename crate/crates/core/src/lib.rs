//! Uniform-state discrete diffusion over categorical voxel grids.
//!
//! Tokens of a grid are corrupted independently toward a prior and recovered
//! by ancestral sampling through exact per-token reverse posteriors, with a
//! denoiser (exact Bayes oracle or a small trainable MLP) standing in for the
//! unknown clean grid. The crate also provides the training objective,
//! inpainting, block-structured masks, entropy scores and voxel geometry.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bsp;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod io;
pub mod loss;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod uncertainty;
pub mod voxel;

pub use dataset::DatasetItem;
pub use denoiser::{Denoiser, GuidanceSchedule, MlpArch, MlpDenoiser, OracleDenoiser, OracleMode};
pub use diffusion::{Prior, PriorKind};
pub use error::{Error, Result};
pub use grid::{GridShape, ProbField, TokenGrid};
pub use rng::Stream;
pub use sampler::{ClampSpec, SamplerConfig};
pub use schedule::{GridKind, Schedule, ScheduleKind, TimeDistribution, TimeGrid};
pub use voxel::{Pose24, SparseVoxels};
