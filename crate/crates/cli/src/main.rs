//! `voxdiff` command-line driver.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use voxdiff::io::EngineConfig;
use voxdiff::Error;

#[derive(Parser, Debug)]
#[command(name = "voxdiff", version, about = "Uniform-state discrete diffusion over voxel grids")]
struct Cli {
    /// Engine config (TOML); defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed; overrides `seed` in the config.
    #[arg(long, global = true, env = "DVD_SEED")]
    seed: Option<u64>,

    /// Worker thread cap. Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
pub struct ModelSource {
    /// DVDM checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,

    /// Dataset manifest for the exact Bayes denoiser.
    #[arg(long)]
    oracle: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct DenoiserArgs {
    #[command(flatten)]
    source: ModelSource,

    #[arg(long, value_enum, default_value_t = OracleModeArg::Posterior)]
    oracle_mode: OracleModeArg,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleModeArg {
    Posterior,
    LeaveOneOut,
}

#[derive(Args, Debug, Clone)]
pub struct GuidanceArgs {
    /// Condition id for class-conditional sampling.
    #[arg(long)]
    class: Option<u32>,

    /// Constant guidance strength instead of the configured schedule.
    #[arg(long, requires = "class", allow_hyphen_values = true)]
    cfg: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an MLP denoiser and write a DVDM checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Mix block-structured corruption into training.
        #[arg(long)]
        bsp_finetune: bool,
        /// Override `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Disable time conditioning of the model.
        #[arg(long)]
        no_time: bool,
    },
    /// Draw one grid by ancestral sampling.
    Sample {
        #[command(flatten)]
        denoiser: DenoiserArgs,
        #[command(flatten)]
        guidance: GuidanceArgs,
        #[arg(long)]
        out: PathBuf,
        /// Override `grid.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Directory for DVXP prediction snapshots.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Record every n-th prediction into the trace directory.
        #[arg(long, default_value_t = 1)]
        record_every: usize,
        /// Bit-packed output (K = 2 only).
        #[arg(long)]
        packed: bool,
    },
    /// Complete a source grid outside a clamp mask.
    Inpaint {
        #[command(flatten)]
        denoiser: DenoiserArgs,
        #[command(flatten)]
        guidance: GuidanceArgs,
        #[arg(long)]
        source: PathBuf,
        /// DVXM clamp mask; set cells keep the source value.
        #[arg(long, conflicts_with = "half_space", required_unless_present = "half_space")]
        mask: Option<PathBuf>,
        /// Clamp one half of an axis: `--half-space AXIS SIDE`.
        #[arg(long, num_args = 2, value_names = ["AXIS", "SIDE"])]
        half_space: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
        /// Override `grid.inpaint_steps`.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        packed: bool,
    },
    /// Rank dataset items by the gamma uncertainty score (CSV).
    Score {
        #[command(flatten)]
        denoiser: DenoiserArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for per-item DVXP entropy rasters.
        #[arg(long)]
        per_voxel: Option<PathBuf>,
    },
    /// Monte Carlo negative ELBO of a dataset (JSON).
    Nll {
        #[command(flatten)]
        denoiser: DenoiserArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Override `nll.n_mc`.
        #[arg(long)]
        n_mc: Option<usize>,
    },
    /// Generate a block-structured mask (DVXM) and print its statistics.
    BspMask {
        /// Grid side lengths, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        shape: Vec<usize>,
        /// Block sides, comma separated; `bsp.scales` when absent.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<usize>>,
        /// Target fraction; `bsp.target_fraction` when absent.
        #[arg(long)]
        tb: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Best of 24 cube rotations of `generated` against `reference` (JSON).
    Align {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Symmetric voxel chamfer distance (JSON).
    Chamfer {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Write a synthetic shape dataset with a manifest.
    Synth {
        /// Shape classes, comma separated: box, sphere, l-shape, checkerboard.
        #[arg(long, value_delimiter = ',', required = true)]
        classes: Vec<String>,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective configuration as TOML.
    Config,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Format { .. } | Error::Shape(_) | Error::Validation(_) | Error::Io(_) => 3,
        Error::Numeric(_) | Error::Domain(_) => 4,
    }
}

fn run(cli: Cli) -> voxdiff::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cfg = match &cli.config {
        Some(p) => EngineConfig::load(p)?,
        None => EngineConfig::default(),
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    let ctx = commands::Context { cfg, seed };
    match cli.command {
        Command::Train {
            manifest,
            out,
            init,
            bsp_finetune,
            steps,
            no_time,
        } => commands::train(&ctx, &manifest, &out, init.as_deref(), bsp_finetune, steps, no_time),
        Command::Sample {
            denoiser,
            guidance,
            out,
            steps,
            trace,
            record_every,
            packed,
        } => commands::sample(&ctx, &denoiser, &guidance, &out, steps, trace.as_deref(), record_every, packed),
        Command::Inpaint {
            denoiser,
            guidance,
            source,
            mask,
            half_space,
            out,
            steps,
            packed,
        } => commands::inpaint(
            &ctx,
            &denoiser,
            &guidance,
            &source,
            mask.as_deref(),
            half_space.as_deref(),
            &out,
            steps,
            packed,
        ),
        Command::Score {
            denoiser,
            manifest,
            out,
            per_voxel,
        } => commands::score(&ctx, &denoiser, &manifest, out.as_deref(), per_voxel.as_deref()),
        Command::Nll { denoiser, manifest, n_mc } => commands::nll(&ctx, &denoiser, &manifest, n_mc),
        Command::BspMask { shape, scales, tb, out } => commands::bsp_mask(&ctx, &shape, scales, tb, &out),
        Command::Align { generated, reference } => commands::align(&generated, &reference),
        Command::Chamfer { a, b } => commands::chamfer(&a, &b),
        Command::Synth { classes, n, count, out } => commands::synth(&ctx, &classes, n, count, &out),
        Command::Config => {
            print!("{}", ctx.cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("voxdiff: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
