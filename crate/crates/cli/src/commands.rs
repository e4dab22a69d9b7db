use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::json;
use voxdiff::bsp::{generate_block_mask, FinetuneCorruption};
use voxdiff::denoiser::train::{split_heldout, train as train_model, TrainConfig};
use voxdiff::io::{
    decode_grid, decode_mask, decode_model, encode_field, encode_grid, encode_grid_packed, encode_mask, encode_model,
    load_manifest, write_dataset, EngineConfig, Manifest,
};
use voxdiff::loss::eval_nll;
use voxdiff::sampler::{half_space_clamp, inpaint_init, sample as run_sampler, trace_sample, Side};
use voxdiff::uncertainty::rank_dataset;
use voxdiff::voxel::synth::{make_synthetic_dataset, ShapeClass, SynthSpec};
use voxdiff::voxel::{best_pose_align, voxel_chamfer};
use voxdiff::{
    ClampSpec, DatasetItem, Denoiser, Error, GridShape, GuidanceSchedule, MlpArch, MlpDenoiser, OracleDenoiser,
    OracleMode, ProbField, Result, SamplerConfig, SparseVoxels, Stream, TokenGrid,
};

use crate::{DenoiserArgs, GuidanceArgs, OracleModeArg};

pub struct Context {
    pub cfg: EngineConfig,
    pub seed: u64,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::from(e).context(&path.display().to_string()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).map_err(|e| Error::from(e).context(&path.display().to_string()))
}

fn read_grid(path: &Path) -> Result<TokenGrid> {
    decode_grid(&read(path)?).map_err(|e| e.context(&path.display().to_string()))
}

fn write_grid(path: &Path, grid: &TokenGrid, packed: bool) -> Result<()> {
    let bytes = if packed { encode_grid_packed(grid)? } else { encode_grid(grid) };
    write(path, &bytes)
}

fn print_json(value: serde_json::Value) {
    println!("{value}");
}

fn n_conditions(manifest: &Manifest, items: &[DatasetItem]) -> usize {
    let labelled = items.iter().filter_map(|i| i.class).max().map_or(0, |c| c as usize + 1);
    labelled.max(manifest.classes.len())
}

enum Loaded {
    Mlp(MlpDenoiser),
    Oracle(OracleDenoiser),
}

impl Loaded {
    fn as_dyn(&self) -> &dyn Denoiser {
        match self {
            Loaded::Mlp(m) => m,
            Loaded::Oracle(o) => o,
        }
    }
}

fn load_denoiser(ctx: &Context, args: &DenoiserArgs) -> Result<Loaded> {
    if let Some(p) = &args.source.model {
        let m = decode_model(&read(p)?).map_err(|e| e.context(&p.display().to_string()))?;
        return Ok(Loaded::Mlp(m));
    }
    let p = args.source.oracle.as_ref().expect("clap enforces one source");
    let (manifest, items) = load_manifest(p)?;
    let prior = ctx.cfg.prior(manifest.k)?;
    let mode = match args.oracle_mode {
        OracleModeArg::Posterior => OracleMode::Posterior,
        OracleModeArg::LeaveOneOut => OracleMode::LeaveOneOut,
    };
    Ok(Loaded::Oracle(OracleDenoiser::new(items, prior, ctx.cfg.schedule()?)?.with_mode(mode)))
}

fn sampler_config(
    ctx: &Context,
    den: &dyn Denoiser,
    guidance: &GuidanceArgs,
    steps: usize,
    fallback: &GuidanceSchedule,
) -> Result<SamplerConfig> {
    let prior = ctx.cfg.prior(den.classes())?;
    let mut sc = SamplerConfig::new(ctx.cfg.schedule()?, ctx.cfg.time_grid(steps)?, prior, ctx.seed);
    if let Some(c) = guidance.class {
        if c as usize >= den.n_conditions() {
            return Err(Error::Config(format!(
                "class {c} out of range: the denoiser knows {} conditions",
                den.n_conditions()
            )));
        }
        sc.cond = Some(c);
        sc.guidance = Some(guidance.cfg.map_or_else(|| fallback.clone(), GuidanceSchedule::constant));
    }
    sc.apply_step1 = ctx.cfg.sampler.apply_step1;
    sc.apply_step2 = ctx.cfg.sampler.apply_step2;
    sc.apply_step3 = ctx.cfg.sampler.apply_step3;
    Ok(sc)
}

pub fn train(
    ctx: &Context,
    manifest_path: &Path,
    out: &Path,
    init: Option<&Path>,
    bsp_finetune: bool,
    steps: Option<usize>,
    no_time: bool,
) -> Result<()> {
    let cfg = &ctx.cfg;
    let (manifest, items) = load_manifest(manifest_path)?;
    let shape = GridShape::new(&manifest.shape)?;
    let root = Stream::new(ctx.seed);
    let mut model = match init {
        Some(p) => decode_model(&read(p)?).map_err(|e| e.context(&p.display().to_string()))?,
        None => {
            let mut arch = MlpArch::new(&shape, manifest.k, cfg.model.hidden, n_conditions(&manifest, &items));
            arch.tau = cfg.model.tau;
            arch.time_conditioned = cfg.model.time_conditioned;
            MlpDenoiser::new(arch, &root.child_str("init"))?
        }
    };
    if no_time {
        model.set_time_conditioned(false);
    }
    if model.shape() != &shape || model.classes() != manifest.k {
        return Err(Error::Shape("checkpoint does not match the dataset shape or K".into()));
    }

    let time_dist = cfg.time_distribution()?;
    let finetune = if bsp_finetune {
        let min_side = *shape.dims().iter().min().expect("nonempty shape");
        let scales: Vec<usize> = cfg.bsp.scales.iter().copied().filter(|&l| l <= min_side).collect();
        if scales.is_empty() {
            return Err(Error::Config(format!("no bsp.scales entry fits a side of {min_side}")));
        }
        let mut ft = FinetuneCorruption::new(scales, time_dist);
        ft.allow_clipped_blocks = cfg.bsp.allow_clipped_blocks;
        Some(ft)
    } else {
        None
    };
    let tc = TrainConfig {
        steps: steps.unwrap_or(cfg.train.steps),
        batch_size: cfg.train.batch_size,
        lr: cfg.train.lr,
        weight_decay: cfg.train.weight_decay,
        optimizer: cfg.train.optimizer,
        cond_drop: cfg.train.cond_drop,
        time_dist,
        eval_every: cfg.train.eval_every,
        eval_mc: cfg.train.eval_mc,
        finetune,
    };
    let (train_items, heldout) = split_heldout(&items, cfg.train.heldout_fraction, &root.child_str("split"));
    if train_items.is_empty() {
        return Err(Error::Config("held-out split left no training items".into()));
    }
    let report = train_model(&mut model, &train_items, &heldout, &cfg.schedule()?, &tc, &root.child_str("train"), |_, _| {})?;
    write(out, &encode_model(&model))?;

    for e in &report.evals {
        print_json(json!({"step": e.step, "heldout_nelbo": e.nelbo.mean, "mc_stderr": e.nelbo.stderr}));
    }
    print_json(json!({
        "steps_done": report.steps_done,
        "train_items": train_items.len(),
        "heldout_items": heldout.len(),
        "final_batch_loss": report.losses.last(),
        "aborted": report.aborted,
    }));
    match report.aborted {
        Some(msg) => Err(Error::Numeric(format!("training stopped early ({msg}); last good checkpoint written"))),
        None => Ok(()),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn sample(
    ctx: &Context,
    args: &DenoiserArgs,
    guidance: &GuidanceArgs,
    out: &Path,
    steps: Option<usize>,
    trace: Option<&Path>,
    record_every: usize,
    packed: bool,
) -> Result<()> {
    let loaded = load_denoiser(ctx, args)?;
    let den = loaded.as_dyn();
    let sc = sampler_config(ctx, den, guidance, steps.unwrap_or(ctx.cfg.grid.steps), &ctx.cfg.guidance)?;
    let grid = match trace {
        None => run_sampler(den, &sc, None)?,
        Some(dir) => {
            let tr = trace_sample(den, &sc, None, record_every)?;
            fs::create_dir_all(dir)?;
            for s in tr.snapshots.iter().chain([&tr.final_snapshot]) {
                write(&dir.join(format!("step-{:05}.dvxp", s.step)), &encode_field(&s.field))?;
            }
            tr.grid
        }
    };
    write_grid(out, &grid, packed)
}

fn parse_half_space(spec: &[String]) -> Result<(usize, Side)> {
    let axis = spec[0]
        .parse::<usize>()
        .map_err(|_| Error::Config(format!("half-space axis {:?} is not a number", spec[0])))?;
    let side = match spec[1].as_str() {
        "low" => Side::Low,
        "high" => Side::High,
        other => return Err(Error::Config(format!("half-space side {other:?} is not low or high"))),
    };
    Ok((axis, side))
}

#[allow(clippy::too_many_arguments)]
pub fn inpaint(
    ctx: &Context,
    args: &DenoiserArgs,
    guidance: &GuidanceArgs,
    source_path: &Path,
    mask: Option<&Path>,
    half_space: Option<&[String]>,
    out: &Path,
    steps: Option<usize>,
    packed: bool,
) -> Result<()> {
    let loaded = load_denoiser(ctx, args)?;
    let den = loaded.as_dyn();
    let source = read_grid(source_path)?;
    let clamp = match (mask, half_space) {
        (Some(p), _) => {
            let (shape, bits) = decode_mask(&read(p)?).map_err(|e| e.context(&p.display().to_string()))?;
            if &shape != source.shape() {
                return Err(Error::Shape("mask shape differs from the source grid".into()));
            }
            ClampSpec::from_source(&source, bits)?
        }
        (None, Some(spec)) => {
            let (axis, side) = parse_half_space(spec)?;
            half_space_clamp(&source, axis, side)?
        }
        (None, None) => return Err(Error::Config("inpaint needs --mask or --half-space".into())),
    };
    let steps = steps.unwrap_or(ctx.cfg.grid.inpaint_steps);
    let mut sc = sampler_config(ctx, den, guidance, steps, &ctx.cfg.sampler.inpaint_guidance)?;
    let init = inpaint_init(&source, &clamp, &sc.prior, ctx.seed)?;
    sc.clamp = Some(clamp);
    let grid = run_sampler(den, &sc, Some(init))?;
    write_grid(out, &grid, packed)
}

pub fn score(
    ctx: &Context,
    args: &DenoiserArgs,
    manifest_path: &Path,
    out: Option<&Path>,
    per_voxel: Option<&Path>,
) -> Result<()> {
    let loaded = load_denoiser(ctx, args)?;
    let (_, items) = load_manifest(manifest_path)?;
    let ranked = rank_dataset(
        &items,
        loaded.as_dyn(),
        &ctx.cfg.schedule()?,
        &ctx.cfg.uncertainty,
        &Stream::new(ctx.seed).child_str("score"),
    )?;
    let mut csv = String::from("id,gamma,n_active,t_eval,rho\n");
    for (id, r) in &ranked {
        csv.push_str(&format!("{id},{},{},{},{}\n", r.gamma, r.n_active, r.t_eval, r.rho));
    }
    match out {
        Some(p) => write(p, csv.as_bytes())?,
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    if let Some(dir) = per_voxel {
        fs::create_dir_all(dir)?;
        let shape = items[0].grid.shape().clone();
        for (id, r) in &ranked {
            let field = ProbField::new(shape.clone(), 1, r.entropies.clone())?;
            write(&dir.join(format!("{id}.dvxp")), &encode_field(&field))?;
        }
    }
    Ok(())
}

pub fn nll(ctx: &Context, args: &DenoiserArgs, manifest_path: &Path, n_mc: Option<usize>) -> Result<()> {
    let loaded = load_denoiser(ctx, args)?;
    let (_, items) = load_manifest(manifest_path)?;
    let n_mc = n_mc.unwrap_or(ctx.cfg.nll.n_mc);
    let est = eval_nll(
        &items,
        loaded.as_dyn(),
        &ctx.cfg.schedule()?,
        n_mc,
        &Stream::new(ctx.seed).child_str("nll"),
    )?;
    print_json(json!({"mean_nll_nats": est.mean, "mc_stderr": est.stderr, "n_mc": est.n_mc}));
    Ok(())
}

pub fn bsp_mask(ctx: &Context, dims: &[usize], scales: Option<Vec<usize>>, tb: Option<f64>, out: &Path) -> Result<()> {
    let shape = GridShape::new(dims)?;
    let mut bc = ctx.cfg.bsp.clone();
    if let Some(s) = scales {
        bc.scales = s;
    }
    if let Some(t) = tb {
        bc.target_fraction = t;
    }
    let mask = generate_block_mask(&shape, &bc, &Stream::new(ctx.seed))?;
    write(out, &encode_mask(&shape, &mask.cells)?)?;
    print_json(json!({
        "target_fraction": bc.target_fraction,
        "realized_fraction": mask.realized_fraction(),
        "n_blocks_per_scale": mask.blocks_per_scale,
        "union_bound": mask.union_bound,
    }));
    Ok(())
}

fn read_voxels(path: &Path) -> Result<SparseVoxels> {
    SparseVoxels::from_grid(&read_grid(path)?).map_err(|e| e.context(&path.display().to_string()))
}

pub fn align(generated: &Path, reference: &Path) -> Result<()> {
    let a = best_pose_align(&read_voxels(generated)?, &read_voxels(reference)?)?;
    print_json(json!({"pose_id": a.pose_id, "chamfer": a.chamfer}));
    Ok(())
}

pub fn chamfer(a: &Path, b: &Path) -> Result<()> {
    let c = voxel_chamfer(&read_voxels(a)?, &read_voxels(b)?)?;
    print_json(json!({ "chamfer": c }));
    Ok(())
}

pub fn synth(ctx: &Context, classes: &[String], n: usize, count: usize, out: &Path) -> Result<()> {
    let classes = classes.iter().map(|c| ShapeClass::parse(c)).collect::<Result<Vec<_>>>()?;
    let spec = SynthSpec {
        classes: classes.clone(),
        n,
        count_per_class: count,
        seed: ctx.seed,
    };
    let items = make_synthetic_dataset(&spec)?;
    let names: Vec<String> = classes.iter().map(|c| c.name().to_string()).collect();
    let path = write_dataset(out, &items, &names)?;
    print_json(json!({"manifest": path.display().to_string(), "items": items.len()}));
    Ok(())
}
