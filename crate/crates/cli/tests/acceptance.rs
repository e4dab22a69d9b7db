//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p voxdiff-cli --test acceptance`. Pass criterion
//! numbers after `--` to run a subset.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use voxdiff::bsp::{generate_block_mask, BlockMaskConfig, FinetuneCorruption};
use voxdiff::denoiser::train::{split_heldout, train, TrainConfig};
use voxdiff::denoiser::{process_logits, TrainSample};
use voxdiff::diffusion::{ancestral_step, corrupt, posterior_row};
use voxdiff::io::{encode_grid, encode_mask, write_dataset, EngineConfig};
use voxdiff::loss::{f_raw, f_rb};
use voxdiff::sampler::{half_space_clamp, inpaint_init, sample, Side};
use voxdiff::uncertainty::{gamma_score, rank_dataset, GammaParams};
use voxdiff::voxel::synth::{box_grid, boundary_variants, checkerboard_grid, make_synthetic_dataset, ShapeClass, SynthSpec};
use voxdiff::voxel::{best_pose_align, voxel_chamfer};
use voxdiff::{
    ClampSpec, DatasetItem, Denoiser, GridKind, GridShape, GuidanceSchedule, MlpArch, MlpDenoiser, OracleDenoiser,
    OracleMode, Pose24, Prior, ProbField, Result, SamplerConfig, Schedule, SparseVoxels, Stream, TimeGrid, TokenGrid,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// State shared by the criteria that need a trained model.
#[derive(Default)]
struct Shared {
    trained: Option<Trained>,
}

struct Trained {
    model: MlpDenoiser,
    items: Vec<DatasetItem>,
    train_items: Vec<DatasetItem>,
}

fn line(tokens: &[u8]) -> TokenGrid {
    TokenGrid::new(GridShape::new(&[tokens.len()]).unwrap(), 2, tokens.to_vec()).unwrap()
}

fn filled(len: usize, k: usize, v: u8) -> TokenGrid {
    TokenGrid::filled(GridShape::new(&[len]).unwrap(), k, v).unwrap()
}

fn counts(g: &TokenGrid, k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    g.tokens().iter().for_each(|&t| c[t as usize] += 1);
    c
}

fn forward_probs(x0: usize, k: usize, a: f64) -> Vec<f64> {
    (0..k).map(|j| if j == x0 { a } else { 0.0 } + (1.0 - a) / k as f64).collect()
}

fn alpha_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let a: f64 = rng.random_range(0.01..0.99);
    let b: f64 = rng.random_range(0.01..0.99);
    (a.min(b), a.max(b))
}

// 1
fn forward_kernel() -> Outcome {
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for c in 0..20u64 {
        let k = rng.random_range(2..=3usize);
        let x0 = rng.random_range(0..k);
        let a: f64 = rng.random_range(0.0..1.0);
        let g = corrupt(&filled(n, k, x0 as u8), &Prior::uniform(k), a, &Stream::new(c)).unwrap();
        for (&cnt, p) in counts(&g, k).iter().zip(forward_probs(x0, k, a)) {
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            let z = (cnt as f64 - n as f64 * p).abs() / sd.max(1e-300);
            worst = worst.max(z);
        }
    }
    outcome(worst <= 3.0, format!("max |z| = {worst:.2} (limit 3)"))
}

/// Two-state enumeration of q(x_s | x_t, x_0).
fn bayes_posterior(xt: usize, x0: usize, at: f64, as_: f64) -> [f64; 2] {
    let r = at / as_;
    let step = |from: usize, to: usize| r * (from == to) as u8 as f64 + (1.0 - r) / 2.0;
    let prior_s = |xs: usize| as_ * (xs == x0) as u8 as f64 + (1.0 - as_) / 2.0;
    let joint: Vec<f64> = (0..2).map(|xs| step(xs, xt) * prior_s(xs)).collect();
    let z: f64 = joint.iter().sum();
    [joint[0] / z, joint[1] / z]
}

// 2
fn posterior_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let prior = Prior::uniform(2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (at, as_) = alpha_pair(&mut rng);
        for xt in 0..2 {
            for x0 in 0..2 {
                let mut out = [0.0; 2];
                let mut row = [0.0; 2];
                row[x0] = 1.0;
                posterior_row(xt, &row, &prior, at, as_, &mut out).unwrap();
                let want = bayes_posterior(xt, x0, at, as_);
                worst = worst.max((out[0] - want[0]).abs()).max((out[1] - want[1]).abs());
            }
        }
    }
    outcome(worst <= 1e-12, format!("max abs error {worst:.2e} (limit 1e-12)"))
}

// 3
fn chain_consistency() -> Outcome {
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for c in 0..20u64 {
        let k = rng.random_range(2..=3usize);
        let x0 = rng.random_range(0..k) as u8;
        let (at, as_) = alpha_pair(&mut rng);
        let prior = Prior::uniform(k);
        let clean = filled(n, k, x0);
        let xt = corrupt(&clean, &prior, at, &Stream::new(c).child(0)).unwrap();
        let xs = ancestral_step(&xt, &ProbField::one_hot(&clean, k), &prior, at, as_, &Stream::new(c).child(1)).unwrap();
        let emp = counts(&xs, k);
        let tv: f64 = emp
            .iter()
            .zip(forward_probs(x0 as usize, k, as_))
            .map(|(&e, p)| (e as f64 / n as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        worst = worst.max(tv);
    }
    outcome(worst < 0.01, format!("max TV {worst:.4} (limit 0.01)"))
}

fn four_item_oracle(sched: Schedule) -> OracleDenoiser {
    let items = vec![
        DatasetItem::new("a", line(&[1, 0, 1])),
        DatasetItem::new("b", line(&[1, 1, 0])).with_weight(2.0),
        DatasetItem::new("c", line(&[0, 0, 0])),
        DatasetItem::new("d", line(&[0, 1, 1])).with_weight(0.5),
    ];
    OracleDenoiser::new(items, Prior::uniform(2), sched).unwrap()
}

fn reverse_row(xt: usize, p: &[f64], at: f64, as_: f64) -> [f64; 2] {
    let r = at / as_;
    let mut out = [0.0; 2];
    for (j, o) in out.iter_mut().enumerate() {
        *o = (r * (j == xt) as u8 as f64 + (1.0 - r) / 2.0) * (as_ * p[j] + (1.0 - as_) / 2.0);
    }
    let z = out[0] + out[1];
    [out[0] / z, out[1] / z]
}

/// Exact law of the sampler output over all `2^l` states.
fn propagate(den: &dyn Denoiser, sched: &Schedule, grid: &TimeGrid, l: usize) -> Vec<f64> {
    let n = 1usize << l;
    let mut dist = vec![1.0 / n as f64; n];
    let times = grid.values();
    let steps = grid.steps();
    for k in 0..steps {
        let (at, as_) = (sched.alpha(times[k]).unwrap(), sched.alpha(times[k + 1]).unwrap());
        let mut next = vec![0.0; n];
        for (x, &px) in dist.iter().enumerate() {
            if px == 0.0 {
                continue;
            }
            let xt: Vec<u8> = (0..l).map(|i| ((x >> i) & 1) as u8).collect();
            let pred = den.predict(&line(&xt), times[k], None).unwrap();
            let rows: Vec<[f64; 2]> = (0..l).map(|i| reverse_row(xt[i] as usize, pred.row(i), at, as_)).collect();
            if k + 1 < steps {
                for (y, nv) in next.iter_mut().enumerate() {
                    *nv += px * (0..l).map(|i| rows[i][(y >> i) & 1]).product::<f64>();
                }
            } else {
                let y: usize = (0..l).map(|i| ((rows[i][1] > rows[i][0]) as usize) << i).sum();
                next[y] += px;
            }
        }
        dist = next;
    }
    dist
}

// 4
fn sampler_exactness() -> Outcome {
    let n = 100_000u64;
    let mut details = Vec::new();
    let mut pass = true;
    for (name, sched, kind) in [("linear", Schedule::linear(), GridKind::Linear), ("cosine", Schedule::cosine(), GridKind::Cosine)] {
        let den = four_item_oracle(sched);
        let grid = TimeGrid::new(64, kind, 1e-3).unwrap();
        let exact = propagate(&den, &sched, &grid, 3);
        let cfg = SamplerConfig::new(sched, grid, Prior::uniform(2), 0);
        let codes: Vec<usize> = (0..n)
            .into_par_iter()
            .map(|seed| {
                let mut c = cfg.clone();
                c.seed = seed;
                let x = sample(&den, &c, None).unwrap();
                x.tokens().iter().enumerate().map(|(i, &b)| (b as usize) << i).sum()
            })
            .collect();
        let mut emp = vec![0.0; 8];
        codes.iter().for_each(|&c| emp[c] += 1.0 / n as f64);
        let tv: f64 = exact.iter().zip(&emp).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        pass &= tv < 0.02;
        details.push(format!("{name} TV {tv:.4}"));
    }
    outcome(pass, format!("{} (limit 0.02)", details.join(", ")))
}

// 5
fn rao_blackwell() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let sched = Schedule::linear();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let t: f64 = rng.random_range(0.001..0.999);
        let (a, ap) = (sched.alpha(t).unwrap(), sched.alpha_prime(t).unwrap());
        let x0 = rng.random_range(0..2usize);
        // the prediction may depend on the observed token
        let rows: Vec<[f64; 2]> = (0..2)
            .map(|_| {
                let p: f64 = rng.random_range(0.01..0.99);
                [p, 1.0 - p]
            })
            .collect();
        let (mut raw, mut rb) = (0.0, 0.0);
        for (xt, row) in rows.iter().enumerate() {
            let q = forward_probs(x0, 2, a)[xt];
            raw += q * f_raw(xt, x0, row, a, ap, 2).unwrap();
            rb += q * f_rb(xt, x0, row, a, ap, 2).unwrap();
        }
        worst = worst.max((raw - rb).abs());
    }
    outcome(worst <= 1e-9, format!("max |E f_raw - E f_rb| = {worst:.2e} (limit 1e-9)"))
}

// 6
fn gradient_check() -> Outcome {
    let sched = Schedule::linear();
    let arch = MlpArch::new(&GridShape::new(&[4]).unwrap(), 2, 5, 2);
    let mut m = MlpDenoiser::new(arch, &Stream::new(3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    m.params_mut().iter_mut().for_each(|p| *p += rng.random_range(-0.3..0.3));
    let s = |x0: &[u8], xt: &[u8], t: f64, cond: Option<u32>| TrainSample {
        x0: line(x0),
        x_t: line(xt),
        t,
        cond,
    };
    let batch = vec![
        s(&[1, 0, 1, 1], &[1, 1, 0, 1], 0.35, Some(1)),
        s(&[0, 0, 1, 0], &[0, 1, 1, 0], 0.8, None),
        s(&[1, 1, 1, 0], &[0, 1, 1, 0], 0.05, Some(0)),
    ];
    let g = m.loss_and_grad(&batch, &sched).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for j in 0..m.n_params() {
        let orig = m.params()[j];
        m.params_mut()[j] = orig + h;
        let up = m.batch_loss(&batch, &sched).unwrap();
        m.params_mut()[j] = orig - h;
        let down = m.batch_loss(&batch, &sched).unwrap();
        m.params_mut()[j] = orig;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((g.grad[j] - fd).abs() / g.grad[j].abs().max(fd.abs()).max(1e-6));
    }
    outcome(worst < 1e-4, format!("{} params, max relative error {worst:.2e} (limit 1e-4)", m.n_params()))
}

const N: usize = 8;
const CLASSES: [ShapeClass; 2] = [ShapeClass::Sphere, ShapeClass::Checkerboard];

fn train_base(shared: &mut Shared) -> Result<(f64, f64)> {
    let items = make_synthetic_dataset(&SynthSpec {
        classes: CLASSES.to_vec(),
        n: N,
        count_per_class: 200,
        seed: 7,
    })?;
    let (train_items, held) = split_heldout(&items, 0.1, &Stream::new(7).child_str("split"));
    let mut arch = MlpArch::new(&GridShape::cube(N, 3)?, 2, 256, CLASSES.len());
    arch.tau = 5.0;
    let mut model = MlpDenoiser::new(arch, &Stream::new(7).child_str("init"))?;
    let cfg = TrainConfig {
        steps: 2000,
        eval_mc: 8,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &train_items, &held, &Schedule::linear(), &cfg, &Stream::new(7), |_, _| {})?;
    if let Some(msg) = report.aborted {
        return Err(voxdiff::Error::Numeric(msg));
    }
    let first = report.evals.first().unwrap().nelbo.mean;
    let last = report.evals.last().unwrap().nelbo.mean;
    shared.trained = Some(Trained {
        model,
        items,
        train_items,
    });
    Ok((first, last))
}

fn ensure_trained(shared: &mut Shared) {
    if shared.trained.is_none() {
        train_base(shared).expect("training failed");
    }
}

fn gen_config(steps: usize, seed: u64, cond: Option<u32>, w: Option<f64>) -> SamplerConfig {
    let mut c = SamplerConfig::new(Schedule::linear(), TimeGrid::new(steps, GridKind::Linear, 1e-3).unwrap(), Prior::uniform(2), seed);
    c.cond = cond;
    c.guidance = w.map(GuidanceSchedule::constant);
    c
}

fn draw(model: &MlpDenoiser, n: usize, base_seed: u64, cond: Option<u32>, w: Option<f64>) -> Vec<TokenGrid> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| sample(model, &gen_config(256, base_seed + i, cond, w), None).unwrap())
        .collect()
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
fn ks_test(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut xs: Vec<f64> = a.iter().chain(b).copied().collect();
    xs.sort_by(f64::total_cmp);
    let cdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
    let d = xs.iter().map(|&x| (cdf(a, x) - cdf(b, x)).abs()).fold(0.0, f64::max);
    let ne = (a.len() * b.len()) as f64 / (a.len() + b.len()) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    let mut p = 0.0;
    for j in 1..=100 {
        let term = 2.0 * (-1f64).powi(j - 1) * (-2.0 * (j as f64 * lambda).powi(2)).exp();
        p += term;
    }
    (d, p.clamp(0.0, 1.0))
}

fn occupancy(gs: &[TokenGrid]) -> Vec<f64> {
    gs.iter().map(|g| g.count(1) as f64).collect()
}

// 7
fn desk_training(shared: &mut Shared) -> Outcome {
    let (first, last) = match train_base(shared) {
        Ok(v) => v,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let t = shared.trained.as_ref().unwrap();
    let drop = 1.0 - last / first;
    let mut pass = drop >= 0.2;
    let mut detail = format!("held-out NELBO {first:.4} -> {last:.4} ({:.1}% drop, need >= 20%)", 100.0 * drop);
    let n_samples = 400;
    let uncond = occupancy(&draw(&t.model, n_samples, 70_000, None, None));
    for c in 0..CLASSES.len() as u32 {
        let data: Vec<f64> = t.items.iter().filter(|i| i.class == Some(c)).map(|i| i.grid.count(1) as f64).collect();
        let cond = occupancy(&draw(&t.model, n_samples, 71_000 + 1000 * c as u64, Some(c), Some(0.0)));
        let (d_cond, _) = ks_test(&cond, &data);
        let (d_uncond, _) = ks_test(&uncond, &data);
        let (_, p_shift) = ks_test(&cond, &uncond);
        pass &= d_cond < d_uncond && p_shift < 0.01;
        detail += &format!(
            "; {}: KS cond {d_cond:.3} vs uncond {d_uncond:.3}, cond/uncond p {p_shift:.1e}",
            CLASSES[c as usize].name()
        );
    }
    outcome(pass, detail)
}

fn hamming(a: &TokenGrid, b: &TokenGrid) -> usize {
    a.tokens().iter().zip(b.tokens()).filter(|(x, y)| x != y).count()
}

fn nearest_class(g: &TokenGrid, items: &[DatasetItem]) -> Option<u32> {
    items.iter().min_by_key(|i| hamming(g, &i.grid)).and_then(|i| i.class)
}

// 8
fn cfg_behavior(shared: &mut Shared) -> Outcome {
    ensure_trained(shared);
    let t = shared.trained.as_ref().unwrap();
    let per_class = 24;
    let mut means = Vec::new();
    for w in [-1.0, 0.0, 1.0] {
        let mut fracs = Vec::new();
        for seed in 0..3u64 {
            let mut hits = 0;
            for c in 0..CLASSES.len() as u32 {
                let base = 80_000 + 10_000 * seed + 1000 * c as u64;
                let gs = draw(&t.model, per_class, base, Some(c), Some(w));
                hits += gs.iter().filter(|g| nearest_class(g, &t.items) == Some(c)).count();
            }
            fracs.push(hits as f64 / (per_class * CLASSES.len()) as f64);
        }
        means.push(fracs.iter().sum::<f64>() / fracs.len() as f64);
    }
    let pass = means[0] <= means[1] && means[1] <= means[2] && means[0] < means[2];
    outcome(pass, format!("class-match fraction at w=-1,0,1: {:.3}, {:.3}, {:.3}", means[0], means[1], means[2]))
}

fn clamp_holds(out: &TokenGrid, clamp: &ClampSpec) -> bool {
    out.tokens().iter().zip(clamp.mask()).zip(clamp.targets()).all(|((&o, &m), &c)| !m || o == c)
}

// 9
fn inpainting_invariant() -> Outcome {
    let mut checked = 0;
    let mut broken = 0;
    for n in [4usize, 8] {
        let shape = GridShape::cube(n, 3).unwrap();
        let model = MlpDenoiser::new(MlpArch::new(&shape, 2, 16, 0), &Stream::new(n as u64)).unwrap();
        let prior = Prior::uniform(2);
        let mut clamps = Vec::new();
        let source = prior.sample_grid(&shape, &Stream::new(900 + n as u64));
        for axis in 0..3 {
            for side in [Side::Low, Side::High] {
                clamps.push(half_space_clamp(&source, axis, side).unwrap());
            }
        }
        for s in 0..10u64 {
            let bc = BlockMaskConfig::new(vec![1, 2, n / 2], 0.5);
            let m = generate_block_mask(&shape, &bc, &Stream::new(s)).unwrap();
            clamps.push(ClampSpec::from_source(&source, m.cells).unwrap());
        }
        for (j, clamp) in clamps.into_iter().enumerate() {
            for flags in [(true, true, true), (false, false, true), (false, true, true)] {
                let mut cfg = gen_config(32, j as u64, None, None);
                (cfg.apply_step1, cfg.apply_step2, cfg.apply_step3) = flags;
                let init = inpaint_init(&source, &clamp, &prior, j as u64).unwrap();
                cfg.clamp = Some(clamp.clone());
                let out = sample(&model, &cfg, Some(init)).unwrap();
                checked += 1;
                broken += !clamp_holds(&out, &clamp) as usize;
            }
        }
    }
    outcome(broken == 0, format!("{checked} inpainting runs, {broken} with a changed clamped token"))
}

fn free_half(g: &TokenGrid, clamp: &ClampSpec) -> SparseVoxels {
    let shape = g.shape();
    let pos = (0..g.len())
        .filter(|&i| !clamp.mask()[i] && g.tokens()[i] == 1)
        .map(|i| {
            let c = shape.coord(i);
            [c[0] as u32, c[1] as u32, c[2] as u32]
        })
        .collect();
    SparseVoxels::new(shape.dims()[0], pos).unwrap()
}

/// Chamfer of the free halves; one empty side scores the maximal squared distance.
fn half_chamfer(a: &SparseVoxels, b: &SparseVoxels) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => 0.0,
        (false, false) => voxel_chamfer(a, b).unwrap(),
        _ => 3.0,
    }
}

fn inpaint_score(model: &MlpDenoiser, items: &[DatasetItem], flags: (bool, bool, bool)) -> f64 {
    let prior = Prior::uniform(2);
    let scores: Vec<f64> = items
        .par_iter()
        .enumerate()
        .flat_map_iter(|(j, item)| {
            let side = if j % 2 == 0 { Side::Low } else { Side::High };
            let clamp = half_space_clamp(&item.grid, j % 3, side).unwrap();
            let truth = free_half(&item.grid, &clamp);
            (0..3u64).map(move |seed| {
                let s = 1000 * j as u64 + seed;
                let mut cfg = gen_config(128, s, item.class, Some(0.45));
                (cfg.apply_step1, cfg.apply_step2, cfg.apply_step3) = flags;
                let init = inpaint_init(&item.grid, &clamp, &prior, s).unwrap();
                cfg.clamp = Some(clamp.clone());
                let out = sample(model, &cfg, Some(init)).unwrap();
                half_chamfer(&free_half(&out, &clamp), &truth)
            })
        })
        .collect();
    scores.iter().sum::<f64>() / scores.len() as f64
}

// 10
fn bsp_efficacy(shared: &mut Shared) -> Outcome {
    ensure_trained(shared);
    let t = shared.trained.as_ref().unwrap();
    let mut ft = t.model.clone();
    ft.set_time_conditioned(false);
    let cfg = TrainConfig {
        steps: 1000,
        finetune: Some(FinetuneCorruption::new(vec![2, 4], TrainConfig::default().time_dist)),
        ..TrainConfig::default()
    };
    if let Err(e) = train(&mut ft, &t.train_items, &[], &Schedule::linear(), &cfg, &Stream::new(10), |_, _| {}) {
        return outcome(false, format!("fine-tuning failed: {e}"));
    }
    let mut eval: Vec<DatasetItem> = Vec::new();
    for c in 0..CLASSES.len() as u32 {
        eval.extend(t.items.iter().filter(|i| i.class == Some(c)).take(25).cloned());
    }
    let tuned = inpaint_score(&ft, &eval, (true, true, true));
    let base = inpaint_score(&t.model, &eval, (false, true, false));
    outcome(
        tuned <= base,
        format!("free-half chamfer over {} items x 3 seeds: fine-tuned {tuned:.4}, baseline {base:.4}", eval.len()),
    )
}

/// Returns fixed rows regardless of input.
struct Fixed(ProbField);

impl Denoiser for Fixed {
    fn shape(&self) -> &GridShape {
        self.0.shape()
    }
    fn classes(&self) -> usize {
        self.0.k()
    }
    fn n_conditions(&self) -> usize {
        0
    }
    fn time_conditioned(&self) -> bool {
        false
    }
    fn predict(&self, _: &TokenGrid, _: f64, _: Option<u32>) -> Result<ProbField> {
        Ok(self.0.clone())
    }
}

// 11
fn entropy_constants() -> Outcome {
    let mut worst: f64 = 0.0;
    for k in [2usize, 3, 4, 5] {
        let den = Fixed(ProbField::uniform(GridShape::new(&[16]).unwrap(), k));
        let r = gamma_score(&filled(16, k, 0), &den, &Schedule::linear(), &GammaParams::default(), &Stream::new(11)).unwrap();
        worst = worst.max((r.gamma - (k as f64).ln().ln()).abs());
    }
    let d = GammaParams::default();
    let c = EngineConfig::default().uncertainty;
    let wired = d.t_eval == 1e-3 && d.rho == 0.4 && c == d;
    outcome(
        worst <= 1e-9 && wired,
        format!("max |gamma - ln ln K| = {worst:.1e}; defaults t_eval={}, rho={}", c.t_eval, c.rho),
    )
}

// 12
fn uncertainty_ordering() -> Outcome {
    let n = 6;
    let mut bases: Vec<(String, TokenGrid, bool)> = Vec::new();
    for (cell, phase) in [(1, 0), (1, 1)] {
        bases.push((format!("checker-{cell}-{phase}"), checkerboard_grid(n, cell, [phase, 0, 0]), true));
    }
    for axis in 0..3 {
        for off in 0..=n / 2 {
            let mut lo = [0; 3];
            let mut hi = [n; 3];
            lo[axis] = off;
            hi[axis] = off + n / 2;
            bases.push((format!("block-{axis}-{off}"), box_grid(n, lo, hi), false));
        }
    }
    let occ: HashSet<usize> = bases.iter().map(|b| b.1.count(1)).collect();
    let mut items = Vec::new();
    for (id, g, _) in &bases {
        for (j, v) in boundary_variants(g).into_iter().enumerate() {
            items.push(DatasetItem::new(format!("{id}~{j}"), v));
        }
        items.push(DatasetItem::new(id.clone(), g.clone()));
    }
    let den = OracleDenoiser::new(items, Prior::uniform(2), Schedule::linear())
        .unwrap()
        .with_mode(OracleMode::LeaveOneOut);
    let base_items: Vec<DatasetItem> = bases.iter().map(|(id, g, _)| DatasetItem::new(id.clone(), g.clone())).collect();
    // a single draw can flip one token and collapse the posterior onto a variant
    let params = GammaParams {
        n_draws: 64,
        ..GammaParams::default()
    };
    let ranked = rank_dataset(&base_items, &den, &Schedule::linear(), &params, &Stream::new(12)).unwrap();
    let gamma: BTreeMap<&str, f64> = ranked.iter().map(|(id, r)| (id.as_str(), r.gamma)).collect();
    let (mut wins, mut pairs) = (0, 0);
    for (c, _, is_c) in &bases {
        for (b, _, is_b) in &bases {
            if *is_c && !*is_b {
                pairs += 1;
                wins += (gamma[c.as_str()] > gamma[b.as_str()]) as usize;
            }
        }
    }
    let frac = wins as f64 / pairs as f64;
    outcome(
        frac >= 0.95 && occ.len() == 1,
        format!("{wins}/{pairs} pairings ({:.1}%) with equal occupancy {:?}", 100.0 * frac, occ),
    )
}

// 13
fn logit_truncation() -> Outcome {
    let tau = 5.0;
    let mut ex = [10.0, -10.0];
    process_logits(&mut ex, 2, tau);
    let example = (ex[0] - 4.8201).abs() < 1e-3 && (ex[1] + 4.8201).abs() < 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(1313);
    let normal = Normal::new(0.0, 2.0 * tau).unwrap();
    let (mut bounded, mut kept) = (0, 0);
    let rows = 10_000;
    for _ in 0..rows {
        let k = rng.random_range(2..=5usize);
        let row: Vec<f64> = (0..k).map(|_| normal.sample(&mut rng)).collect();
        let mut out = row.clone();
        process_logits(&mut out, k, tau);
        bounded += out.iter().all(|v| v.abs() < tau) as usize;
        let am = |r: &[f64]| (0..r.len()).fold(0, |b, i| if r[i] > r[b] { i } else { b });
        kept += (am(&row) == am(&out)) as usize;
    }
    outcome(
        example && bounded == rows && kept == rows,
        format!("example [{:.4}, {:.4}]; {bounded}/{rows} bounded, {kept}/{rows} argmax kept", ex[0], ex[1]),
    )
}

// 14
fn bsp_mask_statistics() -> Outcome {
    let shape = GridShape::cube(16, 3).unwrap();
    let scales = vec![2usize, 4, 8];
    let mut means = Vec::new();
    let mut violations = 0;
    for tb in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let cfg = BlockMaskConfig::new(scales.clone(), tb);
        let fr: Vec<(f64, bool)> = (0..10_000u64)
            .into_par_iter()
            .map(|s| {
                let m = generate_block_mask(&shape, &cfg, &Stream::new(s)).unwrap();
                let covered: usize = m.blocks_per_scale.iter().zip(&scales).map(|(&c, &l)| c * l.pow(3)).sum();
                let ok = m.count() <= covered && m.realized_fraction() <= m.union_bound;
                (m.realized_fraction(), ok)
            })
            .collect();
        violations += fr.iter().filter(|f| !f.1).count();
        means.push(fr.iter().map(|f| f.0).sum::<f64>() / fr.len() as f64);
    }
    let monotone = means.windows(2).all(|w| w[0] <= w[1]);
    let shown: Vec<String> = means.iter().map(|m| format!("{m:.4}")).collect();
    outcome(
        violations == 0 && monotone,
        format!("mean realized fraction [{}]; {violations} union-bound violations", shown.join(", ")),
    )
}

// 15
fn pose_alignment() -> Outcome {
    let mut failures = Vec::new();
    for n in [8usize, 16] {
        let o = (n / 2 - 2) as u32;
        let shape = SparseVoxels::new(n, vec![[o, o, o], [o + 1, o, o], [o + 2, o, o], [o, o + 1, o], [o, o + 2, o + 1]]).unwrap();
        let images: HashSet<SparseVoxels> = Pose24::all().map(|p| shape.apply_pose(p)).collect();
        if images.len() != 24 {
            failures.push(format!("N={n}: shape has a nontrivial symmetry"));
        }
        for p in Pose24::all() {
            let a = best_pose_align(&shape.apply_pose(p), &shape).unwrap();
            if a.chamfer != 0.0 || a.pose_id != p.inverse().id() {
                failures.push(format!("N={n} pose {}: got {} at {}", p.id(), a.pose_id, a.chamfer));
            }
        }
    }
    outcome(failures.is_empty(), if failures.is_empty() { "48 rotations recovered exactly".into() } else { failures.join("; ") })
}

/// Run `args` with a thread count, returning stdout and the bytes of `outputs`.
fn cli_run(dir: &Path, args: &[String], threads: usize, outputs: &[&Path]) -> std::result::Result<Vec<Vec<u8>>, String> {
    for p in outputs {
        if p.is_dir() {
            fs::remove_dir_all(p).unwrap();
        } else if p.exists() {
            fs::remove_file(p).unwrap();
        }
    }
    let out = Command::new(env!("CARGO_BIN_EXE_voxdiff"))
        .env_remove("DVD_SEED")
        .current_dir(dir)
        .arg("--threads")
        .arg(threads.to_string())
        .arg("--seed")
        .arg("31")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    let mut blobs = vec![out.stdout];
    for p in outputs {
        if p.is_dir() {
            let mut names: Vec<_> = fs::read_dir(p).unwrap().map(|e| e.unwrap().path()).collect();
            names.sort();
            for f in names {
                blobs.push(f.file_name().unwrap().to_string_lossy().as_bytes().to_vec());
                blobs.push(fs::read(f).unwrap());
            }
        } else {
            blobs.push(fs::read(p).map_err(|e| format!("{}: {e}", p.display()))?);
        }
    }
    Ok(blobs)
}

// 16
fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |name: &str| d.join(name);
    let s = |name: &str| p(name).to_string_lossy().into_owned();

    // fixed inputs shared by every command
    let ds = d.join("data");
    let items = make_synthetic_dataset(&SynthSpec {
        classes: vec![ShapeClass::Box, ShapeClass::Checkerboard],
        n: 4,
        count_per_class: 4,
        seed: 1,
    })
    .unwrap();
    let manifest = write_dataset(&ds, &items, &["box".into(), "checkerboard".into()]).unwrap();
    let m = manifest.to_string_lossy().into_owned();
    fs::write(p("cfg.toml"), "[model]\nhidden = 8\n[train]\nbatch_size = 4\neval_every = 5\nheldout_fraction = 0.25\n[bsp]\nscales = [1, 2]\n").unwrap();
    let src = ds.join("checkerboard-0000.dvxg").to_string_lossy().into_owned();
    let other = ds.join("box-0001.dvxg").to_string_lossy().into_owned();
    let shape = GridShape::cube(4, 3).unwrap();
    let mask: Vec<bool> = (0..64).map(|i| i % 3 == 0).collect();
    fs::write(p("in.dvxm"), encode_mask(&shape, &mask).unwrap()).unwrap();
    fs::write(p("ref.dvxg"), encode_grid(&items[1].grid)).unwrap();
    let train_base = [
        "--config", "cfg.toml", "train", "--manifest", &m, "--out", "m.dvdm", "--steps", "12",
    ];
    let pre = cli_run(d, &train_base.map(String::from), 1, &[&p("m.dvdm")]);
    if let Err(e) = pre {
        return outcome(false, e);
    }
    fs::copy(p("m.dvdm"), p("model.dvdm")).unwrap();
    let model = s("model.dvdm");

    let commands: Vec<(&str, Vec<&str>, Vec<&str>)> = vec![
        ("synth", vec!["synth", "--classes", "sphere,l-shape", "--n", "6", "--count", "3", "--out", "syn"], vec!["syn"]),
        ("train", train_base.to_vec(), vec!["m.dvdm"]),
        (
            "train --bsp-finetune",
            vec!["--config", "cfg.toml", "train", "--manifest", &m, "--init", &model, "--bsp-finetune", "--steps", "6", "--no-time", "--out", "ft.dvdm"],
            vec!["ft.dvdm"],
        ),
        (
            "sample",
            vec!["sample", "--model", &model, "--class", "1", "--steps", "20", "--trace", "trace", "--record-every", "5", "--out", "s.dvxg"],
            vec!["s.dvxg", "trace"],
        ),
        ("sample --oracle", vec!["sample", "--oracle", &m, "--steps", "20", "--packed", "--out", "o.dvxb"], vec!["o.dvxb"]),
        (
            "inpaint --mask",
            vec!["inpaint", "--model", &model, "--source", &src, "--mask", "in.dvxm", "--steps", "16", "--class", "0", "--out", "i1.dvxg"],
            vec!["i1.dvxg"],
        ),
        (
            "inpaint --half-space",
            vec!["inpaint", "--oracle", &m, "--source", &src, "--half-space", "1", "high", "--steps", "16", "--out", "i2.dvxg"],
            vec!["i2.dvxg"],
        ),
        (
            "score",
            vec!["score", "--oracle", &m, "--oracle-mode", "leave-one-out", "--manifest", &m, "--out", "g.csv", "--per-voxel", "pv"],
            vec!["g.csv", "pv"],
        ),
        ("score --model", vec!["score", "--model", &model, "--manifest", &m], vec![]),
        ("nll", vec!["nll", "--model", &model, "--manifest", &m, "--n-mc", "3"], vec![]),
        ("nll --oracle", vec!["nll", "--oracle", &m, "--manifest", &m, "--n-mc", "2"], vec![]),
        ("bsp-mask", vec!["bsp-mask", "--shape", "16,16,16", "--scales", "2,4,8", "--tb", "0.6", "--out", "b.dvxm"], vec!["b.dvxm"]),
        ("align", vec!["align", "--generated", &src, "--reference", "ref.dvxg"], vec![]),
        ("chamfer", vec!["chamfer", "--a", &src, "--b", &other], vec![]),
        ("config", vec!["--config", "cfg.toml", "config"], vec![]),
    ];
    let mut bad = Vec::new();
    for (name, args, outs) in &commands {
        let args: Vec<String> = args.iter().map(|a| a.to_string()).collect();
        let outs: Vec<_> = outs.iter().map(|o| p(o)).collect();
        let refs: Vec<&Path> = outs.iter().map(|o| o.as_path()).collect();
        match (cli_run(d, &args, 1, &refs), cli_run(d, &args, 4, &refs), cli_run(d, &args, 2, &refs)) {
            (Ok(a), Ok(b), Ok(c)) if a == b && b == c => {}
            (Ok(_), Ok(_), Ok(_)) => bad.push(format!("{name}: outputs differ")),
            (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => bad.push(format!("{name}: {e}")),
        }
    }
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} commands byte-identical at 1, 2 and 4 threads", commands.len())
        } else {
            bad.join("; ")
        },
    )
}

type Check = fn(&mut Shared) -> Outcome;

fn main() {
    let only: HashSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: Vec<(u32, &str, Duration, Check)> = vec![
        (1, "forward-kernel fidelity", Duration::from_secs(10), |_| forward_kernel()),
        (2, "posterior exactness", Duration::from_secs(1), |_| posterior_exactness()),
        (3, "chain consistency", Duration::from_secs(30), |_| chain_consistency()),
        (4, "sampler exactness", Duration::from_secs(120), |_| sampler_exactness()),
        (5, "Rao-Blackwell agreement", Duration::from_secs(5), |_| rao_blackwell()),
        (6, "gradient correctness", Duration::from_secs(10), |_| gradient_check()),
        (7, "desk-scale training", Duration::from_secs(600), desk_training),
        (8, "guidance behavior", Duration::from_secs(300), cfg_behavior),
        (9, "inpainting hard invariant", Duration::from_secs(60), |_| inpainting_invariant()),
        (10, "block fine-tuning efficacy", Duration::from_secs(900), bsp_efficacy),
        (11, "entropy constants", Duration::from_secs(1), |_| entropy_constants()),
        (12, "uncertainty ordering", Duration::from_secs(120), |_| uncertainty_ordering()),
        (13, "logit truncation", Duration::from_secs(1), |_| logit_truncation()),
        (14, "block mask statistics", Duration::from_secs(60), |_| bsp_mask_statistics()),
        (15, "pose alignment", Duration::from_secs(10), |_| pose_alignment()),
        (16, "CLI determinism", Duration::from_secs(600), |_| determinism()),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for (id, name, budget, check) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| check(&mut shared)))
            .unwrap_or_else(|_| outcome(false, "panicked"));
        let took = start.elapsed();
        let in_time = took <= budget;
        let pass = result.pass && in_time;
        failed += !pass as usize;
        let timing = if in_time {
            format!("{:.1}s", took.as_secs_f64())
        } else {
            format!("{:.1}s, over the {}s budget", took.as_secs_f64(), budget.as_secs())
        };
        println!(
            "{} criterion {id:>2} {name}: {} [{timing}]",
            if pass { "PASS" } else { "FAIL" },
            result.detail
        );
    }
    println!("acceptance: {} failed", failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
