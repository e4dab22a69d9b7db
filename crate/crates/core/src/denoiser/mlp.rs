//! Two-layer tanh MLP over a one-hot encoding of the whole grid.
//!
//! Input: one-hot tokens, sinusoidal time features and a learned condition
//! embedding (one extra row is the null label). Output head per token and
//! category reads the shared hidden state, plus a skip term `R[k, x_t^i]`
//! shared by all tokens. Logits go through [`process_logits`] and a softmax.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_condition, process_logits, softmax_row, Denoiser, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::grid::{GridShape, ProbField, TokenGrid};
use crate::loss::{f_grad_probs, f_rb};
use crate::rng::Stream;
use crate::schedule::Schedule;

pub const TIME_FREQS: usize = 8;
pub const EMBED_DIM: usize = 16;

/// Samples per gradient accumulation chunk; fixed so reductions do not
/// depend on the thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpArch {
    pub dims: Vec<usize>,
    /// Clean categories (output columns).
    pub classes: usize,
    /// Categories of the corrupted input (`classes + 1` under a mask prior).
    pub input_states: usize,
    pub hidden: usize,
    /// Condition labels; zero for an unconditional model.
    pub n_conditions: usize,
    pub time_conditioned: bool,
    pub tau: f64,
}

impl MlpArch {
    pub fn new(shape: &GridShape, classes: usize, hidden: usize, n_conditions: usize) -> Self {
        MlpArch {
            dims: shape.dims().to_vec(),
            classes,
            input_states: classes,
            hidden,
            n_conditions,
            time_conditioned: true,
            tau: DEFAULT_TAU,
        }
    }

    pub fn validate(&self) -> Result<GridShape> {
        let shape = GridShape::new(&self.dims)?;
        if !(2..=256).contains(&self.classes) || self.input_states < self.classes {
            return Err(Error::Config("invalid category counts".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau={} must be positive", self.tau)));
        }
        Ok(shape)
    }

    fn embed_dim(&self) -> usize {
        if self.n_conditions > 0 {
            EMBED_DIM
        } else {
            0
        }
    }

    fn layout(&self, len: usize) -> Layout {
        let h = self.hidden;
        let token_cols = len * self.input_states;
        let in_dim = token_cols + 2 * TIME_FREQS + self.embed_dim();
        let mut off = 0;
        let mut take = |n: usize| {
            let start = off;
            off += n;
            start
        };
        let w1 = take(in_dim * h);
        let b1 = take(h);
        let w2 = take(h * h);
        let b2 = take(h);
        let u = take(len * self.classes * h);
        let c = take(len * self.classes);
        let r = take(self.classes * self.input_states);
        let emb_rows = if self.n_conditions > 0 { self.n_conditions + 1 } else { 0 };
        let emb = take(emb_rows * self.embed_dim());
        Layout {
            len,
            token_cols,
            in_dim,
            w1,
            b1,
            w2,
            b2,
            u,
            c,
            r,
            emb,
            total: off,
        }
    }
}

/// Offsets of each parameter block in the flat parameter vector.
/// `W1` is stored input-major (`in_dim x H`), `W2` and `U` output-major.
#[derive(Debug, Clone, Copy)]
struct Layout {
    len: usize,
    token_cols: usize,
    in_dim: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    u: usize,
    c: usize,
    r: usize,
    emb: usize,
    total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    arch: MlpArch,
    shape: GridShape,
    layout_total: usize,
    params: Vec<f64>,
}

/// One training example: clean grid, its corruption, the loss time and label.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub x0: TokenGrid,
    pub x_t: TokenGrid,
    pub t: f64,
    pub cond: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct MlpGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

struct Activations {
    h1: Vec<f64>,
    h2: Vec<f64>,
    /// `tanh(centered / tau)` per logit.
    squashed: Vec<f64>,
    probs: Vec<f64>,
}

fn time_features(t: f64) -> [f64; 2 * TIME_FREQS] {
    let mut out = [0.0; 2 * TIME_FREQS];
    for f in 0..TIME_FREQS {
        let w = (1u32 << f) as f64;
        out[2 * f] = (w * t).sin();
        out[2 * f + 1] = (w * t).cos();
    }
    out
}

impl MlpDenoiser {
    /// He-style normal initialization; the skip table and output biases start at zero.
    pub fn new(arch: MlpArch, stream: &Stream) -> Result<Self> {
        let mut m = Self::zeros(arch)?;
        let lay = m.layout();
        let h = m.arch.hidden;
        let mut rng = stream.seq();
        let mut fill = |params: &mut [f64], std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            params.iter_mut().for_each(|p| *p = normal.sample(&mut rng));
        };
        fill(&mut m.params[lay.w1..lay.b1], (2.0 / lay.in_dim as f64).sqrt());
        fill(&mut m.params[lay.w2..lay.b2], (2.0 / h as f64).sqrt());
        fill(&mut m.params[lay.u..lay.c], (1.0 / h as f64).sqrt());
        fill(&mut m.params[lay.emb..lay.total], 1.0);
        Ok(m)
    }

    pub fn zeros(arch: MlpArch) -> Result<Self> {
        let shape = arch.validate()?;
        let total = arch.layout(shape.len()).total;
        Ok(MlpDenoiser {
            arch,
            shape,
            layout_total: total,
            params: vec![0.0; total],
        })
    }

    pub fn from_params(arch: MlpArch, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(arch)?;
        if params.len() != m.layout_total {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                m.layout_total,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        m.params = params;
        Ok(m)
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.layout_total
    }

    /// Same parameters with the time input switched on or off.
    pub fn set_time_conditioned(&mut self, on: bool) {
        self.arch.time_conditioned = on;
    }

    /// Zero every parameter except the shared skip table.
    pub fn zero_trunk(&mut self) {
        let lay = self.layout();
        self.params[..lay.r].iter_mut().for_each(|p| *p = 0.0);
        self.params[lay.emb..].iter_mut().for_each(|p| *p = 0.0);
    }

    /// Mutable view of the skip table `R` (`classes x input_states`).
    pub fn skip_table_mut(&mut self) -> &mut [f64] {
        let lay = self.layout();
        &mut self.params[lay.r..lay.emb]
    }

    fn layout(&self) -> Layout {
        self.arch.layout(self.shape.len())
    }

    fn check_input(&self, x_t: &TokenGrid, cond: Option<u32>) -> Result<()> {
        if x_t.shape() != &self.shape || x_t.k() != self.arch.input_states {
            return Err(Error::Shape(format!(
                "model expects shape {:?} with {} states",
                self.shape.dims(),
                self.arch.input_states
            )));
        }
        check_condition(cond, self.arch.n_conditions)
    }

    fn forward(&self, tokens: &[u8], t: f64, cond: Option<u32>) -> Result<Activations> {
        let lay = self.layout();
        let p = &self.params;
        let h = self.arch.hidden;
        let (k, s) = (self.arch.classes, self.arch.input_states);

        let mut a1 = p[lay.b1..lay.b1 + h].to_vec();
        let mut add_col = |col: usize, scale: f64| {
            let w = &p[lay.w1 + col * h..lay.w1 + (col + 1) * h];
            for (a, &wv) in a1.iter_mut().zip(w) {
                *a += scale * wv;
            }
        };
        for (i, &x) in tokens.iter().enumerate() {
            add_col(i * s + x as usize, 1.0);
        }
        let t_in = if self.arch.time_conditioned { t } else { 0.0 };
        for (f, &v) in time_features(t_in).iter().enumerate() {
            add_col(lay.token_cols + f, v);
        }
        if self.arch.n_conditions > 0 {
            let row = cond.map_or(self.arch.n_conditions, |c| c as usize);
            for e in 0..EMBED_DIM {
                let v = p[lay.emb + row * EMBED_DIM + e];
                add_col(lay.token_cols + 2 * TIME_FREQS + e, v);
            }
        }
        let h1: Vec<f64> = a1.iter().map(|v| v.tanh()).collect();
        let h2: Vec<f64> = (0..h)
            .map(|j| {
                let w = &p[lay.w2 + j * h..lay.w2 + (j + 1) * h];
                let dot: f64 = w.iter().zip(&h1).map(|(a, b)| a * b).sum();
                (p[lay.b2 + j] + dot).tanh()
            })
            .collect();

        let mut logits = vec![0.0; lay.len * k];
        for (i, row) in logits.chunks_exact_mut(k).enumerate() {
            let x = tokens[i] as usize;
            for (cat, v) in row.iter_mut().enumerate() {
                let o = i * k + cat;
                let u = &p[lay.u + o * h..lay.u + (o + 1) * h];
                let dot: f64 = u.iter().zip(&h2).map(|(a, b)| a * b).sum();
                *v = dot + p[lay.c + o] + p[lay.r + cat * s + x];
            }
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let tau = self.arch.tau;
        process_logits(&mut logits, k, tau);
        let squashed: Vec<f64> = logits.iter().map(|z| z / tau).collect();
        let mut probs = logits;
        probs.chunks_exact_mut(k).for_each(softmax_row);
        Ok(Activations {
            h1,
            h2,
            squashed,
            probs,
        })
    }

    /// Accumulate the parameter gradient for upstream gradient `g = dL/dprobs`.
    fn backward(&self, tokens: &[u8], t: f64, cond: Option<u32>, act: &Activations, g: &[f64], grad: &mut [f64]) {
        let lay = self.layout();
        let p = &self.params;
        let h = self.arch.hidden;
        let (k, s) = (self.arch.classes, self.arch.input_states);

        let mut dh2 = vec![0.0; h];
        let mut d_raw = vec![0.0; k];
        for i in 0..lay.len {
            let probs = &act.probs[i * k..(i + 1) * k];
            let gi = &g[i * k..(i + 1) * k];
            let sq = &act.squashed[i * k..(i + 1) * k];
            let pg: f64 = probs.iter().zip(gi).map(|(a, b)| a * b).sum();
            // softmax, then tau*tanh(./tau), then centering
            for c in 0..k {
                d_raw[c] = probs[c] * (gi[c] - pg) * (1.0 - sq[c] * sq[c]);
            }
            let mean = d_raw.iter().sum::<f64>() / k as f64;
            d_raw.iter_mut().for_each(|d| *d -= mean);
            let x = tokens[i] as usize;
            for (c, &d) in d_raw.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let o = i * k + c;
                let ub = lay.u + o * h;
                for j in 0..h {
                    grad[ub + j] += d * act.h2[j];
                    dh2[j] += d * p[ub + j];
                }
                grad[lay.c + o] += d;
                grad[lay.r + c * s + x] += d;
            }
        }

        let da2: Vec<f64> = dh2
            .iter()
            .zip(&act.h2)
            .map(|(d, v)| d * (1.0 - v * v))
            .collect();
        let mut dh1 = vec![0.0; h];
        for j in 0..h {
            let row = lay.w2 + j * h;
            for m in 0..h {
                grad[row + m] += da2[j] * act.h1[m];
                dh1[m] += da2[j] * p[row + m];
            }
            grad[lay.b2 + j] += da2[j];
        }
        let da1: Vec<f64> = dh1
            .iter()
            .zip(&act.h1)
            .map(|(d, v)| d * (1.0 - v * v))
            .collect();
        for j in 0..h {
            grad[lay.b1 + j] += da1[j];
        }
        let add_col = |grad: &mut [f64], col: usize, scale: f64| {
            let base = lay.w1 + col * h;
            for j in 0..h {
                grad[base + j] += scale * da1[j];
            }
        };
        for (i, &x) in tokens.iter().enumerate() {
            add_col(grad, i * s + x as usize, 1.0);
        }
        let t_in = if self.arch.time_conditioned { t } else { 0.0 };
        for (f, &v) in time_features(t_in).iter().enumerate() {
            add_col(grad, lay.token_cols + f, v);
        }
        if self.arch.n_conditions > 0 {
            let row = cond.map_or(self.arch.n_conditions, |c| c as usize);
            for e in 0..EMBED_DIM {
                let col = lay.token_cols + 2 * TIME_FREQS + e;
                let v = p[lay.emb + row * EMBED_DIM + e];
                add_col(grad, col, v);
                let w = &p[lay.w1 + col * h..lay.w1 + (col + 1) * h];
                let d: f64 = w.iter().zip(&da1).map(|(a, b)| a * b).sum();
                grad[lay.emb + row * EMBED_DIM + e] += d;
            }
        }
    }

    /// Per-token mean loss of one sample and, optionally, its gradient.
    fn sample_loss(
        &self,
        sample: &TrainSample,
        schedule: &Schedule,
        scale: f64,
        grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        self.check_input(&sample.x_t, sample.cond)?;
        if sample.x0.shape() != &self.shape || sample.x0.k() != self.arch.classes {
            return Err(Error::Shape("clean grid does not match the model".into()));
        }
        let alpha = schedule.alpha(sample.t)?;
        let alpha_prime = schedule.alpha_prime(sample.t)?;
        let xt = sample.x_t.tokens();
        let x0 = sample.x0.tokens();
        let act = self.forward(xt, sample.t, sample.cond)?;
        let k = self.arch.classes;
        let len = self.shape.len();
        let mut total = 0.0;
        for i in 0..len {
            total += f_rb(xt[i] as usize, x0[i] as usize, &act.probs[i * k..(i + 1) * k], alpha, alpha_prime, k)?;
        }
        if let Some(grad) = grad {
            let mut g = vec![0.0; len * k];
            for i in 0..len {
                f_grad_probs(
                    xt[i] as usize,
                    x0[i] as usize,
                    &act.probs[i * k..(i + 1) * k],
                    alpha,
                    alpha_prime,
                    k,
                    &mut g[i * k..(i + 1) * k],
                )?;
            }
            let w = scale / len as f64;
            g.iter_mut().for_each(|v| *v *= w);
            self.backward(xt, sample.t, sample.cond, &act, &g, grad);
        }
        Ok(total / len as f64)
    }

    /// Mean over the batch of the per-token Rao-Blackwellized loss.
    pub fn batch_loss(&self, batch: &[TrainSample], schedule: &Schedule) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let losses: Vec<f64> = batch
            .par_iter()
            .map(|s| self.sample_loss(s, schedule, 0.0, None))
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / batch.len() as f64)
    }

    /// Batch loss and its analytic gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[TrainSample], schedule: &Schedule) -> Result<MlpGrad> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let partial: Vec<(f64, Vec<f64>)> = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut grad = vec![0.0; self.layout_total];
                let mut loss = 0.0;
                for s in chunk {
                    loss += self.sample_loss(s, schedule, scale, Some(&mut grad))?;
                }
                Ok((loss, grad))
            })
            .collect::<Result<_>>()?;
        let mut grad = vec![0.0; self.layout_total];
        let mut loss = 0.0;
        for (l, g) in &partial {
            loss += l;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite loss or gradient".into()));
        }
        Ok(MlpGrad {
            loss: loss * scale,
            grad,
        })
    }

    fn logits_field(&self, x_t: &TokenGrid, t: f64, cond: Option<u32>) -> Result<Activations> {
        self.check_input(x_t, cond)?;
        self.forward(x_t.tokens(), t, cond)
    }
}

impl Denoiser for MlpDenoiser {
    fn shape(&self) -> &GridShape {
        &self.shape
    }

    fn classes(&self) -> usize {
        self.arch.classes
    }

    fn n_conditions(&self) -> usize {
        self.arch.n_conditions
    }

    fn time_conditioned(&self) -> bool {
        self.arch.time_conditioned
    }

    fn predict(&self, x_t: &TokenGrid, t: f64, cond: Option<u32>) -> Result<ProbField> {
        let act = self.logits_field(x_t, t, cond)?;
        ProbField::new(self.shape.clone(), self.arch.classes, act.probs)
    }

    fn predict_log(&self, x_t: &TokenGrid, t: f64, cond: Option<u32>) -> Result<ProbField> {
        let act = self.logits_field(x_t, t, cond)?;
        let k = self.arch.classes;
        let tau = self.arch.tau;
        let mut logs: Vec<f64> = act.squashed.iter().map(|s| s * tau).collect();
        for row in logs.chunks_exact_mut(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        ProbField::new(self.shape.clone(), k, logs)
    }
}
