//! Conservation-loss tailoring of a state-space predictor: the Noether loss,
//! the functional inner gradient step, tailored sequence prediction and the
//! outer meta-training loop with second-order gradients through the inner
//! step.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, ParamVector, Tape, Var};
use crate::dsl::{CompiledExpr, DslContext, DslError, Expr};
use crate::dynamics::{State, SystemKind, Trajectory};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TailorError {
    #[error("{what} diverged (non-finite value)")]
    Diverged { what: String },
    #[error(transparent)]
    Numeric(#[from] AdError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no trajectory is long enough for horizon {0}")]
    NoWindows(usize),
    #[error(transparent)]
    Dsl(#[from] DslError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn diverged(what: &str) -> TailorError {
    TailorError::Diverged { what: what.to_string() }
}

/// Fully connected network with tanh hidden layers and a linear output.
/// Parameters are one flat vector: per layer the row-major weight matrix
/// (outputs × inputs) followed by the biases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
}

impl Mlp {
    pub fn new(sizes: Vec<usize>) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0), "bad layer sizes {sizes:?}");
        Self { sizes }
    }

    pub fn with_hidden(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self::new(sizes)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(self.n_params());
        for w in self.sizes.windows(2) {
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            out.extend((0..w[0] * w[1]).map(|_| rng.gen_range(-limit..limit)));
            out.extend(std::iter::repeat(0.0).take(w[1]));
        }
        out
    }

    /// Forward pass storing every layer's activation in `acts` (`acts[0]`
    /// is the input). Returns the output slice.
    pub fn forward_into<'a>(&self, params: &[f64], x: &[f64], acts: &'a mut Vec<Vec<f64>>) -> &'a [f64] {
        acts.resize(self.sizes.len(), Vec::new());
        acts[0].clear();
        acts[0].extend_from_slice(x);
        let mut off = 0;
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &params[off..off + n_in * n_out];
            let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let (head, tail) = acts.split_at_mut(l + 1);
            let a = &head[l];
            let z = &mut tail[0];
            z.clear();
            for j in 0..n_out {
                let row = &w[j * n_in..(j + 1) * n_in];
                let mut s = b[j];
                for i in 0..n_in {
                    s += row[i] * a[i];
                }
                z.push(if l + 1 < self.n_layers() { s.tanh() } else { s });
            }
        }
        &acts[self.n_layers()]
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut acts = Vec::new();
        self.forward_into(params, x, &mut acts).to_vec()
    }

    /// Accumulates into `grad` the parameter gradient of `dout · output`,
    /// given the activations of the preceding [`Mlp::forward_into`].
    pub fn backward(&self, params: &[f64], acts: &[Vec<f64>], dout: &[f64], grad: &mut [f64]) {
        let mut delta = dout.to_vec();
        let mut offsets = Vec::with_capacity(self.n_layers());
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let a = &acts[l];
            for j in 0..n_out {
                let d = delta[j];
                if d == 0.0 {
                    continue;
                }
                let gw = &mut grad[off + j * n_in..off + (j + 1) * n_in];
                for i in 0..n_in {
                    gw[i] += d * a[i];
                }
                grad[off + n_in * n_out + j] += d;
            }
            if l > 0 {
                let w = &params[off..off + n_in * n_out];
                let mut prev = vec![0.0; n_in];
                for j in 0..n_out {
                    let d = delta[j];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &w[j * n_in..(j + 1) * n_in];
                    for i in 0..n_in {
                        prev[i] += row[i] * d;
                    }
                }
                for i in 0..n_in {
                    prev[i] *= 1.0 - a[i] * a[i];
                }
                delta = prev;
            }
        }
    }

    /// Records the network on `tape`.
    pub fn record(&self, tape: &mut Tape, params: &[Var], x: &[Var]) -> Vec<Var> {
        let mut a = x.to_vec();
        let mut off = 0;
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &params[off..off + n_in * n_out];
            let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let last = l + 1 == self.n_layers();
            a = (0..n_out)
                .map(|j| {
                    let z = tape.affine(&w[j * n_in..(j + 1) * n_in], &a, Some(b[j]));
                    if last {
                        z
                    } else {
                        tape.tanh(z)
                    }
                })
                .collect();
        }
        a
    }
}

/// Predictor of dx/dt from the state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorMlp {
    pub net: Mlp,
    pub params: ParamVector,
}

impl PredictorMlp {
    pub fn new(hidden: &[usize], seed: u64) -> Self {
        let net = Mlp::with_hidden(2, hidden, 2);
        let params = ParamVector::with_prefix("theta", net.init_params(seed));
        Self { net, params }
    }

    pub fn with_params(&self, values: Vec<f64>) -> Self {
        Self {
            net: self.net.clone(),
            params: self.params.with_values(values),
        }
    }

    pub fn theta(&self) -> &[f64] {
        self.params.values()
    }

    pub fn derivative(&self, s: State) -> [f64; 2] {
        derivative_with(&self.net, self.theta(), s, &mut Vec::new())
    }
}

fn derivative_with(net: &Mlp, theta: &[f64], s: State, acts: &mut Vec<Vec<f64>>) -> [f64; 2] {
    let out = net.forward_into(theta, &[s.q, s.p], acts);
    [out[0], out[1]]
}

#[derive(Debug, Clone)]
pub struct SymbolicEmbedding {
    pub expr: Expr,
    pub params: ParamVector,
    /// Constant factor applied to the formula value.
    pub scale: f64,
    compiled: CompiledExpr,
}

impl SymbolicEmbedding {
    pub fn new(expr: Expr, params: ParamVector) -> Result<Self, TailorError> {
        if params.len() != expr.param_count() {
            return Err(DslError::ParamCount {
                expected: expr.param_count(),
                got: params.len(),
            }
            .into());
        }
        let compiled = expr.compile(2);
        Ok(Self {
            expr,
            params,
            scale: 1.0,
            compiled,
        })
    }

    /// Rescales the formula to unit standard deviation over `states`
    /// (left unscaled when the formula is constant there).
    pub fn standardized(mut self, states: &[State]) -> Result<Self, TailorError> {
        let values: Vec<f64> = states
            .iter()
            .map(|&s| self.compiled.eval(s, self.params.values()))
            .collect::<Result<_, _>>()?;
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        self.scale = if sd.is_finite() && sd > 1e-12 { 1.0 / sd } else { 1.0 };
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralEmbedding {
    pub net: Mlp,
    pub params: ParamVector,
}

/// Conserved-quantity candidate `g_φ: State → R^k`.
#[derive(Debug, Clone)]
pub enum Embedding {
    Symbolic(SymbolicEmbedding),
    Neural(NeuralEmbedding),
}

impl Embedding {
    pub fn symbolic(expr: Expr, params: ParamVector) -> Result<Self, TailorError> {
        SymbolicEmbedding::new(expr, params).map(Embedding::Symbolic)
    }

    /// Symbolic embedding scaled to unit standard deviation over the states
    /// of `data`, so that inner learning rates mean the same for every
    /// formula regardless of its arbitrary overall scale.
    pub fn symbolic_standardized(expr: Expr, params: ParamVector, data: &[Trajectory]) -> Result<Self, TailorError> {
        let states: Vec<State> = data.iter().flat_map(|t| t.states.iter().copied()).collect();
        SymbolicEmbedding::new(expr, params)?
            .standardized(&states)
            .map(Embedding::Symbolic)
    }

    /// Neural embedding with tanh hidden layers of the given widths.
    pub fn neural(hidden: &[usize], out_dim: usize, seed: u64) -> Self {
        let net = Mlp::with_hidden(2, hidden, out_dim);
        let params = ParamVector::with_prefix("phi", net.init_params(seed));
        Embedding::Neural(NeuralEmbedding { net, params })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Embedding::Symbolic(_) => "symbolic",
            Embedding::Neural(_) => "neural",
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Embedding::Symbolic(_) => 1,
            Embedding::Neural(n) => n.net.output_dim(),
        }
    }

    pub fn phi(&self) -> &ParamVector {
        match self {
            Embedding::Symbolic(s) => &s.params,
            Embedding::Neural(n) => &n.params,
        }
    }

    pub fn with_phi(&self, values: Vec<f64>) -> Self {
        match self {
            Embedding::Symbolic(s) => Embedding::Symbolic(SymbolicEmbedding {
                expr: s.expr.clone(),
                params: s.params.with_values(values),
                scale: s.scale,
                compiled: s.compiled.clone(),
            }),
            Embedding::Neural(n) => Embedding::Neural(NeuralEmbedding {
                net: n.net.clone(),
                params: n.params.with_values(values),
            }),
        }
    }

    pub fn eval(&self, s: State) -> Result<Vec<f64>, TailorError> {
        let out = match self {
            Embedding::Symbolic(e) => vec![e.scale * e.compiled.eval(s, e.params.values())?],
            Embedding::Neural(n) => n.net.forward(n.params.values(), &[s.q, s.p]),
        };
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(diverged("embedding"))
        }
    }

    pub fn record(&self, tape: &mut Tape, phi: &[Var], x: [Var; 2]) -> Vec<Var> {
        match self {
            Embedding::Symbolic(e) => {
                let v = e.expr.record(tape, &x, phi);
                vec![if e.scale == 1.0 { v } else { tape.scale(v, e.scale) }]
            }
            Embedding::Neural(n) => n.net.record(tape, phi, &x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoetherVariant {
    /// Σ_t |g(x0) − g(x̃_t)|²
    #[default]
    AnchorA,
    /// Σ_t |g(x̃_{t−1}) − g(x̃_t)|²
    PairwiseB,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoetherConfig {
    pub variant: NoetherVariant,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub horizon: usize,
    pub outer_lr: f64,
    pub embedding_lr: f64,
    pub dt: f64,
}

impl Default for NoetherConfig {
    fn default() -> Self {
        Self {
            variant: NoetherVariant::AnchorA,
            inner_lr: 1e-2,
            inner_steps: 1,
            horizon: 10,
            outer_lr: 1e-3,
            embedding_lr: 3.0,
            dt: 0.1,
        }
    }
}

impl NoetherConfig {
    pub fn validate(&self) -> Result<(), TailorError> {
        if !(self.inner_lr >= 0.0) {
            return Err(TailorError::Config(format!("inner_lr must be >= 0, got {}", self.inner_lr)));
        }
        if self.horizon == 0 {
            return Err(TailorError::Config("horizon must be >= 1".into()));
        }
        if self.inner_steps == 0 {
            return Err(TailorError::Config("inner_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Euler rollout `x̃_t = x̃_{t−1} + f(x̃_{t−1})·dt`, returning `x̃_1..x̃_T`.
pub fn rollout(f: &PredictorMlp, x0: State, horizon: usize, dt: f64) -> Result<Vec<State>, TailorError> {
    rollout_theta(&f.net, f.theta(), x0, horizon, dt)
}

fn rollout_theta(net: &Mlp, theta: &[f64], x0: State, horizon: usize, dt: f64) -> Result<Vec<State>, TailorError> {
    let mut acts = Vec::new();
    let mut x = x0;
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let d = derivative_with(net, theta, x, &mut acts);
        x = State::new(x.q + d[0] * dt, x.p + d[1] * dt);
        if !x.is_finite() {
            return Err(diverged("rollout"));
        }
        out.push(x);
    }
    Ok(out)
}

fn rollout_tape(tape: &mut Tape, net: &Mlp, theta: &[Var], x0: State, horizon: usize, dt: f64) -> Vec<[Var; 2]> {
    let mut x = [tape.constant(x0.q), tape.constant(x0.p)];
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let d = net.record(tape, theta, &x);
        let dq = tape.scale(d[0], dt);
        let dp = tape.scale(d[1], dt);
        x = [tape.add(x[0], dq), tape.add(x[1], dp)];
        out.push(x);
    }
    out
}

fn noether_tape(tape: &mut Tape, g: &Embedding, phi: &[Var], x0: [Var; 2], preds: &[[Var; 2]], variant: NoetherVariant) -> Var {
    let anchor = g.record(tape, phi, x0);
    let mut prev = anchor.clone();
    let mut terms = Vec::new();
    for &x in preds {
        let cur = g.record(tape, phi, x);
        let reference = match variant {
            NoetherVariant::AnchorA => &anchor,
            NoetherVariant::PairwiseB => &prev,
        };
        for (a, b) in reference.iter().zip(&cur) {
            let d = tape.sub(*a, *b);
            terms.push(tape.square(d));
        }
        prev = cur;
    }
    tape.sum(&terms)
}

/// Eq. 1 loss of `g` along `preds` starting from `x0`.
pub fn noether_loss(g: &Embedding, x0: State, preds: &[State], variant: NoetherVariant) -> Result<f64, TailorError> {
    let anchor = g.eval(x0)?;
    let mut prev = anchor.clone();
    let mut total = 0.0;
    for &x in preds {
        let cur = g.eval(x)?;
        let reference = match variant {
            NoetherVariant::AnchorA => &anchor,
            NoetherVariant::PairwiseB => &prev,
        };
        total += reference.iter().zip(&cur).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        prev = cur;
    }
    Ok(total)
}

/// Noether loss of the rollout from `theta` and its gradient with respect
/// to `theta`.
fn inner_loss_and_grad(
    tape: &mut Tape,
    net: &Mlp,
    theta: &[f64],
    g: &Embedding,
    x0: State,
    cfg: &NoetherConfig,
) -> Result<(f64, Vec<f64>), TailorError> {
    tape.clear();
    let tv: Vec<Var> = theta.iter().enumerate().map(|(i, &v)| tape.leaf(i, v)).collect();
    let phi: Vec<Var> = g.phi().values().iter().map(|&v| tape.constant(v)).collect();
    let preds = rollout_tape(tape, net, &tv, x0, cfg.horizon, cfg.dt);
    let x0v = [tape.constant(x0.q), tape.constant(x0.p)];
    let loss = noether_tape(tape, g, &phi, x0v, &preds, cfg.variant);
    let value = tape.checked_value(loss).map_err(|_| diverged("noether loss"))?;
    let grad = tape.gradient(loss, &tv)?;
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(diverged("inner gradient"));
    }
    Ok((value, grad))
}

/// Tailored weights θ(x0; φ) after `cfg.inner_steps` gradient steps on the
/// Noether loss. With `inner_lr == 0` the weights are returned untouched.
pub fn tailor_step(f: &PredictorMlp, g: &Embedding, x0: State, cfg: &NoetherConfig) -> Result<ParamVector, TailorError> {
    cfg.validate()?;
    if cfg.inner_lr == 0.0 {
        return Ok(f.params.clone());
    }
    let mut tape = Tape::new();
    let mut theta = f.theta().to_vec();
    for _ in 0..cfg.inner_steps {
        let (_, grad) = inner_loss_and_grad(&mut tape, &f.net, &theta, g, x0, cfg)?;
        for (t, gr) in theta.iter_mut().zip(&grad) {
            *t -= cfg.inner_lr * gr;
        }
    }
    Ok(f.params.with_values(theta))
}

/// Rollout from `x0` with the tailored weights.
pub fn predict_sequence(f: &PredictorMlp, g: &Embedding, x0: State, cfg: &NoetherConfig) -> Result<Vec<State>, TailorError> {
    let theta = tailor_step(f, g, x0, cfg)?;
    rollout_theta(&f.net, theta.values(), x0, cfg.horizon, cfg.dt)
}

/// Start indices `0, stride, 2·stride, ...` of every window holding
/// `horizon + 1` states.
pub fn window_starts(len: usize, horizon: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    (0..len).step_by(stride).filter(|s| s + horizon < len).collect()
}

/// One training/evaluation window: initial state and the `horizon` states
/// that follow it.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub x0: State,
    pub truth: Vec<State>,
}

pub fn windows(trajs: &[Trajectory], horizon: usize, stride: usize) -> Vec<Window> {
    let mut out = Vec::new();
    for t in trajs {
        for s in window_starts(t.states.len(), horizon, stride) {
            out.push(Window {
                x0: t.states[s],
                truth: t.states[s + 1..=s + horizon].to_vec(),
            });
        }
    }
    out
}

fn sq_error(preds: &[State], truth: &[State]) -> f64 {
    preds
        .iter()
        .zip(truth)
        .map(|(a, b)| (a.q - b.q).powi(2) + (a.p - b.p).powi(2))
        .sum()
}

/// Mean squared error per coordinate over all windows, with tailoring when
/// `g` is given.
pub fn evaluate_mse(
    f: &PredictorMlp,
    g: Option<&Embedding>,
    windows: &[Window],
    cfg: &NoetherConfig,
) -> Result<f64, TailorError> {
    if windows.is_empty() {
        return Err(TailorError::NoWindows(cfg.horizon));
    }
    let errs: Vec<Result<(f64, usize), TailorError>> = windows
        .par_iter()
        .map(|w| {
            let h = w.truth.len();
            let c = NoetherConfig { horizon: h, ..cfg.clone() };
            let preds = match g {
                Some(g) => predict_sequence(f, g, w.x0, &c)?,
                None => rollout(f, w.x0, h, c.dt)?,
            };
            Ok((sq_error(&preds, &w.truth), 2 * h))
        })
        .collect();
    let mut total = 0.0;
    let mut count = 0;
    for e in errs {
        let (s, n) = e?;
        total += s;
        count += n;
    }
    Ok(total / count as f64)
}

/// Mean squared error per coordinate at each horizon step `1..=T`, over
/// windows of equal length.
pub fn per_step_mse(
    f: &PredictorMlp,
    g: Option<&Embedding>,
    windows: &[Window],
    cfg: &NoetherConfig,
) -> Result<Vec<f64>, TailorError> {
    let h = windows.first().map(|w| w.truth.len()).ok_or(TailorError::NoWindows(cfg.horizon))?;
    let c = NoetherConfig { horizon: h, ..cfg.clone() };
    let preds: Vec<Result<Vec<State>, TailorError>> = windows
        .par_iter()
        .map(|w| match g {
            Some(g) => predict_sequence(f, g, w.x0, &c),
            None => rollout(f, w.x0, h, c.dt),
        })
        .collect();
    let mut acc = vec![0.0; h];
    for (w, p) in windows.iter().zip(preds) {
        for (k, (a, b)) in p?.iter().zip(&w.truth).enumerate() {
            acc[k] += (a.q - b.q).powi(2) + (a.p - b.p).powi(2);
        }
    }
    Ok(acc.into_iter().map(|s| s / (2 * windows.len()) as f64).collect())
}

/// Task loss of one window after tailoring, with its gradients with respect
/// to θ and φ; the φ-gradient flows through the inner step.
pub fn meta_gradient(
    f: &PredictorMlp,
    g: &Embedding,
    window: &Window,
    cfg: &NoetherConfig,
    tape: &mut Tape,
) -> Result<(f64, Vec<f64>, Vec<f64>), TailorError> {
    let n_theta = f.params.len();
    let h = window.truth.len();
    tape.clear();
    let theta0: Vec<Var> = f.theta().iter().enumerate().map(|(i, &v)| tape.leaf(i, v)).collect();
    let phi: Vec<Var> = g
        .phi()
        .values()
        .iter()
        .enumerate()
        .map(|(k, &v)| tape.leaf(n_theta + k, v))
        .collect();
    let mut theta = theta0.clone();
    if cfg.inner_lr != 0.0 {
        for _ in 0..cfg.inner_steps {
            let preds = rollout_tape(tape, &f.net, &theta, window.x0, h, cfg.dt);
            let x0v = [tape.constant(window.x0.q), tape.constant(window.x0.p)];
            let inner = noether_tape(tape, g, &phi, x0v, &preds, cfg.variant);
            let grads = tape.grad(inner, &theta);
            theta = theta
                .iter()
                .zip(grads)
                .map(|(&t, gr)| {
                    let step = tape.scale(gr, -cfg.inner_lr);
                    tape.add(t, step)
                })
                .collect();
        }
    }
    let preds = rollout_tape(tape, &f.net, &theta, window.x0, h, cfg.dt);
    let mut terms = Vec::with_capacity(2 * h);
    for (x, y) in preds.iter().zip(&window.truth) {
        let dq = tape.constant(-y.q);
        let dp = tape.constant(-y.p);
        let eq = tape.add(x[0], dq);
        let ep = tape.add(x[1], dp);
        terms.push(tape.square(eq));
        terms.push(tape.square(ep));
    }
    let total = tape.sum(&terms);
    let loss = tape.scale(total, 1.0 / (2 * h) as f64);
    if tape.first_nonfinite().is_some() {
        return Err(diverged("meta-training forward pass"));
    }
    let adj = tape.adjoints(loss)?;
    let gt: Vec<f64> = theta0.iter().map(|v| adj[v.index()]).collect();
    let gp: Vec<f64> = phi.iter().map(|v| adj[v.index()]).collect();
    if gt.iter().chain(&gp).any(|v| !v.is_finite()) {
        return Err(diverged("meta-gradient"));
    }
    Ok((tape.value(loss), gt, gp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub update_theta: bool,
    pub update_phi: bool,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 5,
            seed: 0,
            update_theta: true,
            update_phi: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation task loss with tailoring.
    pub val_loss: Option<f64>,
    /// Validation task loss of the same θ without tailoring.
    #[serde(default)]
    pub val_untailored: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MetaTrainOutput {
    pub predictor: PredictorMlp,
    pub embedding: Embedding,
    pub history: Vec<EpochRecord>,
}

/// Outer loop: every epoch draws one random window per training trajectory,
/// and every batch applies plain gradient steps
/// `θ ← θ − λ_out ∇θ L`, `φ ← φ − λ_emb ∇φ L` with `L` the batch-mean task
/// loss after tailoring. Per-window gradients are summed in window order.
pub fn meta_train(
    f: &PredictorMlp,
    g: &Embedding,
    train: &[Trajectory],
    val: Option<&[Window]>,
    cfg: &NoetherConfig,
    tcfg: &MetaTrainConfig,
) -> Result<MetaTrainOutput, TailorError> {
    meta_train_with(f, g, train, val, cfg, tcfg, |_, _, _| ())
}

/// [`meta_train`] calling `on_epoch` with the state after every epoch.
pub fn meta_train_with(
    f: &PredictorMlp,
    g: &Embedding,
    train: &[Trajectory],
    val: Option<&[Window]>,
    cfg: &NoetherConfig,
    tcfg: &MetaTrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &PredictorMlp, &Embedding),
) -> Result<MetaTrainOutput, TailorError> {
    cfg.validate()?;
    if tcfg.batch_size == 0 {
        return Err(TailorError::Config("batch_size must be >= 1".into()));
    }
    let h = cfg.horizon;
    let usable: Vec<&Trajectory> = train.iter().filter(|t| t.states.len() > h).collect();
    if usable.is_empty() {
        return Err(TailorError::NoWindows(h));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut f = f.clone();
    let mut g = g.clone();
    let mut history = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let mut wins: Vec<Window> = usable
            .iter()
            .map(|t| {
                let s = rng.gen_range(0..t.states.len() - h);
                Window {
                    x0: t.states[s],
                    truth: t.states[s + 1..=s + h].to_vec(),
                }
            })
            .collect();
        wins.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in wins.chunks(tcfg.batch_size) {
            let results: Vec<Result<(f64, Vec<f64>, Vec<f64>), TailorError>> = batch
                .par_iter()
                .map_init(Tape::new, |tape, w| meta_gradient(&f, &g, w, cfg, tape))
                .collect();
            let mut gt = vec![0.0; f.params.len()];
            let mut gp = vec![0.0; g.phi().len()];
            for r in results {
                let (l, a, b) = r?;
                epoch_loss += l;
                gt.iter_mut().zip(&a).for_each(|(s, x)| *s += x);
                gp.iter_mut().zip(&b).for_each(|(s, x)| *s += x);
            }
            let scale = 1.0 / batch.len() as f64;
            if tcfg.update_theta && cfg.outer_lr != 0.0 {
                let mut th = f.theta().to_vec();
                th.iter_mut().zip(&gt).for_each(|(t, d)| *t -= cfg.outer_lr * scale * d);
                f = f.with_params(th);
            }
            if tcfg.update_phi && cfg.embedding_lr != 0.0 && !gp.is_empty() {
                let mut ph = g.phi().values().to_vec();
                ph.iter_mut().zip(&gp).for_each(|(t, d)| *t -= cfg.embedding_lr * scale * d);
                g = g.with_phi(ph);
            }
        }
        let train_loss = epoch_loss / wins.len() as f64;
        if !train_loss.is_finite() {
            return Err(diverged(&format!("meta-training at epoch {epoch}")));
        }
        let (val_loss, val_untailored) = match val {
            Some(v) => (Some(evaluate_mse(&f, Some(&g), v, cfg)?), Some(evaluate_mse(&f, None, v, cfg)?)),
            None => (None, None),
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_untailored,
        };
        on_epoch(&record, &f, &g);
        history.push(record);
    }
    Ok(MetaTrainOutput {
        predictor: f,
        embedding: g,
        history,
    })
}

/// Adam optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InnerOptimizer {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub step: usize,
    pub inner_loss: f64,
    pub task_loss: f64,
}

/// Repeated inner steps on one sequence, recording the Noether loss and the
/// task MSE against `truth` before the first step and after every step.
/// Stops early (returning the partial curve) on numeric failure.
pub fn multi_inner_step_probe(
    f: &PredictorMlp,
    g: &Embedding,
    x0: State,
    truth: &[State],
    max_steps: usize,
    inner_lr: f64,
    optimizer: InnerOptimizer,
    cfg: &NoetherConfig,
) -> Result<Vec<ProbePoint>, TailorError> {
    if max_steps == 0 {
        return Err(TailorError::Config("max_steps must be >= 1".into()));
    }
    let c = NoetherConfig {
        horizon: truth.len(),
        ..cfg.clone()
    };
    let mut tape = Tape::new();
    let mut theta = f.theta().to_vec();
    let mut adam = Adam::new(theta.len(), inner_lr);
    let mut curve = Vec::with_capacity(max_steps + 1);
    for step in 0..=max_steps {
        let Ok((inner, grad)) = inner_loss_and_grad(&mut tape, &f.net, &theta, g, x0, &c) else {
            break;
        };
        let Ok(preds) = rollout_theta(&f.net, &theta, x0, c.horizon, c.dt) else {
            break;
        };
        curve.push(ProbePoint {
            step,
            inner_loss: inner,
            task_loss: sq_error(&preds, truth) / (2 * truth.len()) as f64,
        });
        if step == max_steps {
            break;
        }
        match optimizer {
            InnerOptimizer::Sgd => theta.iter_mut().zip(&grad).for_each(|(t, d)| *t -= inner_lr * d),
            InnerOptimizer::Adam => adam.step(&mut theta, &grad),
        }
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            hidden: vec![200, 200],
            epochs: 200,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Per-state regression targets: central finite-difference derivatives.
pub fn derivative_targets(trajs: &[Trajectory]) -> Vec<(State, [f64; 2])> {
    trajs
        .iter()
        .flat_map(|t| t.states.iter().copied().zip(t.finite_difference_derivatives()))
        .collect()
}

pub fn derivative_mse(f: &PredictorMlp, samples: &[(State, [f64; 2])]) -> f64 {
    let mut acts = Vec::new();
    let total: f64 = samples
        .iter()
        .map(|(s, y)| {
            let d = derivative_with(&f.net, f.theta(), *s, &mut acts);
            (d[0] - y[0]).powi(2) + (d[1] - y[1]).powi(2)
        })
        .sum();
    total / (2 * samples.len().max(1)) as f64
}

/// Trains a fresh predictor on derivative MSE with Adam. Returns the model
/// and the per-epoch training loss.
pub fn train_baseline(train: &[Trajectory], cfg: &BaselineConfig) -> Result<(PredictorMlp, Vec<f64>), TailorError> {
    let f = PredictorMlp::new(&cfg.hidden, cfg.seed);
    continue_baseline(&f, train, cfg)
}

/// Continues derivative-MSE training of `f` for `cfg.epochs` epochs.
pub fn continue_baseline(
    f: &PredictorMlp,
    train: &[Trajectory],
    cfg: &BaselineConfig,
) -> Result<(PredictorMlp, Vec<f64>), TailorError> {
    let samples = derivative_targets(train);
    if samples.is_empty() {
        return Err(TailorError::Config("no training states".into()));
    }
    let mut theta = f.theta().to_vec();
    let mut adam = Adam::new(theta.len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut acts = Vec::new();
    let mut grad = vec![0.0; theta.len()];
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / (2 * batch.len()) as f64;
            for &i in batch {
                let (s, y) = samples[i];
                let out = f.net.forward_into(&theta, &[s.q, s.p], &mut acts);
                let e = [out[0] - y[0], out[1] - y[1]];
                total += e[0] * e[0] + e[1] * e[1];
                f.net.backward(&theta, &acts, &[2.0 * e[0] * scale, 2.0 * e[1] * scale], &mut grad);
            }
            adam.step(&mut theta, &grad);
        }
        let loss = total / (2 * samples.len()) as f64;
        if !loss.is_finite() {
            return Err(diverged(&format!("baseline training at epoch {epoch}")));
        }
        history.push(loss);
    }
    Ok((f.with_params(theta), history))
}

/// Serialized model state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub tool_version: String,
    #[serde(default)]
    pub system: Option<SystemKind>,
    /// Tailoring settings the embedding was trained or selected with.
    #[serde(default)]
    pub tailoring: Option<NoetherConfig>,
    pub predictor_sizes: Vec<usize>,
    pub predictor_weights: Vec<f64>,
    /// `none`, `symbolic` or `neural`.
    pub embedding_kind: String,
    #[serde(default)]
    pub embedding_sexpr: Option<String>,
    #[serde(default)]
    pub embedding_sizes: Option<Vec<usize>>,
    #[serde(default)]
    pub embedding_weights: Vec<f64>,
    #[serde(default)]
    pub embedding_scale: Option<f64>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn new(
        f: &PredictorMlp,
        g: Option<&Embedding>,
        system: Option<SystemKind>,
        tailoring: Option<&NoetherConfig>,
        config: serde_json::Value,
    ) -> Self {
        let ctx = system.map(DslContext::for_system);
        let scale = match g {
            Some(Embedding::Symbolic(s)) => Some(s.scale),
            _ => None,
        };
        let (kind, sexpr, sizes, weights) = match g {
            None => ("none", None, None, Vec::new()),
            Some(Embedding::Symbolic(s)) => (
                "symbolic",
                ctx.as_ref().map(|c| s.expr.to_sexpr(c)),
                None,
                s.params.values().to_vec(),
            ),
            Some(Embedding::Neural(n)) => ("neural", None, Some(n.net.sizes.clone()), n.params.values().to_vec()),
        };
        Self {
            version: CHECKPOINT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            system,
            tailoring: tailoring.cloned(),
            predictor_sizes: f.net.sizes.clone(),
            predictor_weights: f.theta().to_vec(),
            embedding_kind: kind.to_string(),
            embedding_sexpr: sexpr,
            embedding_sizes: sizes,
            embedding_weights: weights,
            embedding_scale: scale,
            config,
        }
    }

    pub fn check_version(&self) -> Result<(), TailorError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(TailorError::Config(format!(
                "checkpoint format version {} is not supported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        Ok(())
    }

    pub fn predictor(&self) -> Result<PredictorMlp, TailorError> {
        self.check_version()?;
        let net = Mlp::new(self.predictor_sizes.clone());
        if net.n_params() != self.predictor_weights.len() {
            return Err(TailorError::Config(format!(
                "checkpoint has {} predictor weights, architecture needs {}",
                self.predictor_weights.len(),
                net.n_params()
            )));
        }
        Ok(PredictorMlp {
            net,
            params: ParamVector::with_prefix("theta", self.predictor_weights.clone()),
        })
    }

    pub fn embedding(&self, ctx: &DslContext) -> Result<Option<Embedding>, TailorError> {
        match self.embedding_kind.as_str() {
            "none" => Ok(None),
            "symbolic" => {
                let text = self
                    .embedding_sexpr
                    .as_deref()
                    .ok_or_else(|| TailorError::Config("symbolic checkpoint without expression".into()))?;
                let expr = Expr::parse(text, ctx)?;
                let params = ParamVector::with_prefix("c", self.embedding_weights.clone());
                let mut sym = SymbolicEmbedding::new(expr, params)?;
                sym.scale = self.embedding_scale.unwrap_or(1.0);
                Ok(Some(Embedding::Symbolic(sym)))
            }
            "neural" => {
                let sizes = self
                    .embedding_sizes
                    .clone()
                    .ok_or_else(|| TailorError::Config("neural checkpoint without layer sizes".into()))?;
                let net = Mlp::new(sizes);
                if net.n_params() != self.embedding_weights.len() {
                    return Err(TailorError::Config("embedding weight count mismatch".into()));
                }
                Ok(Some(Embedding::Neural(NeuralEmbedding {
                    net,
                    params: ParamVector::with_prefix("phi", self.embedding_weights.clone()),
                })))
            }
            other => Err(TailorError::Config(format!("unknown embedding kind '{other}'"))),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), TailorError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, TailorError> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        ck.check_version()?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::Unit;
    use crate::dynamics::{generate_dataset, DataConfig, SystemSpec};

    fn toy_predictor() -> PredictorMlp {
        PredictorMlp::new(&[6], 3)
    }

    #[test]
    fn mlp_backward_matches_tape() {
        let net = Mlp::with_hidden(2, &[5, 4], 3);
        let params = net.init_params(9);
        let x = [0.3, -0.7];
        let mut acts = Vec::new();
        net.forward_into(&params, &x, &mut acts);
        let dout = [0.5, -1.0, 2.0];
        let mut grad = vec![0.0; params.len()];
        net.backward(&params, &acts, &dout, &mut grad);

        let mut tape = Tape::new();
        let pv: Vec<Var> = params.iter().enumerate().map(|(i, &v)| tape.leaf(i, v)).collect();
        let xv = [tape.constant(x[0]), tape.constant(x[1])];
        let out = net.record(&mut tape, &pv, &xv);
        let terms: Vec<(Var, Var)> = out
            .iter()
            .zip(dout)
            .map(|(&o, d)| (o, tape.constant(d)))
            .collect();
        let y = tape.sum_prod(&terms);
        let tg = tape.gradient(y, &pv).unwrap();
        for (a, b) in grad.iter().zip(&tg) {
            assert!((a - b).abs() < 1e-12);
        }
        let fwd = net.forward(&params, &x);
        for (a, b) in fwd.iter().zip(&out) {
            assert!((a - tape.value(*b)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_field_rollout_is_constant() {
        let mut f = toy_predictor();
        let zeros = vec![0.0; f.params.len()];
        f = f.with_params(zeros);
        let x0 = State::new(0.4, -0.2);
        assert!(rollout(&f, x0, 5, 0.1).unwrap().iter().all(|s| *s == x0));
        let f = toy_predictor();
        assert!(rollout(&f, x0, 5, 0.0).unwrap().iter().all(|s| *s == x0));
    }

    #[test]
    fn noether_variants_on_known_values() {
        // g = q on a path with q = 0, 1, 3
        let ctx = DslContext::for_system(SystemKind::IdealPendulum);
        let g = Embedding::symbolic(Expr::input_in(0, &ctx), ParamVector::empty()).unwrap();
        let x0 = State::new(0.0, 0.0);
        let preds = [State::new(1.0, 0.0), State::new(3.0, 0.0)];
        assert_eq!(noether_loss(&g, x0, &preds, NoetherVariant::AnchorA).unwrap(), 10.0);
        assert_eq!(noether_loss(&g, x0, &preds, NoetherVariant::PairwiseB).unwrap(), 5.0);
    }

    #[test]
    fn constant_embedding_gives_zero_loss_and_no_change() {
        let g = Embedding::symbolic(Expr::param(Unit::DIMENSIONLESS), ParamVector::with_prefix("c", vec![2.5])).unwrap();
        let f = toy_predictor();
        let x0 = State::new(0.5, 0.1);
        let cfg = NoetherConfig::default();
        let preds = rollout(&f, x0, cfg.horizon, cfg.dt).unwrap();
        for v in [NoetherVariant::AnchorA, NoetherVariant::PairwiseB] {
            assert_eq!(noether_loss(&g, x0, &preds, v).unwrap(), 0.0);
        }
        let tailored = predict_sequence(&f, &g, x0, &cfg).unwrap();
        assert_eq!(tailored, preds);
    }

    #[test]
    fn tailoring_true_energy_reduces_noether_loss() {
        let spec = SystemSpec::ideal_spring();
        let data = generate_dataset(&spec, &DataConfig { train_trajectories: 5, ..Default::default() }, 0).unwrap();
        let (f, _) = train_baseline(
            &data.train,
            &BaselineConfig { hidden: vec![16], epochs: 20, seed: 1, ..Default::default() },
        )
        .unwrap();
        let ctx = DslContext::for_system(SystemKind::IdealSpring);
        let h = Expr::parse("(add (sq (in 0)) (sq (in 1)))", &ctx).unwrap();
        let g = Embedding::symbolic(h, ParamVector::empty()).unwrap();
        let x0 = data.test[0].states[0];
        let cfg = NoetherConfig { inner_lr: 1e-3, ..Default::default() };
        let before = noether_loss(&g, x0, &rollout(&f, x0, cfg.horizon, cfg.dt).unwrap(), cfg.variant).unwrap();
        let tailored = f.with_params(tailor_step(&f, &g, x0, &cfg).unwrap().values().to_vec());
        let after = noether_loss(&g, x0, &rollout(&tailored, x0, cfg.horizon, cfg.dt).unwrap(), cfg.variant).unwrap();
        assert!(after <= before, "{after} > {before}");
    }

    #[test]
    fn zero_outer_rates_leave_weights_unchanged() {
        let spec = SystemSpec::ideal_spring();
        let data = generate_dataset(&spec, &DataConfig { train_trajectories: 3, ..Default::default() }, 0).unwrap();
        let f = toy_predictor();
        let g = Embedding::neural(&[4], 2, 5);
        let cfg = NoetherConfig { outer_lr: 0.0, embedding_lr: 0.0, ..Default::default() };
        let out = meta_train(&f, &g, &data.train, None, &cfg, &MetaTrainConfig { epochs: 1, ..Default::default() }).unwrap();
        assert_eq!(out.predictor, f);
        assert_eq!(out.embedding.phi(), g.phi());
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let f = toy_predictor();
        let g = Embedding::neural(&[4], 2, 5);
        let ctx = DslContext::for_system(SystemKind::IdealSpring);
        let ck = Checkpoint::new(&f, Some(&g), Some(SystemKind::IdealSpring), None, serde_json::json!({"k": 1}));
        let text = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back.predictor().unwrap(), f);
        let e = back.embedding(&ctx).unwrap().unwrap();
        assert_eq!(e.phi().values(), g.phi().values());
    }

    #[test]
    fn window_starts_respect_horizon() {
        assert_eq!(window_starts(30, 10, 10), vec![0, 10]);
        assert_eq!(window_starts(11, 10, 1), vec![0]);
        assert!(window_starts(10, 10, 1).is_empty());
    }
}
