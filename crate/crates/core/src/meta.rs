//! Coordinate-wise LSTM optimizer and its truncated-BPTT trainer.
//!
//! Every optimizee coordinate is one row of the LSTM batch; all rows share
//! weights and each keeps its own hidden/cell state. The meta-loss of an
//! unrolled segment is `Σ_{t=1..k} f(θ_t)`, recorded through
//! [`Tape::external`] so that only the path through the updates is
//! differentiated. Gradients fed to the LSTM are treated as data.

use std::path::Path;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{
    bind_params, init_params, lstm_cell, LayerSpec, LstmState, LstmVars, ModelFile, ModelKind,
    ModelSpec, ParamRole,
};
use crate::optim::{BaselineState, Decay, LrSchedule, OptimizerKind};
use crate::tasks::{Task, TaskFamily, TaskInstance};

pub const META_HIDDEN: usize = 20;
pub const META_LAYERS: usize = 2;
pub const PREPROCESS_P: f64 = 10.0;
pub const DEFAULT_OUTPUT_SCALE: f64 = 0.1;

/// How a raw gradient becomes the two LSTM inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Features {
    /// `(log|g|/p, sign g)`, or `(-1, e^p·g)` for tiny gradients.
    LogSign,
    /// `(g, 0)`.
    Raw,
}

impl Features {
    fn code(self) -> f64 {
        match self {
            Features::LogSign => 0.0,
            Features::Raw => 1.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        match c {
            x if x == 0.0 => Ok(Features::LogSign),
            x if x == 1.0 => Ok(Features::Raw),
            _ => Err(Error::Data(format!("unknown feature mode {c}"))),
        }
    }
}

pub fn preprocess_gradient(g: f64) -> Result<(f64, f64)> {
    if !g.is_finite() {
        return Err(Error::Numeric(format!("gradient {g}")));
    }
    let p = PREPROCESS_P;
    if g.abs() >= (-p).exp() {
        Ok((g.abs().ln() / p, g.signum()))
    } else {
        Ok((-1.0, p.exp() * g))
    }
}

fn feature_matrix(g: &[f64], mode: Features) -> Result<Tensor> {
    let mut out = Vec::with_capacity(2 * g.len());
    for (i, &v) in g.iter().enumerate() {
        let (a, b) = match mode {
            Features::LogSign => preprocess_gradient(v)
                .map_err(|_| Error::Numeric(format!("gradient coordinate {i} is {v}")))?,
            Features::Raw if v.is_finite() => (v, 0.0),
            Features::Raw => return Err(Error::Numeric(format!("gradient coordinate {i} is {v}"))),
        };
        out.push(a);
        out.push(b);
    }
    Tensor::new(&[g.len(), 2], out)
}

/// Two stacked LSTM layers (2 → 20 → 20) and a 20 → 1 projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaOptimizer {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
    pub output_scale: f64,
    pub features: Features,
}

pub fn meta_spec() -> ModelSpec {
    ModelSpec::new(vec![
        LayerSpec::lstm(2, META_HIDDEN),
        LayerSpec::lstm(META_HIDDEN, META_HIDDEN),
        LayerSpec::dense(META_HIDDEN, 1, None),
    ])
    .expect("meta-optimizer layers chain")
}

impl MetaOptimizer {
    pub fn new(seed: u64) -> Self {
        let spec = meta_spec();
        let params = init_params(&spec, seed).into_data();
        Self {
            spec,
            params,
            output_scale: DEFAULT_OUTPUT_SCALE,
            features: Features::LogSign,
        }
    }

    /// Same as [`MetaOptimizer::new`] with the projection zeroed, so every
    /// update is exactly 0.
    pub fn zero_projection(seed: u64) -> Self {
        let mut opt = Self::new(seed);
        let off = opt.spec.layout().layers[2].offset;
        opt.params[off..].fill(0.0);
        opt
    }

    pub fn to_model_file(&self) -> ModelFile {
        ModelFile {
            kind: ModelKind::LearnedOptimizer,
            spec: self.spec.clone(),
            scalars: vec![self.output_scale, self.features.code()],
            params: self.params.clone(),
            buffers: Vec::new(),
        }
    }

    pub fn from_model_file(file: ModelFile) -> Result<Self> {
        if file.kind != ModelKind::LearnedOptimizer {
            return Err(Error::Data("model file does not hold a learned optimizer".into()));
        }
        if file.spec != meta_spec() {
            return Err(Error::Data("unexpected learned-optimizer architecture".into()));
        }
        let [scale, features] = file.scalars[..] else {
            return Err(Error::Data(format!(
                "expected 2 scalars, found {}",
                file.scalars.len()
            )));
        };
        Ok(Self {
            spec: file.spec,
            params: file.params,
            output_scale: scale,
            features: Features::from_code(features)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_model_file().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_model_file(ModelFile::read(path)?)
    }
}

/// Per-coordinate recurrent state, one [`LstmState`] per stacked layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaOptimizerState {
    pub layers: Vec<LstmState>,
}

impl MetaOptimizerState {
    pub fn new(coords: usize) -> Self {
        Self {
            layers: (0..META_LAYERS)
                .map(|_| LstmState::zeros(coords, META_HIDDEN))
                .collect(),
        }
    }

    pub fn coords(&self) -> usize {
        self.layers[0].rows()
    }
}

struct MetaVars {
    lstm: [LstmVars; META_LAYERS],
    proj_w: Var,
    proj_b: Var,
    scale: Var,
}

fn bind(tape: &mut Tape, opt: &MetaOptimizer, trainable: bool) -> Result<(Var, Var, MetaVars)> {
    let flat = Tensor::vector(opt.params.clone());
    let scale = Tensor::scalar(opt.output_scale);
    let (params, scale) = if trainable {
        (tape.var(flat), tape.var(scale))
    } else {
        (tape.constant(flat), tape.constant(scale))
    };
    let layers = bind_params(tape, &opt.spec, params)?;
    let vars = MetaVars {
        lstm: [
            LstmVars::from_layer(&layers[0])?,
            LstmVars::from_layer(&layers[1])?,
        ],
        proj_w: layers[2].get(ParamRole::Weight)?,
        proj_b: layers[2].get(ParamRole::Bias)?,
        scale,
    };
    Ok((params, scale, vars))
}

struct TapeState {
    h: Vec<Var>,
    c: Vec<Var>,
}

impl TapeState {
    fn load(tape: &mut Tape, state: &MetaOptimizerState) -> Result<Self> {
        let n = state.coords();
        let (mut h, mut c) = (Vec::new(), Vec::new());
        for s in &state.layers {
            h.push(tape.constant(Tensor::new(&[n, META_HIDDEN], s.h.clone())?));
            c.push(tape.constant(Tensor::new(&[n, META_HIDDEN], s.c.clone())?));
        }
        Ok(Self { h, c })
    }

    fn detach(&self, tape: &Tape) -> MetaOptimizerState {
        MetaOptimizerState {
            layers: (0..META_LAYERS)
                .map(|l| LstmState {
                    h: tape.value(self.h[l]).data().to_vec(),
                    c: tape.value(self.c[l]).data().to_vec(),
                    hidden: META_HIDDEN,
                })
                .collect(),
        }
    }
}

/// Records one optimizer step; returns the `[n]` update.
fn record_step(
    tape: &mut Tape,
    vars: &MetaVars,
    features: Features,
    g: &[f64],
    state: &mut TapeState,
) -> Result<Var> {
    let mut x = tape.constant(feature_matrix(g, features)?);
    for l in 0..META_LAYERS {
        let (h, c) = lstm_cell(tape, &vars.lstm[l], x, state.h[l], state.c[l])?;
        state.h[l] = h;
        state.c[l] = c;
        x = h;
    }
    let out = tape.linear(x, vars.proj_w, Some(vars.proj_b))?;
    let out = tape.reshape(out, &[g.len()])?;
    tape.mul(out, vars.scale)
}

/// One frozen-weight step: returns the update to add to `θ`.
pub fn meta_step(
    opt: &MetaOptimizer,
    state: &MetaOptimizerState,
    g: &[f64],
) -> Result<(Vec<f64>, MetaOptimizerState)> {
    if g.len() != state.coords() {
        return Err(Error::shape(format!(
            "{} gradient entries for {} coordinate states",
            g.len(),
            state.coords()
        )));
    }
    let mut tape = Tape::new();
    let (_, _, vars) = bind(&mut tape, opt, false)?;
    let mut ts = TapeState::load(&mut tape, state)?;
    let upd = record_step(&mut tape, &vars, opt.features, g, &mut ts)?;
    Ok((tape.value(upd).data().to_vec(), ts.detach(&tape)))
}

/// Where an inner optimization run currently stands.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerRun {
    pub theta: Vec<f64>,
    pub state: MetaOptimizerState,
    pub step: usize,
    /// Loss and gradient at `theta` for `step`, if already computed.
    pub pending: Option<(f64, Vec<f64>)>,
}

impl InnerRun {
    pub fn new(theta0: Vec<f64>) -> Self {
        let n = theta0.len();
        Self {
            theta: theta0,
            state: MetaOptimizerState::new(n),
            step: 0,
            pending: None,
        }
    }

    fn loss_grad(&mut self, task: &mut dyn Task) -> Result<(f64, Vec<f64>)> {
        let (f, g) = match self.pending.take() {
            Some(p) => p,
            None => task.loss_grad(self.step, &self.theta)?,
        };
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("inner loss {f} at step {}", self.step)));
        }
        Ok((f, g))
    }
}

/// Tape handles of one recorded segment.
#[derive(Debug, Clone)]
pub struct Segment {
    pub meta_loss: Var,
    pub params: Var,
    pub output_scale: Var,
    /// `f(θ_1), …, f(θ_k)`.
    pub losses: Vec<f64>,
}

/// Records `k` inner steps from `run` onto `tape` and advances `run` to the
/// detached end point.
pub fn unroll_segment(
    tape: &mut Tape,
    task: &mut dyn Task,
    opt: &MetaOptimizer,
    run: &mut InnerRun,
    k: usize,
) -> Result<Segment> {
    if k == 0 {
        return Err(Error::Contract("unroll length must be at least 1".into()));
    }
    if run.theta.len() != run.state.coords() {
        return Err(Error::shape("run state does not match theta".to_string()));
    }
    let (params, scale, vars) = bind(tape, opt, true)?;
    let mut ts = TapeState::load(tape, &run.state)?;
    let mut theta = tape.constant(Tensor::vector(run.theta.clone()));
    let mut acc: Option<Var> = None;
    let mut losses = Vec::with_capacity(k);
    let (_, mut g) = run.loss_grad(task)?;
    for _ in 0..k {
        let upd = record_step(tape, &vars, opt.features, &g, &mut ts)?;
        theta = tape.add(theta, upd)?;
        run.theta = tape.value(theta).data().to_vec();
        run.step += 1;
        let (f, g_next) = run.loss_grad(task)?;
        let term = tape.external(theta, f, g_next.clone())?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
        losses.push(f);
        g = g_next;
    }
    run.pending = Some((*losses.last().unwrap(), g));
    run.state = ts.detach(tape);
    Ok(Segment {
        meta_loss: acc.unwrap(),
        params,
        output_scale: scale,
        losses,
    })
}

/// Meta-loss value and its gradients w.r.t. the optimizer weights and
/// output scale for one segment.
pub fn segment_gradient(
    task: &mut dyn Task,
    opt: &MetaOptimizer,
    run: &mut InnerRun,
    k: usize,
) -> Result<(f64, Vec<f64>, f64)> {
    let mut tape = Tape::new();
    let seg = unroll_segment(&mut tape, task, opt, run, k)?;
    let mut grads = tape.backward(seg.meta_loss)?;
    let gp = grads.take(&tape, seg.params);
    let gs = grads.take(&tape, seg.output_scale)[0];
    Ok((tape.scalar(seg.meta_loss), gp, gs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaTrainConfig {
    pub unroll: usize,
    pub epochs: usize,
    pub inner_steps: usize,
    pub tasks_per_epoch: usize,
    pub meta_lr: f64,
    /// Decay of `meta_lr` over epochs.
    pub meta_lr_decay: Decay,
    /// Rescales the summed meta-gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
    pub train_output_scale: bool,
    pub output_scale: f64,
    pub features: Features,
    /// Descend on `log(meta_loss)` per segment instead of `meta_loss`.
    pub log_meta_loss: bool,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            unroll: 20,
            epochs: 100,
            inner_steps: 100,
            tasks_per_epoch: 1,
            meta_lr: 1e-2,
            meta_lr_decay: Decay::Constant,
            clip_norm: Some(1.0),
            train_output_scale: false,
            output_scale: DEFAULT_OUTPUT_SCALE,
            features: Features::LogSign,
            log_meta_loss: false,
            seed: 0,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Spec(m.to_string()));
        if self.unroll == 0 {
            return bad("unroll must be at least 1");
        }
        if self.inner_steps == 0 || self.inner_steps % self.unroll != 0 {
            return bad("inner steps must be a positive multiple of the unroll length");
        }
        if self.epochs == 0 || self.tasks_per_epoch == 0 {
            return bad("epochs and tasks per epoch must be positive");
        }
        if !(self.meta_lr > 0.0) || !(self.output_scale > 0.0) {
            return bad("meta lr and output scale must be positive");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }

    pub fn segments_per_epoch(&self) -> usize {
        self.inner_steps / self.unroll
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaTrainReport {
    pub optimizer: MetaOptimizer,
    /// Mean inner loss `f(θ_t)` over each epoch's unrolled steps.
    pub curve: Vec<f64>,
    /// Task runs abandoned after a non-finite loss.
    pub diverged: usize,
}

/// Trains a fresh optimizer on tasks drawn from `family`.
///
/// Each epoch draws `tasks_per_epoch` tasks (indices continue across
/// epochs), runs them side by side segment by segment, sums their
/// meta-gradients in task order and takes one Adam step per segment.
pub fn meta_train(family: &dyn TaskFamily, cfg: &MetaTrainConfig) -> Result<MetaTrainReport> {
    meta_train_from(family, cfg, MetaOptimizer::new(cfg.seed))
}

pub fn meta_train_from(
    family: &dyn TaskFamily,
    cfg: &MetaTrainConfig,
    mut opt: MetaOptimizer,
) -> Result<MetaTrainReport> {
    cfg.validate()?;
    opt.output_scale = cfg.output_scale;
    opt.features = cfg.features;
    let n_weights = opt.params.len() + usize::from(cfg.train_output_scale);
    let mut adam = BaselineState::new(OptimizerKind::Adam, cfg.meta_lr, n_weights)?;
    let schedule = LrSchedule::new(cfg.meta_lr, cfg.meta_lr_decay)?;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut diverged = 0;
    for epoch in 0..cfg.epochs {
        adam.lr = schedule.lr_at(epoch);
        let mut tasks: Vec<Option<(TaskInstance, InnerRun)>> = (0..cfg.tasks_per_epoch)
            .map(|j| {
                let mut inst = family.sample((epoch * cfg.tasks_per_epoch + j) as u64)?;
                let run = InnerRun::new(std::mem::take(&mut inst.theta0));
                Ok(Some((inst, run)))
            })
            .collect::<Result<_>>()?;
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        for _ in 0..cfg.segments_per_epoch() {
            let mut grad = vec![0.0; n_weights];
            let mut any = false;
            for slot in tasks.iter_mut() {
                let Some((inst, run)) = slot else { continue };
                match segment_gradient(inst.task.as_mut(), &opt, run, cfg.unroll) {
                    Ok((loss, gp, gs)) if loss.is_finite() && gs.is_finite() && gp.iter().all(|v| v.is_finite()) => {
                        loss_sum += loss;
                        loss_count += cfg.unroll;
                        let w = if cfg.log_meta_loss { 1.0 / loss.max(1e-300) } else { 1.0 };
                        grad.iter_mut().zip(&gp).for_each(|(a, b)| *a += w * b);
                        if cfg.train_output_scale {
                            grad[n_weights - 1] += w * gs;
                        }
                        any = true;
                    }
                    Ok(_) | Err(Error::Numeric(_)) => {
                        *slot = None;
                        diverged += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            if !any {
                continue;
            }
            if let Some(clip) = cfg.clip_norm {
                let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > clip {
                    grad.iter_mut().for_each(|v| *v *= clip / norm);
                }
            }
            let mut w = opt.params.clone();
            if cfg.train_output_scale {
                w.push(opt.output_scale);
            }
            adam.step(&mut w, &grad)?;
            if cfg.train_output_scale {
                opt.output_scale = w.pop().unwrap().max(1e-8);
            }
            opt.params = w;
        }
        if loss_count == 0 {
            return Err(Error::Training(format!(
                "meta-loss was non-finite for all of epoch {epoch}"
            )));
        }
        curve.push(loss_sum / loss_count as f64);
    }
    Ok(MetaTrainReport {
        optimizer: opt,
        curve,
        diverged,
    })
}

/// Stateful driver for using a trained optimizer on a parameter vector.
#[derive(Debug, Clone)]
pub struct MetaRunner {
    pub opt: MetaOptimizer,
    pub state: MetaOptimizerState,
}

impl MetaRunner {
    pub fn new(opt: MetaOptimizer, coords: usize) -> Self {
        Self {
            opt,
            state: MetaOptimizerState::new(coords),
        }
    }

    pub fn step(&mut self, theta: &mut [f64], g: &[f64]) -> Result<()> {
        let (upd, next) = meta_step(&self.opt, &self.state, g)?;
        theta.iter_mut().zip(&upd).for_each(|(p, u)| *p += u);
        self.state = next;
        Ok(())
    }
}

/// Runs `steps` frozen-weight updates and returns `[f(θ₀), …, f(θ_steps)]`.
pub fn apply_trained(inst: &mut TaskInstance, opt: &MetaOptimizer, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Contract("apply_trained needs at least one step".into()));
    }
    let mut theta = inst.theta0.clone();
    let mut runner = MetaRunner::new(opt.clone(), theta.len());
    let mut curve = Vec::with_capacity(steps + 1);
    let first = inst.task.eval_loss(&theta)?;
    curve.push(first);
    for step in 0..steps {
        let (_, g) = inst.task.loss_grad(step, &theta)?;
        runner.step(&mut theta, &g)?;
        let loss = inst.task.eval_loss(&theta)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss {loss} after step {}", step + 1)));
        }
        curve.push(loss);
    }
    Ok(curve)
}
