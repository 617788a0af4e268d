//! Hand-tuned first-order optimizers and learning-rate grid search.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tasks::TaskFamily;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Nag,
    RmsProp,
    Adam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 5] = [
        OptimizerKind::Sgd,
        OptimizerKind::Momentum,
        OptimizerKind::Nag,
        OptimizerKind::RmsProp,
        OptimizerKind::Adam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Nag => "nag",
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Spec(format!("unknown optimizer {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    pub rho: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            rho: 0.9,
        }
    }
}

/// Optimizer hyperparameters plus per-coordinate slots.
///
/// `m` holds velocity (momentum, NAG) or the first moment (Adam); `v` holds
/// the squared-gradient average (RMSProp, Adam).
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub hyper: Hyper,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl BaselineState {
    pub fn new(kind: OptimizerKind, lr: f64, len: usize) -> Result<Self> {
        Self::with_hyper(kind, lr, Hyper::default(), len)
    }

    pub fn with_hyper(kind: OptimizerKind, lr: f64, hyper: Hyper, len: usize) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Spec(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            kind,
            lr,
            hyper,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        })
    }

    /// Applies one update to `theta` in place.
    pub fn step(&mut self, theta: &mut [f64], g: &[f64]) -> Result<()> {
        if theta.len() != g.len() || g.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer step: theta {}, grad {}, slots {}",
                theta.len(),
                g.len(),
                self.m.len()
            )));
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("gradient coordinate {i} is {}", g[i])));
        }
        self.t += 1;
        let Hyper {
            beta1,
            beta2,
            eps,
            momentum: mu,
            rho,
        } = self.hyper;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, gi) in theta.iter_mut().zip(g) {
                    *p -= lr * gi;
                }
            }
            OptimizerKind::Momentum => {
                for ((p, gi), m) in theta.iter_mut().zip(g).zip(&mut self.m) {
                    *m = mu * *m + gi;
                    *p -= lr * *m;
                }
            }
            OptimizerKind::Nag => {
                for ((p, gi), m) in theta.iter_mut().zip(g).zip(&mut self.m) {
                    *m = mu * *m + gi;
                    *p -= lr * (gi + mu * *m);
                }
            }
            OptimizerKind::RmsProp => {
                for ((p, gi), v) in theta.iter_mut().zip(g).zip(&mut self.v) {
                    *v = rho * *v + (1.0 - rho) * gi * gi;
                    *p -= lr * gi / (v.sqrt() + eps);
                }
            }
            OptimizerKind::Adam => {
                let t = self.t as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, gi), m), v) in theta.iter_mut().zip(g).zip(&mut self.m).zip(&mut self.v) {
                    *m = beta1 * *m + (1.0 - beta1) * gi;
                    *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Pure form of [`BaselineState::step`].
pub fn baseline_step(
    state: &BaselineState,
    theta: &[f64],
    g: &[f64],
) -> Result<(Vec<f64>, BaselineState)> {
    let mut next = state.clone();
    let mut out = theta.to_vec();
    next.step(&mut out, g)?;
    Ok((out, next))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decay {
    Constant,
    /// Multiply by `factor` every `interval` epochs.
    Step { factor: f64, interval: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: Decay,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Result<Self> {
        Self::new(lr, Decay::Constant)
    }

    /// Halves every 10 epochs.
    pub fn default_step(lr: f64) -> Result<Self> {
        Self::new(
            lr,
            Decay::Step {
                factor: 0.5,
                interval: 10,
            },
        )
    }

    pub fn new(initial: f64, decay: Decay) -> Result<Self> {
        if !(initial > 0.0 && initial.is_finite()) {
            return Err(Error::Spec(format!("initial lr must be positive, got {initial}")));
        }
        if let Decay::Step { factor, interval } = decay {
            if !(factor > 0.0 && factor <= 1.0) || interval == 0 {
                return Err(Error::Spec(format!(
                    "step decay needs factor in (0, 1] and interval >= 1, got {factor}, {interval}"
                )));
            }
        }
        Ok(Self { initial, decay })
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.decay {
            Decay::Constant => self.initial,
            Decay::Step { factor, interval } => {
                let k = (epoch / interval).min(i32::MAX as usize) as i32;
                (self.initial * factor.powi(k)).max(f64::MIN_POSITIVE)
            }
        }
    }
}

/// Runs `steps` updates from the instance's `θ₀` and returns the evaluation
/// curve `[f(θ₀), …, f(θ_steps)]`. Stops early with `+inf` padding once the
/// loss or gradient goes non-finite.
pub fn run_baseline(
    inst: &mut crate::tasks::TaskInstance,
    kind: OptimizerKind,
    lr: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    let mut theta = inst.theta0.clone();
    let mut state = BaselineState::new(kind, lr, theta.len())?;
    let mut curve = Vec::with_capacity(steps + 1);
    curve.push(inst.task.eval_loss(&theta)?);
    for step in 0..steps {
        let ok = match inst.task.loss_grad(step, &theta) {
            Ok((_, g)) => state.step(&mut theta, &g).is_ok(),
            Err(Error::Numeric(_)) => false,
            Err(e) => return Err(e),
        };
        let loss = if ok {
            inst.task.eval_loss(&theta)?
        } else {
            f64::INFINITY
        };
        if !loss.is_finite() {
            curve.resize(steps + 1, f64::INFINITY);
            break;
        }
        curve.push(loss);
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub best_lr: f64,
    /// `(lr, mean final loss)` per grid entry; diverged runs count as `+inf`.
    pub scores: Vec<(f64, f64)>,
}

/// Picks the grid entry with the lowest score; ties go to the smaller lr.
pub fn select_lr(grid: &[f64], mut score: impl FnMut(f64) -> Result<f64>) -> Result<TuneResult> {
    if grid.is_empty() {
        return Err(Error::Tuning("empty learning-rate grid".into()));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &lr in grid {
        let s = score(lr)?;
        scores.push((lr, if s.is_finite() { s } else { f64::INFINITY }));
    }
    let best = scores
        .iter()
        .filter(|(_, s)| s.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .ok_or_else(|| Error::Tuning("every learning rate diverged".into()))?;
    Ok(TuneResult {
        best_lr: best.0,
        scores,
    })
}

/// Grid search over `lr_grid`, scoring each lr by the mean loss after
/// `steps` updates on the family members `task_indices`.
pub fn tune_baseline(
    family: &dyn TaskFamily,
    kind: OptimizerKind,
    lr_grid: &[f64],
    task_indices: &[u64],
    steps: usize,
) -> Result<TuneResult> {
    if task_indices.is_empty() {
        return Err(Error::Tuning("no tuning tasks".into()));
    }
    select_lr(lr_grid, |lr| {
        let mut total = 0.0;
        for &i in task_indices {
            let mut inst = family.sample(i)?;
            total += run_baseline(&mut inst, kind, lr, steps)?[steps];
        }
        Ok(total / task_indices.len() as f64)
    })
}
