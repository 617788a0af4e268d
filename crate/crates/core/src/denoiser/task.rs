use std::sync::Arc;

use rand::Rng;

use super::model::{DnCnn, DnCnnSpec};
use super::train::{noisy_batch, SigmaMode};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::BnMode;
use crate::rng;
use crate::tasks::{Task, TaskFamily, TaskInstance, TaskKind};

pub const META_PATCH_BATCH: usize = 8;
pub const META_PATCH_CROP: usize = 16;

/// Residual-learning loss of a DnCNN on random crops of clean patches;
/// the crops and noise used at a step depend only on `(seed, step)`.
pub struct DenoisePatchTask {
    model: DnCnn,
    patches: Arc<Vec<Image>>,
    sigma: f64,
    batch: usize,
    crop: usize,
    seed: u64,
    eval: (Tensor, Tensor),
}

impl DenoisePatchTask {
    pub fn new(
        arch: DnCnnSpec,
        patches: Arc<Vec<Image>>,
        sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        let (batch, crop) = (META_PATCH_BATCH, META_PATCH_CROP);
        if patches.iter().any(|p| p.width < crop || p.height < crop) || patches.is_empty() {
            return Err(Error::Data(format!("need patches of at least {crop}x{crop}")));
        }
        let mut model = DnCnn::new(arch, seed)?;
        model.set_mode(BnMode::Train);
        let mut task = Self {
            model,
            patches,
            sigma,
            batch,
            crop,
            seed,
            eval: (Tensor::scalar(0.0), Tensor::scalar(0.0)),
        };
        task.eval = task.batch_at("eval-crops", 0)?;
        Ok(task)
    }

    pub fn initial_params(&self) -> Vec<f64> {
        self.model.params.clone()
    }

    fn batch_at(&self, stream: &str, step: u64) -> Result<(Tensor, Tensor)> {
        let mut r = rng::stream(self.seed, stream, step);
        let crops: Vec<Image> = (0..self.batch)
            .map(|_| {
                let p = &self.patches[r.gen_range(0..self.patches.len())];
                let x = r.gen_range(0..=p.width - self.crop);
                let y = r.gen_range(0..=p.height - self.crop);
                p.crop(x, y, self.crop, self.crop)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Image> = crops.iter().collect();
        let noise_seed = rng::derive_seed(self.seed, stream, step);
        noisy_batch(&refs, SigmaMode::Fixed(self.sigma), noise_seed, "noise", 0)
    }
}

impl Task for DenoisePatchTask {
    fn dim(&self) -> usize {
        self.model.params.len()
    }

    fn record_loss(&mut self, tape: &mut Tape, step: usize, theta: Var) -> Result<Var> {
        let (input, target) = self.batch_at("crops", step as u64)?;
        let x = tape.constant(input);
        let t = tape.constant(target);
        let r = self.model.record_residual(tape, theta, x)?;
        tape.mse(r, t)
    }

    /// Loss on a fixed batch with batch statistics, leaving running
    /// statistics untouched.
    fn eval_loss(&mut self, theta: &[f64]) -> Result<f64> {
        let mut model = self.model.clone();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(theta.to_vec()));
        let x = tape.constant(self.eval.0.clone());
        let t = tape.constant(self.eval.1.clone());
        let r = model.record_residual(&mut tape, v, x)?;
        let loss = tape.mse(r, t)?;
        Ok(tape.scalar(loss))
    }
}

/// Fresh DnCNN initializations on a fixed pool of clean patches.
#[derive(Clone)]
pub struct DenoisePatchFamily {
    pub arch: DnCnnSpec,
    pub patches: Arc<Vec<Image>>,
    pub sigma: f64,
    pub seed: u64,
}

impl TaskFamily for DenoisePatchFamily {
    fn kind(&self) -> TaskKind {
        TaskKind::DenoisePatch
    }

    fn sample(&self, index: u64) -> Result<TaskInstance> {
        let seed = rng::derive_seed(self.seed, "denoise-task", index);
        let task = DenoisePatchTask::new(self.arch, self.patches.clone(), self.sigma, seed)?;
        let theta0 = task.initial_params();
        Ok(TaskInstance {
            kind: TaskKind::DenoisePatch,
            task: Box::new(task),
            theta0,
            seed,
        })
    }
}
