//! Optimizee tasks: random quadratics and a small digit classifier.

mod digits;
mod quadratic;

pub use digits::{
    build_digit_mlp, load_digit_dataset, load_idx, mlp_loss, DigitBatch, DigitDataset,
    DigitMlpFamily, DigitMlpTask, DIGIT_BATCH, DIGIT_CLASSES,
};
pub use quadratic::{sample_quadratic, QuadraticFamily, QuadraticTask, QUADRATIC_DIM};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Quadratic,
    DigitMlp,
    DenoisePatch,
}

/// A differentiable objective over a flat parameter vector.
pub trait Task {
    fn dim(&self) -> usize;

    /// Records the training loss used at inner step `step` (tasks with
    /// minibatches pick the batch from the step index).
    fn record_loss(&mut self, tape: &mut Tape, step: usize, theta: Var) -> Result<Var>;

    /// Loss reported on evaluation curves.
    fn eval_loss(&mut self, theta: &[f64]) -> Result<f64>;

    /// Training loss and its gradient at `step`.
    fn loss_grad(&mut self, step: usize, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let v = tape.var(Tensor::vector(theta.to_vec()));
        let loss = self.record_loss(&mut tape, step, v)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss is {value} at step {step}")));
        }
        let mut grads = tape.backward(loss)?;
        Ok((value, grads.take(&tape, v)))
    }
}

/// A sampled task plus its starting point.
pub struct TaskInstance {
    pub kind: TaskKind,
    pub task: Box<dyn Task>,
    pub theta0: Vec<f64>,
    pub seed: u64,
}

/// A distribution over tasks, indexed so that draws are replayable.
pub trait TaskFamily {
    fn kind(&self) -> TaskKind;
    fn sample(&self, index: u64) -> Result<TaskInstance>;
}
