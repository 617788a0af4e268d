use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;

use super::{Task, TaskFamily, TaskInstance, TaskKind};
use crate::autodiff::{ActivationKind, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{bind_params, init_params, sequential_forward, LayerSpec, ModelSpec};
use crate::rng;

pub const DIGIT_CLASSES: usize = 10;
pub const DIGIT_BATCH: usize = 128;

const BUNDLED: &[u8] = include_bytes!("../../data/digits8x8.bin");
const BUNDLED_MAGIC: &[u8; 4] = b"DGT8";
const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const TEST_FRACTION: f64 = 0.2;

/// Grayscale digits with pixels in `[0, 1]` and a seeded train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitDataset {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub labels: Vec<u8>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// A batch as `x: [B, width·height]` plus labels.
#[derive(Debug, Clone)]
pub struct DigitBatch {
    pub x: Tensor,
    pub labels: Vec<u8>,
}

fn u32_at(bytes: &[u8], offset: usize, big_endian: bool) -> Result<u32> {
    let b: [u8; 4] = bytes
        .get(offset..offset + 4)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| Error::Parse {
            offset,
            msg: "unexpected end of file".into(),
        })?;
    Ok(if big_endian {
        u32::from_be_bytes(b)
    } else {
        u32::from_le_bytes(b)
    })
}

fn bytes_at(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8]> {
    bytes.get(offset..offset + len).ok_or_else(|| Error::Parse {
        offset: bytes.len().min(offset),
        msg: format!("need {len} bytes at {offset}, file has {}", bytes.len()),
    })
}

impl DigitDataset {
    /// The bundled 8×8 corpus.
    pub fn bundled(seed: u64) -> Self {
        Self::from_bundled_bytes(BUNDLED, seed).expect("bundled digit corpus is well formed")
    }

    /// Parses the plain binary layout: `"DGT8"`, then little-endian u32
    /// count, width, height, then `count·width·height` pixel bytes, then
    /// `count` label bytes.
    pub fn from_bundled_bytes(bytes: &[u8], seed: u64) -> Result<Self> {
        if bytes_at(bytes, 0, 4)? != BUNDLED_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                msg: "bad magic".into(),
            });
        }
        let count = u32_at(bytes, 4, false)? as usize;
        let width = u32_at(bytes, 8, false)? as usize;
        let height = u32_at(bytes, 12, false)? as usize;
        let npix = count * width * height;
        let pixels = bytes_at(bytes, 16, npix)?;
        let labels = bytes_at(bytes, 16 + npix, count)?;
        if bytes.len() != 16 + npix + count {
            return Err(Error::Parse {
                offset: 16 + npix + count,
                msg: "trailing bytes".into(),
            });
        }
        Self::assemble(width, height, pixels, labels, 16 + npix, seed)
    }

    fn assemble(
        width: usize,
        height: usize,
        pixels: &[u8],
        labels: &[u8],
        label_offset: usize,
        seed: u64,
    ) -> Result<Self> {
        if width == 0 || height == 0 || labels.is_empty() {
            return Err(Error::Data("empty digit dataset".into()));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= DIGIT_CLASSES) {
            return Err(Error::Parse {
                offset: label_offset + i,
                msg: format!("label {} out of range", labels[i]),
            });
        }
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng::stream(seed, "digit-split", 0));
        let n_test = ((labels.len() as f64) * TEST_FRACTION).round() as usize;
        let test = order[..n_test].to_vec();
        let train = order[n_test..].to_vec();
        Ok(Self {
            width,
            height,
            pixels: pixels.iter().map(|&p| p as f64 / 255.0).collect(),
            labels: labels.to_vec(),
            train,
            test,
        })
    }

    pub fn features(&self) -> usize {
        self.width * self.height
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<DigitBatch> {
        let d = self.features();
        let mut x = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("sample {i} out of range")));
            }
            x.extend_from_slice(&self.pixels[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
        }
        Ok(DigitBatch {
            x: Tensor::new(&[indices.len(), d], x)?,
            labels,
        })
    }
}

/// Loads a digit corpus. Accepts the bundled binary layout or an IDX image
/// file whose labels sit next to it (`*-images-idx3-ubyte` paired with
/// `*-labels-idx1-ubyte`).
pub fn load_digit_dataset(path: &Path, seed: u64) -> Result<DigitDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(BUNDLED_MAGIC) {
        return DigitDataset::from_bundled_bytes(&bytes, seed);
    }
    if u32_at(&bytes, 0, true)? == IDX_IMAGES {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        let labels = path.with_file_name(name.replace("images", "labels").replace("idx3", "idx1"));
        return load_idx(path, &labels, seed);
    }
    Err(Error::Parse {
        offset: 0,
        msg: "unrecognized digit file".into(),
    })
}

/// Loads the big-endian IDX image/label pair.
pub fn load_idx(images: &Path, labels: &Path, seed: u64) -> Result<DigitDataset> {
    let img = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    if u32_at(&img, 0, true)? != IDX_IMAGES {
        return Err(Error::Parse {
            offset: 0,
            msg: "not an IDX image file".into(),
        });
    }
    if u32_at(&lab, 0, true)? != IDX_LABELS {
        return Err(Error::Parse {
            offset: 0,
            msg: "not an IDX label file".into(),
        });
    }
    let count = u32_at(&img, 4, true)? as usize;
    let height = u32_at(&img, 8, true)? as usize;
    let width = u32_at(&img, 12, true)? as usize;
    if u32_at(&lab, 4, true)? as usize != count {
        return Err(Error::Parse {
            offset: 4,
            msg: "label count differs from image count".into(),
        });
    }
    let pixels = bytes_at(&img, 16, count * width * height)?;
    let label_bytes = bytes_at(&lab, 8, count)?;
    DigitDataset::assemble(width, height, pixels, label_bytes, 8, seed)
}

/// `in → hidden (sigmoid) → hidden (sigmoid) → 10 (sigmoid)`.
pub fn build_digit_mlp(input: usize, hidden: usize) -> Result<ModelSpec> {
    if hidden == 0 || input == 0 {
        return Err(Error::Spec("MLP widths must be positive".into()));
    }
    let s = Some(ActivationKind::Sigmoid);
    ModelSpec::new(vec![
        LayerSpec::dense(input, hidden, s),
        LayerSpec::dense(hidden, hidden, s),
        LayerSpec::dense(hidden, DIGIT_CLASSES, s),
    ])
}

/// Mean binary cross-entropy of the MLP's sigmoid outputs against one-hot
/// labels.
pub fn mlp_loss(tape: &mut Tape, spec: &ModelSpec, theta: Var, batch: &DigitBatch) -> Result<Var> {
    if batch.labels.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut onehot = vec![0.0; batch.labels.len() * DIGIT_CLASSES];
    for (i, &l) in batch.labels.iter().enumerate() {
        if l as usize >= DIGIT_CLASSES {
            return Err(Error::Data(format!("label {l} out of range")));
        }
        onehot[i * DIGIT_CLASSES + l as usize] = 1.0;
    }
    let params = bind_params(tape, spec, theta)?;
    let x = tape.constant(batch.x.clone());
    let out = sequential_forward(tape, spec, &params, x, &mut [])?;
    let target = tape.constant(Tensor::new(&[batch.labels.len(), DIGIT_CLASSES], onehot)?);
    tape.bce(out, target)
}

/// MLP training on minibatches chosen by `(seed, step)`; curves report the
/// loss on the whole training split.
pub struct DigitMlpTask {
    pub data: Arc<DigitDataset>,
    pub spec: ModelSpec,
    pub batch_size: usize,
    pub seed: u64,
    full: Option<DigitBatch>,
}

impl DigitMlpTask {
    pub fn new(data: Arc<DigitDataset>, hidden: usize, batch_size: usize, seed: u64) -> Result<Self> {
        let spec = build_digit_mlp(data.features(), hidden)?;
        if batch_size == 0 {
            return Err(Error::Data("batch size must be positive".into()));
        }
        Ok(Self {
            data,
            spec,
            batch_size,
            seed,
            full: None,
        })
    }

    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.data.train.len();
        let k = self.batch_size.min(n);
        let mut r = rng::stream(self.seed, "minibatch", step as u64);
        rand::seq::index::sample(&mut r, n, k)
            .into_iter()
            .map(|i| self.data.train[i])
            .collect()
    }
}

impl Task for DigitMlpTask {
    fn dim(&self) -> usize {
        self.spec.param_count()
    }

    fn record_loss(&mut self, tape: &mut Tape, step: usize, theta: Var) -> Result<Var> {
        let batch = self.data.batch(&self.batch_indices(step))?;
        mlp_loss(tape, &self.spec, theta, &batch)
    }

    fn eval_loss(&mut self, theta: &[f64]) -> Result<f64> {
        if self.full.is_none() {
            self.full = Some(self.data.batch(&self.data.train)?);
        }
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(theta.to_vec()));
        let loss = mlp_loss(&mut tape, &self.spec, v, self.full.as_ref().unwrap())?;
        Ok(tape.scalar(loss))
    }
}

/// Fresh MLP initializations on a fixed dataset.
#[derive(Clone)]
pub struct DigitMlpFamily {
    pub data: Arc<DigitDataset>,
    pub hidden: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TaskFamily for DigitMlpFamily {
    fn kind(&self) -> TaskKind {
        TaskKind::DigitMlp
    }

    fn sample(&self, index: u64) -> Result<TaskInstance> {
        let seed = rng::derive_seed(self.seed, "digit-task", index);
        let task = DigitMlpTask::new(self.data.clone(), self.hidden, self.batch_size, seed)?;
        let theta0 = init_params(&task.spec, seed).into_data();
        Ok(TaskInstance {
            kind: TaskKind::DigitMlp,
            task: Box::new(task),
            theta0,
            seed,
        })
    }
}
