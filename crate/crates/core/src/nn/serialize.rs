//! Versioned little-endian model container.
//!
//! ```text
//! magic      8 bytes  "LDNMODEL"
//! version    u32      1
//! kind       u32      0 = network, 1 = learned optimizer
//! n_layers   u32
//!   kind u8, activation u8, batchnorm u8, reserved u8,
//!   fan_in u32, fan_out u32, kernel u32            (per layer)
//! n_scalars  u32, then f64 each
//! n_params   u64, then f64 each (flat parameter vector)
//! n_buffers  u64, then f64 each (non-trainable state, e.g. running stats)
//! ```

use std::path::Path;

use super::spec::{LayerKind, LayerSpec, ModelSpec};
use crate::autodiff::ActivationKind;
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 8] = b"LDNMODEL";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Network,
    LearnedOptimizer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub kind: ModelKind,
    pub spec: ModelSpec,
    pub scalars: Vec<f64>,
    pub params: Vec<f64>,
    pub buffers: Vec<f64>,
}

fn activation_code(a: Option<ActivationKind>) -> u8 {
    match a {
        None => 0,
        Some(ActivationKind::Relu) => 1,
        Some(ActivationKind::Sigmoid) => 2,
        Some(ActivationKind::Tanh) => 3,
    }
}

impl ModelFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * (self.params.len() + self.buffers.len()));
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        let kind: u32 = match self.kind {
            ModelKind::Network => 0,
            ModelKind::LearnedOptimizer => 1,
        };
        out.extend_from_slice(&kind.to_le_bytes());
        out.extend_from_slice(&(self.spec.layers().len() as u32).to_le_bytes());
        for l in self.spec.layers() {
            out.push(match l.kind {
                LayerKind::Conv => 0,
                LayerKind::Dense => 1,
                LayerKind::Lstm => 2,
            });
            out.push(activation_code(l.activation));
            out.push(l.batchnorm as u8);
            out.push(0);
            for v in [l.fan_in, l.fan_out, l.kernel] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.scalars.len() as u32).to_le_bytes());
        self.scalars
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        for block in [&self.params, &self.buffers] {
            out.extend_from_slice(&(block.len() as u64).to_le_bytes());
            block.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MODEL_MAGIC {
            return Err(r.error_at(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(r.error_at(8, &format!("unsupported version {version}")));
        }
        let kind = match r.u32()? {
            0 => ModelKind::Network,
            1 => ModelKind::LearnedOptimizer,
            k => return Err(r.error_at(12, &format!("unknown model kind {k}"))),
        };
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers.min(4096));
        for _ in 0..n_layers {
            let at = r.pos;
            let head = r.take(4)?;
            let (kind, act, bn) = (head[0], head[1], head[2]);
            let fan_in = r.u32()? as usize;
            let fan_out = r.u32()? as usize;
            let kernel = r.u32()? as usize;
            let kind = match kind {
                0 => LayerKind::Conv,
                1 => LayerKind::Dense,
                2 => LayerKind::Lstm,
                k => return Err(r.error_at(at, &format!("unknown layer kind {k}"))),
            };
            let activation = match act {
                0 => None,
                1 => Some(ActivationKind::Relu),
                2 => Some(ActivationKind::Sigmoid),
                3 => Some(ActivationKind::Tanh),
                a => return Err(r.error_at(at + 1, &format!("unknown activation {a}"))),
            };
            layers.push(LayerSpec {
                kind,
                fan_in,
                fan_out,
                kernel,
                batchnorm: bn != 0,
                activation,
            });
        }
        let spec_end = r.pos;
        let spec = ModelSpec::new(layers).map_err(|e| r.error_at(spec_end, &e.to_string()))?;
        let n_scalars = r.u32()? as usize;
        let scalars = r.f64s(n_scalars)?;
        let n_params = r.u64()? as usize;
        let params_at = r.pos;
        let params = r.f64s(n_params)?;
        if params.len() != spec.param_count() {
            return Err(r.error_at(
                params_at,
                &format!(
                    "{} parameters stored, spec needs {}",
                    params.len(),
                    spec.param_count()
                ),
            ));
        }
        let n_buffers = r.u64()? as usize;
        let buffers = r.f64s(n_buffers)?;
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, "trailing bytes"));
        }
        Ok(Self {
            kind,
            spec,
            scalars,
            params,
            buffers,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, msg: &str) -> Error {
        Error::Parse {
            offset,
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error_at(self.pos, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| self.error_at(self.pos, "length overflow"))?;
        let raw = self.take(len)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
