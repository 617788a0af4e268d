use std::path::Path;

use crate::autodiff::{ActivationKind, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{
    bind_params, init_params, sequential_forward, BatchNormState, BnMode, LayerSpec, ModelFile,
    ModelKind, ModelSpec,
};

/// DnCNN shape: `depth` conv layers of `filters` channels with square
/// `kernel`s on `channels`-channel images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DnCnnSpec {
    pub depth: usize,
    pub filters: usize,
    pub kernel: usize,
    pub channels: usize,
}

impl DnCnnSpec {
    /// 17 layers, 64 filters.
    pub fn full() -> Self {
        Self {
            depth: 17,
            filters: 64,
            kernel: 3,
            channels: 1,
        }
    }

    /// 5 layers, 16 filters.
    pub fn base() -> Self {
        Self {
            depth: 5,
            filters: 16,
            kernel: 3,
            channels: 1,
        }
    }
}

/// conv+relu, then `depth − 2` × conv+bn+relu, then a plain conv.
pub fn build_dncnn(arch: &DnCnnSpec) -> Result<ModelSpec> {
    if arch.depth < 3 {
        return Err(Error::Spec(format!("DnCNN depth must be at least 3, got {}", arch.depth)));
    }
    if arch.kernel % 2 == 0 || arch.filters == 0 || arch.channels == 0 {
        return Err(Error::Spec(format!(
            "DnCNN needs an odd kernel and positive widths, got {arch:?}"
        )));
    }
    let relu = Some(ActivationKind::Relu);
    let (c, f, k) = (arch.channels, arch.filters, arch.kernel);
    let mut layers = vec![LayerSpec::conv(c, f, k, false, relu)];
    layers.extend((0..arch.depth - 2).map(|_| LayerSpec::conv(f, f, k, true, relu)));
    layers.push(LayerSpec::conv(f, c, k, false, None));
    ModelSpec::new(layers)
}

/// DnCNN parameters plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DnCnn {
    pub arch: DnCnnSpec,
    pub spec: ModelSpec,
    pub params: Vec<f64>,
    pub bn: Vec<BatchNormState>,
}

impl DnCnn {
    pub fn new(arch: DnCnnSpec, seed: u64) -> Result<Self> {
        let spec = build_dncnn(&arch)?;
        let params = init_params(&spec, seed).into_data();
        let bn = spec
            .batchnorm_channels()
            .into_iter()
            .map(BatchNormState::new)
            .collect();
        Ok(Self {
            arch,
            spec,
            params,
            bn,
        })
    }

    /// Zeroes the output layer so that the residual is identically 0.
    pub fn zero_output(&mut self) {
        let last = self.spec.layout().layers.last().unwrap().offset;
        self.params[last..].fill(0.0);
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.bn.iter_mut().for_each(|s| s.mode = mode);
    }

    /// Records `R(input)` for `input: [N, C, H, W]` with parameters bound
    /// from `theta`. Train-mode batch norm updates the running statistics.
    pub fn record_residual(&mut self, tape: &mut Tape, theta: Var, input: Var) -> Result<Var> {
        let params = bind_params(tape, &self.spec, theta)?;
        sequential_forward(tape, &self.spec, &params, input, &mut self.bn)
    }

    pub fn to_model_file(&self) -> ModelFile {
        let mut buffers = Vec::new();
        for s in &self.bn {
            buffers.extend_from_slice(&s.running_mean);
            buffers.extend_from_slice(&s.running_var);
        }
        ModelFile {
            kind: ModelKind::Network,
            spec: self.spec.clone(),
            scalars: vec![
                self.arch.depth as f64,
                self.arch.filters as f64,
                self.arch.kernel as f64,
                self.arch.channels as f64,
            ],
            params: self.params.clone(),
            buffers,
        }
    }

    /// Rebuilds a model in eval mode.
    pub fn from_model_file(file: ModelFile) -> Result<Self> {
        if file.kind != ModelKind::Network {
            return Err(Error::Data("model file does not hold a network".into()));
        }
        let [depth, filters, kernel, channels] = file.scalars[..] else {
            return Err(Error::Data("network file lacks its DnCNN shape".into()));
        };
        let arch = DnCnnSpec {
            depth: depth as usize,
            filters: filters as usize,
            kernel: kernel as usize,
            channels: channels as usize,
        };
        let mut model = DnCnn::new(arch, 0)?;
        if model.spec != file.spec {
            return Err(Error::Data("network layers do not match a DnCNN".into()));
        }
        let need: usize = model.bn.iter().map(|s| 2 * s.channels()).sum();
        if file.buffers.len() != need {
            return Err(Error::Data(format!(
                "expected {need} batch-norm buffers, found {}",
                file.buffers.len()
            )));
        }
        let mut rest = &file.buffers[..];
        for s in &mut model.bn {
            let c = s.channels();
            s.running_mean = rest[..c].to_vec();
            s.running_var = rest[c..2 * c].to_vec();
            rest = &rest[2 * c..];
        }
        model.params = file.params;
        model.set_mode(BnMode::Eval);
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_model_file().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_model_file(ModelFile::read(path)?)
    }
}

/// Network output `R(y)` with batch norm in eval mode; the model itself is
/// untouched.
pub fn raw_residual(model: &DnCnn, y: &Image) -> Result<Image> {
    if model.arch.channels != 1 {
        return Err(Error::Spec("images are single-channel".into()));
    }
    if y.width < model.arch.kernel || y.height < model.arch.kernel {
        return Err(Error::shape(format!(
            "{}x{} image is smaller than the {}x{} kernel",
            y.width, y.height, model.arch.kernel, model.arch.kernel
        )));
    }
    let mut m = model.clone();
    m.set_mode(BnMode::Eval);
    let mut tape = Tape::new();
    let theta = tape.constant(Tensor::vector(m.params.clone()));
    let input = tape.constant(Tensor::new(&[1, 1, y.height, y.width], y.data.clone())?);
    let out = m.record_residual(&mut tape, theta, input)?;
    Image::new(y.width, y.height, tape.value(out).data().to_vec())
}

/// Splits `y` into `(x, r)` with `y − r == x` and `y − x == r` both exact
/// in floating point, `r` within an ulp of `y` of the requested residual.
fn split_exact(y: f64, mut r: f64) -> (f64, f64) {
    for _ in 0..16 {
        let x = y - r;
        let back = y - x;
        if y - back == x {
            return (x, back);
        }
        r = back;
    }
    (y - r, r)
}

fn split(model: &DnCnn, y: &Image) -> Result<(Image, Image)> {
    let raw = raw_residual(model, y)?;
    let (x, r): (Vec<f64>, Vec<f64>) = y
        .data
        .iter()
        .zip(&raw.data)
        .map(|(&yv, &rv)| split_exact(yv, rv))
        .unzip();
    Ok((Image::new(y.width, y.height, x)?, Image::new(y.width, y.height, r)?))
}

/// The residual removed by [`denoise_image`]: the network output snapped by
/// at most an ulp so that `y − denoise_image(y) == dncnn_residual(y)`
/// holds exactly.
pub fn dncnn_residual(model: &DnCnn, y: &Image) -> Result<Image> {
    Ok(split(model, y)?.1)
}

/// `x̂ = y − R(y)`, unclamped.
pub fn denoise_image(model: &DnCnn, y: &Image) -> Result<Image> {
    Ok(split(model, y)?.0)
}
