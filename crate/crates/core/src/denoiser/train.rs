use rand::seq::SliceRandom;
use rand::Rng;

use super::data::add_awgn;
use super::model::{denoise_image, DnCnn};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::meta::MetaRunner;
use crate::metrics::{aggregate_report, psnr, rms_255, ssim, MetricsRecord, MetricsReport};
use crate::nn::BnMode;
use crate::optim::{BaselineState, LrSchedule};
use crate::rng;

/// Either a classical optimizer with an epoch schedule or a trained
/// learned optimizer.
#[derive(Debug, Clone)]
pub enum DenoiserOptimizer {
    Baseline {
        state: BaselineState,
        schedule: LrSchedule,
    },
    Meta(MetaRunner),
}

impl DenoiserOptimizer {
    fn start_epoch(&mut self, epoch: usize) {
        if let DenoiserOptimizer::Baseline { state, schedule } = self {
            state.lr = schedule.lr_at(epoch);
        }
    }

    fn step(&mut self, theta: &mut [f64], g: &[f64]) -> Result<()> {
        match self {
            DenoiserOptimizer::Baseline { state, .. } => state.step(theta, g),
            DenoiserOptimizer::Meta(runner) => runner.step(theta, g),
        }
    }
}

/// Noise level per training sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaMode {
    Fixed(f64),
    /// Uniform in `[lo, hi]` per sample.
    Blind { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sigma: SigmaMode,
    pub seed: u64,
}

/// Noisy inputs and residual targets for the given patches; the noise of
/// sample `i` comes from stream `(seed, stream, i)`.
pub fn noisy_batch(
    patches: &[&Image],
    sigma: SigmaMode,
    seed: u64,
    stream: &str,
    first: u64,
) -> Result<(Tensor, Tensor)> {
    let (w, h) = (patches[0].width, patches[0].height);
    let mut input = Vec::with_capacity(patches.len() * w * h);
    let mut target = Vec::with_capacity(patches.len() * w * h);
    for (i, p) in patches.iter().enumerate() {
        if (p.width, p.height) != (w, h) {
            return Err(Error::shape("patches in a batch must share a size".to_string()));
        }
        let sample_seed = rng::derive_seed(seed, stream, first + i as u64);
        let s = match sigma {
            SigmaMode::Fixed(s) => s,
            SigmaMode::Blind { lo, hi } => rng::stream(sample_seed, "sigma", 0).gen_range(lo..=hi),
        };
        let sample = add_awgn(p, s, sample_seed)?;
        input.extend_from_slice(&sample.noisy.data);
        target.extend(sample.noise.iter().map(|n| n / 255.0));
    }
    let shape = [patches.len(), 1, h, w];
    Ok((Tensor::new(&shape, input)?, Tensor::new(&shape, target)?))
}

/// Minimizes `MSE(R(y), y − x)` over `patches`; returns the mean loss of
/// every epoch. Leaves the model in eval mode.
pub fn train_denoiser(
    patches: &[Image],
    model: &mut DnCnn,
    opt: &mut DenoiserOptimizer,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if patches.is_empty() {
        return Err(Error::Data("no training patches".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Spec("epochs and batch size must be positive".into()));
    }
    model.set_mode(BnMode::Train);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs {
        opt.start_epoch(epoch);
        order.shuffle(&mut rng::stream(cfg.seed, "epoch-order", epoch as u64));
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Image> = chunk.iter().map(|&i| &patches[i]).collect();
            let first = (epoch * patches.len() + b * cfg.batch_size) as u64;
            let (input, target) = noisy_batch(&refs, cfg.sigma, cfg.seed, "train-noise", first)?;
            tape.clear();
            let theta = tape.var(Tensor::vector(model.params.clone()));
            let x = tape.constant(input);
            let t = tape.constant(target);
            let r = model.record_residual(&mut tape, theta, x)?;
            let loss = tape.mse(r, t)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                model.set_mode(BnMode::Eval);
                return Err(Error::Training(format!(
                    "loss {value} at epoch {epoch}, batch {b}"
                )));
            }
            let g = tape.backward(loss)?.take(&tape, theta);
            if let Err(e) = opt.step(&mut model.params, &g) {
                model.set_mode(BnMode::Eval);
                return Err(Error::Training(format!("epoch {epoch}, batch {b}: {e}")));
            }
            total += value;
            batches += 1;
        }
        curve.push(total / batches as f64);
    }
    recalibrate_batchnorm(model, patches, cfg)?;
    model.set_mode(BnMode::Eval);
    Ok(curve)
}

/// Patches used to re-estimate batch-norm statistics after training.
pub const BN_CALIBRATION_PATCHES: usize = 2048;

/// Replaces the running batch-norm statistics by their plain average over
/// up to `BN_CALIBRATION_PATCHES` noisy patches at the final parameters.
pub fn recalibrate_batchnorm(model: &mut DnCnn, patches: &[Image], cfg: &TrainConfig) -> Result<()> {
    let saved: Vec<f64> = model.bn.iter().map(|s| s.momentum).collect();
    model.set_mode(BnMode::Train);
    let n = patches.len().min(BN_CALIBRATION_PATCHES);
    let mut tape = Tape::new();
    let mut result = Ok(());
    for (k, start) in (0..n).step_by(cfg.batch_size.max(2)).enumerate() {
        let end = (start + cfg.batch_size.max(2)).min(n);
        if end - start < 2 {
            break;
        }
        let refs: Vec<&Image> = patches[start..end].iter().collect();
        let (input, _) = noisy_batch(&refs, cfg.sigma, cfg.seed, "bn-calibration", start as u64)?;
        for s in &mut model.bn {
            s.momentum = k as f64 / (k + 1) as f64;
        }
        tape.clear();
        let theta = tape.constant(Tensor::vector(model.params.clone()));
        let x = tape.constant(input);
        if let Err(e) = model.record_residual(&mut tape, theta, x) {
            result = Err(e);
            break;
        }
    }
    for (s, m) in model.bn.iter_mut().zip(saved) {
        s.momentum = m;
    }
    result
}

/// Mean PSNR of the noisy patches and of their denoised versions.
pub fn patch_psnr(model: &DnCnn, patches: &[Image], sigma: f64, seed: u64) -> Result<(f64, f64)> {
    if patches.is_empty() {
        return Err(Error::Data("no patches".into()));
    }
    let (mut noisy, mut denoised) = (0.0, 0.0);
    for (i, p) in patches.iter().enumerate() {
        let s = add_awgn(p, sigma, rng::derive_seed(seed, "heldout-noise", i as u64))?;
        let x = denoise_image(model, &s.noisy)?;
        noisy += psnr(&s.noisy.data, &p.data)?;
        denoised += psnr(&x.data, &p.data)?;
    }
    let n = patches.len() as f64;
    Ok((noisy / n, denoised / n))
}

/// Adds noise at each σ to each image, denoises whole images and collects
/// PSNR/SSIM.
pub fn evaluate_denoiser(
    model: &DnCnn,
    images: &[(String, Image)],
    sigmas: &[f64],
    seed: u64,
) -> Result<MetricsReport> {
    if sigmas.is_empty() || images.is_empty() {
        return Err(Error::Data("evaluation needs images and noise levels".into()));
    }
    let mut records = Vec::with_capacity(images.len() * sigmas.len());
    for &sigma in sigmas {
        for (i, (id, img)) in images.iter().enumerate() {
            let noise_seed = rng::derive_seed(seed ^ sigma.to_bits(), "eval-noise", i as u64);
            let s = add_awgn(img, sigma, noise_seed)?;
            let x = denoise_image(model, &s.noisy)?;
            records.push(MetricsRecord {
                image_id: id.clone(),
                sigma,
                signal_rms: rms_255(img),
                noisy_psnr: psnr(&s.noisy.data, &img.data)?,
                psnr: psnr(&x.data, &img.data)?,
                ssim: ssim(&x, img)?,
            });
        }
    }
    aggregate_report(records)
}
