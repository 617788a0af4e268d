//! Residual CNN denoiser, noisy-patch pipeline, training and evaluation.

mod data;
mod model;
mod synth;
mod task;
mod train;

pub use data::{add_awgn, build_patch_set, extract_patches, patch_positions, DenoiseSample, PatchConfig};
pub use model::{build_dncnn, denoise_image, dncnn_residual, raw_residual, DnCnn, DnCnnSpec};
pub use synth::synthetic_image;
pub use task::{DenoisePatchFamily, DenoisePatchTask, META_PATCH_BATCH, META_PATCH_CROP};
pub use train::{
    evaluate_denoiser, noisy_batch, patch_psnr, recalibrate_batchnorm, train_denoiser, BN_CALIBRATION_PATCHES, DenoiserOptimizer, SigmaMode,
    TrainConfig,
};
