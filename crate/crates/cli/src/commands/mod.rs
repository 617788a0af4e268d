pub mod bench;
pub mod check;
pub mod denoise;
pub mod synth;
pub mod train_denoiser;
pub mod train_meta;
