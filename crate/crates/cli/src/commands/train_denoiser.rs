use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use ldn_core::denoiser::{train_denoiser, DenoiserOptimizer, DnCnn, DnCnnSpec, SigmaMode, TrainConfig};
use ldn_core::meta::{MetaOptimizer, MetaRunner};
use ldn_core::optim::{BaselineState, Decay, LrSchedule};
use ldn_core::rng;

use crate::args::OptimizerArg;
use crate::config::{ensure_parent, require, sidecar, write_resolved};
use crate::data;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainDenoiserArgs {
    /// Clean training images, one path per line.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output model file; the loss CSV and resolved config go next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 17)]
    pub depth: usize,
    #[arg(long, default_value_t = 64)]
    pub filters: usize,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    #[arg(long, default_value_t = 40)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 512)]
    pub patches_per_image: usize,
    /// Noise level on the 0–255 scale.
    #[arg(long, default_value_t = 25.0)]
    pub sigma: f64,
    /// Draw σ per patch uniformly from [sigma-min, sigma-max].
    #[arg(long)]
    pub blind: bool,
    #[arg(long, default_value_t = 5.0)]
    pub sigma_min: f64,
    #[arg(long, default_value_t = 90.0)]
    pub sigma_max: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Multiply the lr by --lr-decay-factor every this many epochs, 0 disables.
    #[arg(long, default_value_t = 10)]
    pub lr_decay_interval: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr_decay_factor: f64,
    /// Trained optimizer file, required with `--optimizer meta`.
    #[arg(long)]
    pub meta_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

impl TrainDenoiserArgs {
    pub fn arch(&self) -> DnCnnSpec {
        DnCnnSpec {
            depth: self.depth,
            filters: self.filters,
            kernel: self.kernel,
            channels: 1,
        }
    }

    fn sigma_mode(&self) -> SigmaMode {
        if self.blind {
            SigmaMode::Blind {
                lo: self.sigma_min,
                hi: self.sigma_max,
            }
        } else {
            SigmaMode::Fixed(self.sigma)
        }
    }

    fn optimizer(&self, len: usize) -> CliResult<DenoiserOptimizer> {
        match self.optimizer.baseline() {
            Some(kind) => {
                let decay = if self.lr_decay_interval == 0 {
                    Decay::Constant
                } else {
                    Decay::Step {
                        factor: self.lr_decay_factor,
                        interval: self.lr_decay_interval,
                    }
                };
                let schedule =
                    LrSchedule::new(self.lr, decay).map_err(|e| CliError::Usage(e.to_string()))?;
                let state = BaselineState::new(kind, self.lr, len)
                    .map_err(|e| CliError::Usage(e.to_string()))?;
                Ok(DenoiserOptimizer::Baseline { state, schedule })
            }
            None => {
                let path = require(&self.meta_file, "meta-file")?;
                let opt = MetaOptimizer::load(&path)?;
                Ok(DenoiserOptimizer::Meta(MetaRunner::new(opt, len)))
            }
        }
    }
}

pub fn run(args: TrainDenoiserArgs) -> CliResult {
    let manifest = require(&args.manifest, "manifest")?;
    let out = require(&args.out, "out")?;
    if args.optimizer == OptimizerArg::Meta {
        require(&args.meta_file, "meta-file")?;
    }
    let mut model = DnCnn::new(args.arch(), rng::derive_seed(args.seed, "init", 0))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut opt = args.optimizer(model.params.len())?;
    let images = data::load_images(Some(&manifest), 0, 0, args.seed)?;
    let patches = data::patches(&images, args.patch_size, args.patches_per_image, args.seed)?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        sigma: args.sigma_mode(),
        seed: rng::derive_seed(args.seed, "noise", 0),
    };
    let curve = train_denoiser(&patches, &mut model, &mut opt, &cfg)?;

    ensure_parent(&out)?;
    model.save(&out)?;
    let mut csv = String::from("epoch,loss\n");
    for (e, v) in curve.iter().enumerate() {
        let _ = writeln!(csv, "{},{}", e + 1, v);
    }
    let csv_path = sidecar(&out, "loss.csv");
    std::fs::write(&csv_path, csv).map_err(|e| anyhow::anyhow!("{}: {e}", csv_path.display()))?;
    write_resolved("train-denoiser", &args, &sidecar(&out, "config.toml"))?;
    println!(
        "trained DnCNN (depth {}, {} patches, {} epochs), final loss {:.6} -> {}",
        args.depth,
        patches.len(),
        curve.len(),
        curve.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}
