use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;
use serde::{Deserialize, Serialize};

use ldn_core::denoiser::{DenoisePatchFamily, DnCnnSpec};
use ldn_core::meta::{meta_train, MetaTrainConfig};
use ldn_core::optim::Decay;
use ldn_core::tasks::{DigitMlpFamily, QuadraticFamily, TaskFamily, DIGIT_BATCH};

use crate::args::{FeaturesArg, TaskArg};
use crate::config::{ensure_parent, require, sidecar, write_resolved};
use crate::data;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMetaArgs {
    /// Optimizee family to meta-train on.
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Output optimizer file; the meta-loss CSV and resolved config go next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub unroll: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Inner optimization steps per task (a multiple of --unroll).
    #[arg(long, default_value_t = 100)]
    pub inner_steps: usize,
    /// Default: 16 for quadratic, 1 otherwise.
    #[arg(long)]
    pub tasks_per_epoch: Option<usize>,
    #[arg(long, default_value_t = 1e-2)]
    pub meta_lr: f64,
    /// Halve-every interval for the meta learning rate, 0 keeps it constant.
    /// Default: 25 for quadratic, 0 otherwise.
    #[arg(long)]
    pub lr_decay_interval: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub lr_decay_factor: f64,
    /// Meta-gradient norm clip, 0 disables it.
    #[arg(long, default_value_t = 10.0)]
    pub clip_norm: f64,
    /// Update multiplier. Default: 0.01 for denoise, 0.1 otherwise.
    #[arg(long)]
    pub output_scale: Option<f64>,
    #[arg(long, value_enum, default_value_t = FeaturesArg::LogSign)]
    pub features: FeaturesArg,
    #[arg(long)]
    pub log_meta_loss: bool,
    /// Hidden units of the digit MLP.
    #[arg(long, default_value_t = 20)]
    pub hidden: usize,
    /// Digit dataset file (DGT8 or IDX); the bundled 8x8 corpus otherwise.
    #[arg(long)]
    pub digits: Option<PathBuf>,
    /// Noise level of the denoise task, 0–255 scale.
    #[arg(long, default_value_t = 25.0)]
    pub sigma: f64,
    /// Clean images for the denoise task; synthetic images otherwise.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub synthetic_images: usize,
    #[arg(long, default_value_t = 100)]
    pub patches_per_image: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

impl TrainMetaArgs {
    /// Fills the task-dependent defaults.
    pub fn finish(mut self) -> CliResult<Self> {
        let task = require(&self.task, "task")?;
        require(&self.out, "out")?;
        let quad = task == TaskArg::Quadratic;
        self.tasks_per_epoch.get_or_insert(if quad { 16 } else { 1 });
        self.lr_decay_interval.get_or_insert(if quad { 25 } else { 0 });
        self.output_scale
            .get_or_insert(if task == TaskArg::Denoise { 0.01 } else { 0.1 });
        Ok(self)
    }

    pub fn meta_config(&self) -> MetaTrainConfig {
        let interval = self.lr_decay_interval.unwrap_or(0);
        MetaTrainConfig {
            unroll: self.unroll,
            epochs: self.epochs,
            inner_steps: self.inner_steps,
            tasks_per_epoch: self.tasks_per_epoch.unwrap_or(1),
            meta_lr: self.meta_lr,
            meta_lr_decay: if interval == 0 {
                Decay::Constant
            } else {
                Decay::Step {
                    factor: self.lr_decay_factor,
                    interval,
                }
            },
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            train_output_scale: false,
            output_scale: self.output_scale.unwrap_or(0.1),
            features: self.features.into(),
            log_meta_loss: self.log_meta_loss,
            seed: self.seed,
        }
    }
}

pub fn family(args: &TrainMetaArgs) -> anyhow::Result<Box<dyn TaskFamily>> {
    Ok(match args.task.expect("resolved") {
        TaskArg::Quadratic => Box::new(QuadraticFamily { seed: args.seed }),
        TaskArg::DigitMlp => Box::new(DigitMlpFamily {
            data: data::digits(args.digits.as_deref(), args.seed)?,
            hidden: args.hidden,
            batch_size: DIGIT_BATCH,
            seed: args.seed,
        }),
        TaskArg::Denoise => {
            let images = data::load_images(
                args.manifest.as_deref(),
                args.synthetic_images,
                96,
                args.seed,
            )?;
            let patches = data::patches(&images, 40, args.patches_per_image, args.seed)?;
            Box::new(DenoisePatchFamily {
                arch: DnCnnSpec::base(),
                patches: Arc::new(patches),
                sigma: args.sigma,
                seed: args.seed,
            })
        }
    })
}

pub fn run(args: TrainMetaArgs) -> CliResult {
    let args = args.finish()?;
    let cfg = args.meta_config();
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let out = args.out.clone().expect("resolved");
    let fam = family(&args)?;
    let report = meta_train(fam.as_ref(), &cfg)?;

    ensure_parent(&out)?;
    report.optimizer.save(&out)?;
    let mut csv = String::from("epoch,meta_loss\n");
    for (e, v) in report.curve.iter().enumerate() {
        let _ = writeln!(csv, "{},{}", e + 1, v);
    }
    let csv_path = sidecar(&out, "meta_loss.csv");
    std::fs::write(&csv_path, csv)
        .map_err(|e| anyhow::anyhow!("{}: {e}", csv_path.display()))?;
    write_resolved("train-meta", &args, &sidecar(&out, "config.toml"))?;
    println!(
        "trained optimizer: {} epochs, final meta loss {:.6}, {} diverged runs -> {}",
        report.curve.len(),
        report.curve.last().copied().unwrap_or(f64::NAN),
        report.diverged,
        out.display()
    );
    Ok(())
}
