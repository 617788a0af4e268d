use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use ldn_core::denoiser::{evaluate_denoiser, DnCnn};
use ldn_core::meta::{apply_trained, MetaOptimizer};
use ldn_core::metrics::{format_value, report_csv, MetricsReport};
use ldn_core::optim::{run_baseline, tune_baseline, OptimizerKind};
use ldn_core::rng;
use ldn_core::tasks::{DigitMlpFamily, QuadraticFamily, TaskFamily, DIGIT_BATCH};

use crate::args::TaskArg;
use crate::config::{ensure_dir, require, write_resolved};
use crate::data::{self, par_map};
use crate::error::{CliError, CliResult};

pub const DEFAULT_LR_GRID: [f64; 5] = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1];

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Denoiser model to evaluate over --sigmas.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Test images; synthetic images otherwise.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub synthetic_images: usize,
    #[arg(long, default_value_t = 180)]
    pub image_size: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![15.0, 25.0, 50.0])]
    pub sigmas: Vec<f64>,
    /// Trained optimizer to compare against tuned baselines.
    #[arg(long)]
    pub meta_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TaskArg::Quadratic)]
    pub task: TaskArg,
    /// Hidden units of the digit MLP.
    #[arg(long, default_value_t = 20)]
    pub hidden: usize,
    #[arg(long)]
    pub digits: Option<PathBuf>,
    /// Held-out tasks compared.
    #[arg(long, default_value_t = 100)]
    pub tasks: usize,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Separate tasks used to tune each baseline's lr.
    #[arg(long, default_value_t = 20)]
    pub tune_tasks: usize,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LR_GRID.to_vec())]
    pub lr_grid: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

pub fn run(args: BenchArgs) -> CliResult {
    let out = require(&args.out, "out")?;
    if args.model.is_none() && args.meta_file.is_none() {
        return Err(CliError::Usage("bench needs --model and/or --meta-file".into()));
    }
    if args.model.is_some() && args.sigmas.is_empty() {
        return Err(CliError::Usage("empty sigma list".into()));
    }
    if args.meta_file.is_some() {
        if args.task == TaskArg::Denoise {
            return Err(CliError::Usage("optimizer bench supports quadratic and digit-mlp".into()));
        }
        if args.lr_grid.is_empty() || args.tasks == 0 || args.tune_tasks == 0 || args.steps == 0 {
            return Err(CliError::Usage("lr grid, tasks, tune tasks and steps must be nonempty".into()));
        }
    }
    ensure_dir(&out)?;
    if let Some(path) = &args.model {
        let report = bench_denoiser(&args, path)?;
        std::fs::write(out.join("psnr_table.csv"), report_csv(&report))
            .map_err(|e| anyhow::anyhow!("psnr_table.csv: {e}"))?;
        std::fs::write(out.join("records.csv"), records_csv(&report))
            .map_err(|e| anyhow::anyhow!("records.csv: {e}"))?;
        for s in &report.summaries {
            println!(
                "sigma {}: snr {} dB, noisy {} dB, denoised {} dB, ssim {}",
                format_value(s.sigma),
                format_value(s.snr_db),
                format_value(s.noisy_psnr),
                format_value(s.psnr),
                format_value(s.ssim)
            );
        }
    }
    if let Some(path) = &args.meta_file {
        let (curves, summary) = bench_optimizers(&args, path)?;
        std::fs::write(out.join("curves.csv"), curves).map_err(|e| anyhow::anyhow!("curves.csv: {e}"))?;
        std::fs::write(out.join("summary.csv"), &summary)
            .map_err(|e| anyhow::anyhow!("summary.csv: {e}"))?;
        print!("{summary}");
    }
    write_resolved("bench", &args, &out.join("config.toml"))?;
    Ok(())
}

fn bench_denoiser(args: &BenchArgs, path: &std::path::Path) -> anyhow::Result<MetricsReport> {
    let model = DnCnn::load(path)?;
    let images = data::load_images(
        args.manifest.as_deref(),
        args.synthetic_images,
        args.image_size,
        rng::derive_seed(args.seed, "bench-images", 0),
    )?;
    let seed = rng::derive_seed(args.seed, "bench-noise", 0);
    // one report per image keeps the noise streams independent of threading
    let indexed: Vec<usize> = (0..images.len()).collect();
    let parts = par_map(args.threads, &indexed, |&i| {
        evaluate_denoiser(&model, &images[i..i + 1], &args.sigmas, rng::derive_seed(seed, "image", i as u64))
    });
    let mut records = Vec::new();
    for p in parts {
        records.extend(p?.records);
    }
    Ok(ldn_core::metrics::aggregate_report(records)?)
}

fn records_csv(report: &MetricsReport) -> String {
    let mut s = String::from("image,sigma,noisy_psnr,psnr,ssim\n");
    for r in &report.records {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.image_id,
            format_value(r.sigma),
            format_value(r.noisy_psnr),
            format_value(r.psnr),
            format_value(r.ssim)
        );
    }
    s
}

fn family(args: &BenchArgs, role: &str) -> anyhow::Result<Box<dyn TaskFamily + Sync>> {
    let seed = rng::derive_seed(args.seed, role, 0);
    Ok(match args.task {
        TaskArg::DigitMlp => Box::new(DigitMlpFamily {
            data: data::digits(args.digits.as_deref(), args.seed)?,
            hidden: args.hidden,
            batch_size: DIGIT_BATCH,
            seed,
        }),
        _ => Box::new(QuadraticFamily { seed }),
    })
}

/// Per-step curves of the learned optimizer and every tuned baseline on the
/// same held-out tasks, plus a summary of final losses.
fn bench_optimizers(args: &BenchArgs, path: &std::path::Path) -> anyhow::Result<(String, String)> {
    let opt = MetaOptimizer::load(path)?;
    let test = family(args, "bench-test")?;
    let tune = family(args, "bench-tune")?;
    let tune_idx: Vec<u64> = (0..args.tune_tasks as u64).collect();
    let test_idx: Vec<u64> = (0..args.tasks as u64).collect();

    let mut rows: Vec<(String, f64, Vec<Vec<f64>>)> = Vec::new();
    let lstm = par_map(args.threads, &test_idx, |&i| -> ldn_core::Result<Vec<f64>> {
        let mut inst = test.sample(i)?;
        apply_trained(&mut inst, &opt, args.steps)
    });
    rows.push(("lstm".into(), f64::NAN, lstm.into_iter().collect::<Result<_, _>>()?));
    for kind in OptimizerKind::ALL {
        let tuned = tune_baseline(tune.as_ref(), kind, &args.lr_grid, &tune_idx, args.steps)?;
        let curves = par_map(args.threads, &test_idx, |&i| -> ldn_core::Result<Vec<f64>> {
            let mut inst = test.sample(i)?;
            run_baseline(&mut inst, kind, tuned.best_lr, args.steps)
        });
        rows.push((kind.name().into(), tuned.best_lr, curves.into_iter().collect::<Result<_, _>>()?));
    }

    let mut curves = String::from("optimizer,task,step,loss\n");
    let mut summary = String::from("optimizer,lr,mean_final_loss\n");
    for (name, lr, per_task) in &rows {
        for (t, c) in per_task.iter().enumerate() {
            for (step, v) in c.iter().enumerate() {
                let _ = writeln!(curves, "{name},{t},{step},{v}");
            }
        }
        let mean = per_task.iter().map(|c| c[args.steps]).sum::<f64>() / per_task.len() as f64;
        let lr = if lr.is_nan() { "-".to_string() } else { lr.to_string() };
        let _ = writeln!(summary, "{name},{lr},{mean}");
    }
    Ok((curves, summary))
}
