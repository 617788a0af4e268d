use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};

use ldn_core::denoiser::{add_awgn, denoise_image, DnCnn};
use ldn_core::image::{read_image, read_manifest, write_pgm, Image};
use ldn_core::metrics::{format_value, psnr, ssim};
use ldn_core::rng;

use crate::config::{ensure_dir, require, write_resolved};
use crate::data::{par_map, stem};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiseArgs {
    /// Trained model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Input images (PGM or PNG).
    #[arg(value_name = "IMAGE")]
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
    /// Manifest of further input images.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Manifest of clean references, aligned with the inputs.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Treat inputs as clean, add noise at this σ and denoise the result.
    #[arg(long)]
    pub add_noise: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

struct Outcome {
    name: String,
    noisy: Option<Image>,
    denoised: Image,
    scores: Option<(f64, f64, f64)>,
}

pub fn run(args: DenoiseArgs) -> CliResult {
    let model_path = require(&args.model, "model")?;
    let out = require(&args.out, "out")?;
    let mut inputs = args.inputs.clone();
    if let Some(m) = &args.manifest {
        inputs.extend(read_manifest(m)?);
    }
    if inputs.is_empty() {
        return Err(CliError::Usage("no input images".into()));
    }
    let references = match &args.reference {
        Some(m) => {
            let refs = read_manifest(m)?;
            if refs.len() != inputs.len() {
                return Err(CliError::Usage(format!(
                    "{} references for {} inputs",
                    refs.len(),
                    inputs.len()
                )));
            }
            Some(refs)
        }
        None => None,
    };
    if references.is_some() && args.add_noise.is_some() {
        return Err(CliError::Usage("--reference and --add-noise exclude each other".into()));
    }
    let model = DnCnn::load(&model_path)?;

    let jobs: Vec<usize> = (0..inputs.len()).collect();
    let results = par_map(args.threads, &jobs, |&i| -> anyhow::Result<Outcome> {
        let path = &inputs[i];
        let img = read_image(path).with_context(|| format!("reading {}", path.display()))?;
        let (clean, noisy) = match (args.add_noise, &references) {
            (Some(sigma), _) => {
                let s = add_awgn(&img, sigma, rng::derive_seed(args.seed, "denoise-noise", i as u64))?;
                (Some(img), s.noisy)
            }
            (None, Some(refs)) => (Some(read_image(&refs[i])?), img),
            (None, None) => (None, img),
        };
        let denoised = denoise_image(&model, &noisy)?;
        let scores = match &clean {
            Some(c) => Some((
                psnr(&noisy.data, &c.data)?,
                psnr(&denoised.data, &c.data)?,
                ssim(&denoised, c).unwrap_or(f64::NAN),
            )),
            None => None,
        };
        Ok(Outcome {
            name: stem(path),
            noisy: args.add_noise.is_some().then_some(noisy),
            denoised,
            scores,
        })
    });

    ensure_dir(&out)?;
    let mut csv = String::from("image,noisy_psnr,psnr,ssim\n");
    let mut any_scores = false;
    for r in results {
        let r = r?;
        write_pgm(&out.join(format!("{}.pgm", r.name)), &r.denoised)?;
        if let Some(n) = &r.noisy {
            write_pgm(&out.join(format!("{}.noisy.pgm", r.name)), n)?;
        }
        if let Some((np, p, s)) = r.scores {
            any_scores = true;
            println!("{}: noisy {} dB, denoised {} dB, ssim {}", r.name, format_value(np), format_value(p), format_value(s));
            let _ = writeln!(csv, "{},{},{},{}", r.name, format_value(np), format_value(p), format_value(s));
        }
    }
    if any_scores {
        let p = out.join("psnr.csv");
        std::fs::write(&p, csv).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))?;
    }
    write_resolved("denoise", &args, &out.join("config.toml"))?;
    println!("denoised {} images -> {}", inputs.len(), out.display());
    Ok(())
}
