use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use ldn_core::denoiser::{add_awgn, denoise_image, dncnn_residual, synthetic_image, DnCnn, DnCnnSpec};
use ldn_core::meta::{meta_step, MetaOptimizer, MetaOptimizerState};
use ldn_core::metrics::{psnr, psnr_peak, ssim};
use ldn_core::nn::{flatten_params, unflatten_params};
use ldn_core::rng;
use ldn_core::selfcheck::gradient_suite;

use crate::config::{ensure_dir, write_resolved};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckArgs {
    /// Random points per operation.
    #[arg(long, default_value_t = 10)]
    pub points: usize,
    /// Relative tolerance.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Optional output directory for gradcheck.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

pub fn gradcheck(args: GradcheckArgs) -> CliResult {
    if args.points == 0 || !(args.tol > 0.0) {
        return Err(CliError::Usage("points and tol must be positive".into()));
    }
    let results = gradient_suite(args.seed, args.points, args.tol)?;
    let mut csv = String::from("op,points,max_rel_error,passed\n");
    let mut failed = 0;
    for r in &results {
        println!(
            "{:<14} {} points  max rel err {:.3e}  {}",
            r.name,
            r.points,
            r.max_rel_error,
            if r.passed { "PASS" } else { "FAIL" }
        );
        let _ = writeln!(csv, "{},{},{:e},{}", r.name, r.points, r.max_rel_error, r.passed);
        failed += usize::from(!r.passed);
    }
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        std::fs::write(out.join("gradcheck.csv"), csv).map_err(|e| anyhow::anyhow!("gradcheck.csv: {e}"))?;
        write_resolved("gradcheck", &args, &out.join("config.toml"))?;
    }
    if failed > 0 {
        return Err(CliError::Runtime(anyhow::anyhow!("{failed} operations failed the gradient check")));
    }
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelftestArgs {
    /// Optional output directory for selftest.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

type Check = (&'static str, anyhow::Result<String>);

/// Fast end-to-end sanity checks of the exact identities and oracles.
pub fn selftest(args: SelftestArgs) -> CliResult {
    let seed = args.seed;
    let checks: Vec<Check> = vec![
        ("noisy_psnr_oracle", noisy_psnr_oracle(seed)),
        ("awgn_identity", awgn_identity(seed)),
        ("residual_identity", residual_identity(seed)),
        ("flatten_round_trip", flatten_round_trip(seed)),
        ("meta_step_equivariance", equivariance(seed)),
        ("ssim_and_psnr", ssim_and_psnr(seed)),
        ("gradients", gradients(seed)),
    ];
    let mut csv = String::from("check,passed,detail\n");
    let mut failed = 0;
    for (name, result) in &checks {
        let (ok, detail) = match result {
            Ok(d) => (true, d.clone()),
            Err(e) => (false, format!("{e:#}")),
        };
        println!("{name:<24} {}  {detail}", if ok { "PASS" } else { "FAIL" });
        let _ = writeln!(csv, "{name},{ok},\"{}\"", detail.replace('"', "'"));
        failed += usize::from(!ok);
    }
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        std::fs::write(out.join("selftest.csv"), csv).map_err(|e| anyhow::anyhow!("selftest.csv: {e}"))?;
        write_resolved("selftest", &args, &out.join("config.toml"))?;
    }
    if failed > 0 {
        return Err(CliError::Runtime(anyhow::anyhow!("{failed} self-test checks failed")));
    }
    Ok(())
}

fn noisy_psnr_oracle(seed: u64) -> anyhow::Result<String> {
    let images: Vec<_> = (0..20).map(|i| synthetic_image(seed, i, 128, 128)).collect();
    let mut worst = 0.0f64;
    for sigma in [5.0, 15.0, 25.0, 50.0, 90.0] {
        let mut total = 0.0;
        for (i, img) in images.iter().enumerate() {
            let s = add_awgn(img, sigma, rng::derive_seed(seed, "selftest", i as u64))?;
            total += psnr(&s.noisy.data, &img.data)?;
        }
        let expected = 20.0 * (255.0 / sigma).log10();
        worst = worst.max((total / images.len() as f64 - expected).abs());
    }
    anyhow::ensure!(worst <= 0.1, "max deviation {worst:.4} dB");
    Ok(format!("max deviation {worst:.4} dB"))
}

fn awgn_identity(seed: u64) -> anyhow::Result<String> {
    let img = synthetic_image(seed, 0, 64, 64);
    let s = add_awgn(&img, 25.0, seed)?;
    let bad = (0..img.data.len())
        .filter(|&i| (s.noisy.data[i] - img.data[i]).to_bits() != (s.noise[i] / 255.0).to_bits())
        .count();
    anyhow::ensure!(bad == 0, "{bad} pixels differ");
    Ok(format!("{} pixels exact", img.data.len()))
}

fn residual_identity(seed: u64) -> anyhow::Result<String> {
    let model = DnCnn::new(DnCnnSpec::base(), seed)?;
    let y = add_awgn(&synthetic_image(seed, 1, 41, 41), 25.0, seed)?.noisy;
    let r = dncnn_residual(&model, &y)?;
    let x = denoise_image(&model, &y)?;
    let bad = (0..y.data.len())
        .filter(|&i| (y.data[i] - x.data[i]).to_bits() != r.data[i].to_bits())
        .count();
    anyhow::ensure!(bad == 0, "{bad} pixels differ");
    Ok("bitwise".into())
}

fn flatten_round_trip(seed: u64) -> anyhow::Result<String> {
    let model = DnCnn::new(DnCnnSpec::base(), seed)?;
    let m = unflatten_params(&model.spec, &model.params)?;
    let back = flatten_params(&m);
    anyhow::ensure!(back.data() == model.params.as_slice(), "round trip changed values");
    Ok(format!("{} parameters", back.len()))
}

fn equivariance(seed: u64) -> anyhow::Result<String> {
    let opt = MetaOptimizer::new(seed);
    let g: Vec<f64> = (0..7).map(|i| (i as f64 - 3.0) * 0.37).collect();
    let perm = [3usize, 0, 6, 1, 5, 2, 4];
    let gp: Vec<f64> = perm.iter().map(|&i| g[i]).collect();
    let state = MetaOptimizerState::new(7);
    let (u, _) = meta_step(&opt, &state, &g)?;
    let (up, _) = meta_step(&opt, &state, &gp)?;
    let ok = perm.iter().enumerate().all(|(k, &i)| up[k].to_bits() == u[i].to_bits());
    anyhow::ensure!(ok, "permuted updates differ");
    Ok("bitwise".into())
}

fn ssim_and_psnr(seed: u64) -> anyhow::Result<String> {
    let a = synthetic_image(seed, 2, 48, 48);
    let b = add_awgn(&a, 15.0, seed)?.noisy;
    let s = ssim(&a, &a)?;
    anyhow::ensure!(s == 1.0, "ssim(x, x) = {s}");
    let p1 = psnr(&a.data, &b.data)?;
    let a255: Vec<f64> = a.data.iter().map(|v| v * 255.0).collect();
    let b255: Vec<f64> = b.data.iter().map(|v| v * 255.0).collect();
    let p255 = psnr_peak(&a255, &b255, 255.0)?;
    anyhow::ensure!((p1 - p255).abs() <= 1e-9, "peak rescaling moved psnr by {}", p1 - p255);
    Ok(format!("psnr {p1:.4} dB"))
}

fn gradients(seed: u64) -> anyhow::Result<String> {
    let results = gradient_suite(seed, 2, 1e-4)?;
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    anyhow::ensure!(failed.is_empty(), "failed: {}", failed.join(" "));
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(format!("{} ops, max rel err {worst:.2e}", results.len()))
}
