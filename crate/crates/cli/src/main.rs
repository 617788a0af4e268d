//! `ldn`: experiment harness for DnCNN denoising and learned optimizers.

mod args;
mod commands;
mod config;
mod data;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use commands::bench::BenchArgs;
use commands::check::{GradcheckArgs, SelftestArgs};
use commands::denoise::DenoiseArgs;
use commands::synth::SynthArgs;
use commands::train_denoiser::TrainDenoiserArgs;
use commands::train_meta::TrainMetaArgs;
use error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "ldn", version, about = "DnCNN denoising with classical and learned optimizers")]
struct Cli {
    /// TOML file of option values; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Meta-train the LSTM optimizer on a task family.
    TrainMeta(TrainMetaArgs),
    /// Train a DnCNN with a classical or a trained learned optimizer.
    TrainDenoiser(TrainDenoiserArgs),
    /// Denoise images with a trained model.
    Denoise(DenoiseArgs),
    /// Denoiser PSNR/SSIM table and optimizer comparison curves.
    Bench(BenchArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Quick checks of exact identities and closed-form oracles.
    Selftest(SelftestArgs),
    /// Write procedurally generated grayscale test images.
    SynthImages(SynthArgs),
}

fn resolved<T: Serialize + DeserializeOwned>(
    args: T,
    matches: &ArgMatches,
    config: Option<&PathBuf>,
) -> CliResult<T> {
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    config::resolve(&args, sub, config.map(PathBuf::as_path))
}

fn dispatch(cli: Cli, matches: &ArgMatches) -> CliResult {
    let cfg = cli.config.as_ref();
    match cli.command {
        Command::TrainMeta(a) => commands::train_meta::run(resolved(a, matches, cfg)?),
        Command::TrainDenoiser(a) => commands::train_denoiser::run(resolved(a, matches, cfg)?),
        Command::Denoise(a) => commands::denoise::run(resolved(a, matches, cfg)?),
        Command::Bench(a) => commands::bench::run(resolved(a, matches, cfg)?),
        Command::Gradcheck(a) => commands::check::gradcheck(resolved(a, matches, cfg)?),
        Command::Selftest(a) => commands::check::selftest(resolved(a, matches, cfg)?),
        Command::SynthImages(a) => commands::synth::run(resolved(a, matches, cfg)?),
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match dispatch(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
