use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use ldn_core::denoiser::synthetic_image;
use ldn_core::image::{write_manifest, write_pgm};

use crate::config::{ensure_dir, require, write_resolved};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthArgs {
    /// Output directory; receives the PGMs and manifest.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long, default_value_t = 180)]
    pub width: usize,
    #[arg(long, default_value_t = 180)]
    pub height: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

pub fn run(args: SynthArgs) -> CliResult {
    let out = require(&args.out, "out")?;
    if args.count == 0 || args.width == 0 || args.height == 0 {
        return Err(CliError::Usage("count, width and height must be positive".into()));
    }
    ensure_dir(&out)?;
    let mut names = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let name = PathBuf::from(format!("synth_{i:03}.pgm"));
        let img = synthetic_image(args.seed, i as u64, args.width, args.height);
        write_pgm(&out.join(&name), &img)?;
        names.push(name);
    }
    write_manifest(&out.join("manifest.txt"), &names)?;
    write_resolved("synth-images", &args, &out.join("config.toml"))?;
    println!("wrote {} images and manifest.txt -> {}", args.count, out.display());
    Ok(())
}
