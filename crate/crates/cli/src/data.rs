use std::path::Path;
use std::sync::Arc;

use anyhow::Context;
use ldn_core::denoiser::{build_patch_set, synthetic_image, PatchConfig};
use ldn_core::image::{read_image, read_manifest, Image};
use ldn_core::rng;
use ldn_core::tasks::DigitDataset;

/// Images named by their file stem, or generated ones named `synth_NNN`.
pub fn load_images(
    manifest: Option<&Path>,
    synthetic: usize,
    size: usize,
    seed: u64,
) -> anyhow::Result<Vec<(String, Image)>> {
    match manifest {
        Some(path) => {
            let paths = read_manifest(path)?;
            paths
                .iter()
                .map(|p| {
                    let img = read_image(p).with_context(|| format!("reading {}", p.display()))?;
                    Ok((stem(p), img))
                })
                .collect()
        }
        None => {
            anyhow::ensure!(synthetic > 0, "no manifest given and no synthetic images requested");
            Ok((0..synthetic as u64)
                .map(|i| (format!("synth_{i:03}"), synthetic_image(seed, i, size, size)))
                .collect())
        }
    }
}

pub fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

pub fn patches(
    images: &[(String, Image)],
    size: usize,
    per_image: usize,
    seed: u64,
) -> anyhow::Result<Vec<Image>> {
    let imgs: Vec<Image> = images.iter().map(|(_, i)| i.clone()).collect();
    let cfg = PatchConfig {
        size,
        per_image,
        seed: rng::derive_seed(seed, "patches", 0),
    };
    Ok(build_patch_set(&imgs, &cfg)?)
}

pub fn digits(path: Option<&Path>, seed: u64) -> anyhow::Result<Arc<DigitDataset>> {
    let data = match path {
        Some(p) => ldn_core::tasks::load_digit_dataset(p, seed)?,
        None => DigitDataset::bundled(seed),
    };
    Ok(Arc::new(data))
}

/// Runs `f` over `items` on up to `threads` scoped threads; results keep
/// the input order, so output does not depend on the thread count.
pub fn par_map<T, R, F>(threads: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}
