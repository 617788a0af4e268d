use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, BoxMuller};

/// A clean image, its noise realization on the 0–255 scale and the noisy
/// observation `noisy = clean + noise / 255`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseSample {
    pub clean: Image,
    pub sigma: f64,
    pub noise: Vec<f64>,
    pub noisy: Image,
}

/// Adds white Gaussian noise of std `sigma / 255`.
///
/// Each noise value is nudged by at most a few ulps so that
/// `noisy − clean == noise / 255` holds exactly in floating point.
pub fn add_awgn(image: &Image, sigma: f64, seed: u64) -> Result<DenoiseSample> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Data(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let mut r = rng::stream(seed, "awgn", 0);
    let mut gauss = BoxMuller::new();
    let mut noise = Vec::with_capacity(image.data.len());
    let mut noisy = Vec::with_capacity(image.data.len());
    for &c in &image.data {
        let (w, y) = exact_noise(c, gauss.sample(&mut r) * sigma);
        noise.push(w);
        noisy.push(y);
    }
    Ok(DenoiseSample {
        clean: image.clone(),
        sigma,
        noise,
        noisy: Image::new(image.width, image.height, noisy)?,
    })
}

/// Moves `w` and the noisy value by a few ulps until
/// `(c + w / 255) - c == w / 255` holds exactly.
fn exact_noise(c: f64, w: f64) -> (f64, f64) {
    if w == 0.0 {
        return (0.0, c);
    }
    let start = c + w / 255.0;
    let (mut up, mut down) = (start, start);
    for i in 0..64 {
        let y = if i % 2 == 0 {
            let y = up;
            up = up.next_up();
            y
        } else {
            down = down.next_down();
            down
        };
        let d = y - c;
        if c + d != y {
            continue;
        }
        if let Some(w) = solve_quotient(d) {
            return (w, y);
        }
    }
    (w, start)
}

/// Some `w` with `w / 255 == d`, if one exists near `d * 255`.
fn solve_quotient(d: f64) -> Option<f64> {
    let mut cand = d * 255.0;
    for _ in 0..4 {
        let q = cand / 255.0;
        if q == d {
            return Some(cand);
        }
        cand = if q < d { cand.next_up() } else { cand.next_down() };
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchConfig {
    pub size: usize,
    pub per_image: usize,
    pub seed: u64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            size: 40,
            per_image: 512,
            seed: 0,
        }
    }
}

/// Number of distinct top-left positions for a `size` patch.
pub fn patch_positions(width: usize, height: usize, size: usize) -> usize {
    if size == 0 || size > width || size > height {
        return 0;
    }
    (width - size + 1) * (height - size + 1)
}

/// `cfg.per_image` crops at uniformly drawn positions; overlap allowed.
/// `image_index` selects the random stream.
pub fn extract_patches(image: &Image, cfg: &PatchConfig, image_index: u64) -> Result<Vec<Image>> {
    if patch_positions(image.width, image.height, cfg.size) == 0 {
        return Err(Error::Data(format!(
            "{}x{} image cannot hold a {}x{} patch",
            image.width, image.height, cfg.size, cfg.size
        )));
    }
    let mut r = rng::stream(cfg.seed, "patches", image_index);
    (0..cfg.per_image)
        .map(|_| {
            let x = r.gen_range(0..=image.width - cfg.size);
            let y = r.gen_range(0..=image.height - cfg.size);
            image.crop(x, y, cfg.size, cfg.size)
        })
        .collect()
}

pub fn build_patch_set(images: &[Image], cfg: &PatchConfig) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(images.len() * cfg.per_image);
    for (i, img) in images.iter().enumerate() {
        out.extend(extract_patches(img, cfg, i as u64)?);
    }
    Ok(out)
}
