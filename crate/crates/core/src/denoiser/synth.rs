use rand::Rng;

use crate::image::Image;
use crate::rng;

/// Procedural grayscale scene: a shaded background, overlapping flat
/// rectangles and ellipses, and a faint oriented texture.
pub fn synthetic_image(seed: u64, index: u64, width: usize, height: usize) -> Image {
    let mut r = rng::stream(seed, "synthetic-image", index);
    let (w, h) = (width as f64, height as f64);
    let base = r.gen_range(0.25..0.6);
    let gx = r.gen_range(-0.3..0.3);
    let gy = r.gen_range(-0.3..0.3);
    let mut data: Vec<f64> = (0..width * height)
        .map(|i| {
            let (x, y) = ((i % width) as f64 / w, (i / width) as f64 / h);
            base + gx * (x - 0.5) + gy * (y - 0.5)
        })
        .collect();

    let shapes = r.gen_range(6..14);
    for _ in 0..shapes {
        let level: f64 = r.gen_range(0.0..1.0);
        let alpha: f64 = r.gen_range(0.6..1.0);
        let cx = r.gen_range(0.0..w);
        let cy = r.gen_range(0.0..h);
        let rx = r.gen_range(0.05..0.35) * w;
        let ry = r.gen_range(0.05..0.35) * h;
        let ellipse = r.gen_bool(0.5);
        for (i, v) in data.iter_mut().enumerate() {
            let dx = ((i % width) as f64 - cx) / rx;
            let dy = ((i / width) as f64 - cy) / ry;
            let inside = if ellipse {
                dx * dx + dy * dy <= 1.0
            } else {
                dx.abs() <= 1.0 && dy.abs() <= 1.0
            };
            if inside {
                *v = (1.0 - alpha) * *v + alpha * level;
            }
        }
    }

    let amp = r.gen_range(0.02..0.08);
    let freq = r.gen_range(0.1..0.6);
    let angle = r.gen_range(0.0..std::f64::consts::PI);
    let (s, c) = angle.sin_cos();
    for (i, v) in data.iter_mut().enumerate() {
        let (x, y) = ((i % width) as f64, (i / width) as f64);
        *v = (*v + amp * (freq * (c * x + s * y)).sin()).clamp(0.0, 1.0);
    }
    // exact 8-bit values, as if the scene had been read from disk
    let bytes: Vec<u8> = data.iter().map(|v| (v * 255.0).round() as u8).collect();
    Image::from_u8(width, height, &bytes).expect("synthetic size is positive")
}
