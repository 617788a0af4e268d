//! MSE, PSNR, SSIM and Table-style aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("mse of {} vs {} values", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10·log10(peak² / mse)`; identical inputs give `+inf`.
pub fn psnr_peak(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// PSNR for images on the `[0, 1]` scale.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    psnr_peak(a, b, 1.0)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of `src` (`w×h`).
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&line[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11×11 Gaussian-window positions, computed on
/// the `[0, 1]` scale.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape(format!(
            "ssim of {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let k = gaussian_window();
    let (w, h) = (a.width, a.height);
    let f = |v: Vec<f64>| filter_valid(&v, w, h, &k);
    let mu_a = f(a.data.clone());
    let mu_b = f(b.data.clone());
    let aa = f(a.data.iter().map(|v| v * v).collect());
    let bb = f(b.data.iter().map(|v| v * v).collect());
    let ab = f(a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect());
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// Signal-to-noise ratio in dB for a clean signal with RMS `signal_rms`
/// (0–255 scale) under noise std `sigma`.
pub fn snr_db(signal_rms: f64, sigma: f64) -> f64 {
    20.0 * (signal_rms / sigma).log10()
}

/// RMS of an image expressed on the 0–255 scale.
pub fn rms_255(img: &Image) -> f64 {
    255.0 * (img.data.iter().map(|v| v * v).sum::<f64>() / img.data.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub image_id: String,
    pub sigma: f64,
    pub signal_rms: f64,
    pub noisy_psnr: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Means over all records sharing one σ.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSummary {
    pub sigma: f64,
    pub snr_db: f64,
    pub noisy_psnr: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub records: Vec<MetricsRecord>,
    /// Ascending σ.
    pub summaries: Vec<SigmaSummary>,
}

pub const REPORT_HEADER: &str = "sigma,snr_db,noisy_psnr,psnr,ssim";

pub fn aggregate_report(records: Vec<MetricsRecord>) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Data("no metric records".into()));
    }
    let mut groups: BTreeMap<u64, Vec<&MetricsRecord>> = BTreeMap::new();
    for r in &records {
        if !(r.sigma >= 0.0) {
            return Err(Error::Data(format!("invalid sigma {}", r.sigma)));
        }
        groups.entry(r.sigma.to_bits()).or_default().push(r);
    }
    // non-negative floats order the same way as their bit patterns
    let summaries = groups
        .values()
        .map(|g| {
            let n = g.len() as f64;
            let mean = |f: fn(&MetricsRecord) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / n;
            let sigma = g[0].sigma;
            SigmaSummary {
                sigma,
                snr_db: snr_db(mean(|r| r.signal_rms), sigma),
                noisy_psnr: mean(|r| r.noisy_psnr),
                psnr: mean(|r| r.psnr),
                ssim: mean(|r| r.ssim),
            }
        })
        .collect();
    Ok(MetricsReport { records, summaries })
}

pub fn format_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn parse_value(s: &str, line: usize) -> Result<f64> {
    match s.trim() {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        t => t
            .parse()
            .map_err(|_| Error::Data(format!("line {line}: bad number {t:?}"))),
    }
}

pub fn report_csv(report: &MetricsReport) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for s in &report.summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            format_value(s.sigma),
            format_value(s.snr_db),
            format_value(s.noisy_psnr),
            format_value(s.psnr),
            format_value(s.ssim)
        );
    }
    out
}

pub fn write_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    std::fs::write(path, report_csv(report)).map_err(|e| Error::io(path, e))
}

pub fn parse_report_csv(text: &str) -> Result<Vec<SigmaSummary>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::Data("unexpected report header".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v: Vec<f64> = l
                .split(',')
                .map(|f| parse_value(f, i + 2))
                .collect::<Result<_>>()?;
            let [sigma, snr_db, noisy_psnr, psnr, ssim] = v[..] else {
                return Err(Error::Data(format!("line {}: expected 5 fields", i + 2)));
            };
            Ok(SigmaSummary {
                sigma,
                snr_db,
                noisy_psnr,
                psnr,
                ssim,
            })
        })
        .collect()
}

/// Rounds every summary field the way the CSV writer does.
pub fn rounded(s: &SigmaSummary) -> SigmaSummary {
    let r = |v: f64| parse_value(&format_value(v), 0).unwrap();
    SigmaSummary {
        sigma: r(s.sigma),
        snr_db: r(s.snr_db),
        noisy_psnr: r(s.noisy_psnr),
        psnr: r(s.psnr),
        ssim: r(s.ssim),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> Image {
        let mut r = rng::stream(seed, "metrics-test", 0);
        Image::new(w, h, (0..w * h).map(|_| r.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5);
        assert_eq!(mse(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let d = 0.25;
        assert!((mse(&[0.1, 0.2, 0.3], &[0.1 + d, 0.2 + d, 0.3 + d]).unwrap() - d * d).abs() < 1e-15);
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn psnr_examples() {
        let clean = vec![0.5; 100];
        for (sigma, expected) in [(15.0, 24.61), (25.0, 20.17)] {
            let off: Vec<f64> = clean.iter().map(|v| v + sigma / 255.0).collect();
            let p = psnr(&off, &clean).unwrap();
            assert!((p - 20.0 * (255.0f64 / sigma).log10()).abs() < 1e-9);
            assert!((p - expected).abs() < 0.005);
        }
        assert_eq!(psnr(&clean, &clean).unwrap(), f64::INFINITY);
    }

    #[test]
    fn doubling_mse_costs_three_db() {
        let a = [0.0; 4];
        let b = [0.1; 4];
        let c = [0.1 * 2f64.sqrt(); 4];
        let drop = psnr(&a, &b).unwrap() - psnr(&a, &c).unwrap();
        assert!((drop - 10.0 * 2f64.log10()).abs() < 1e-12);
    }

    /// Direct 2-D window evaluation.
    fn ssim_direct(a: &Image, b: &Image) -> f64 {
        let g = gaussian_window();
        let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
        let n = SSIM_WINDOW;
        let mut total = 0.0;
        let mut count = 0;
        for y in 0..=a.height - n {
            for x in 0..=a.width - n {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let w = g[i] * g[j];
                        let (p, q) = (a.get(x + j, y + i), b.get(x + j, y + i));
                        ma += w * p;
                        mb += w * q;
                        saa += w * p * p;
                        sbb += w * q * q;
                        sab += w * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_direct_window_sum() {
        let a = random_image(1, 17, 14);
        let b = random_image(2, 17, 14);
        assert!((ssim(&a, &b).unwrap() - ssim_direct(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_constant_images() {
        let a = Image::filled(16, 16, 0.0);
        let b = Image::filled(16, 16, 1.0);
        let c1 = SSIM_K1 * SSIM_K1;
        let v = ssim(&a, &b).unwrap();
        assert!((v - c1 / (1.0 + c1)).abs() < 1e-12);
        assert!((v - 9.999e-5).abs() < 1e-8);
    }

    #[test]
    fn ssim_rejects_small_or_mismatched() {
        let a = Image::filled(10, 20, 0.0);
        assert!(matches!(ssim(&a, &a), Err(Error::Contract(_))));
        let b = Image::filled(20, 20, 0.0);
        assert!(matches!(ssim(&b, &Image::filled(21, 20, 0.0)), Err(Error::Shape(_))));
    }

    #[test]
    fn report_examples_and_round_trip() {
        let rec = |sigma: f64, p: f64| MetricsRecord {
            image_id: "x".into(),
            sigma,
            signal_rms: 109.0,
            noisy_psnr: 20.0,
            psnr: p,
            ssim: 0.8,
        };
        let single = aggregate_report(vec![rec(25.0, 20.0)]).unwrap();
        assert_eq!(single.summaries[0].psnr, 20.0);
        let r = aggregate_report(vec![rec(50.0, 1.0), rec(25.0, 20.0), rec(25.0, 22.0), rec(15.0, f64::INFINITY)]).unwrap();
        let sig: Vec<f64> = r.summaries.iter().map(|s| s.sigma).collect();
        assert_eq!(sig, vec![15.0, 25.0, 50.0]);
        assert_eq!(r.summaries[1].psnr, 21.0);
        assert_eq!(r.summaries[0].psnr, f64::INFINITY);
        let csv = report_csv(&r);
        assert!(csv.starts_with("sigma,snr_db,noisy_psnr,psnr,ssim\n15.0000,"));
        assert!(csv.contains(",inf,"));
        let back = parse_report_csv(&csv).unwrap();
        let expect: Vec<SigmaSummary> = r.summaries.iter().map(rounded).collect();
        assert_eq!(back, expect);
        assert_eq!(csv, report_csv(&r));
        assert!(aggregate_report(vec![]).is_err());
    }

    #[test]
    fn snr_reproduces_table_level() {
        // a test set with RMS 109.5 on the 0–255 scale gives 17.26 dB at σ = 15
        assert!((snr_db(109.5, 15.0) - 17.266).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn psnr_invariant_to_peak_rescaling(xs in prop::collection::vec(0.0f64..1.0, 16), ys in prop::collection::vec(0.0f64..1.0, 16)) {
            let a = psnr(&xs, &ys).unwrap();
            let xs2: Vec<f64> = xs.iter().map(|v| v * 255.0).collect();
            let ys2: Vec<f64> = ys.iter().map(|v| v * 255.0).collect();
            let b = psnr_peak(&xs2, &ys2, 255.0).unwrap();
            prop_assert!(a == b || (a - b).abs() < 1e-9);
        }

        #[test]
        fn ssim_bounded_symmetric_and_reflexive(s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = random_image(s1, 12, 13);
            let b = random_image(s2 + 5000, 12, 13);
            let ab = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert_eq!(ab.to_bits(), ssim(&b, &a).unwrap().to_bits());
            prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn psnr_strictly_decreasing_in_mse(m1 in 1e-6f64..1.0, f in 1.01f64..10.0) {
            let a = [0.0];
            let p1 = psnr(&a, &[m1.sqrt()]).unwrap();
            let p2 = psnr(&a, &[(m1 * f).sqrt()]).unwrap();
            prop_assert!(p2 < p1);
        }
    }
}
