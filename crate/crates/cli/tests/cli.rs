use std::path::Path;
use std::process::{Command, Output};

use ldn_core::denoiser::{DnCnn, DnCnnSpec};

fn ldn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn ldn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn read(dir: &Path, f: &str) -> String {
    std::fs::read_to_string(dir.join(f)).unwrap_or_else(|e| panic!("{f}: {e}"))
}

fn identity_model(path: &Path) {
    let mut m = DnCnn::new(DnCnnSpec::base(), 0).unwrap();
    m.zero_output();
    m.save(path).unwrap();
}

const QUICK_META: &[&str] = &[
    "train-meta", "--task", "quadratic", "--unroll", "5", "--inner-steps", "10", "--epochs", "3",
];

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&ldn(d, &["train-meta", "--out", "q.opt"])), 2);
    assert_eq!(code(&ldn(d, &["train-meta", "--task", "cubic", "--out", "q.opt"])), 2);
    assert_eq!(code(&ldn(d, &["no-such-command"])), 2);
    assert_eq!(code(&ldn(d, &["bench", "--out", "b"])), 2);
    assert_eq!(
        code(&ldn(d, &["train-meta", "--task", "quadratic", "--unroll", "7", "--out", "q.opt"])),
        2
    );
    std::fs::write(d.join("bad.toml"), "epochz = 3\n").unwrap();
    let o = ldn(d, &["--config", "bad.toml", "train-meta", "--task", "quadratic", "--out", "q.opt"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
}

#[test]
fn train_meta_writes_optimizer_csv_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = QUICK_META.to_vec();
    args.extend(["--seed", "1", "--out", "q.opt"]);
    let o = ldn(d, &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("q.opt").exists());
    let csv = read(d, "q.meta_loss.csv");
    assert_eq!(csv.lines().count(), 1 + 3);
    assert_eq!(csv.lines().next(), Some("epoch,meta_loss"));
    let config = read(d, "q.config.toml");
    assert!(config.contains("seed = 1") && config.contains("unroll = 5"));
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = QUICK_META.to_vec();
    args.extend(["--out", "a.opt"]);
    assert_eq!(code(&ldn(d, &args)), 0);
    let first = std::fs::read(d.join("a.opt")).unwrap();
    let csv = read(d, "a.meta_loss.csv");
    std::fs::rename(d.join("a.opt"), d.join("orig.opt")).unwrap();
    assert_eq!(code(&ldn(d, &["--config", "a.config.toml", "train-meta"])), 0);
    assert_eq!(std::fs::read(d.join("a.opt")).unwrap(), first);
    assert_eq!(read(d, "a.meta_loss.csv"), csv);

    // flags win over file values
    assert_eq!(
        code(&ldn(d, &["--config", "a.config.toml", "train-meta", "--epochs", "2", "--out", "b.opt"])),
        0
    );
    assert_eq!(read(d, "b.meta_loss.csv").lines().count(), 3);
    assert!(read(d, "b.config.toml").contains("epochs = 2"));
}

#[test]
fn train_denoiser_with_baseline_and_meta_optimizers() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = ldn(d, &["synth-images", "--out", "imgs", "--count", "2", "--width", "48", "--height", "48"]);
    assert_eq!(code(&o), 0);
    assert_eq!(read(d, "imgs/manifest.txt").lines().count(), 2);
    let base = [
        "train-denoiser", "--manifest", "imgs/manifest.txt", "--depth", "4", "--filters", "4",
        "--patch-size", "16", "--patches-per-image", "8", "--epochs", "2", "--batch-size", "8",
        "--sigma", "25",
    ];
    let mut args = base.to_vec();
    args.extend(["--out", "adam/m.bin"]);
    let o = ldn(d, &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(d, "adam/m.loss.csv").lines().count(), 3);
    assert!(read(d, "adam/m.config.toml").contains("sigma = 25.0"));
    DnCnn::load(&d.join("adam/m.bin")).unwrap();

    let mut meta = QUICK_META.to_vec();
    meta.extend(["--out", "q.opt"]);
    assert_eq!(code(&ldn(d, &meta)), 0);
    let mut args = base.to_vec();
    args.extend(["--optimizer", "meta", "--meta-file", "q.opt", "--out", "meta/m.bin"]);
    assert_eq!(code(&ldn(d, &args)), 0);
    assert!(read(d, "meta/m.config.toml").contains("optimizer = \"meta\""));

    let mut args = base.to_vec();
    args.extend(["--optimizer", "meta", "--out", "x.bin"]);
    assert_eq!(code(&ldn(d, &args)), 2);
    let o = ldn(d, &["train-denoiser", "--manifest", "missing.txt", "--out", "x.bin"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn identity_model_leaves_images_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    identity_model(&d.join("id.bin"));
    let o = ldn(d, &["synth-images", "--out", "imgs", "--count", "1", "--width", "180", "--height", "180"]);
    assert_eq!(code(&o), 0);
    let o = ldn(d, &["denoise", "--model", "id.bin", "--out", "den", "imgs/synth_000.pgm"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(d.join("den/synth_000.pgm")).unwrap(),
        std::fs::read(d.join("imgs/synth_000.pgm")).unwrap()
    );

    let o = ldn(
        d,
        &["denoise", "--model", "id.bin", "--add-noise", "25", "--out", "noisy", "imgs/synth_000.pgm"],
    );
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("synth_000: noisy"));
    assert_eq!(read(d, "noisy/psnr.csv").lines().count(), 2);

    assert_eq!(code(&ldn(d, &["denoise", "--model", "nope.bin", "--out", "x", "imgs/synth_000.pgm"])), 1);
}

#[test]
fn bench_table_has_ascending_sigmas_and_closed_form_noisy_column() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    identity_model(&d.join("id.bin"));
    let o = ldn(d, &["bench", "--model", "id.bin", "--sigmas", "50,15,25", "--out", "b"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = read(d, "b/psnr_table.csv");
    let rows: Vec<Vec<f64>> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(table.lines().next(), Some("sigma,snr_db,noisy_psnr,psnr,ssim"));
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), [15.0, 25.0, 50.0]);
    for r in &rows {
        assert!((r[2] - 20.0 * (255.0 / r[0]).log10()).abs() < 0.1, "{r:?}");
        assert_eq!(r[2], r[3]);
    }
    assert_eq!(read(d, "b/records.csv").lines().count(), 1 + 20 * 3);

    std::fs::write(d.join("empty.toml"), "sigmas = []\n").unwrap();
    let o = ldn(d, &["--config", "empty.toml", "bench", "--model", "id.bin", "--out", "e"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn optimizer_bench_curves_have_steps_plus_one_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut meta = QUICK_META.to_vec();
    meta.extend(["--out", "q.opt"]);
    assert_eq!(code(&ldn(d, &meta)), 0);
    let common = ["bench", "--meta-file", "q.opt", "--tasks", "4", "--tune-tasks", "2", "--steps", "12"];
    let mut a = common.to_vec();
    a.extend(["--out", "one"]);
    assert_eq!(code(&ldn(d, &a)), 0);
    let curves = read(d, "one/curves.csv");
    assert_eq!(curves.lines().count(), 1 + 6 * 4 * 13);
    for name in ["lstm", "sgd", "momentum", "nag", "rmsprop", "adam"] {
        assert_eq!(curves.lines().filter(|l| l.starts_with(&format!("{name},"))).count(), 4 * 13);
    }
    let mut b = common.to_vec();
    b.extend(["--threads", "3", "--out", "three"]);
    assert_eq!(code(&ldn(d, &b)), 0);
    assert_eq!(read(d, "three/curves.csv"), curves);
    assert_eq!(read(d, "three/summary.csv"), read(d, "one/summary.csv"));
}

#[test]
fn gradcheck_and_selftest_pass() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = ldn(d, &["gradcheck", "--points", "2", "--out", "g"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(read(d, "g/gradcheck.csv").lines().count(), 1 + 15);
    let o = ldn(d, &["selftest"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}
