use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jacreg::data::to_idx_bytes;
use jacreg::verify::JacobianFn;
use jacreg::{input_jacobian, Checkpoint, Dataset, Matrix, MlpParams, Rng};
use jacreg_cli::commands::{cmd_verify, CHECKPOINT_FILE, LOG_FILE, SUMMARY_FILE};
use jacreg_cli::config::CONFIG_FILE;
use jacreg_cli::{run, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

/// 4×4 images whose brightest quadrant encodes the label modulo 4.
fn synthetic(n: usize, seed: u64) -> Dataset<f64> {
    let mut rng = Rng::new(seed);
    let ys: Vec<usize> = (0..n).map(|i| i % 10).collect();
    let xs = Matrix::from_fn(n, 16, |i, j| {
        let quadrant = (j / 8) * 2 + (j % 4) / 2;
        let base = if quadrant == ys[i] % 4 { 0.8 } else { 0.1 };
        (base + 0.1 * rng.uniform()).min(1.0)
    });
    // Round-trip through bytes so the files hold exactly these pixels.
    let xs = xs.map(|v| (v * 255.0).round() / 255.0);
    Dataset::new(xs, ys, 10).unwrap()
}

fn write_split(dir: &Path, prefix: &str, ds: &Dataset<f64>) {
    let (img, lab) = to_idx_bytes(ds);
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lab).unwrap();
}

fn fake_mnist() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_split(dir.path(), "train", &synthetic(80, 1));
    write_split(dir.path(), "t10k", &synthetic(40, 2));
    dir
}

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jacreg"))
        .args(args)
        .env_remove("JACREG_DATA_DIR")
        .output()
        .unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn train_args<'a>(data: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "--threads", "1", "train", "--l2", "--effective-lambda", "0.01", "--seed", "7", "--epochs", "4",
        "--batch-size", "20", "--hidden", "8,8", "--log-every", "2", "--log-attack", "--n-train", "60",
        "--data-dir", data, "--out", out,
    ]
}

fn trained(data: &Path, out: &Path) {
    let o = bin(&train_args(data.to_str().unwrap(), out.to_str().unwrap()));
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", text(&o.stderr));
}

#[test]
fn train_writes_every_artifact() {
    let data = fake_mnist();
    let out = tempfile::tempdir().unwrap();
    trained(data.path(), out.path());
    for f in [CHECKPOINT_FILE, LOG_FILE, SUMMARY_FILE, CONFIG_FILE] {
        assert!(out.path().join(f).exists(), "missing {f}");
    }
    let log = fs::read_to_string(out.path().join(LOG_FILE)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("2,") && lines[2].starts_with("4,"));
    assert!(lines[1].split(',').all(|c| !c.is_empty()));
}

#[test]
fn rerun_from_echo_is_byte_identical() {
    let data = fake_mnist();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    trained(data.path(), a.path());
    let echo = a.path().join(CONFIG_FILE);
    let o = bin(&["train", "--config", echo.to_str().unwrap(), "--out", b.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", text(&o.stderr));
    for f in [CHECKPOINT_FILE, LOG_FILE, SUMMARY_FILE, CONFIG_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn missing_data_is_a_usage_error_naming_the_path() {
    let out = tempfile::tempdir().unwrap();
    let o = bin(&["train", "--data-dir", "/nonexistent/mnist", "--epochs", "1", "--out", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
    assert!(text(&o.stderr).contains("/nonexistent/mnist"), "{}", text(&o.stderr));
}

#[test]
fn data_dir_falls_back_to_the_environment() {
    let data = fake_mnist();
    let out = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_jacreg"))
        .args(["train", "--epochs", "1", "--batch-size", "30", "--hidden", "4", "--n-train", "30"])
        .args(["--out", out.path().to_str().unwrap()])
        .env("JACREG_DATA_DIR", data.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", text(&o.stderr));
}

fn metric(report: &str, split: &str, key: &str) -> f64 {
    let line = report.lines().find(|l| l.starts_with(&format!("{split}:"))).unwrap();
    let field = line.split_whitespace().find_map(|w| w.strip_prefix(&format!("{key}="))).unwrap();
    field.parse().unwrap()
}

#[test]
fn zero_radius_attack_reports_standard_accuracy() {
    let data = fake_mnist();
    let out = tempfile::tempdir().unwrap();
    trained(data.path(), out.path());
    let ckpt = out.path().join(CHECKPOINT_FILE);
    let o = bin(&["attack", "--checkpoint", ckpt.to_str().unwrap(), "--epsilon", "0", "--n-train", "60", "--seed", "7", "--data-dir", data.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", text(&o.stderr));
    let report = text(&o.stdout);
    for split in ["train", "test"] {
        assert_eq!(metric(&report, split, "standard_acc"), metric(&report, split, "robust_acc"));
    }
    assert!(report.starts_with("attack Linf eps=0 steps=20 step_size=0.01"), "{report}");
}

#[test]
fn attack_rejects_missing_and_corrupt_checkpoints() {
    let data = fake_mnist();
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.jreg");
    let o = bin(&["attack", "--checkpoint", missing.to_str().unwrap(), "--data-dir", data.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
    let corrupt = dir.path().join("bad.jreg");
    fs::write(&corrupt, b"JREG garbage").unwrap();
    let o = bin(&["attack", "--checkpoint", corrupt.to_str().unwrap(), "--data-dir", data.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_RUNTIME));
    assert!(text(&o.stderr).contains("bad.jreg"), "{}", text(&o.stderr));
}

#[test]
fn bounds_report_and_domain_handling() {
    let data = fake_mnist();
    let out = tempfile::tempdir().unwrap();
    trained(data.path(), out.path());
    let ckpt = out.path().join(CHECKPOINT_FILE);
    let (c, d) = (ckpt.to_str().unwrap(), data.path().to_str().unwrap());
    let o = bin(&["bounds", "--checkpoint", c, "--delta", "1.5", "--data-dir", d]);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
    let o = bin(&["bounds", "--checkpoint", c, "--effective-lambda", "0.01", "--n-train", "60", "--seed", "7", "--data-dir", d]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", text(&o.stderr));
    let report = text(&o.stdout);
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], jacreg::bounds::CSV_HEADER);
    assert_eq!(lines[1].split(',').count(), lines[0].split(',').count());
    assert!(report.contains("vacuous:"));

    let zero = out.path().join("zero.jreg");
    let params = MlpParams::<f64>::zeros(&[16, 8, 10]).unwrap();
    Checkpoint { params, rng_id: 1, seed: 0 }.save(&zero).unwrap();
    let o = bin(&["bounds", "--checkpoint", zero.to_str().unwrap(), "--n-train", "60", "--data-dir", d]);
    assert_eq!(o.status.code(), Some(EXIT_RUNTIME));
    assert!(text(&o.stderr).contains("must be positive"), "{}", text(&o.stderr));
    let o = bin(&["bounds", "--checkpoint", zero.to_str().unwrap(), "--n-train", "81", "--data-dir", d]);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
    assert!(text(&o.stderr).contains("--n-train 81"), "{}", text(&o.stderr));
}

#[test]
fn sweep_writes_grid_and_validates_delta() {
    let o = bin(&["sweep", "--depths", "2,3", "--ns", "100,1000", "--r2s", "1,2"]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", text(&o.stderr));
    assert_eq!(text(&o.stdout).lines().count(), 9);
    let o = bin(&["sweep", "--delta", "0"]);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
}

#[test]
fn flag_errors_and_help() {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    assert_eq!(run(["jacreg", "train", "--bogus"], &mut out, &mut err), EXIT_USAGE);
    assert_eq!(run(["jacreg", "train", "--l2", "--linf"], &mut out, &mut err), EXIT_USAGE);
    assert_eq!(run(["jacreg", "train", "--effective-lambda", "0.1", "--epsilon", "0"], &mut out, &mut err), EXIT_USAGE);
    assert_eq!(run(["jacreg", "--help"], &mut out, &mut err), EXIT_OK);
}

#[test]
fn quick_verify_passes_and_repeats() {
    let a = bin(&["verify", "--quick", "--seed", "3"]);
    assert_eq!(a.status.code(), Some(EXIT_OK), "{}", text(&a.stdout));
    let b = bin(&["verify", "--quick", "--seed", "3"]);
    assert_eq!(a.stdout, b.stdout);
}

fn corrupted(params: &MlpParams<f64>, trace: &jacreg::network::ForwardTrace<f64>) -> jacreg::Result<jacreg::Jacobian<f64>> {
    let mut j = input_jacobian(params, trace)?;
    j.matrix.scale(1.0 + 1e-6);
    Ok(j)
}

#[test]
fn corrupted_jacobian_fails_verification() {
    let jac: JacobianFn = corrupted;
    let (report, ok) = cmd_verify(3, true, jac).unwrap();
    assert!(!ok);
    assert!(report.lines().any(|l| l.starts_with("FAIL homogeneity")), "{report}");
}

#[test]
fn reproduce_writes_tables_and_curve() {
    let data = fake_mnist();
    let out = tempfile::tempdir().unwrap();
    let o = bin(&[
        "reproduce", "--table", "all", "--epochs", "2", "--curve-log-every", "1", "--n-train", "60",
        "--data-dir", data.path().to_str().unwrap(), "--out", out.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", text(&o.stderr));
    let files: Vec<PathBuf> = ["t1.md", "t1.csv", "t2.md", "t2.csv", "fig1.csv"].iter().map(|f| out.path().join(f)).collect();
    for f in &files {
        assert!(f.exists(), "missing {}", f.display());
    }
    let t1 = fs::read_to_string(&files[0]).unwrap();
    assert_eq!(t1.lines().count(), 5);
    assert!(t1.contains("(1280)") && t1.contains("(93.3%)"));
    let curve = fs::read_to_string(&files[4]).unwrap();
    assert_eq!(curve.lines().count(), 3);
    assert!(curve.lines().skip(1).all(|l| l.split(',').all(|c| !c.is_empty())));
}
