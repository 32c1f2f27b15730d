//! End-to-end runs of the binary: exit codes, config layering and the
//! synth -> generate -> render -> eval flow.

use std::path::Path;
use std::process::{Command, Output};

use entropy_splat::pipeline::PipelineConfig;
use entropy_splat::ply::parse_ply;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_entropy-splat")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn synth(dir: &Path) -> String {
    let bundle = dir.join("bundle");
    let out = run(&[
        "synth", "--seed", "3", "--out", bundle.to_str().unwrap(), "--width", "48", "--height", "36", "--views", "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    bundle.to_str().unwrap().to_string()
}

fn write_config(dir: &Path, tau: f64) -> String {
    let mut cfg = PipelineConfig::default();
    cfg.sampler.tau = tau;
    cfg.budget = None;
    let path = dir.join("config.toml");
    cfg.save(&path).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn help_exits_zero() {
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn unknown_flag_is_a_validation_error() {
    assert_eq!(code(&run(&["generate", "--frobnicate"])), 1);
    assert_eq!(code(&run(&["no-such-command"])), 1);
}

#[test]
fn missing_bundle_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let ply = dir.path().join("out.ply");
    let out = run(&["generate", "--bundle", missing.to_str().unwrap(), "--out", ply.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_config_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("absent.toml");
    assert_eq!(code(&run(&["gradcheck", "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn malformed_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "k = \"twenty\"\n").unwrap();
    assert_eq!(code(&run(&["gradcheck", "--config", cfg.to_str().unwrap()])), 1);
}

#[test]
fn zero_tau_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = synth(dir.path());
    let ply = dir.path().join("out.ply");
    let out = run(&["generate", "--bundle", &bundle, "--out", ply.to_str().unwrap(), "--tau", "0", "--preset", "compact"]);
    assert_eq!(code(&out), 1);
    assert!(!ply.exists());
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = synth(dir.path());
    let cfg = write_config(dir.path(), 0.0);
    let ply = dir.path().join("out.ply");
    let base = ["generate", "--config", &cfg, "--bundle", &bundle, "--out", ply.to_str().unwrap(), "--preset", "compact"];

    assert_eq!(code(&run(&base)), 1, "config tau 0 must be rejected");

    let mut args = base.to_vec();
    args.extend(["--tau", "0.5"]);
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("at tau 0.5000"), "{}", stdout(&out));
    assert!(!parse_ply(&ply).unwrap().is_empty());
}

#[test]
fn generate_render_eval_flow() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = synth(dir.path());
    let ply = dir.path().join("scene.ply");
    let png = dir.path().join("view.png");
    let report = dir.path().join("report.json");
    let common = ["--seed", "5", "--tau", "0.5", "--preset", "compact"];

    let mut args = vec!["generate", "--bundle", &bundle, "--out", ply.to_str().unwrap()];
    args.extend(common);
    assert_eq!(code(&run(&args)), 0);
    let n = parse_ply(&ply).unwrap().len();
    assert!(n > 0);

    let out = run(&["render", "--bundle", &bundle, "--ply", ply.to_str().unwrap(), "--out", png.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(png.exists());

    let out = run(&["eval", "--bundle", &bundle, "--ply", ply.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["gaussian_count"].as_u64(), Some(n as u64), "{json}");
}

#[test]
fn same_seed_same_output() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = synth(dir.path());
    let a = dir.path().join("a.ply");
    let b = dir.path().join("b.ply");
    for p in [&a, &b] {
        let out = run(&["generate", "--bundle", &bundle, "--out", p.to_str().unwrap(), "--seed", "9", "--tau", "0.5", "--preset", "compact"]);
        assert_eq!(code(&out), 0);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn entropy_writes_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = synth(dir.path());
    let maps = dir.path().join("maps");
    let out = run(&["entropy", "--bundle", &bundle, "--out", maps.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read_dir(&maps).unwrap().count() > 0);
}

#[test]
fn knn_bench_verifies() {
    let out = run(&["knn-bench", "--seed", "1", "--points", "2000", "--queries", "200", "--verify", "50"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_passes() {
    let out = run(&["gradcheck", "--seed", "0"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(!stdout(&out).contains("FAIL"));
}
