use std::path::Path;
use std::process::{Command, Output};

use mfac::io::{load_gradients, GradientFormat};
use mfac::Dtype;

fn mfac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfac")).args(args).output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn verify_generated_instance() {
    let out = mfac(&["verify", "--d", "64", "--m", "16", "--seed", "0"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let report = text(&out.stdout);
    assert!(report.starts_with("check,error,tolerance,status\n"));
    assert!(!report.contains("FAIL"));
}

#[test]
fn verify_refuses_large_d() {
    let out = mfac(&["verify", "--d", "5000", "--m", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("oracle limit"));
}

#[test]
fn verify_names_corrupted_denominators() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sketch.mfac");
    let g = mfac::synth::gaussian_gradients(4, 8, 1).unwrap();
    let s = mfac::StaticSketch::from_gradients(&g, &mfac::FisherConfig::new(4, 0.1, 8).unwrap()).unwrap();
    s.save(&path, Dtype::F64).unwrap();
    assert_eq!(mfac(&["verify", "--sketch", p(&path)]).status.code(), Some(0));

    // The q section is the last one written: its final value is the last 8 bytes.
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 8..].copy_from_slice(&0.5f64.to_le_bytes());
    std::fs::write(&path, bytes).unwrap();
    let out = mfac(&["verify", "--sketch", p(&path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("q-positivity"));
}

#[test]
fn prune_worked_instance() {
    let dir = tempfile::tempdir().unwrap();
    let (g, w, out_w) = (dir.path().join("g.csv"), dir.path().join("w.csv"), dir.path().join("pruned.mfac"));
    std::fs::write(&g, "1,0\n").unwrap();
    std::fs::write(&w, "2,3\n").unwrap();
    let args = ["prune", "--gradients", p(&g), "--weights", p(&w), "--lambda", "1", "--sparsity", "0.5", "--mode", "obs", "--weights-out", p(&out_w)];
    let out = mfac(&args);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert_eq!(text(&out.stdout), "index,theta_before,saliency,in_q,delta,theta_after\n0,2,4,1,-2,0\n1,3,4.5,0,0,3\n");
    let pruned = load_gradients(&out_w, GradientFormat::MfacBin, Dtype::F64).unwrap();
    assert_eq!(pruned.as_slice(), &[0.0, 3.0]);
}

#[test]
fn prune_sparsity_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let out_w = dir.path().join("w.mfac");
    let out = mfac(&["prune", "--d", "10", "--m", "3", "--sparsity", "0", "--weights-out", p(&out_w)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(text(&out.stdout).lines().skip(1).all(|l| l.split(',').nth(3) == Some("0")));
    let rejected = mfac(&["prune", "--sparsity", "1.0"]);
    assert_eq!(rejected.status.code(), Some(1));
    assert!(text(&rejected.stderr).contains("sparsity"));
}

#[test]
fn prune_is_deterministic() {
    let args = ["prune", "--d", "40", "--m", "8", "--sparsity", "0.6", "--mode", "obs-solve", "--recompute", "3", "--seed", "5"];
    assert_eq!(mfac(&args).stdout, mfac(&args).stdout);
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.mfac"), dir.path().join("b.mfac"));
    for path in [&a, &b] {
        let out = mfac(&["gen", "--d", "8", "--m", "4", "--seed", "7", "--out", p(path)]);
        assert_eq!(out.status.code(), Some(0));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let sidecar = std::fs::read_to_string(a.with_extension("json")).unwrap();
    assert!(sidecar.contains("\"seed\": 7"));
}

#[test]
fn optimize_reports_warmup_only_runs() {
    let out = mfac(&["optimize", "--m", "64", "--steps", "10", "--oracle-steps", "10"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(text(&out.stdout).contains("warmup_only,true"));
}

#[test]
fn optimize_reaches_the_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let (trace, probes) = (dir.path().join("trace.csv"), dir.path().join("probes.jsonl"));
    let out = mfac(&["optimize", "--out", p(&trace), "--probes", p(&probes), "--probe-every", "500"]);
    assert_eq!(out.status.code(), Some(0));
    let report = text(&out.stdout);
    let gap: f64 = report.lines().find_map(|l| l.strip_prefix("gap,")).unwrap().parse().unwrap();
    assert!(gap.abs() <= 1e-3);
    assert_eq!(std::fs::read_to_string(&trace).unwrap().lines().count(), 2001);
    assert_eq!(std::fs::read_to_string(&probes).unwrap().lines().count(), 4);
}

#[test]
fn bench_single_point_has_no_slope() {
    let out = mfac(&["bench", "--d", "256", "--m", "8", "--ops", "static_ihvp"]);
    assert_eq!(out.status.code(), Some(0));
    let csv = text(&out.stdout);
    assert!(csv.contains("median_ns,static_ihvp,256,8"));
    assert!(!csv.contains("slope"));
}

#[test]
fn missing_input_is_an_io_error() {
    let out = mfac(&["verify", "--gradients", "/nonexistent/g.mfac"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_flags_are_validation_errors() {
    assert_eq!(mfac(&["prune", "--mode", "magic"]).status.code(), Some(1));
    assert_eq!(mfac(&["--help"]).status.code(), Some(0));
}
