//! End-to-end tests of the command-line interface.

use std::fs;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedsamp"))
}

#[test]
fn probs_prints_reference_vector() {
    let dir = tempfile::tempdir().unwrap();
    let norms = dir.path().join("norms.txt");
    fs::write(&norms, "1 2 3 10\n").unwrap();

    let out = bin().arg("probs").arg(&norms).args(["--m", "2"]).output().unwrap();
    assert!(out.status.success());
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        "0.166667 0.333333 0.5 1"
    );

    let out = bin()
        .arg("probs")
        .arg(&norms)
        .args(["--m", "2", "--method", "aocs", "--j-max", "4"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        "0.166667 0.333333 0.5 1"
    );
}

#[test]
fn variance_prints_reference_values() {
    let dir = tempfile::tempdir().unwrap();
    let norms = dir.path().join("norms.txt");
    let probs = dir.path().join("probs.txt");
    fs::write(&norms, "1 2 3 10\n").unwrap();
    fs::write(&probs, "0.16666666666666666 0.3333333333333333 0.5 1.0\n").unwrap();

    let out = bin()
        .arg("variance")
        .arg(&norms)
        .arg(&probs)
        .args(["--m", "2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        "22.0 alpha=0.192982 gamma=0.838235"
    );
}

#[test]
fn caps_prints_step_bound() {
    let out = bin()
        .args(["caps", "dsgd_cvx", "--l-smooth", "2", "--gamma", "1"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0.5");
}

const CONFIG: &str = "\
algorithm = dsgd
sampler = ocs
task = quadratic
n = 6
m = 2
d = 3
rounds = 4
eta = 0.02
seeds = 3, 4
";

#[test]
fn run_writes_deterministic_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, CONFIG).unwrap();

    let run = |out_name: &str| {
        let out_path = dir.path().join(out_name);
        let status = bin()
            .arg("run")
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&out_path)
            .status()
            .unwrap();
        assert!(status.success());
        fs::read(&out_path).unwrap()
    };
    let a = run("a.csv");
    let b = run("b.csv");
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("seed,round,subopt,dist_sq,sampled_count,alpha,gamma,cum_uplink_bits\n"));
    // 2 seeds x 4 rounds + header
    assert_eq!(text.lines().count(), 9);
}

#[test]
fn seed_override_changes_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, CONFIG).unwrap();
    let out = bin()
        .arg("run")
        .arg("--config")
        .arg(&cfg)
        .args(["--seeds", "7"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().nth(1).unwrap().starts_with("7,"));
}

#[test]
fn validation_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "rounds = 0\n").unwrap();
    let out = bin().arg("run").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());

    let norms = dir.path().join("norms.txt");
    fs::write(&norms, "1 2 nonsense\n").unwrap();
    let out = bin().arg("probs").arg(&norms).args(["--m", "2"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense"));
}

#[test]
fn divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(
        &cfg,
        "algorithm = dsgd\nsampler = full\ntask = quadratic\nn = 4\nm = 2\nd = 3\nrounds = 200\neta = 100.0\nseeds = 0\n",
    )
    .unwrap();
    let out = bin().arg("run").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}
