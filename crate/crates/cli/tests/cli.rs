use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn polylab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polylab")).args(args).output().unwrap()
}

fn out_arg(dir: &Path) -> String {
    dir.display().to_string()
}

#[test]
fn simulate_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = polylab(&[
        "simulate", "--dims", "2", "--n-grid", "4,8", "--replicas", "50", "--beta", "0.3", "--out", &out_arg(dir.path()), "--check",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["samples.csv", "aggregate.csv", "summary.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("mean_z_n8"));
}

#[test]
fn config_file_and_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, "d = 2\nn_grid = [4, 8, 16]\nreplicas = 30\nmean_replicas = 10\nbootstrap = 20\n[env]\nbeta = 0.4\nseed = 9\n").unwrap();
    let run_dir = dir.path().join("run");
    let o = polylab(&["exponent", "--config", cfg.to_str().unwrap(), "--out", &out_arg(&run_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for t in ["1", "4"] {
        let o = polylab(&["rerun", run_dir.to_str().unwrap(), "--threads", t, "--check"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
        assert!(String::from_utf8_lossy(&o.stdout).contains("identical"));
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    // config errors
    assert_eq!(polylab(&["simulate", "--family", "poisson", "--out", &out]).status.code(), Some(2));
    assert_eq!(polylab(&["simulate", "--n-grid", "8,4", "--out", &out]).status.code(), Some(2));
    assert_eq!(polylab(&["tail", "--replicas", "10", "--out", &out]).status.code(), Some(2));
    assert_eq!(polylab(&["simulate", "--config", "/nonexistent.toml"]).status.code(), Some(2));
    let wrong = dir.path().join("wrong.toml");
    fs::write(&wrong, "kind = \"tail\"\n").unwrap();
    assert_eq!(polylab(&["simulate", "--config", wrong.to_str().unwrap()]).status.code(), Some(2));
    // budget
    let budget = dir.path().join("budget.toml");
    fs::write(&budget, "budget = 100\nreplicas = 2\nn_grid = [30]\n").unwrap();
    assert_eq!(polylab(&["simulate", "--config", budget.to_str().unwrap(), "--out", &out]).status.code(), Some(3));
    // at β = 0 the lower tail is empty, so the tail fit check cannot pass
    let tail = ["tail", "--dims", "1", "--beta", "0", "--n-grid", "3", "--replicas", "10000", "--out", &out];
    let o = polylab(&[&tail[..], &["--check"]].concat());
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stdout));
    let o = polylab(&tail);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn help_lists_subcommands() {
    let o = polylab(&["--help"]);
    let s = String::from_utf8_lossy(&o.stdout);
    for sub in ["simulate", "exponent", "tail", "overlap", "moments", "compare", "covariance", "doob", "appendix-phi"] {
        assert!(s.contains(sub), "{sub}");
    }
}
