use gpcsi::channel::ChannelMatrix;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gpcsi"))
}

fn default_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn sweep(out: &Path, extra: &[&str]) -> Output {
    let cfg = default_config();
    let mut args = vec!["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

fn data_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().skip(1).map(String::from).collect()
}

#[test]
fn minimal_sweep_writes_one_row_and_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = sweep(dir.path(), &["--trials", "1", "--estimators", "ls", "--set", "nt_list=[16]"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("estimator,snr_db,n_t,trial,nmse"));
    assert!(lines[1].starts_with("ls,0.0,16,0,"));
    for name in ["timings.csv", "summary.json", "hyperparams.jsonl", "manifest.toml"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let entries = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(entries, 5, "no temporary files left behind");
}

#[test]
fn trials_override_triples_the_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = sweep(dir.path(), &["--estimators", "ls", "--set", "nt_list=[16]", "--set", "trials=3"]);
    assert!(out.status.success());
    let rows = data_lines(&dir.path().join("results.csv"));
    assert_eq!(rows.len(), 3);
    for (r, line) in rows.iter().enumerate() {
        assert!(line.starts_with(&format!("ls,0.0,16,{r},")));
    }
}

#[test]
fn manifest_replays_byte_identically() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = sweep(
        a.path(),
        &["--trials", "2", "--estimators", "genie,gpr,ls,omp", "--set", "nt_list=[16,4]", "--set", "learn.restarts=2", "--seed", "77"],
    );
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let manifest = a.path().join("manifest.toml");
    let second = run(&["sweep", "--config", manifest.to_str().unwrap(), "--out", b.path().to_str().unwrap()]);
    assert!(second.status.success(), "{}", String::from_utf8_lossy(&second.stderr));
    let ra = std::fs::read(a.path().join("results.csv")).unwrap();
    let rb = std::fs::read(b.path().join("results.csv")).unwrap();
    assert_eq!(ra, rb);
    let hp = std::fs::read_to_string(a.path().join("hyperparams.jsonl")).unwrap();
    assert_eq!(hp.lines().count(), 4);
    let m = std::fs::read_to_string(&manifest).unwrap();
    assert!(m.contains("master_seed = 77"));
    assert!(m.contains("[manifest]"));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = sweep(dir.path(), &["--set", "learn.restartz=3"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("restartz"));

    let invalid = sweep(dir.path(), &["--set", "nt_list=[17]"]);
    assert_eq!(invalid.status.code(), Some(2));

    let missing = run(&["sweep", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));

    let no_file = run(&["estimate", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(no_file.status.code(), Some(2));

    let bad_estimator = sweep(dir.path(), &["--estimators", "ls,kalman"]);
    assert_eq!(bad_estimator.status.code(), Some(2));
    assert!(!dir.path().join("results.csv").exists());
}

#[test]
fn unknown_subcommand_is_rejected() {
    assert!(!run(&["calibrate"]).status.success());
}

#[test]
fn demo_slice_has_sixteen_ordered_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["demo-slice", "--out", dir.path().to_str().unwrap(), "--set", "snr_db_list=[10.0]"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("demo_slice.csv")).unwrap();
    assert!(text.starts_with("tx_index,true_re,observed,observation,mean,lo95,hi95\n"));
    let rows = data_lines(&dir.path().join("demo_slice.csv"));
    assert_eq!(rows.len(), 16);
    let mut observed = Vec::new();
    for (k, line) in rows.iter().enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 7);
        assert_eq!(f[0].parse::<usize>().unwrap(), k + 1);
        if f[2] == "true" {
            observed.push(k + 1);
            assert!(f[3].parse::<f64>().is_ok());
        } else {
            assert_eq!(f[2], "false");
            assert!(f[3].is_empty());
        }
        let (mean, lo, hi): (f64, f64, f64) = (f[4].parse().unwrap(), f[5].parse().unwrap(), f[6].parse().unwrap());
        assert!(lo <= mean && mean <= hi);
    }
    assert_eq!(observed, vec![1, 4, 7, 10, 13, 16]);
}

#[test]
fn estimate_dumps_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = default_config();
    let out = run(&[
        "estimate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--estimators",
        "genie,ls,mmse",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let truth = ChannelMatrix::from_dump(&std::fs::read_to_string(dir.path().join("h_true.mat")).unwrap()).unwrap();
    assert_eq!((truth.n_r(), truth.n_t()), (16, 16));
    for name in ["h_ls.mat", "h_mmse.mat"] {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        assert!(text.starts_with("16 16\n"));
        assert_eq!(text.lines().count(), 1 + 256);
        assert!(ChannelMatrix::from_dump(&text).unwrap().is_finite());
    }
    assert!(!dir.path().join("h_genie.mat").exists());
    assert_eq!(data_lines(&dir.path().join("estimate.csv")).len(), 3);
}

#[test]
fn gradcheck_passes_and_reports_worst_error() {
    let out = run(&["gradcheck", "--points", "2"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("worst relative error"));
}

#[test]
fn zero_samples_are_a_vacuous_pass_with_a_warning() {
    for args in [["gradcheck", "--points", "0"], ["psd-check", "--draws", "0"]] {
        let out = run(&args);
        assert!(out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    }
}

#[test]
fn psd_check_default_run_passes() {
    let out = run(&["psd-check"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("violations 0"));
}

#[test]
fn an_impossible_tolerance_is_a_check_violation() {
    let out = run(&["gradcheck", "--points", "1", "--tol", "1e-300"]);
    assert_eq!(out.status.code(), Some(4));
}
