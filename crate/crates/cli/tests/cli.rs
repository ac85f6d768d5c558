use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qrr(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qrr"))
        .args(args)
        .current_dir(dir)
        .env_remove("QRR_DATA_DIR")
        .output()
        .expect("binary runs")
}

const SMALL: &[&str] = &[
    "--dataset",
    "synthetic",
    "--synthetic-per-class",
    "4",
    "--synthetic-test-per-class",
    "2",
    "--clients",
    "2",
    "--batch",
    "8",
    "--eval-interval",
    "1",
];

fn run_small(extra: &[&str], dir: &Path) -> Output {
    let mut args = vec!["run"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    qrr(&args, dir)
}

#[test]
fn zero_round_run_writes_header_and_initial_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_small(&["--rounds", "0", "--output", "m.csv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("m.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(
        lines[0],
        "round,cum_bits,cum_comms,train_loss,test_loss,test_accuracy,grad_l2"
    );
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("round=0 cum_bits=0"));
}

#[test]
fn identical_seeds_give_byte_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.csv", "b.csv"] {
        let out = run_small(&["--rounds", "2", "--seed", "7", "--output", name], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.csv")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 4);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.cfg"), "algorithm=sgd\nrounds=3\np=0.2\n").unwrap();
    let out = qrr(&["config", "--config", "exp.cfg", "--p", "0.1"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("algorithm=sgd\n"));
    assert!(text.contains("rounds=3\n"));
    assert!(text.contains("p=0.1\n"));
}

#[test]
fn no_arguments_show_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = qrr(&["config"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for line in [
        "algorithm=qrr",
        "arch=mlp",
        "clients=10",
        "rounds=1000",
        "batch=512",
        "alpha=0:0.001",
        "beta=8",
        "p=0.3",
    ] {
        assert!(text.lines().any(|l| l == line), "missing {line}");
    }
}

#[test]
fn bit_totals_for_the_mlp() {
    let dir = tempfile::tempdir().unwrap();
    let out = qrr(&["bits", "--algorithm", "sgd"], dir.path());
    assert_eq!(
        String::from_utf8(out.stdout).unwrap().trim(),
        "per_round=50883200 per_client_round=5088320 total=50883200000"
    );
    let out = qrr(
        &[
            "bits",
            "--algorithm",
            "qrr",
            "--p",
            "0.3",
            "--beta",
            "8",
            "--rounds",
            "1000",
        ],
        dir.path(),
    );
    assert_eq!(
        String::from_utf8(out.stdout).unwrap().trim(),
        "per_round=4798000 per_client_round=479800 total=4798000000"
    );
}

#[test]
fn configuration_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["run", "--beta", "0"],
        vec!["run", "--p", "0.1,0.2"],
        vec!["run", "--algorithm", "slaq"],
        vec!["run", "--no-such-flag"],
        vec!["run", "--config", "missing.cfg"],
    ] {
        let out = qrr(&args, dir.path());
        assert_eq!(out.status.code(), Some(1), "{args:?}");
    }
    fs::write(dir.path().join("bad.cfg"), "colour=red\n").unwrap();
    assert_eq!(qrr(&["run", "--config", "bad.cfg"], dir.path()).status.code(), Some(1));
}

#[test]
fn missing_data_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = qrr(&["run", "--data-dir", "no-mnist-here", "--rounds", "1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("QRR_DATA_DIR"));
}

#[test]
fn unwritable_output_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_small(&["--rounds", "0", "--output", "no/such/dir/m.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn spectrum_is_written_in_descending_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["spectrum"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--warmup-rounds", "1"]);
    let out = qrr(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("spectrum.csv")).unwrap();
    let sigma: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(sigma.len(), 200);
    assert!(sigma.windows(2).all(|w| w[0] >= w[1]));
}
