use std::fs;
use std::path::Path;
use std::process::Command;

use gplar_cli::config::{parse_config, serialize_config, SampleOptions};
use gplar_cli::output::{fmt_g17, Table};

fn gplar(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_gplar")).args(args).output().expect("binary runs");
    (
        out.status.code().expect("exit code"),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn in_process(args: &[&str]) -> (i32, Vec<u8>, String) {
    let mut stdout = Vec::new();
    let mut stderr = Vec::new();
    let argv = std::iter::once("gplar").chain(args.iter().copied());
    let code = gplar_cli::run(argv, &mut stdout, &mut stderr);
    (code, stdout, String::from_utf8(stderr).unwrap())
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gram_example_values() {
    let (code, out, _) = gplar(&["gram", "--kernel", "rbf", "--lengthscale", "1", "--variance", "1", "--T", "2", "--grid", "unit"]);
    assert_eq!(code, 0);
    assert_eq!(out, "c1,c2\n1,0.60653065971263342\n0.60653065971263342,1\n");
}

#[test]
fn gram_with_jitter_adds_to_the_diagonal() {
    let (code, out, _) = in_process(&["gram", "--T", "1", "--jitter", "0.5", "--with-jitter"]);
    assert_eq!(code, 0);
    assert_eq!(out, b"c1\n1.5\n");
}

#[test]
fn no_arguments_is_a_usage_error() {
    let (code, out, err) = gplar(&[]);
    assert_eq!(code, 1);
    assert!(out.is_empty());
    assert!(err.contains("Usage"));
}

#[test]
fn help_exits_zero() {
    let (code, out, _) = in_process(&["--help"]);
    assert_eq!(code, 0);
    assert!(String::from_utf8(out).unwrap().contains("bench-cg"));
}

#[test]
fn bad_flags_and_values_are_usage_errors() {
    for args in [
        vec!["gram", "--T", "3", "--bogus", "1"],
        vec!["gram"],
        vec!["sample", "--T", "3", "--mode", "sideways"],
        vec!["gram", "--T", "3", "--kernel", "cubic"],
        vec!["gram", "--T", "3", "--variance", "-1"],
    ] {
        let (code, _, err) = in_process(&args);
        assert_eq!(code, 1, "{args:?}");
        assert!(err.starts_with("error:"), "{args:?}: {err}");
    }
}

#[test]
fn seq_and_para_sample_the_same_trajectory() {
    let (c1, seq, _) = gplar(&["sample", "--mode", "seq", "--T", "4", "--dz", "1", "--seed", "7"]);
    let (c2, para, _) = gplar(&["sample", "--mode", "para", "--T", "4", "--dz", "1", "--seed", "7"]);
    assert_eq!((c1, c2), (0, 0));
    let parse = |s: &str| -> Vec<Vec<f64>> {
        s.lines().skip(1).map(|l| l.split(',').map(|f| f.parse().unwrap()).collect()).collect()
    };
    let (a, b) = (parse(&seq), parse(&para));
    assert_eq!(seq.lines().next(), para.lines().next());
    assert_eq!(a.len(), 4);
    for (ra, rb) in a.iter().zip(&b) {
        assert_eq!(ra[..2], rb[..2]);
        assert!((ra[2] - rb[2]).abs() <= 1e-12, "{ra:?} vs {rb:?}");
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let args = ["sample", "--mode", "para", "--T", "16", "--dz", "3", "--n", "4", "--seed", "11"];
    assert_eq!(in_process(&args).1, in_process(&args).1);
    let args = ["train", "--steps", "5"];
    assert_eq!(in_process(&args).1, in_process(&args).1);
}

#[test]
fn sample_csv_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    let (code, _, _) = in_process(&["sample", "--T", "20", "--dz", "2", "--n", "3", "--seed", "5", "--out", path_str(&path)]);
    assert_eq!(code, 0);
    let table = Table::read_csv(&path).unwrap();
    assert_eq!(table.header, ["sample", "t", "z1", "z2"]);
    assert_eq!(table.rows.len(), 60);
    assert_eq!(table.to_csv().unwrap(), fs::read(&path).unwrap());
    for v in table.rows.iter().flatten() {
        assert_eq!(fmt_g17(*v).parse::<f64>().unwrap().to_bits(), v.to_bits());
    }
}

#[test]
fn conditioned_sampling_keeps_the_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full.csv");
    let prefix = dir.path().join("prefix.csv");
    in_process(&["sample", "--T", "6", "--dz", "2", "--seed", "3", "--out", path_str(&full)]);
    let text = fs::read_to_string(&full).unwrap();
    let head: Vec<&str> = text.lines().take(4).collect();
    fs::write(&prefix, head.join("\n") + "\n").unwrap();
    let (code, out, err) = in_process(&["sample", "--mode", "cond", "--T", "6", "--seed", "3", "--prefix", path_str(&prefix)]);
    assert_eq!(code, 0, "{err}");
    let out = String::from_utf8(out).unwrap();
    assert_eq!(out.lines().take(4).collect::<Vec<_>>(), head);
    assert_eq!(out.lines().count(), 7);
}

#[test]
fn logdensity_reports_matching_chain_and_joint() {
    let dir = tempfile::tempdir().unwrap();
    let traj = dir.path().join("z.csv");
    fs::write(&traj, "z1,z2\n0.3,-1\n0.1,0.5\n-0.7,2\n").unwrap();
    let (code, out, _) = in_process(&["logdensity", "--traj", path_str(&traj), "--kernel", "matern32"]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_slice(&out).unwrap();
    assert_eq!(v["schema_version"], 1);
    let chain = v["chain_logdensity"].as_f64().unwrap();
    let joint = v["joint_logdensity"].as_f64().unwrap();
    assert!((chain - joint).abs() <= 1e-8 * (1.0 + joint.abs()));
}

#[test]
fn kl_reports_isotropic_and_monte_carlo() {
    let dir = tempfile::tempdir().unwrap();
    let (gram, mu, lv) = (dir.path().join("k.csv"), dir.path().join("mu.csv"), dir.path().join("lv.csv"));
    fs::write(&gram, "c1,c2\n2,0\n0,2\n").unwrap();
    fs::write(&mu, "z1\n0.5\n-0.25\n").unwrap();
    fs::write(&lv, "z1\n-1\n0.5\n").unwrap();
    let posterior = format!("{},{}", path_str(&mu), path_str(&lv));
    let (code, out, _) = in_process(&["kl", "--gram", path_str(&gram), "--posterior", &posterior, "--isotropic", "2", "--mc", "20000"]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_slice(&out).unwrap();
    let total = v["kl_total"].as_f64().unwrap();
    assert!((total - v["kl_isotropic"].as_f64().unwrap()).abs() < 1e-12);
    assert!((v["kl_per_token"].as_f64().unwrap() - total / 2.0).abs() < 1e-15);
    let mc = &v["monte_carlo"];
    assert!((mc["estimate"].as_f64().unwrap() - total).abs() < 5.0 * mc["stderr"].as_f64().unwrap());
}

#[test]
fn non_positive_definite_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let (gram, mu) = (dir.path().join("k.csv"), dir.path().join("mu.csv"));
    fs::write(&gram, "c1,c2\n1,2\n2,1\n").unwrap();
    fs::write(&mu, "z1\n0\n0\n").unwrap();
    let posterior = format!("{0},{0}", path_str(&mu));
    let (code, out, err) = gplar(&["kl", "--gram", path_str(&gram), "--posterior", &posterior]);
    assert_eq!(code, 2);
    assert!(out.is_empty());
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: numerical:"), "{err}");
}

#[test]
fn unwritable_output_fails_before_computing() {
    let (code, _, err) = in_process(&["check", "--out", "/nonexistent-dir/table.txt"]);
    assert_eq!(code, 1);
    assert!(err.contains("/nonexistent-dir/table.txt"));
}

#[test]
fn config_file_layers_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gram.toml");
    fs::write(&cfg, "kernel = \"rbf\"\nlengthscale = 1.0\nT = 2\ngrid = \"unit\"\n").unwrap();
    let (code, out, _) = in_process(&["gram", "--config", path_str(&cfg)]);
    assert_eq!(code, 0);
    assert_eq!(out, b"c1,c2\n1,0.60653065971263342\n0.60653065971263342,1\n");
    let (_, out, _) = in_process(&["gram", "--config", path_str(&cfg), "--variance", "2"]);
    assert_eq!(out, b"c1,c2\n2,1.2130613194252668\n1.2130613194252668,2\n");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "T = 2\nlenghtscale = 1.0\n").unwrap();
    let (code, _, err) = in_process(&["gram", "--config", path_str(&cfg)]);
    assert_eq!(code, 1);
    assert!(err.contains("lenghtscale"), "{err}");
}

#[test]
fn sample_config_round_trips() {
    let cfg = SampleOptions {
        mode: Some("cond".into()),
        len: Some(12),
        dz: Some(3),
        seed: Some(u64::MAX),
        jitter: Some(1e-9),
        prefix: Some("p.csv".into()),
        ..Default::default()
    };
    assert_eq!(parse_config::<SampleOptions>(&serialize_config(&cfg), "rt").unwrap(), cfg);
}

#[test]
fn train_writes_metrics_and_params() {
    let dir = tempfile::tempdir().unwrap();
    let (metrics, params) = (dir.path().join("m.csv"), dir.path().join("p.json"));
    let (code, _, err) = in_process(&[
        "train",
        "--steps",
        "20",
        "--d-z",
        "3",
        "--d-x",
        "5",
        "--seq-len",
        "8",
        "--n-seqs",
        "16",
        "--out-metrics",
        path_str(&metrics),
        "--out-params",
        path_str(&params),
    ]);
    assert_eq!(code, 0, "{err}");
    let table = Table::read_csv(&metrics).unwrap();
    assert_eq!(
        table.header,
        ["step", "elbo_tok", "ll_tok", "kl_tok_raw", "kl_tok_capped", "beta", "lengthscale", "variance"]
    );
    assert_eq!(table.rows.len(), 20);
    let p: serde_json::Value = serde_json::from_slice(&fs::read(&params).unwrap()).unwrap();
    assert_eq!(p["schema_version"], 1);
    assert_eq!(p["d_z"], 3);
    assert_eq!(p["encoder"]["w_mu"].as_array().unwrap().len(), 5);
}

#[test]
fn divergent_training_exits_two_and_keeps_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let (metrics, params) = (dir.path().join("m.csv"), dir.path().join("p.json"));
    let (code, _, err) = in_process(&[
        "train",
        "--steps",
        "200",
        "--learning-rate",
        "1e6",
        "--out-metrics",
        path_str(&metrics),
        "--out-params",
        path_str(&params),
    ]);
    assert_eq!(code, 2, "{err}");
    assert!(err.starts_with("error: numerical: training diverged"));
    let rows = Table::read_csv(&metrics).unwrap().rows.len();
    assert!(rows < 200);
    let p: serde_json::Value = serde_json::from_slice(&fs::read(&params).unwrap()).unwrap();
    assert_eq!(p["status"]["completed"], false);
    assert_eq!(p["status"]["steps"], rows);
}

#[test]
fn bench_cg_table_layout() {
    let (code, out, _) = in_process(&["bench-cg", "--lengths", "16,32", "--trials", "2", "--preconditioner", "jacobi"]);
    assert_eq!(code, 0);
    let out = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "L,kappa_est,iters_mean,iters_std,wall_ms_mean");
    assert!(lines[1].starts_with("16,") && lines[2].starts_with("32,"));
    let (code, _, _) = in_process(&["bench-cg", "--lengths", "32,16"]);
    assert_eq!(code, 1);
}
