use std::path::Path;

use dolfin_cli::{run_cli, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME};

const CONFIG: &str = r#"
[experiment]
seed = 2
num_tasks = 2

[backbone]
embed_dim = 16
num_layers = 1
num_tokens = 3
input_dim = 16
mlp_hidden = 16

[round]
num_clients = 2
local_epochs = 1

[data]
source = "synthetic"
num_classes = 4
samples_per_class = 20
input_dim = 16
"#;

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("dolfin").chain(args.iter().copied());
    let code = run_cli(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("exp.toml");
    std::fs::write(&path, CONFIG).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn eval_recomputes_faa_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("acc.csv");
    std::fs::write(&csv, "t,task_1,task_2\n1,0.9,\n2,0.5,0.7\n").unwrap();
    let (code, out, _) = cli(&["eval", "--csv", csv.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(out.trim().parse::<f64>().unwrap(), (0.5 + 0.7) / 2.0);
}

#[test]
fn gradcheck_passes_with_defaults() {
    let (code, out, _) = cli(&["gradcheck"]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.contains("max relative error"));
}

#[test]
fn usage_errors_exit_with_config_code() {
    assert_eq!(cli(&["run", "--bogus"]).0, EXIT_CONFIG);
    assert_eq!(cli(&["frobnicate"]).0, EXIT_CONFIG);
    assert_eq!(cli(&["run", "--config", "/nonexistent/exp.toml"]).0, EXIT_CONFIG);
    assert_eq!(cli(&["gradcheck", "--rank", "0"]).0, EXIT_CONFIG);
    assert_eq!(cli(&["--help"]).0, EXIT_OK);
}

#[test]
fn bad_config_values_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, CONFIG.replace("num_clients = 2", "num_clients = 0")).unwrap();
    let (code, _, err) = cli(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.starts_with("error:"));
}

#[test]
fn repeated_runs_write_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let (code, out, err) = cli(&["run", "--config", &config, "--out", out_dir.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK, "{err}");
        assert!(out.contains("mean faa"));
        assert!(out_dir.join("accuracy_seed2.csv").exists());
        reports.push(std::fs::read(out_dir.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let (code, _, _) = cli(&["--threads", "1", "run", "--config", &config, "--out", dir.path().join("c").to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(std::fs::read(dir.path().join("c/report.json")).unwrap(), reports[0]);
}

#[test]
fn checkpoints_evaluate_and_truncation_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let ck = dir.path().join("model.ckpt");
    let out_dir = dir.path().join("out");
    let (code, run_out, _) = cli(&[
        "run", "--config", &config, "--out", out_dir.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    let (code, row, _) = cli(&["eval", "--checkpoint", ck.to_str().unwrap(), "--config", &config]);
    assert_eq!(code, EXIT_OK);
    let cells: Vec<f64> = row.trim().split(',').map(|c| c.parse().unwrap()).collect();
    assert_eq!(cells.len(), 2);
    let faa = cells.iter().sum::<f64>() / 2.0;
    assert!(run_out.contains(&format!("seed 2 faa {faa}")), "{run_out} vs {faa}");

    let bytes = std::fs::read(&ck).unwrap();
    std::fs::write(&ck, &bytes[..bytes.len() / 2]).unwrap();
    let (code, _, err) = cli(&["eval", "--checkpoint", ck.to_str().unwrap(), "--config", &config]);
    assert_eq!(code, EXIT_RUNTIME);
    assert!(err.contains("error"));
}

#[test]
fn partition_prints_a_histogram_per_client() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let (code, out, _) = cli(&["partition", "--config", &config, "--beta", "0.1", "--clients", "3"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.starts_with("beta 0.1 seed 2 clients 3"));
    assert_eq!(out.lines().filter(|l| l.starts_with("task 1 ") && !l.contains("client")).count(), 3);
}

#[test]
fn version_prints_the_package_version() {
    let (code, out, _) = cli(&["version"]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(out.trim(), format!("dolfin {}", env!("CARGO_PKG_VERSION")));
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_dolfin");
    let status = |args: &[&str]| std::process::Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(status(&["version"]), Some(EXIT_OK));
    assert_eq!(status(&["eval", "--nope"]), Some(EXIT_CONFIG));
    assert_eq!(status(&["eval", "--csv", "/nonexistent.csv"]), Some(EXIT_RUNTIME));
}

#[test]
fn shipped_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ablation.toml");
    dolfin::config::ExperimentConfig::load(&path).unwrap();
}
