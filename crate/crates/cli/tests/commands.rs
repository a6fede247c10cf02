use std::path::Path;
use std::process::Command;

use ttbnn_cli::commands::{
    cmd_compress, cmd_evaluate, cmd_inspect, cmd_predict, cmd_train, read_archive, PredictInput,
};
use ttbnn_cli::{CliError, ExperimentConfig};
use ttbnn_core::ThresholdPolicy;

const TOY: &str = r#"
seed = 5
[[layers]]
rows = [2, 1]
cols = [4, 4]
max_rank = 4
activation = "relu"
[[layers]]
rows = [4, 4]
cols = [2, 1]
max_rank = 4
activation = "softmax"
[map]
step_size = 0.01
iterations = 400
batch_size = 40
[svgd]
particles = 4
step_size = 0.005
iterations = 60
batch_size = 40
[data]
source = "two-gaussians"
toy_count = 120
[output]
checkpoint_every = 50
"#;

fn toy_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(TOY).unwrap();
    cfg.output.dir = out.to_path_buf();
    cfg
}

#[test]
fn train_evaluate_compress_predict_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut log = Vec::new();
    let trained = cmd_train(&toy_config(&out), &mut log).unwrap();
    assert_eq!(trained.model.particles.len(), 4);
    assert!(out.join("checkpoint.ttb").exists());
    let metrics = std::fs::read_to_string(&trained.metrics_path).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 400 + 60);
    assert!(metrics.starts_with("phase,iteration,log_posterior,accuracy\nmap,0,"));
    assert!(trained.test.unwrap().accuracy > 0.95);

    let mut text = Vec::new();
    let m = cmd_evaluate(&trained.archive_path, None, None, &mut text).unwrap();
    assert_eq!(Some(m), trained.test);
    assert!(String::from_utf8(text).unwrap().contains("test_ll="));

    let small = dir.path().join("small.ttb");
    let mut text = Vec::new();
    let report = cmd_compress(
        &trained.archive_path,
        &small,
        &ThresholdPolicy::default(),
        32,
        &mut text,
    )
    .unwrap();
    assert!(report.params_after() <= report.params_before());
    let kv = std::fs::read_to_string(dir.path().join("small.ttb.report")).unwrap();
    assert!(kv.contains(&format!("params_after={}", report.params_after())));
    let pruned = read_archive(&small).unwrap();
    assert_eq!(pruned.meta.threshold, Some(ThresholdPolicy::default()));
    assert_eq!(pruned.net.core_param_count(), report.params_after());

    let mut csv = Vec::new();
    let pred = cmd_predict(&small, &PredictInput::Index(0), None, &mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert_eq!(csv.lines().count(), 3 + 4);
    assert!((pred.mean.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let input = dir.path().join("x.txt");
    std::fs::write(&input, "4.5, 0.1\n").unwrap();
    let pred = cmd_predict(
        &trained.archive_path,
        &PredictInput::File(input.clone()),
        None,
        &mut Vec::new(),
    )
    .unwrap();
    assert!(pred.mean[1] > 0.9);
    std::fs::write(&input, "1 2 3").unwrap();
    let err = cmd_predict(
        &trained.archive_path,
        &PredictInput::File(input),
        None,
        &mut Vec::new(),
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = cmd_predict(
        &trained.archive_path,
        &PredictInput::Index(10_000),
        None,
        &mut Vec::new(),
    )
    .unwrap_err();
    assert!(matches!(err, CliError::Usage(_)));

    let mut text = Vec::new();
    cmd_inspect(&small, &mut text).unwrap();
    let text = String::from_utf8(text).unwrap();
    assert!(text.contains("pruned at tau_rel=0.01"));
    assert!(text.contains("mean lambda 1"));
}

#[test]
fn map_only_training_keeps_one_particle() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(&dir.path().join("map"));
    cfg.trainer = "map".into();
    cfg.map.lambda_update = "maximize".into();
    let trained = cmd_train(&cfg, &mut Vec::new()).unwrap();
    assert_eq!(trained.model.particles.len(), 1);
    assert_eq!(trained.model.meta.trainer, "map");
    assert_eq!(trained.model.meta.iterations, 400);
}

fn ttbnn(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ttbnn"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ttb");
    let out = ttbnn(&["inspect", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));

    let garbage = dir.path().join("garbage.ttb");
    std::fs::write(&garbage, b"not an archive at all").unwrap();
    let out = ttbnn(&["evaluate", garbage.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("archive"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "trainer = \"mcmc\"\n[map]\nstep_size = -1.0\n").unwrap();
    let out = ttbnn(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("trainer") && err.contains("map.step_size"));

    let out = ttbnn(&[
        "compress",
        garbage.to_str().unwrap(),
        "--out",
        "x",
        "--tau-rel",
        "-1",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = ttbnn(&["--threads", "0", "inspect", garbage.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("hot.toml");
    let text = TOY
        .replace("step_size = 0.01", "step_size = 1e6\noptimizer = \"sgd\"")
        .replace("checkpoint_every = 50", "checkpoint_every = 1");
    std::fs::write(&cfg_path, text).unwrap();
    let out_dir = dir.path().join("hot");
    let out = ttbnn(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(!out_dir.join("model.ttb").exists());
}
