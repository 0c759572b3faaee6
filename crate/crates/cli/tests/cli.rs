//! End-to-end tests of the `fineformer` binary: exit codes, file outputs,
//! determinism of reruns, and the documented failure diagnostics.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn fineformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fineformer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        stdout(out),
        stderr(out)
    );
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        stdout(out),
        stderr(out)
    );
}

/// A spec small enough that gen-data + train + eval finish in well under a
/// second.
const TINY: &str = "\
[data]
n_attributes = 4
num_classes = 4
t_prime = 4
c_prime = 8
train_per_class = 8
test_per_class = 4
seed = 5

[model]
h = 16
heads = 2
vision_layers = 1
cross_layers = 1

[train]
epochs = 2
batch_size = 8
";

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.ini");
    fs::write(&path, body).unwrap();
    path.display().to_string()
}

#[test]
fn pipeline_runs_end_to_end_and_reuses_the_resolved_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    let out_s = out.display().to_string();

    assert_ok(&fineformer(&["gen-data", "--config", &cfg, "--out", &out_s]));
    assert!(out.join("dataset.ffds").is_file());
    assert!(out.join("config.resolved.ini").is_file());

    assert_ok(&fineformer(&["train", "--config", &cfg, "--out", &out_s]));
    assert!(out.join("checkpoint_final.ffck").is_file());
    assert!(out.join("checkpoint_best.ffck").is_file());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,lr,train_loss,top1,mean_class_acc"));
    assert_eq!(metrics.lines().count(), 3, "header + one line per epoch");

    // The resolved config is a complete, valid input in its own right.
    let resolved = out.join("config.resolved.ini").display().to_string();
    let eval = fineformer(&["eval", "--config", &resolved, "--out", &out_s]);
    assert_ok(&eval);
    assert!(stdout(&eval).contains("top1:"));
    assert!(out.join("eval_report.csv").is_file());
}

#[test]
fn attn_report_writes_matrix_and_summary() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("cross");
    let out_s = out.display().to_string();
    let kind = "model.kind=cross";

    assert_ok(&fineformer(&["gen-data", "--config", &cfg, "--set", kind, "--out", &out_s]));
    assert_ok(&fineformer(&["train", "--config", &cfg, "--set", kind, "--out", &out_s]));
    let report = fineformer(&["attn-report", "--config", &cfg, "--set", kind, "--out", &out_s]);
    assert_ok(&report);
    assert!(stdout(&report).contains("attention match ratio"));

    let matrix = fs::read_to_string(out.join("attn_matrix.csv")).unwrap();
    assert_eq!(matrix.lines().count(), 5, "header + one row per text token");
    assert!(matrix.starts_with("token,t0,t1,t2,t3"));
    let summary = fs::read_to_string(out.join("attn_summary.csv")).unwrap();
    assert!(summary.starts_with("attribute,examples,mean_ratio,matched"));
    assert_eq!(summary.lines().count(), 5);

    // Vision models have no text tokens to report on.
    let wrong = fineformer(&["attn-report", "--config", &cfg, "--out", &out_s]);
    assert_exit(&wrong, 1);
    assert!(stderr(&wrong).contains("model.kind = cross"));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let data = tmp.path().join("data");
    let data_s = data.display().to_string();
    assert_ok(&fineformer(&["gen-data", "--config", &cfg, "--out", &data_s]));
    let dataset = format!("paths.dataset={}", data.join("dataset.ffds").display());

    let mut artifacts: Vec<Vec<u8>> = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let out_s = out.display().to_string();
        assert_ok(&fineformer(&["train", "--config", &cfg, "--set", &dataset, "--out", &out_s]));
        artifacts.push(fs::read(out.join("checkpoint_final.ffck")).unwrap());
        artifacts.push(fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(artifacts[0], artifacts[2], "checkpoints differ across reruns");
    assert_eq!(artifacts[1], artifacts[3], "metrics differ across reruns");

    // Regenerating the dataset in place must also be byte-stable.
    let first = fs::read(data.join("dataset.ffds")).unwrap();
    assert_ok(&fineformer(&["gen-data", "--config", &cfg, "--out", &data_s]));
    assert_eq!(first, fs::read(data.join("dataset.ffds")).unwrap());
}

#[test]
fn unknown_config_key_exits_1() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "[train]\nlearning_rate = 0.1\n");
    let out = fineformer(&["train", "--config", &cfg, "--out", "/tmp/nope"]);
    assert_exit(&out, 1);
    assert!(stderr(&out).contains("unknown config key train.learning_rate"));
}

#[test]
fn usage_errors_exit_1_with_one_line() {
    let out = fineformer(&["trane", "--config", "x.ini"]);
    assert_exit(&out, 1);
    let err = stderr(&out);
    assert_eq!(err.trim().lines().count(), 1, "stderr: {err}");

    let missing = fineformer(&["train"]);
    assert_exit(&missing, 1);

    let absent = fineformer(&["train", "--config", "/nonexistent.ini", "--out", "/tmp/nope"]);
    assert_exit(&absent, 1);
    assert!(stderr(&absent).contains("cannot read config"));
}

#[test]
fn gradcheck_passes_and_writes_report() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("gc");
    let run = fineformer(&["gradcheck", "--config", &cfg, "--out", &out.display().to_string()]);
    assert_ok(&run);
    let text = fs::read_to_string(out.join("gradcheck_report.txt")).unwrap();
    assert!(text.contains("within tolerance"));
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn non_finite_loss_exits_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("blowup");
    let out_s = out.display().to_string();
    assert_ok(&fineformer(&["gen-data", "--config", &cfg, "--out", &out_s]));
    let run = fineformer(&[
        "train",
        "--config",
        &cfg,
        "--set",
        "train.lr=1e18",
        "--set",
        "train.epochs=6",
        "--out",
        &out_s,
    ]);
    // Depending on where the overflow first lands, the guard fires either on
    // the loss value or inside an op; both are code-2 numerical failures.
    assert_exit(&run, 2);
    assert!(stderr(&run).contains("non-finite"), "{}", stderr(&run));
}

#[test]
fn dataset_and_config_must_agree() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    let out_s = out.display().to_string();
    assert_ok(&fineformer(&["gen-data", "--config", &cfg, "--out", &out_s]));
    let run = fineformer(&["train", "--config", &cfg, "--set", "data.seed=77", "--out", &out_s]);
    assert_exit(&run, 1);
    assert!(stderr(&run).contains("data.seed"), "{}", stderr(&run));
}

#[test]
fn untrained_model_scores_at_chance_on_the_default_spec() {
    let tmp = TempDir::new().unwrap();
    // Default spec: 16 balanced classes, 800 test examples.
    let cfg = write_config(tmp.path(), "[train]\nepochs = 0\n");
    let out = tmp.path().join("run");
    let out_s = out.display().to_string();
    assert_ok(&fineformer(&["gen-data", "--config", &cfg, "--out", &out_s]));
    assert_ok(&fineformer(&["train", "--config", &cfg, "--out", &out_s]));
    let eval = fineformer(&["eval", "--config", &cfg, "--out", &out_s]);
    assert_ok(&eval);
    let text = stdout(&eval);
    let top1_line = text.lines().find(|l| l.starts_with("top1:")).unwrap();
    let top1: f64 = top1_line.trim_start_matches("top1:").trim().parse().unwrap();
    let chance = 100.0 / 16.0;
    assert!(
        (top1 - chance).abs() <= 5.0,
        "untrained top1 {top1} strays from chance {chance}"
    );
}

#[test]
fn eval_does_not_mutate_the_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    let out_s = out.display().to_string();
    assert_ok(&fineformer(&["gen-data", "--config", &cfg, "--out", &out_s]));
    assert_ok(&fineformer(&["train", "--config", &cfg, "--out", &out_s]));
    let before = fs::read(out.join("checkpoint_final.ffck")).unwrap();
    assert_ok(&fineformer(&["eval", "--config", &cfg, "--out", &out_s]));
    assert_eq!(before, fs::read(out.join("checkpoint_final.ffck")).unwrap());
}

#[test]
fn every_shipped_preset_parses_and_generates_data() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut presets: Vec<_> = fs::read_dir(&configs)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "ini"))
        .collect();
    presets.sort();
    assert!(!presets.is_empty(), "no presets found in {}", configs.display());
    for preset in presets {
        let tmp = TempDir::new().unwrap();
        let out_s = tmp.path().join("run").display().to_string();
        let cfg = preset.display().to_string();
        let run = fineformer(&["gen-data", "--config", &cfg, "--out", &out_s]);
        assert!(
            run.status.success(),
            "preset {} rejected: {}",
            preset.display(),
            stderr(&run)
        );
    }
}
