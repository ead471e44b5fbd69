use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "batch_size = 16
gradient_steps = 4
critic_hidden = 8
diffusion_hidden = 8
classifier_hidden = 8
actor_hidden = 8
n_cos = 8
time_dim = 4
";

fn udac(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_udac"))
        .args(args)
        .output()
        .expect("spawn udac");
    assert!(
        out.status.success(),
        "udac {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_train_eval_export() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.bin");
    let cfg = dir.path().join("tiny.kv");
    let model = dir.path().join("model");
    fs::write(&cfg, TINY).unwrap();

    udac(&[
        "gen-data",
        "--episodes",
        "6",
        "--mixture",
        "0.4,0.4,0.2",
        "--seed",
        "3",
        "--out",
        p(&data),
    ]);
    assert!(data.exists());

    udac(&[
        "train",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--out",
        p(&model),
        "--lambda",
        "0.5",
        "--distortion",
        "wang:-0.75",
        "--seed",
        "2",
        "--diffusion-steps",
        "3",
        "--guidance-scale",
        "0.2",
    ]);
    let log = fs::read_to_string(model.join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,critic_loss,actor_loss,diffusion_loss,classifier_loss");
    assert_eq!(lines.len(), 5);
    let saved = fs::read_to_string(model.join("config.kv")).unwrap();
    assert!(saved.contains("lambda = 0.5") && saved.contains("diffusion_steps = 3"));

    let report = dir.path().join("report.csv");
    udac(&[
        "eval",
        "--model",
        p(&model),
        "--episodes",
        "3",
        "--seeds",
        "2",
        "--out",
        p(&report),
    ]);
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 4, "{text}");

    let traj = dir.path().join("traj.csv");
    udac(&[
        "export-traj",
        "--model",
        p(&model),
        "--episodes",
        "2",
        "--out",
        p(&traj),
    ]);
    let text = fs::read_to_string(&traj).unwrap();
    assert!(text.starts_with("episode,step,x,y,reward,in_risky\n"));
}

#[test]
fn ablation_writes_one_row_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.bin");
    let cfg = dir.path().join("tiny.kv");
    let out = dir.path().join("ablation.csv");
    fs::write(&cfg, TINY).unwrap();
    udac(&["gen-data", "--episodes", "4", "--out", p(&data)]);
    udac(&[
        "ablate-lambda",
        "--grid",
        "0.01,1.0",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--episodes",
        "2",
        "--seeds",
        "1",
        "--no-guidance",
        "--out",
        p(&out),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().starts_with("0.01,"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin");
    let out = Command::new(env!("CARGO_BIN_EXE_udac"))
        .args(["train", "--data", p(&missing), "--out", p(dir.path())])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("reading dataset"));

    let out = Command::new(env!("CARGO_BIN_EXE_udac"))
        .args(["gen-data", "--mixture", "0.5,0.5", "--out", p(&missing)])
        .output()
        .unwrap();
    assert!(!out.status.success());

    let out = Command::new(env!("CARGO_BIN_EXE_udac"))
        .args([
            "train",
            "--data",
            p(&missing),
            "--out",
            p(dir.path()),
            "--distortion",
            "cvar:2",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
