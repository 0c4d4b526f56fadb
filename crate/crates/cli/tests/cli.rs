use std::path::Path;
use std::process::{Command, Output};

fn dlvm(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_dlvm")).args(args).current_dir(cwd).output().unwrap();
    assert!(out.status.success(), "{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

const FAST: &str = r#"{"sim": {"mi": {"latent_samples": 64, "outcome_samples": 32, "update_iterations": 50}}}"#;

#[test]
fn simulate_then_train() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dlvm(&["simulate-population", "--participants", "6", "--seed", "3", "--out", "trials.csv", "--truth", "truth.csv"], d);
    let trials = lines(&d.join("trials.csv"));
    assert_eq!(trials[0], "participant_id,task_id,stimulus,outcome");
    assert_eq!(trials.len(), 1 + 6 * 292);
    assert_eq!(lines(&d.join("truth.csv")).len(), 7);

    dlvm(&["train", "--data", "trials.csv", "--iterations", "150", "--lambda", "0.5", "--latent-dim", "2", "--out", "m"], d);
    let loss = lines(&d.join("m/loss.csv"));
    assert_eq!(loss.len(), 151);
    let ck: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("m/model.json")).unwrap()).unwrap();
    assert_eq!(ck["d"], 2);
    assert_eq!(ck["training"]["config"]["lambda"], 0.5);
    let latents: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("m/latents.json")).unwrap()).unwrap();
    assert_eq!(latents.as_object().unwrap().len(), 6);
}

#[test]
fn session_and_evaluation_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("fast.json"), FAST).unwrap();

    dlvm(&["run-session", "--config", "fast.json", "--budget", "30", "--seed", "1", "--out", "s"], d);
    assert_eq!(lines(&d.join("s/session.jsonl")).len(), 30);
    assert_eq!(lines(&d.join("s/estimates.csv")).len(), 1 + 30 - 26 + 1);

    let a = dlvm(&["run-session", "--config", "fast.json", "--budget", "30", "--seed", "1", "--protocol", "random", "--out", "r1"], d);
    let b = dlvm(&["run-session", "--config", "fast.json", "--budget", "30", "--seed", "1", "--protocol", "random", "--out", "r2"], d);
    assert_eq!(a.stdout, b.stdout);

    dlvm(&["evaluate", "--protocol", "tb", "--participants", "3", "--retest", "--out", "e"], d);
    let conv = lines(&d.join("e/convergence.csv"));
    assert_eq!(conv[0], "items,summed_rmse");
    assert_eq!(conv.len(), 1 + 280);
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("e/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["items_per_participant"], 280);
    assert_eq!(metrics["retest"].as_array().unwrap().len(), 8);

    dlvm(&["sweep", "--config", "fast.json", "--lambda", "0.1,1", "--participants", "3", "--budget", "28", "--out", "sweep.csv"], d);
    assert_eq!(lines(&d.join("sweep.csv")).len(), 1 + 4);
}

#[test]
fn bad_input_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dlvm"))
        .args(["run-session", "--protocol", "tb"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_dlvm"))
        .args(["train", "--data", "missing.csv"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
}
