//! Stage-by-stage CLI runs on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fbpose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbpose")).args(args).env_remove("FBPOSE_SEED").output().unwrap()
}

fn ok(args: &[&str]) {
    let o = fbpose(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

const PIPELINE: &str = r#"{
  "scale": { "crop": 16, "conv": 2, "fc": 16, "dropout": 0.1, "synth_latent": 8, "synth_blocks": [[4, 3]] },
  "prior_k": 6,
  "localizer_train": { "epochs": 1, "batch_size": 8, "learning_rate": 0.001, "decay": 0.95, "seed": 11 },
  "predictor_train": { "epochs": 2, "batch_size": 8, "learning_rate": 0.001, "decay": 0.95, "seed": 12 },
  "synth_train": { "epochs": 1, "batch_size": 8, "learning_rate": 0.001, "decay": 0.95, "seed": 13 },
  "synth_stage_epochs": [1, 1],
  "updater_train": { "epochs": 2, "batch_size": 8, "learning_rate": 0.001, "decay": 0.95, "seed": 14 },
  "pose_set": { "copies": 2, "sigma": 0.1, "grow_every": 2, "grow_self": 3, "grow_error": 2, "cap": 8, "per_epoch": 2, "lambda": 0.6 }
}"#;

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn hand_stages_chain_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let (train, test, model, cfg) = (t.join("train"), t.join("test"), t.join("model"), t.join("pipeline.json"));
    fs::write(&cfg, PIPELINE).unwrap();
    ok(&["gen-data", "--n", "24", "--seed", "1", "--out", &s(&train)]);
    ok(&["gen-data", "--n", "4", "--seed", "2", "--out", &s(&test)]);
    ok(&["fit-prior", "--data", &s(&train), "--k", "5", "--out", &s(&t.join("prior.fbw"))]);
    for role in ["localizer", "predictor", "synthesizer", "updater"] {
        ok(&["train", role, "--data", &s(&train), "--config", &s(&cfg), "--out", &s(&model)]);
    }
    for f in ["localizer.fbw", "predictor.fbw", "synthesizer.fbw", "updater.fbw", "pipeline.json", "updater.csv"] {
        assert!(model.join(f).exists(), "{f}");
    }

    let run = t.join("run");
    ok(&["run-loop", "--model", &s(&model), "--data", &s(&test), "--iters", "2", "--out", &s(&run)]);
    let csv = fs::read_to_string(run.join("errors.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 3);

    let eval = t.join("eval");
    ok(&["eval", "--model", &s(&model), "--data", &s(&test), "--iters", "1", "--out", &s(&eval)]);
    assert!(eval.join("reports").join("hand-iter-1.json").exists());
    assert!(eval.join("stamp.json").exists());

    let dump = t.join("dump");
    ok(&["dump-images", "--model", &s(&model), "--data", &s(&test), "--index", "1", "--iters", "1", "--out", &s(&dump)]);
    assert!(dump.join("iter_01_hand_difference.pgm").exists());

    let base = t.join("base");
    ok(&["baseline", "--model", &s(&model), "--data", &s(&test), "--samples", "2", "--pso", "--out", &s(&base)]);
    assert!(base.join("reports").join("baseline-lbfgs.json").exists());
    assert!(base.join("baseline").join("pso").join("samples.csv").exists());
}

#[test]
fn joint_role_needs_a_synthesizer() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--n", "2", "--scene", "hand-object", "--out", &s(&data)]);
    let o = fbpose(&["train", "joint", "--data", &s(&data), "--out", &s(&tmp.path().join("m"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--synthesizer"));
}

#[test]
fn missing_inputs_name_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--n", "2", "--out", &s(&data)]);
    let o = fbpose(&["train", "predictor", "--data", &s(&data), "--out", &s(&tmp.path().join("m"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage localizer"));
    let o = fbpose(&["eval", "--model", &s(&tmp.path().join("none")), "--data", &s(&data)]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage hand-model"));
    let o = fbpose(&["run-loop", "--model", &s(&tmp.path().join("none")), "--data", &s(&tmp.path().join("nodata"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing artifact"));
}

#[test]
fn seed_flag_and_environment_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-data", "--n", "3", "--seed", "9", "--out", &s(&a)]);
    let o = Command::new(env!("CARGO_BIN_EXE_fbpose")).args(["gen-data", "--n", "3", "--out", &s(&b)]).env("FBPOSE_SEED", "9").output().unwrap();
    assert!(o.status.success());
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
}
