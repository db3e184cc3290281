use std::path::Path;
use std::process::{Command, Output};

fn cmc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmc"))
        .args(args)
        .current_dir(dir)
        .env("CMC_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = cmc(args, dir);
    assert!(out.status.success(), "cmc {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], dir: &Path) -> i32 {
    cmc(args, dir).status.code().unwrap()
}

const FAST: [&str; 8] = [
    "--set",
    "pretrain.epochs=3",
    "--set",
    "pretrain.warmup=1",
    "--set",
    "finetune.epochs=2",
    "--set",
    "pretrain.checkpoint_every=1",
];

#[test]
fn generate_is_reproducible_and_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&["generate", "--scenes", "10", "--extent", "64", "--seed", "3", "--out", "a"], dir);
    ok(&["generate", "--scenes", "10", "--extent", "64", "--seed", "3", "--out", "b"], dir);
    let scenes: Vec<_> = std::fs::read_dir(dir.join("a/scenes")).unwrap().collect();
    assert_eq!(scenes.len(), 10);
    for name in ["manifest.json", "scenes/scene_0000.cmct", "scenes/scene_0009.cmct"] {
        assert_eq!(std::fs::read(dir.join("a").join(name)).unwrap(), std::fs::read(dir.join("b").join(name)).unwrap());
    }
    assert_eq!(code(&["generate", "--scenes", "10", "--seed", "3", "--out", "a"], dir), 3);
    ok(&["generate", "--scenes", "4", "--seed", "3", "--out", "a", "--force"], dir);
    assert_eq!(std::fs::read_dir(dir.join("a/scenes")).unwrap().count(), 4);
    assert_eq!(code(&["generate", "--scenes", "1", "--out", "c"], dir), 2);
}

#[test]
fn pretrain_finetune_evaluate_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&["generate", "--scenes", "5", "--seed", "1", "--out", "data"], dir);

    let mut args = vec!["pretrain", "--data", "data", "--out", "pre", "--set", "preset=SAR+EO"];
    args.extend(FAST);
    ok(&args, dir);
    for f in ["pretrain.cmct", "pretrain.json", "loss.csv", "config.json", "pretrain_epoch0001.cmct", "pretrain_epoch0002.cmct"] {
        assert!(dir.join("pre").join(f).is_file(), "missing {f}");
    }
    let loss = std::fs::read_to_string(dir.join("pre/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);
    assert!(loss.starts_with("epoch,split,loss,acc,iou,lr"));

    let mut args = vec!["finetune", "--data", "data", "--out", "ft", "--weights", "pre/pretrain.cmct", "--fraction", "0.5"];
    args.extend(FAST);
    let csv = ok(&args, dir);
    assert!(csv.contains(",SAR+EO,"), "{csv}");
    for f in ["model.cmct", "model.json", "report.csv", "report.json", "loss.csv"] {
        assert!(dir.join("ft").join(f).is_file(), "missing {f}");
    }
    assert!(std::fs::read_to_string(dir.join("ft/loss.csv")).unwrap().contains(",val,"));

    let report = ok(&["evaluate", "--data", "data", "--out", "ev", "--weights", "ft/model.cmct", "--split", "val"], dir);
    assert_eq!(report.lines().count(), 2);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("ev/report.json")).unwrap()).unwrap();
    let metrics = &json["points"][0]["metrics"];
    assert_eq!(metrics["threshold"], 0.5);
    assert!(metrics["accuracy"].as_f64().unwrap() <= 1.0);

    // a pretraining checkpoint cannot be evaluated as a segmenter
    assert_ne!(code(&["evaluate", "--data", "data", "--out", "ev2", "--weights", "pre/pretrain.cmct"], dir), 0);
}

#[test]
fn exit_codes_follow_error_categories() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&["verify", "--set", "temperature=-1"], dir), 2);
    assert_eq!(code(&["verify", "--set", "no.such.key=1"], dir), 2);
    assert_eq!(code(&["pretrain", "--data", "missing", "--out", "o"], dir), 3);
    std::fs::write(dir.join("bad.json"), "{ not json").unwrap();
    assert_eq!(code(&["verify", "--config", "bad.json"], dir), 2);
    ok(&["generate", "--scenes", "4", "--seed", "2", "--out", "data"], dir);
    assert_eq!(code(&["pretrain", "--data", "data", "--out", "o", "--set", "pretrain.base_lr=1e200", "--set", "pretrain.epochs=3", "--set", "pretrain.warmup=1"], dir), 4);
}

#[test]
fn verify_prints_a_passing_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["verify", "--rounds", "1"], tmp.path());
    assert!(out.contains("loss_oracle"));
    assert!(out.contains("grad:fullgraph_loss"));
    assert!(out.contains("all "));
    assert!(!out.contains("FAIL"));
}
