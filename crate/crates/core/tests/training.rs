use cmc_core::config::{ExperimentConfig, Preset};
use cmc_core::data::{Dataset, GeneratorParams};
use std::collections::BTreeMap;

use cmc_core::encoders::{self, is_trainable};
use cmc_core::par::{self, ExecMode};
use cmc_core::train::{self, FinetuneOptions};
use cmc_core::{CmcError, Modality, Tensor};

fn small() -> (ExperimentConfig, Dataset) {
    let config = ExperimentConfig::desk()
        .with_overrides(&["pretrain.epochs=12".into(), "finetune.epochs=3".into()])
        .unwrap();
    let ds = Dataset::generate(6, 64, 1, GeneratorParams::default()).unwrap();
    (config, ds)
}

#[test]
fn pretraining_reduces_the_contrastive_loss() {
    let (config, ds) = small();
    for preset in [Preset::Sar, Preset::SarGtEo] {
        let state = train::pretrain(&config, preset, &ds, 0).unwrap();
        let losses = state.train_losses();
        assert_eq!(losses.len(), 12);
        let head: f64 = losses[..3].iter().sum();
        let tail: f64 = losses[9..].iter().sum();
        assert!(tail < head, "{preset}: {losses:?}");
        assert!(state.weights.has_branch(Modality::Gt) == preset.uses_gt());
    }
}

#[test]
fn zero_learning_rate_leaves_weights_untouched() {
    let (config, _) = small();
    let spec = config.encoder_for(Preset::SarGtEo);
    let start = encoders::init_weights(&spec, 8).unwrap();
    let mut w = start.clone();
    let grads: BTreeMap<String, Tensor> = w
        .params
        .iter()
        .filter(|(k, _)| is_trainable(k))
        .map(|(k, t)| (k.clone(), Tensor::from_fn(t.shape(), |i| (i as f64 * 0.7).sin())))
        .collect();
    train::sgd_step(&mut w, &grads, 0.0, 5e-4).unwrap();
    assert_eq!(w.params, start.params);
    assert_eq!(w.step, start.step + 1);
    train::sgd_step(&mut w, &grads, 0.01, 5e-4).unwrap();
    assert_ne!(w.params, start.params);
}

#[test]
fn batch_of_one_has_no_negatives() {
    let (config, ds) = small();
    let config = config.with_overrides(&["pretrain.batch=1".into()]);
    assert!(matches!(config, Err(CmcError::Config(_))));
    assert!(matches!(small().0.with_overrides(&["pretrain.batch=3".into()]), Err(CmcError::Config(_))));
    small().0.with_overrides(&["pretrain.batch=4".into()]).unwrap();
    let (config, _) = small();
    let patches = train::train_patches(&config, &ds).unwrap();
    let mut c = config.clone();
    c.pretrain.batch = 1;
    let err = train::pretrain_on(&c, Preset::Sar, &patches, 0, &mut |_| Ok(())).unwrap_err();
    assert!(matches!(err, CmcError::InsufficientNegatives(_)));
}

#[test]
fn serial_and_parallel_runs_agree_bitwise() {
    let (config, ds) = small();
    let config = config.with_overrides(&["pretrain.epochs=2".into(), "pretrain.warmup=1".into()]).unwrap();
    par::set_mode(ExecMode::Serial);
    let serial = train::pretrain(&config, Preset::SarEo, &ds, 5).unwrap();
    let serial_ft = train::finetune(&config, &ds, 5, FinetuneOptions { pretrained: Some((&serial.weights, Modality::Sar)), ..Default::default() }).unwrap();
    par::set_mode(ExecMode::Parallel);
    let parallel = train::pretrain(&config, Preset::SarEo, &ds, 5).unwrap();
    let parallel_ft = train::finetune(&config, &ds, 5, FinetuneOptions { pretrained: Some((&parallel.weights, Modality::Sar)), ..Default::default() }).unwrap();
    assert_eq!(serial.weights.content_hash(), parallel.weights.content_hash());
    assert_eq!(serial_ft.weights.content_hash(), parallel_ft.weights.content_hash());
    assert_eq!(serial.history, parallel.history);
}

#[test]
fn finetune_tracks_validation_and_checkpoints_roundtrip() {
    let (config, ds) = small();
    let state = train::finetune(&config, &ds, 2, FinetuneOptions { track_val: true, ..Default::default() }).unwrap();
    assert_eq!(state.val_ious().len(), 3);
    assert!(state.val_ious().iter().all(|v| (0.0..=1.0).contains(v)));
    let csv = train::history_csv(&state.history);
    assert!(csv.starts_with("epoch,split,loss,acc,iou,lr\n"));
    assert_eq!(csv.lines().count(), 1 + 6);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.cmct");
    let meta = train::CheckpointMeta {
        kind: "segmentation".into(),
        spec: config.encoder_for(Preset::Sar),
        seed: 2,
        step: state.step,
        epoch: state.epoch,
        preset: None,
        config_hash: config.hash(),
        content_hash: state.weights.content_hash(),
    };
    train::save_checkpoint(&path, &state.weights, &meta).unwrap();
    let (back, back_meta) = train::load_checkpoint(&path).unwrap();
    assert_eq!(back.content_hash(), state.weights.content_hash());
    assert_eq!(back_meta, meta);
    let a = train::evaluate(&config, &ds, &state.weights, "val").unwrap();
    let b = train::evaluate(&config, &ds, &back, "val").unwrap();
    assert_eq!(a, b);
}
