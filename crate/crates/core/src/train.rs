//! SGD, the warm-up cosine schedule, contrastive pretraining and
//! segmentation finetuning.
//!
//! Randomness is keyed by `(seed, epoch, instance, view)` rather than drawn
//! from a shared generator, so batch assembly can run in parallel and the
//! result does not depend on thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::Tile;
use crate::autodiff::{BnMode, Graph};
use crate::config::{self, ExperimentConfig, Preset};
use crate::container;
use crate::data::{self, Dataset, PatchGrid, PatchSet, SceneBundle};
use crate::encoders::{self, Binder, EncoderSpec, ModelWeights};
use crate::error::{CmcError, Result};
use crate::eval::{self, MetricsReport};
use crate::modality::Modality;
use crate::par;
use crate::rng;
use crate::tensor::Tensor;

const ORDER_STREAM: u64 = 0x0DE5;
const SUBSET_STREAM: u64 = 0x5B5E;
const PRETRAIN_AUG: u64 = 0xA001;
const FINETUNE_AUG: u64 = 0xA002;
const PRETRAIN_INIT: u64 = 0x1417;
const FINETUNE_INIT: u64 = 0x1418;

/// Linear warm-up to `base` over `warmup` epochs, then half-cosine decay.
pub fn lr_schedule(epoch: usize, base: f64, warmup: usize, total: usize) -> Result<f64> {
    if warmup >= total {
        return Err(CmcError::Config(format!("warmup {warmup} must be below total epochs {total}")));
    }
    if epoch >= total {
        return Err(CmcError::Config(format!("epoch {epoch} is past the schedule end {total}")));
    }
    if epoch < warmup {
        // ratio first, so the last warm-up epoch lands on `base` exactly
        return Ok(base * ((epoch + 1) as f64 / warmup as f64));
    }
    let progress = (epoch - warmup) as f64 / (total - warmup) as f64;
    Ok(0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// `w ← w − lr·(g + wd·w)`, with decay skipped for biases and batchnorm
/// affine parameters.
pub fn sgd_step(
    weights: &mut ModelWeights,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads {
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(CmcError::Divergence(format!(
                "gradient of {name} is {} at element {i}",
                g.data()[i]
            )));
        }
    }
    for name in weights.params.keys().filter(|k| encoders::is_trainable(k)) {
        if !grads.contains_key(name) {
            return Err(CmcError::Graph(format!("no gradient for {name}")));
        }
    }
    for (name, g) in grads {
        let w = weights
            .params
            .get_mut(name)
            .ok_or_else(|| CmcError::Graph(format!("gradient for unknown parameter {name}")))?;
        if w.shape() != g.shape() {
            return Err(CmcError::Dimension(format!(
                "{name}: gradient {:?} vs weight {:?}",
                g.shape(),
                w.shape()
            )));
        }
        let wd = if encoders::is_decayed(name) { weight_decay } else { 0.0 };
        for (wi, gi) in w.data_mut().iter_mut().zip(g.data()) {
            *wi -= lr * (gi + wd * *wi);
        }
    }
    weights.step += 1;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: String,
    pub loss: Option<f64>,
    pub acc: Option<f64>,
    pub iou: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub weights: ModelWeights,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub seed: u64,
    pub history: Vec<HistoryRow>,
}

impl TrainState {
    fn push(&mut self, row: HistoryRow) {
        self.history.push(row);
    }

    /// Mean training loss per epoch, in epoch order.
    pub fn train_losses(&self) -> Vec<f64> {
        self.history
            .iter()
            .filter(|r| r.split == "train")
            .filter_map(|r| r.loss)
            .collect()
    }

    /// Validation IoU per epoch, undefined values counted as 0.
    pub fn val_ious(&self) -> Vec<f64> {
        self.history
            .iter()
            .filter(|r| r.split == "val")
            .map(|r| r.iou.unwrap_or(0.0))
            .collect()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("epoch,split,loss,acc,iou,lr\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.epoch, r.split, opt(r.loss), opt(r.acc), opt(r.iou), r.lr);
    }
    s
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    std::fs::write(path, history_csv(rows))?;
    Ok(())
}

/// JSON sidecar stored next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub spec: EncoderSpec,
    pub seed: u64,
    pub step: u64,
    pub epoch: usize,
    pub preset: Option<Preset>,
    pub config_hash: String,
    pub content_hash: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint(path: &Path, weights: &ModelWeights, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    container::save(path, &weights.to_entries())?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelWeights, CheckpointMeta)> {
    let entries = container::load(path).map_err(|e| match e {
        CmcError::Io(io) => CmcError::Data(format!("{}: {io}", path.display())),
        other => other,
    })?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side)
        .map_err(|e| CmcError::Data(format!("{}: {e}", side.display())))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| CmcError::Data(format!("{}: {e}", side.display())))?;
    let weights = ModelWeights::from_entries(entries, meta.spec.fingerprint(), meta.step);
    let inventory = match meta.kind.as_str() {
        "pretrain" => meta.spec.pretrain_inventory(),
        "segmentation" => meta.spec.segmentation_inventory(),
        k => return Err(CmcError::Data(format!("unknown checkpoint kind {k:?}"))),
    };
    weights.check_inventory(&inventory)?;
    Ok((weights, meta))
}

fn grid_for(config: &ExperimentConfig) -> Result<PatchGrid> {
    data::make_grid(config.patch.extent, config.patch.patch, config.patch.stride)
}

fn patches_of(config: &ExperimentConfig, scenes: &[&SceneBundle]) -> Result<Vec<PatchSet>> {
    let grid = grid_for(config)?;
    for s in scenes {
        if s.extent() != grid.extent {
            return Err(CmcError::Data(format!(
                "scene {} is {:?}, config expects extent {}",
                s.id,
                s.extent(),
                config.patch.extent
            )));
        }
    }
    let per_scene = par::try_map_indexed(scenes.len(), |i| data::extract(scenes[i], &grid, config.patch.resize))?;
    Ok(per_scene.into_iter().flatten().collect())
}

fn shuffled(n: usize, seed: u64, labels: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, labels));
    order
}

/// Contrastive pretraining of one branch per preset modality on the train
/// split. Returns final weights and a per-epoch loss history.
pub fn pretrain(config: &ExperimentConfig, preset: Preset, dataset: &Dataset, seed: u64) -> Result<TrainState> {
    config.validate()?;
    let patches = train_patches(config, dataset)?;
    pretrain_on(config, preset, &patches, seed, &mut |_| Ok(()))
}

/// [`pretrain`] on an explicit patch pool; `on_epoch` sees the state after
/// every epoch (used for periodic checkpoints).
pub fn pretrain_on(
    config: &ExperimentConfig,
    preset: Preset,
    patches: &[PatchSet],
    seed: u64,
    on_epoch: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    let p = &config.pretrain;
    let b = p.batch;
    if b < 2 {
        return Err(CmcError::InsufficientNegatives(b));
    }
    if patches.len() < b {
        return Err(CmcError::Data(format!(
            "{} patches cannot fill a pretraining batch of {b}",
            patches.len()
        )));
    }
    let spec = config.encoder_for(preset);
    let modalities = preset.modalities();
    let n = preset.n();
    let views = preset.views();
    let chain = p.augment.clone().with_seed(seed ^ PRETRAIN_AUG);
    let mut state = TrainState {
        weights: encoders::init_weights(&spec, seed ^ PRETRAIN_INIT)?,
        epoch: 0,
        step: 0,
        lr: 0.0,
        seed,
        history: Vec::new(),
    };
    let steps = patches.len() / b;
    for epoch in 0..p.epochs {
        let lr = lr_schedule(epoch, p.base_lr, p.warmup, p.epochs)?;
        state.lr = lr;
        let order = shuffled(patches.len(), seed, &[ORDER_STREAM, 0, epoch as u64]);
        let mut total = 0.0;
        for step in 0..steps {
            let batch = &order[step * b..(step + 1) * b];
            // draw j of instance t transforms every modality of the patch alike
            let sets = par::try_map_indexed(b * n, |k| {
                let (t, j) = (k / n, k % n);
                let src = &patches[batch[t]];
                let set: Vec<Tile> = modalities
                    .iter()
                    .map(|&m| {
                        if m.is_mask() {
                            Tile::mask(src.raster(m).clone())
                        } else {
                            Tile::image(src.raster(m).clone())
                        }
                    })
                    .collect();
                chain.apply_keyed(&set, &[epoch as u64, batch[t] as u64, j as u64])
            })?;
            // laid out (instance, view) with view = modality·n + draw
            let tiles: Vec<Tensor> = (0..b * views)
                .map(|k| {
                    let (t, v) = (k / views, k % views);
                    sets[t * n + v % n][v / n].pixels.clone()
                })
                .collect();
            let loss = contrastive_step(config, &mut state.weights, &modalities, &tiles, b, n, lr)?;
            total += loss;
            state.step += 1;
        }
        state.epoch = epoch + 1;
        state.push(HistoryRow {
            epoch,
            split: "train".into(),
            loss: Some(total / steps as f64),
            acc: None,
            iou: None,
            lr,
        });
        on_epoch(&state)?;
    }
    state.weights.narrow_to_storage();
    Ok(state)
}

/// Patches of the train split, as used for pretraining.
pub fn train_patches(config: &ExperimentConfig, dataset: &Dataset) -> Result<Vec<PatchSet>> {
    let split = dataset.split()?;
    patches_of(config, &dataset.scenes_for(&split.train)?)
}

/// One SGD step on the full-graph loss. `tiles` is laid out `(instance, view)`
/// with views grouped by modality.
fn contrastive_step(
    config: &ExperimentConfig,
    weights: &mut ModelWeights,
    modalities: &[Modality],
    tiles: &[Tensor],
    b: usize,
    n: usize,
    lr: f64,
) -> Result<f64> {
    let views = modalities.len() * n;
    let (loss, grads, bn) = {
        let mut g = Graph::new();
        let mut binder = Binder::new(weights);
        let mut parts = Vec::with_capacity(modalities.len());
        for (mi, &m) in modalities.iter().enumerate() {
            let group: Vec<&Tensor> = (0..b)
                .flat_map(|t| (0..n).map(move |j| t * views + mi * n + j))
                .map(|k| &tiles[k])
                .collect();
            let x = g.constant(Tensor::stack(&group)?)?;
            let h = encoders::features_var(&mut g, &mut binder, m, x, BnMode::Train)?;
            parts.push(encoders::project_var(&mut g, &mut binder, m, h, BnMode::Train)?);
        }
        let z = g.concat(&parts)?;
        let d = g.shape(z)[1];
        // concat rows are (modality, instance, draw); the loss wants (instance, view)
        let mut index = Vec::with_capacity(b * views * d);
        for t in 0..b {
            for v in 0..views {
                let row = (v / n) * b * n + t * n + v % n;
                index.extend((0..d).map(|k| row * d + k));
            }
        }
        let z = g.gather(z, index, &[b * views, d])?;
        let l = crate::loss::fullgraph_loss_var(&mut g, z, b, views, config.temperature, config.loss_reduction)?;
        g.backward(l)?;
        let loss = g.value(l).item();
        (loss, binder.grads(&g), binder.take_bn_updates())
    };
    if !loss.is_finite() {
        return Err(CmcError::Divergence(format!("pretraining loss is {loss}")));
    }
    sgd_step(weights, &grads, lr, config.pretrain.weight_decay)?;
    encoders::apply_bn_updates(weights, bn);
    Ok(loss)
}

/// Train scene ids used at `fraction`: a seeded permutation truncated to
/// `⌈fraction·n⌉`, so smaller fractions are subsets of larger ones.
pub fn train_subset(train: &[String], fraction: f64, seed: u64) -> Result<Vec<String>> {
    config::check_fraction(fraction)?;
    let k = ((fraction * train.len() as f64) - 1e-9).ceil() as usize;
    if k == 0 {
        return Err(CmcError::Data("training subset is empty".into()));
    }
    let order = shuffled(train.len(), seed, &[SUBSET_STREAM]);
    Ok(order[..k].iter().map(|&i| train[i].clone()).collect())
}

/// Finetuning options beyond the config.
#[derive(Clone, Copy, Debug, Default)]
pub struct FinetuneOptions<'a> {
    /// Pretrained model and the branch whose encoder initialises the SAR
    /// encoder; `None` is random initialisation.
    pub pretrained: Option<(&'a ModelWeights, Modality)>,
    pub fraction: Option<f64>,
    /// Overrides the configured epoch count.
    pub epochs: Option<usize>,
    /// Evaluate on the validation split after every epoch.
    pub track_val: bool,
}

/// Trains the SAR segmentation model with per-pixel cross-entropy on
/// `⌈fraction·n_train⌉` train scenes.
pub fn finetune(
    config: &ExperimentConfig,
    dataset: &Dataset,
    seed: u64,
    options: FinetuneOptions,
) -> Result<TrainState> {
    config.validate()?;
    let f = &config.finetune;
    let epochs = options.epochs.unwrap_or(f.epochs);
    if f.warmup >= epochs {
        return Err(CmcError::Config(format!("finetune warmup {} must be below epochs {epochs}", f.warmup)));
    }
    let fraction = options.fraction.unwrap_or(config.data_fraction);
    let split = dataset.split()?;
    let subset = train_subset(&split.train, fraction, seed)?;
    let patches = patches_of(config, &dataset.scenes_for(&subset)?)?;
    let val = dataset.scenes_for(&split.val)?;
    let grid = grid_for(config)?;

    let spec = config.encoder_for(Preset::Sar);
    let mut weights = encoders::init_segmentation(&spec, seed ^ FINETUNE_INIT)?;
    if let Some((pre, m)) = options.pretrained {
        weights = encoders::transplant_encoder(pre, m, &weights)?;
    }
    let mut state = TrainState {
        weights,
        epoch: 0,
        step: 0,
        lr: 0.0,
        seed,
        history: Vec::new(),
    };
    let chain = f.augment.clone().with_seed(seed ^ FINETUNE_AUG);
    let b = f.batch;
    for epoch in 0..epochs {
        let lr = lr_schedule(epoch, f.base_lr, f.warmup, epochs)?;
        state.lr = lr;
        let order = shuffled(patches.len(), seed, &[ORDER_STREAM, 1, epoch as u64]);
        let mut total = 0.0;
        let mut count = 0;
        for batch in order.chunks(b) {
            let pairs = par::try_map_indexed(batch.len(), |k| {
                let p = &patches[batch[k]];
                let key = [epoch as u64, batch[k] as u64];
                let out = chain.apply_keyed(&[Tile::image(p.sar.clone()), Tile::mask(p.gt.clone())], &key)?;
                Ok::<_, CmcError>((out[0].pixels.clone(), out[1].pixels.clone()))
            })?;
            let loss = segmentation_step(config, &mut state.weights, &pairs, lr)?;
            total += loss * batch.len() as f64;
            count += batch.len();
            state.step += 1;
        }
        state.epoch = epoch + 1;
        state.push(HistoryRow {
            epoch,
            split: "train".into(),
            loss: Some(total / count as f64),
            acc: None,
            iou: None,
            lr,
        });
        if options.track_val {
            let r = eval::evaluate_scenes(&state.weights, &val, &grid, config.patch.resize)?;
            state.push(HistoryRow {
                epoch,
                split: "val".into(),
                loss: Some(r.loss),
                acc: Some(r.accuracy),
                iou: r.building_iou,
                lr,
            });
        }
    }
    state.weights.narrow_to_storage();
    Ok(state)
}

fn segmentation_step(
    config: &ExperimentConfig,
    weights: &mut ModelWeights,
    pairs: &[(Tensor, Tensor)],
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = {
        let mut g = Graph::new();
        let mut binder = Binder::new(weights);
        let xs: Vec<&Tensor> = pairs.iter().map(|(x, _)| x).collect();
        let ys: Vec<&Tensor> = pairs.iter().map(|(_, y)| y).collect();
        let x = g.constant(Tensor::stack(&xs)?)?;
        let logits = encoders::segment_logits_var(&mut g, &mut binder, x, BnMode::Train)?;
        let l = g.bce_with_logits(logits, &Tensor::stack(&ys)?)?;
        g.backward(l)?;
        (g.value(l).item(), binder.grads(&g))
    };
    if !loss.is_finite() {
        return Err(CmcError::Divergence(format!("segmentation loss is {loss}")));
    }
    sgd_step(weights, &grads, lr, config.finetune.weight_decay)?;
    Ok(loss)
}

/// Evaluates a segmentation model on the validation split.
pub fn evaluate(config: &ExperimentConfig, dataset: &Dataset, weights: &ModelWeights, split: &str) -> Result<MetricsReport> {
    let s = dataset.split()?;
    let ids = match split {
        "val" => &s.val,
        "train" => &s.train,
        other => return Err(CmcError::Config(format!("unknown split {other:?}"))),
    };
    let grid = grid_for(config)?;
    let mut r = eval::evaluate_scenes(weights, &dataset.scenes_for(ids)?, &grid, config.patch.resize)?;
    r.config_hash = config.hash();
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_boundaries() {
        assert_eq!(lr_schedule(9, 0.1, 10, 500).unwrap(), 0.1);
        assert!((lr_schedule(4, 0.1, 10, 500).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(lr_schedule(0, 0.1, 0, 10).unwrap(), 0.1);
        assert!(lr_schedule(0, 0.1, 10, 10).is_err());
        assert!(lr_schedule(10, 0.1, 1, 10).is_err());
    }

    #[test]
    fn sgd_arithmetic() {
        let mut w = ModelWeights::from_entries(vec![("enc.sar.conv0.w".into(), Tensor::scalar(1.0))], String::new(), 0);
        let g: BTreeMap<_, _> = [("enc.sar.conv0.w".to_string(), Tensor::scalar(0.0))].into();
        sgd_step(&mut w, &g, 1.0, 0.1).unwrap();
        assert!((w.params["enc.sar.conv0.w"].item() - 0.9).abs() < 1e-15);
        let bad: BTreeMap<_, _> = [("enc.sar.conv0.w".to_string(), Tensor::scalar(f64::NAN))].into();
        assert!(matches!(sgd_step(&mut w, &bad, 1.0, 0.1), Err(CmcError::Divergence(_))));
    }

    #[test]
    fn bias_is_not_decayed() {
        let mut w = ModelWeights::from_entries(
            vec![("dec.head.b".into(), Tensor::scalar(2.0)), ("proj.sar.bn.gamma".into(), Tensor::scalar(1.5))],
            String::new(),
            0,
        );
        let g: BTreeMap<_, _> = [
            ("dec.head.b".to_string(), Tensor::scalar(0.0)),
            ("proj.sar.bn.gamma".to_string(), Tensor::scalar(0.0)),
        ]
        .into();
        sgd_step(&mut w, &g, 1.0, 0.5).unwrap();
        assert_eq!(w.params["dec.head.b"].item(), 2.0);
        assert_eq!(w.params["proj.sar.bn.gamma"].item(), 1.5);
    }

    #[test]
    fn subsets_are_nested() {
        let ids: Vec<String> = (0..10).map(data::scene_id).collect();
        assert_eq!(train_subset(&ids, 0.2, 4).unwrap().len(), 2);
        assert_eq!(train_subset(&ids, 1.0, 4).unwrap().len(), 10);
        let small = train_subset(&ids, 0.4, 4).unwrap();
        let big = train_subset(&ids, 0.8, 4).unwrap();
        assert!(small.iter().all(|s| big.contains(s)));
        assert!(train_subset(&ids, 0.0, 4).is_err());
    }
}
