//! Scene-level segmentation metrics.
//!
//! Predictions are made per patch, merged back to scene resolution as
//! probabilities, and only then thresholded. Split-level figures come from
//! confusion counts summed over scenes.

use serde::{Deserialize, Serialize};

use crate::data::{self, PatchGrid, SceneBundle};
use crate::encoders::{self, ModelWeights};
use crate::error::{CmcError, Result};
use crate::par;
use crate::tensor::Tensor;

pub const THRESHOLD: f64 = 0.5;

/// Pixel is building iff `prob > threshold`.
pub fn binarize(prob: &Tensor, threshold: f64) -> Result<Tensor> {
    if let Some(v) = prob.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(CmcError::Domain(format!("probability {v} outside [0,1]")));
    }
    Ok(crate::raster::binarize_at(prob, threshold))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }

    /// `None` when neither prediction nor truth has a building pixel.
    pub fn iou(&self) -> Option<f64> {
        let union = self.tp + self.fp + self.fn_;
        (union > 0).then(|| self.tp as f64 / union as f64)
    }

    pub fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

pub fn confusion(pred: &Tensor, gt: &Tensor) -> Result<Confusion> {
    if pred.shape() != gt.shape() {
        return Err(CmcError::Dimension(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if (p != 0.0 && p != 1.0) || (g != 0.0 && g != 1.0) {
            return Err(CmcError::Domain("metrics need binary masks".into()));
        }
        match (p == 1.0, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `(accuracy, iou)`; IoU is `None` when the union is empty.
pub fn metrics(pred: &Tensor, gt: &Tensor) -> Result<(f64, Option<f64>)> {
    let c = confusion(pred, gt)?;
    Ok((c.accuracy(), c.iou()))
}

/// Anything that maps SAR patches to building probabilities.
pub trait Predictor: Sync {
    fn predict(&self, tiles: &[&Tensor]) -> Result<Vec<Tensor>>;
}

impl Predictor for ModelWeights {
    fn predict(&self, tiles: &[&Tensor]) -> Result<Vec<Tensor>> {
        encoders::segment_batch(self, tiles)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub id: String,
    /// Mean per-pixel cross-entropy of the merged probabilities.
    pub loss: f64,
    pub accuracy: f64,
    pub building_iou: Option<f64>,
    pub confusion: Confusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub loss: f64,
    pub accuracy: f64,
    /// `None` only when the split has no building pixel in truth or prediction.
    pub building_iou: Option<f64>,
    pub confusion: Confusion,
    pub threshold: f64,
    pub scenes: usize,
    pub per_scene: Vec<SceneMetrics>,
    pub config_hash: String,
    pub epoch: usize,
}

impl MetricsReport {
    /// IoU with an undefined value counted as 0, for ranking.
    pub fn iou_or_zero(&self) -> f64 {
        self.building_iou.unwrap_or(0.0)
    }
}

/// Merged probability map `[1,H,W]` of one scene.
pub fn predict_scene(
    predictor: &dyn Predictor,
    scene: &SceneBundle,
    grid: &PatchGrid,
    resize_to: usize,
) -> Result<Tensor> {
    let patches = data::extract(scene, grid, resize_to)?;
    let tiles: Vec<&Tensor> = patches.iter().map(|p| &p.sar).collect();
    let probs = predictor.predict(&tiles)?;
    let preds: Vec<((usize, usize), Tensor)> = patches.iter().map(|p| p.offset).zip(probs).collect();
    data::merge(&preds, grid)
}

fn cross_entropy(prob: &Tensor, gt: &Tensor) -> f64 {
    const EPS: f64 = 1e-7;
    let total: f64 = prob
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &y)| {
            let p = p.clamp(EPS, 1.0 - EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / prob.numel() as f64
}

/// Runs the patch → merge → threshold pipeline over `scenes`.
pub fn evaluate_scenes(
    predictor: &dyn Predictor,
    scenes: &[&SceneBundle],
    grid: &PatchGrid,
    resize_to: usize,
) -> Result<MetricsReport> {
    if scenes.is_empty() {
        return Err(CmcError::Data("evaluation split is empty".into()));
    }
    let per_scene = par::try_map_indexed(scenes.len(), |i| {
        let s = scenes[i];
        let prob = predict_scene(predictor, s, grid, resize_to)?;
        let c = confusion(&binarize(&prob, THRESHOLD)?, &s.gt_mask)?;
        Ok::<_, CmcError>(SceneMetrics {
            id: s.id.clone(),
            loss: cross_entropy(&prob, &s.gt_mask),
            accuracy: c.accuracy(),
            building_iou: c.iou(),
            confusion: c,
        })
    })?;
    let mut total = Confusion::default();
    let mut loss = 0.0;
    for s in &per_scene {
        total.add(&s.confusion);
        loss += s.loss * s.confusion.total() as f64;
    }
    Ok(MetricsReport {
        loss: loss / total.total().max(1) as f64,
        accuracy: total.accuracy(),
        building_iou: total.iou(),
        confusion: total,
        threshold: THRESHOLD,
        scenes: per_scene.len(),
        per_scene,
        config_hash: String::new(),
        epoch: 0,
    })
}

/// First 1-based epoch whose value reaches `target`.
pub fn epochs_to_reach(curve: &[f64], target: f64) -> Option<usize> {
    curve.iter().position(|&v| v >= target).map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_grid, synth_scene, GeneratorParams};

    struct Constant(f64);

    impl Predictor for Constant {
        fn predict(&self, tiles: &[&Tensor]) -> Result<Vec<Tensor>> {
            Ok(tiles
                .iter()
                .map(|t| Tensor::filled(&[1, t.shape()[1], t.shape()[2]], self.0))
                .collect())
        }
    }

    #[test]
    fn threshold_is_strict() {
        let p = Tensor::new(vec![1, 1, 3], vec![0.5, 0.5000001, 0.0]).unwrap();
        assert_eq!(binarize(&p, 0.5).unwrap().data(), &[0.0, 1.0, 0.0]);
        assert_eq!(binarize(&p, 0.0).unwrap().data(), &[1.0, 1.0, 0.0]);
        let bad = Tensor::new(vec![1, 1, 1], vec![1.5]).unwrap();
        assert!(matches!(binarize(&bad, 0.5), Err(CmcError::Domain(_))));
    }

    #[test]
    fn hand_counted_metrics() {
        let gt = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let pred = Tensor::new(vec![1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let (acc, iou) = metrics(&pred, &gt).unwrap();
        assert_eq!(acc, 0.75);
        assert_eq!(iou, Some(0.5));
        assert_eq!(metrics(&gt, &gt).unwrap(), (1.0, Some(1.0)));
        let empty = Tensor::zeros(&[1, 2, 2]);
        assert_eq!(metrics(&empty, &empty).unwrap(), (1.0, None));
        assert!(metrics(&empty, &Tensor::zeros(&[1, 2, 3])).is_err());
    }

    #[test]
    fn constant_below_threshold_scores_background_fraction() {
        let s = synth_scene(3, "s", 64, &GeneratorParams::default()).unwrap();
        let grid = make_grid(64, 32, 16).unwrap();
        let r = evaluate_scenes(&Constant(0.4), &[&s], &grid, 32).unwrap();
        let bg = s.gt_mask.data().iter().filter(|&&v| v == 0.0).count() as f64 / 4096.0;
        assert!((r.accuracy - bg).abs() < 1e-12);
        assert_eq!(r.building_iou, Some(0.0));
    }

    #[test]
    fn reach_epochs() {
        assert_eq!(epochs_to_reach(&[0.1, 0.3, 0.2, 0.5], 0.3), Some(2));
        assert_eq!(epochs_to_reach(&[0.1], 0.3), None);
    }
}
