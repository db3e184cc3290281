use cmc_core::data::{self, make_grid, GeneratorParams, SceneBundle, SceneMetadata};
use cmc_core::eval::{self, Predictor};
use cmc_core::raster;
use cmc_core::{CmcError, Result, Tensor};
use proptest::prelude::*;

#[test]
fn grid_counts() {
    assert_eq!(make_grid(900, 300, 150).unwrap().len(), 25);
    assert_eq!(make_grid(64, 32, 16).unwrap().len(), 9);
    assert!(make_grid(16, 32, 8).is_err());
}

#[test]
fn constant_map_roundtrips_exactly() {
    for (extent, s, r) in [(64, 32, 16), (900, 300, 150), (50, 20, 7)] {
        let grid = make_grid(extent, s, r).unwrap();
        let map = Tensor::from_fn(&[1, extent, extent], |i| (i % 97) as f64 / 96.0);
        let preds: Vec<_> = grid
            .offsets
            .iter()
            .map(|&(y, x)| ((y, x), raster::crop(&map, y, x, s, s).unwrap()))
            .collect();
        assert_eq!(data::merge(&preds, &grid).unwrap(), map);
    }
}

#[test]
fn missing_patch_is_a_coverage_error() {
    let grid = make_grid(64, 32, 16).unwrap();
    let preds: Vec<_> = grid.offsets[1..].iter().map(|&o| (o, Tensor::zeros(&[1, 32, 32]))).collect();
    assert!(matches!(data::merge(&preds, &grid), Err(CmcError::Coverage(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn merged_values_stay_in_unit_interval(extent in 24usize..80, s in 8usize..24, r in 1usize..24, seed in any::<u64>()) {
        prop_assume!(r <= s && s <= extent);
        let grid = make_grid(extent, s, r).unwrap();
        prop_assert!(grid.coverage().iter().all(|&c| c >= 1));
        let mut x = seed;
        let preds: Vec<_> = grid.offsets.iter().map(|&o| {
            (o, Tensor::from_fn(&[1, s, s], |_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (x >> 11) as f64 / (1u64 << 53) as f64
            }))
        }).collect();
        let merged = data::merge(&preds, &grid).unwrap();
        prop_assert!(merged.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

/// Predicts 0.6 everywhere on tiles whose mean exceeds 0.25, else 0.45.
struct BandDetector;

impl Predictor for BandDetector {
    fn predict(&self, tiles: &[&Tensor]) -> Result<Vec<Tensor>> {
        Ok(tiles
            .iter()
            .map(|t| {
                let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
                let p = if mean > 0.25 { 0.6 } else { 0.45 };
                Tensor::filled(&[1, t.shape()[1], t.shape()[2]], p)
            })
            .collect())
    }
}

#[test]
fn probabilities_are_merged_before_thresholding() {
    // a bright band in columns 0..16 lights up only the patches at x = 0
    let band = |i: usize| if i % 64 < 16 { 1.0 } else { 0.0 };
    let sar = Tensor::from_fn(&[3, 64, 64], band);
    let eo = Tensor::zeros(&[3, 64, 64]);
    let gt = Tensor::from_fn(&[1, 64, 64], |i| if i % 64 < 32 { 1.0 } else { 0.0 });
    let scene = SceneBundle::new("crafted".into(), sar, eo, gt, SceneMetadata { gsd: 0.5, source: "crafted".into() }).unwrap();
    let grid = make_grid(64, 32, 16).unwrap();
    // columns 16..32 average 0.6 and 0.45; voting on thresholded patches would tie
    let report = eval::evaluate_scenes(&BandDetector, &[&scene], &grid, 32).unwrap();
    assert_eq!(report.building_iou, Some(1.0));
    assert_eq!(report.accuracy, 1.0);
}

#[test]
fn oracle_and_constant_predictors() {
    struct Constant(f64);
    impl Predictor for Constant {
        fn predict(&self, tiles: &[&Tensor]) -> Result<Vec<Tensor>> {
            Ok(tiles.iter().map(|t| Tensor::filled(&[1, t.shape()[1], t.shape()[2]], self.0)).collect())
        }
    }
    let scenes: Vec<_> = (0..3)
        .map(|i| data::synth_scene(i, &data::scene_id(i as usize), 64, &GeneratorParams::default()).unwrap())
        .collect();
    let refs: Vec<&SceneBundle> = scenes.iter().collect();
    let grid = make_grid(64, 32, 16).unwrap();
    let report = eval::evaluate_scenes(&Constant(0.4), &refs, &grid, 32).unwrap();
    let background: f64 = scenes.iter().map(|s| s.gt_mask.data().iter().filter(|&&v| v == 0.0).count()).sum::<usize>() as f64
        / (3 * 64 * 64) as f64;
    assert_eq!(report.accuracy, background);
    assert_eq!(report.building_iou, Some(0.0));
    let mut total = eval::Confusion::default();
    for s in &report.per_scene {
        total.add(&s.confusion);
    }
    assert_eq!(total, report.confusion);
}
