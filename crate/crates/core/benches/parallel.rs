use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cmc_core::augment::{pretrain_chain, Tile};
use cmc_core::config::{ExperimentConfig, Preset};
use cmc_core::data::{make_grid, Dataset, GeneratorParams};
use cmc_core::encoders::{self, init_segmentation};
use cmc_core::eval;
use cmc_core::par::{self, ExecMode};
use cmc_core::Modality;

const MODES: [(&str, ExecMode); 2] = [("parallel", ExecMode::Parallel), ("serial", ExecMode::Serial)];

fn encoder_forward(c: &mut Criterion) {
    let config = ExperimentConfig::desk();
    let spec = config.encoder_for(Preset::Sar);
    let weights = encoders::init_weights(&spec, 0).unwrap();
    let ds = Dataset::generate(2, 64, 0, GeneratorParams::default()).unwrap();
    let tiles: Vec<_> = (0..16)
        .map(|i| cmc_core::raster::crop(&ds.scenes[i % 2].sar, (i * 2) % 32, (i * 3) % 32, 32, 32).unwrap())
        .collect();
    let refs: Vec<_> = tiles.iter().collect();
    let mut group = c.benchmark_group("encoder_forward_16x32px");
    for (label, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            par::set_mode(mode);
            b.iter(|| black_box(encoders::features(&weights, Modality::Sar, &refs).unwrap()))
        });
    }
    group.finish();
}

fn augmentation(c: &mut Criterion) {
    let chain = pretrain_chain(32).unwrap();
    let ds = Dataset::generate(2, 64, 1, GeneratorParams::default()).unwrap();
    let set: Vec<Tile> = vec![
        Tile::image(cmc_core::raster::crop(&ds.scenes[0].sar, 0, 0, 32, 32).unwrap()),
        Tile::image(cmc_core::raster::crop(&ds.scenes[0].eo, 0, 0, 32, 32).unwrap()),
        Tile::mask(cmc_core::raster::crop(&ds.scenes[0].gt_mask, 0, 0, 32, 32).unwrap()),
    ];
    let mut group = c.benchmark_group("augment_48_views");
    for (label, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            par::set_mode(mode);
            b.iter(|| black_box(par::try_map_indexed(48, |k| chain.apply_keyed(&set, &[k as u64])).unwrap()))
        });
    }
    group.finish();
}

fn scene_evaluation(c: &mut Criterion) {
    let config = ExperimentConfig::desk();
    let weights = init_segmentation(&config.encoder_for(Preset::Sar), 0).unwrap();
    let ds = Dataset::generate(8, 64, 2, GeneratorParams::default()).unwrap();
    let scenes: Vec<_> = ds.scenes.iter().collect();
    let grid = make_grid(64, 32, 16).unwrap();
    let mut group = c.benchmark_group("evaluate_8_scenes");
    group.sample_size(10);
    for (label, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            par::set_mode(mode);
            b.iter(|| black_box(eval::evaluate_scenes(&weights, &scenes, &grid, 32).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, encoder_forward, augmentation, scene_evaluation);
criterion_main!(benches);
