//! Finetune-and-evaluate sweeps and their CSV/JSON reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Arm, ExperimentConfig, Preset, SweepAxis};
use crate::data::Dataset;
use crate::encoders::ModelWeights;
use crate::error::Result;
use crate::eval::MetricsReport;
use crate::modality::Modality;
use crate::train::{self, FinetuneOptions};

/// One evaluated model in a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportPoint {
    pub axis_value: String,
    pub preset: String,
    pub seed: u64,
    /// False for GT-pretrained arms in a fraction sweep: they have seen
    /// masks of every train scene during pretraining.
    pub comparable: bool,
    pub epoch: usize,
    pub weights_hash: String,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub axis: String,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub points: Vec<ReportPoint>,
}

pub type SweepResult = Report;

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Report {
    pub fn new(axis: &str, config: &ExperimentConfig) -> Self {
        Self {
            axis: axis.to_string(),
            seeds: Vec::new(),
            config_hash: config.hash(),
            config: config.clone(),
            points: Vec::new(),
        }
    }

    pub fn push(&mut self, mut point: ReportPoint) {
        point.metrics.config_hash = self.config_hash.clone();
        point.metrics.epoch = point.epoch;
        if !self.seeds.contains(&point.seed) {
            self.seeds.push(point.seed);
        }
        self.points.push(point);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("axis,axis_value,preset,seed,acc,building_iou,scenes,epoch\n");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                self.axis,
                p.axis_value,
                p.preset,
                p.seed,
                p.metrics.accuracy,
                fmt_opt(p.metrics.building_iou),
                p.metrics.scenes,
                p.epoch
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    /// Writes `report.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), self.to_csv())?;
        std::fs::write(dir.join("report.json"), self.to_json())?;
        Ok(())
    }

    /// Points grouped by preset label, each list in seed order.
    pub fn by_preset(&self) -> BTreeMap<String, Vec<&ReportPoint>> {
        let mut out: BTreeMap<String, Vec<&ReportPoint>> = BTreeMap::new();
        for p in &self.points {
            out.entry(p.preset.clone()).or_default().push(p);
        }
        out
    }
}

/// Pretrained models are shared by every point of a sweep for the same
/// `(preset, seed)`.
struct PretrainCache<'a> {
    config: &'a ExperimentConfig,
    dataset: &'a Dataset,
    models: BTreeMap<(Preset, u64), ModelWeights>,
}

impl PretrainCache<'_> {
    fn get(&mut self, preset: Preset, seed: u64) -> Result<&ModelWeights> {
        if !self.models.contains_key(&(preset, seed)) {
            let state = train::pretrain(self.config, preset, self.dataset, seed)?;
            self.models.insert((preset, seed), state.weights);
        }
        Ok(&self.models[&(preset, seed)])
    }
}

fn run_point(
    cache: &mut PretrainCache,
    arm: Arm,
    seed: u64,
    fraction: f64,
    epochs: usize,
) -> Result<(ModelWeights, MetricsReport)> {
    let config = cache.config;
    let dataset = cache.dataset;
    let pretrained = match arm {
        Arm::Random => None,
        Arm::Pretrained(p) => Some(cache.get(p, seed)?),
    };
    let state = train::finetune(
        config,
        dataset,
        seed,
        FinetuneOptions {
            pretrained: pretrained.map(|w| (w, Modality::Sar)),
            fraction: Some(fraction),
            epochs: Some(epochs),
            track_val: false,
        },
    )?;
    let report = train::evaluate(config, dataset, &state.weights, "val")?;
    Ok((state.weights, report))
}

/// Finetunes and evaluates every arm at every point of the configured axis,
/// for every seed.
pub fn run_sweep(config: &ExperimentConfig, dataset: &Dataset) -> Result<SweepResult> {
    config.validate()?;
    let axis = config.sweep.axis;
    let mut cache = PretrainCache {
        config,
        dataset,
        models: BTreeMap::new(),
    };
    let mut report = Report::new(&axis.to_string(), config);
    let points: Vec<(String, f64, usize)> = match axis {
        SweepAxis::Epochs => config
            .sweep
            .epochs
            .iter()
            .map(|&e| (e.to_string(), config.data_fraction, e))
            .collect(),
        SweepAxis::Fraction => config
            .sweep
            .fractions
            .iter()
            .map(|&f| (f.to_string(), f, config.finetune.epochs))
            .collect(),
        SweepAxis::Preset => vec![(String::new(), config.data_fraction, config.finetune.epochs)],
    };
    for &seed in &config.seeds {
        for (value, fraction, epochs) in &points {
            for &arm in &config.sweep.arms {
                let (weights, metrics) = run_point(&mut cache, arm, seed, *fraction, *epochs)?;
                let comparable = !(axis == SweepAxis::Fraction && matches!(arm, Arm::Pretrained(p) if p.uses_gt()));
                report.push(ReportPoint {
                    axis_value: if axis == SweepAxis::Preset { arm.to_string() } else { value.clone() },
                    preset: arm.to_string(),
                    seed,
                    comparable,
                    epoch: *epochs,
                    weights_hash: weights.content_hash(),
                    metrics,
                });
            }
        }
    }
    Ok(report)
}
