//! Experiment configuration: presets, hyperparameters, dotted overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::augment::{self, AugmentChain};
use crate::encoders::EncoderSpec;
use crate::error::{CmcError, Result};
use crate::loss::LossReduction;
use crate::modality::Modality;

/// Which modalities take part in pretraining, and how many augmented
/// draws each contributes. Every preset yields six views per instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "SAR")]
    Sar,
    #[serde(rename = "SAR+EO")]
    SarEo,
    #[serde(rename = "SAR+GT")]
    SarGt,
    #[serde(rename = "SAR+GT+EO")]
    SarGtEo,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Sar, Preset::SarEo, Preset::SarGt, Preset::SarGtEo];

    pub fn modalities(self) -> Vec<Modality> {
        match self {
            Preset::Sar => vec![Modality::Sar],
            Preset::SarEo => vec![Modality::Sar, Modality::Eo],
            Preset::SarGt => vec![Modality::Sar, Modality::Gt],
            Preset::SarGtEo => vec![Modality::Sar, Modality::Gt, Modality::Eo],
        }
    }

    /// Number of modalities M.
    pub fn m(self) -> usize {
        self.modalities().len()
    }

    /// Augmented draws per modality N.
    pub fn n(self) -> usize {
        6 / self.m()
    }

    pub fn views(self) -> usize {
        self.m() * self.n()
    }

    /// Modality of view `v`; views are grouped by modality.
    pub fn modality_of_view(self) -> Vec<Modality> {
        let n = self.n();
        self.modalities()
            .into_iter()
            .flat_map(|m| std::iter::repeat_n(m, n))
            .collect()
    }

    pub fn uses_gt(self) -> bool {
        self.modalities().contains(&Modality::Gt)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Sar => "SAR",
            Preset::SarEo => "SAR+EO",
            Preset::SarGt => "SAR+GT",
            Preset::SarGtEo => "SAR+GT+EO",
        })
    }
}

impl FromStr for Preset {
    type Err = CmcError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| CmcError::Config(format!("unknown preset {s:?}")))
    }
}

/// Initialisation of a segmentation run: from scratch, or from the SAR
/// encoder of a model pretrained with a preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Arm {
    Random,
    Pretrained(Preset),
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Random => f.write_str("random"),
            Arm::Pretrained(p) => p.fmt(f),
        }
    }
}

impl FromStr for Arm {
    type Err = CmcError;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("random") {
            Ok(Arm::Random)
        } else {
            s.parse().map(Arm::Pretrained)
        }
    }
}

impl TryFrom<String> for Arm {
    type Error = CmcError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Arm> for String {
    fn from(a: Arm) -> String {
        a.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainParams {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup: usize,
    /// Write a checkpoint every this many epochs; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
    pub augment: AugmentChain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneParams {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup: usize,
    pub augment: AugmentChain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchGeometry {
    pub extent: usize,
    pub patch: usize,
    pub stride: usize,
    pub resize: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Epochs,
    Fraction,
    Preset,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Epochs => "epochs",
            SweepAxis::Fraction => "fraction",
            SweepAxis::Preset => "preset",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepParams {
    pub axis: SweepAxis,
    /// Finetune epoch counts for the epochs axis.
    pub epochs: Vec<usize>,
    /// Training-data fractions for the fraction axis.
    pub fractions: Vec<f64>,
    /// Initialisations compared at every point.
    pub arms: Vec<Arm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub temperature: f64,
    #[serde(default)]
    pub loss_reduction: LossReduction,
    pub pretrain: PretrainParams,
    pub finetune: FinetuneParams,
    pub seeds: Vec<u64>,
    pub patch: PatchGeometry,
    pub encoder: EncoderSpec,
    pub data_fraction: f64,
    pub sweep: SweepParams,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CmcError::Config(format!("{name} must be strictly positive, got {v}")))
    }
}

pub fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(CmcError::Config(format!("data fraction {f} must lie in (0,1]")))
    }
}

impl ExperimentConfig {
    /// Small-model defaults sized for a single CPU core.
    pub fn desk() -> Self {
        let resize = 32;
        Self {
            preset: Preset::SarGtEo,
            temperature: 0.1,
            loss_reduction: LossReduction::Mean,
            pretrain: PretrainParams {
                base_lr: 0.1,
                weight_decay: 5e-4,
                batch: 8,
                epochs: 30,
                warmup: 3,
                checkpoint_every: 0,
                augment: augment::pretrain_chain(resize).expect("desk tile"),
            },
            finetune: FinetuneParams {
                base_lr: 0.02,
                weight_decay: 5e-4,
                batch: 8,
                epochs: 25,
                warmup: 1,
                augment: augment::finetune_chain(resize),
            },
            seeds: vec![0, 1, 2, 3, 4],
            patch: PatchGeometry {
                extent: 64,
                patch: 32,
                stride: 16,
                resize,
            },
            encoder: EncoderSpec::default(),
            data_fraction: 1.0,
            sweep: SweepParams {
                axis: SweepAxis::Fraction,
                epochs: vec![5, 10, 25],
                fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
                arms: vec![Arm::Random, Arm::Pretrained(Preset::SarEo)],
            },
        }
    }

    /// Published hyperparameters; far beyond a desk budget.
    pub fn published() -> Self {
        let resize = 448;
        let mut c = Self::desk();
        c.loss_reduction = LossReduction::Sum;
        c.pretrain = PretrainParams {
            base_lr: 0.1,
            weight_decay: 5e-4,
            batch: 126,
            epochs: 500,
            warmup: 10,
            checkpoint_every: 50,
            augment: augment::pretrain_chain(resize).expect("published tile"),
        };
        c.finetune = FinetuneParams {
            base_lr: 0.0075,
            weight_decay: 5e-4,
            batch: 72,
            epochs: 25,
            warmup: 1,
            augment: augment::finetune_chain(resize),
        };
        c.patch = PatchGeometry {
            extent: 900,
            patch: 300,
            stride: 150,
            resize,
        };
        c.encoder.proj_out = 2048;
        c
    }

    pub fn validate(&self) -> Result<()> {
        positive("temperature", self.temperature)?;
        positive("pretrain.base_lr", self.pretrain.base_lr)?;
        positive("pretrain.weight_decay", self.pretrain.weight_decay)?;
        positive("finetune.base_lr", self.finetune.base_lr)?;
        positive("finetune.weight_decay", self.finetune.weight_decay)?;
        check_fraction(self.data_fraction)?;
        if self.pretrain.batch < 4 {
            return Err(CmcError::Config(format!(
                "pretrain batch {} is below 4; batch statistics and negatives need more",
                self.pretrain.batch
            )));
        }
        if self.finetune.batch == 0 {
            return Err(CmcError::Config("finetune batch must be positive".into()));
        }
        for (name, w, e) in [
            ("pretrain", self.pretrain.warmup, self.pretrain.epochs),
            ("finetune", self.finetune.warmup, self.finetune.epochs),
        ] {
            if w >= e {
                return Err(CmcError::Config(format!("{name}: warmup {w} must be below epochs {e}")));
            }
        }
        if self.seeds.is_empty() {
            return Err(CmcError::Config("at least one seed is required".into()));
        }
        let p = &self.patch;
        if p.patch == 0 || p.stride == 0 || p.stride > p.patch || p.patch > p.extent {
            return Err(CmcError::Config(format!(
                "patch geometry {}/{}/{} is invalid",
                p.extent, p.patch, p.stride
            )));
        }
        self.encoder.validate()?;
        if !p.resize.is_multiple_of(self.encoder.downsampling()) {
            return Err(CmcError::Config(format!(
                "resize {} is not divisible by the encoder downsampling {}",
                p.resize,
                self.encoder.downsampling()
            )));
        }
        self.pretrain.augment.validate()?;
        self.finetune.augment.validate()?;
        if self.sweep.arms.is_empty() {
            return Err(CmcError::Config("sweep needs at least one arm".into()));
        }
        for &f in &self.sweep.fractions {
            check_fraction(f)?;
        }
        if self.sweep.epochs.iter().any(|&e| e <= self.finetune.warmup) {
            return Err(CmcError::Config("sweep epochs must exceed the finetune warmup".into()));
        }
        Ok(())
    }

    /// Encoder spec with the modalities of `preset`.
    pub fn encoder_for(&self, preset: Preset) -> EncoderSpec {
        EncoderSpec {
            modalities: preset.modalities(),
            ..self.encoder.clone()
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }

    pub fn from_value(v: Value) -> Result<Self> {
        let c: Self = serde_json::from_value(v).map_err(|e| CmcError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    /// Reads a config file and applies `key=value` overrides on top.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CmcError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut v: Value = serde_json::from_str(&text)
            .map_err(|e| CmcError::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut v = self.to_value();
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }

    /// Short content hash of the canonical serialisation.
    pub fn hash(&self) -> String {
        let s = serde_json::to_string(self).expect("config serialises");
        hex::encode(&Sha256::digest(s.as_bytes())[..8])
    }
}

/// Sets a dotted path such as `pretrain.epochs=5`. The value is parsed as
/// JSON when possible and taken as a string otherwise. Intermediate objects
/// must exist; the final key may be new (unknown keys fail validation).
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CmcError::Config(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CmcError::Config(format!("override path {path:?} is malformed")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut cur = root;
    for k in &keys[..keys.len() - 1] {
        cur = match cur {
            Value::Object(map) => map
                .get_mut(*k)
                .ok_or_else(|| CmcError::Config(format!("override path {path:?}: no key {k:?}")))?,
            Value::Array(items) => {
                let i: usize = k
                    .parse()
                    .map_err(|_| CmcError::Config(format!("override path {path:?}: {k:?} is not an index")))?;
                items
                    .get_mut(i)
                    .ok_or_else(|| CmcError::Config(format!("override path {path:?}: index {i} out of range")))?
            }
            _ => return Err(CmcError::Config(format!("override path {path:?}: {k:?} is not a container"))),
        };
    }
    let last = keys[keys.len() - 1];
    match cur {
        Value::Object(map) => {
            map.insert(last.to_string(), value);
        }
        Value::Array(items) => {
            let i: usize = last
                .parse()
                .map_err(|_| CmcError::Config(format!("override path {path:?}: {last:?} is not an index")))?;
            *items
                .get_mut(i)
                .ok_or_else(|| CmcError::Config(format!("override path {path:?}: index {i} out of range")))? = value;
        }
        _ => return Err(CmcError::Config(format!("override path {path:?} does not end in a container"))),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_all_have_six_views() {
        for p in Preset::ALL {
            assert_eq!(p.views(), 6, "{p}");
        }
        assert_eq!((Preset::SarGtEo.m(), Preset::SarGtEo.n()), (3, 2));
        assert_eq!(
            Preset::SarGtEo.modality_of_view(),
            vec![Modality::Sar, Modality::Sar, Modality::Gt, Modality::Gt, Modality::Eo, Modality::Eo]
        );
        assert_eq!("sar+eo".parse::<Preset>().unwrap(), Preset::SarEo);
    }

    #[test]
    fn defaults_validate() {
        ExperimentConfig::desk().validate().unwrap();
        ExperimentConfig::published().validate().unwrap();
    }

    #[test]
    fn overrides_apply_and_validate() {
        let c = ExperimentConfig::desk()
            .with_overrides(&["preset=SAR+EO".into(), "pretrain.epochs=7".into(), "seeds.1=9".into()])
            .unwrap();
        assert_eq!(c.preset, Preset::SarEo);
        assert_eq!(c.pretrain.epochs, 7);
        assert_eq!(c.seeds[1], 9);
        let bad = ExperimentConfig::desk().with_overrides(&["temperature=-1".into()]);
        assert!(matches!(bad, Err(CmcError::Config(_))));
        assert!(ExperimentConfig::desk().with_overrides(&["pretrain.epochz=3".into()]).is_err());
        assert!(ExperimentConfig::desk().with_overrides(&["nope.x=3".into()]).is_err());
        assert!(ExperimentConfig::desk().with_overrides(&["pretrain.warmup=30".into()]).is_err());
        assert!(ExperimentConfig::desk().with_overrides(&["data_fraction=0".into()]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::desk();
        let b = a.with_overrides(&["temperature=0.2".into()]).unwrap();
        assert_eq!(a.hash(), ExperimentConfig::desk().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn json_roundtrip() {
        let c = ExperimentConfig::desk();
        let back = ExperimentConfig::from_value(serde_json::from_str(&c.to_json_pretty()).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
