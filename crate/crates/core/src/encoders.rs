//! Per-modality convolutional encoders, projection heads and the
//! segmentation decoder.
//!
//! Every modality branch has the same layout: `widths.len()` blocks of
//! 3×3 stride-2 convolution → batchnorm → ReLU, then global average pooling to a
//! feature vector of size `widths.last()`. The projection head is
//! linear → batchnorm → ReLU → linear. Only the first convolution's input
//! extent differs between branches (masks carry one channel).

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{BatchNormState, BnMode, Graph, Var};
use crate::error::{CmcError, Result};
use crate::modality::Modality;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Nearest upsample + 3×3 conv per level with additive skips.
    #[default]
    Unet,
    /// 1×1 conv on the deepest features, upsampled to full size.
    LinearProbe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub modalities: Vec<Modality>,
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub proj_hidden: usize,
    pub proj_out: usize,
    #[serde(default)]
    pub decoder: DecoderKind,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            modalities: vec![Modality::Sar],
            widths: vec![8, 16, 32],
            kernel: 3,
            proj_hidden: 32,
            proj_out: 32,
            decoder: DecoderKind::Unet,
        }
    }
}

impl EncoderSpec {
    pub fn feature_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    /// Total spatial downsampling of the encoder.
    pub fn downsampling(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(CmcError::Config("encoder widths must be non-empty and positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(CmcError::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.proj_hidden == 0 || self.proj_out == 0 {
            return Err(CmcError::Config("projection dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Hash of the backbone structure. Two specs with the same fingerprint
    /// produce interchangeable encoder branches.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"backbone:");
        for w in &self.widths {
            h.update((*w as u64).to_le_bytes());
        }
        h.update((self.kernel as u64).to_le_bytes());
        hex::encode(&h.finalize()[..8])
    }

    /// `(name, shape)` of every encoder parameter of branch `m`.
    pub fn encoder_inventory(&self, m: Modality) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = m.channels();
        for (i, &w) in self.widths.iter().enumerate() {
            out.push((format!("enc.{}.conv{i}.w", m.key()), vec![w, c_in, self.kernel, self.kernel]));
            for part in ["gamma", "beta", "running_mean", "running_var"] {
                out.push((format!("enc.{}.bn{i}.{part}", m.key()), vec![w]));
            }
            c_in = w;
        }
        out
    }

    pub fn projection_inventory(&self, m: Modality) -> Vec<(String, Vec<usize>)> {
        let k = m.key();
        let (h, p, o) = (self.feature_dim(), self.proj_hidden, self.proj_out);
        vec![
            (format!("proj.{k}.fc0.w"), vec![h, p]),
            (format!("proj.{k}.fc0.b"), vec![p]),
            (format!("proj.{k}.bn.gamma"), vec![p]),
            (format!("proj.{k}.bn.beta"), vec![p]),
            (format!("proj.{k}.bn.running_mean"), vec![p]),
            (format!("proj.{k}.bn.running_var"), vec![p]),
            (format!("proj.{k}.fc1.w"), vec![p, o]),
            (format!("proj.{k}.fc1.b"), vec![o]),
        ]
    }

    pub fn decoder_inventory(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel;
        match self.decoder {
            DecoderKind::Unet => {
                let mut out = Vec::new();
                let mut c_in = self.feature_dim();
                for i in (0..self.widths.len()).rev() {
                    let c_out = self.widths[i.saturating_sub(1)];
                    out.push((format!("dec.up{i}.w"), vec![c_out, c_in, k, k]));
                    out.push((format!("dec.up{i}.b"), vec![c_out]));
                    c_in = c_out;
                }
                out.push(("dec.head.w".into(), vec![1, c_in, 1, 1]));
                out.push(("dec.head.b".into(), vec![1]));
                out
            }
            DecoderKind::LinearProbe => vec![
                ("dec.probe.w".into(), vec![1, self.feature_dim(), 1, 1]),
                ("dec.probe.b".into(), vec![1]),
            ],
        }
    }

    /// Parameters of a pretraining model: encoder + projection per modality.
    pub fn pretrain_inventory(&self) -> Vec<(String, Vec<usize>)> {
        self.modalities
            .iter()
            .flat_map(|&m| {
                let mut v = self.encoder_inventory(m);
                v.extend(self.projection_inventory(m));
                v
            })
            .collect()
    }

    /// Parameters of a segmentation model: SAR encoder + decoder.
    pub fn segmentation_inventory(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = self.encoder_inventory(Modality::Sar);
        v.extend(self.decoder_inventory());
        v
    }
}

/// Running statistics are stored alongside parameters but never trained.
pub fn is_trainable(name: &str) -> bool {
    !(name.ends_with(".running_mean") || name.ends_with(".running_var"))
}

/// Biases and batchnorm affine parameters are exempt from weight decay.
pub fn is_decayed(name: &str) -> bool {
    is_trainable(name) && !(name.ends_with(".b") || name.ends_with(".gamma") || name.ends_with(".beta"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub params: BTreeMap<String, Tensor>,
    pub fingerprint: String,
    pub step: u64,
}

impl ModelWeights {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| CmcError::SpecMismatch(format!("missing parameter {name}")))
    }

    pub fn has_branch(&self, m: Modality) -> bool {
        self.params.contains_key(&format!("enc.{}.conv0.w", m.key()))
    }

    pub fn branches(&self) -> Vec<Modality> {
        Modality::ALL.into_iter().filter(|&m| self.has_branch(m)).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| is_trainable(k))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>, fingerprint: String, step: u64) -> Self {
        Self {
            params: entries.into_iter().collect(),
            fingerprint,
            step,
        }
    }

    /// Checks that every inventoried parameter exists with the right shape.
    pub fn check_inventory(&self, inventory: &[(String, Vec<usize>)]) -> Result<()> {
        for (name, shape) in inventory {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(CmcError::SpecMismatch(format!(
                    "{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    /// Content hash over names, shapes and values.
    /// Hash of the weights as stored, i.e. narrowed to `f32`.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.params {
            h.update(k.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update((*v as f32).to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..16])
    }

    /// Rounds every value to `f32`, so saving and reloading is lossless.
    pub fn narrow_to_storage(&mut self) {
        for t in self.params.values_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

fn init_tensor(name: &str, shape: &[usize], seed: u64) -> Tensor {
    if name.ends_with(".gamma") || name.ends_with(".running_var") {
        return Tensor::ones(shape);
    }
    if name.ends_with(".b") || name.ends_with(".beta") || name.ends_with(".running_mean") {
        return Tensor::zeros(shape);
    }
    // conv kernels are [out, in, k, k], linear weights are [in, out]
    let fan_in: usize = if shape.len() == 4 {
        shape[1..].iter().product()
    } else {
        shape[0]
    };
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut r = rng::named_stream(seed, name, &[]);
    Tensor::from_fn(shape, |_| normal.sample(&mut r))
}

fn init_from_inventory(spec: &EncoderSpec, inventory: Vec<(String, Vec<usize>)>, seed: u64) -> ModelWeights {
    let params = inventory
        .into_iter()
        .map(|(name, shape)| {
            let t = init_tensor(&name, &shape, seed);
            (name, t)
        })
        .collect();
    ModelWeights {
        params,
        fingerprint: spec.fingerprint(),
        step: 0,
    }
}

/// Pretraining model with an encoder and projection head per modality.
pub fn init_weights(spec: &EncoderSpec, seed: u64) -> Result<ModelWeights> {
    spec.validate()?;
    Ok(init_from_inventory(spec, spec.pretrain_inventory(), seed))
}

/// Segmentation model: SAR encoder plus decoder.
pub fn init_segmentation(spec: &EncoderSpec, seed: u64) -> Result<ModelWeights> {
    spec.validate()?;
    Ok(init_from_inventory(spec, spec.segmentation_inventory(), seed))
}

/// Binds weights into a graph on first use and remembers the vars so
/// gradients can be read back by name.
pub struct Binder<'w> {
    weights: &'w ModelWeights,
    vars: BTreeMap<String, Var>,
    frozen_prefixes: Vec<String>,
    bn_updates: BTreeMap<String, BatchNormState>,
}

impl<'w> Binder<'w> {
    pub fn new(weights: &'w ModelWeights) -> Self {
        Self {
            weights,
            vars: BTreeMap::new(),
            frozen_prefixes: Vec::new(),
            bn_updates: BTreeMap::new(),
        }
    }

    /// Parameters under `prefix` enter the graph as constants.
    pub fn freeze(mut self, prefix: &str) -> Self {
        self.frozen_prefixes.push(prefix.to_string());
        self
    }

    pub fn weights(&self) -> &ModelWeights {
        self.weights
    }

    /// Uses an existing graph var for parameter `name` instead of binding
    /// the stored value.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.weights.get(name)?.clone();
        let trainable = is_trainable(name) && !self.frozen_prefixes.iter().any(|p| name.starts_with(p));
        let v = g.leaf(t, trainable)?;
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(_, &v)| g.requires_grad(v))
            .map(|(k, &v)| {
                let t = g.value(v);
                let grad = g.grad(v).map(|s| s.to_vec()).unwrap_or(vec![0.0; t.numel()]);
                (k.clone(), Tensor::new(t.shape().to_vec(), grad).expect("shape"))
            })
            .collect()
    }

    /// Batchnorm running statistics updated by train-mode passes, keyed by
    /// layer prefix.
    pub fn take_bn_updates(&mut self) -> BTreeMap<String, BatchNormState> {
        std::mem::take(&mut self.bn_updates)
    }

    fn bn_state(&self, prefix: &str) -> Result<BatchNormState> {
        if let Some(s) = self.bn_updates.get(prefix) {
            return Ok(s.clone());
        }
        let mean = self.weights.get(&format!("{prefix}.running_mean"))?;
        let var = self.weights.get(&format!("{prefix}.running_var"))?;
        let mut s = BatchNormState::new(mean.numel());
        s.running_mean = mean.data().to_vec();
        s.running_var = var.data().to_vec();
        Ok(s)
    }
}

/// Writes batchnorm running statistics back into `weights`.
pub fn apply_bn_updates(weights: &mut ModelWeights, updates: BTreeMap<String, BatchNormState>) {
    for (prefix, s) in updates {
        let n = s.running_mean.len();
        weights.params.insert(
            format!("{prefix}.running_mean"),
            Tensor::new(vec![n], s.running_mean).expect("shape"),
        );
        weights.params.insert(
            format!("{prefix}.running_var"),
            Tensor::new(vec![n], s.running_var).expect("shape"),
        );
    }
}

fn check_branch(weights: &ModelWeights, m: Modality, x_shape: &[usize]) -> Result<()> {
    if !weights.has_branch(m) {
        return Err(CmcError::Dimension(format!("model has no {m} branch")));
    }
    let c = x_shape.get(1).copied().unwrap_or(0);
    if c != m.channels() {
        return Err(CmcError::Dimension(format!(
            "{m} branch expects {} channels, tile has {c}",
            m.channels()
        )));
    }
    Ok(())
}

/// "Same" padding for a stride-2 convolution: output extent `ceil(e/2)`,
/// with any odd leftover padding placed after.
fn stride2_padding(shape: &[usize], k: usize) -> Result<(usize, usize)> {
    let e = shape[shape.len() - 1];
    if shape[shape.len() - 2] != e {
        return Err(CmcError::Geometry(format!("encoder expects square tiles, got {:?}", shape)));
    }
    let out = e.div_ceil(2);
    let total = ((out - 1) * 2 + k).saturating_sub(e);
    Ok((total / 2, total - total / 2))
}

/// Per-channel batchnorm of a `[B,C,H,W]` map, run as row batchnorm over
/// the `B·H·W` positions.
fn batchnorm_2d(g: &mut Graph, b: &mut Binder, x: Var, prefix: &str, mode: BnMode) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut to_rows = Vec::with_capacity(n * c * hw);
    for i in 0..n {
        for s in 0..hw {
            to_rows.extend((0..c).map(|ch| (i * c + ch) * hw + s));
        }
    }
    let mut back = vec![0; to_rows.len()];
    for (row_pos, &src) in to_rows.iter().enumerate() {
        back[src] = row_pos;
    }
    let rows = g.gather(x, to_rows, &[n * hw, c])?;
    let gamma = b.var(g, &format!("{prefix}.gamma"))?;
    let beta = b.var(g, &format!("{prefix}.beta"))?;
    let mut state = b.bn_state(prefix)?;
    let y = g.batchnorm(rows, gamma, beta, mode, &mut state)?;
    if mode == BnMode::Train {
        b.bn_updates.insert(prefix.to_string(), state);
    }
    g.gather(y, back, &shape)
}

/// Encoder feature maps of every block, shallowest first. `x` is `[B,C,H,W]`.
pub fn encode_levels(g: &mut Graph, b: &mut Binder, m: Modality, x: Var, mode: BnMode) -> Result<Vec<Var>> {
    check_branch(b.weights(), m, g.shape(x))?;
    let mut levels = Vec::new();
    let mut h = x;
    let mut i = 0;
    while b.weights().params.contains_key(&format!("enc.{}.conv{i}.w", m.key())) {
        let w = b.var(g, &format!("enc.{}.conv{i}.w", m.key()))?;
        let k = g.shape(w)[2];
        let (before, after) = stride2_padding(g.shape(h), k)?;
        let c = g.conv2d_padded(h, w, 2, before, after)?;
        let c = batchnorm_2d(g, b, c, &format!("enc.{}.bn{i}", m.key()), mode)?;
        h = g.relu(c)?;
        levels.push(h);
        i += 1;
    }
    Ok(levels)
}

/// Pooled encoder features `[B,H]`.
pub fn features_var(g: &mut Graph, b: &mut Binder, m: Modality, x: Var, mode: BnMode) -> Result<Var> {
    let levels = encode_levels(g, b, m, x, mode)?;
    let last = *levels.last().ok_or_else(|| CmcError::Config("encoder without blocks".into()))?;
    g.global_avg_pool(last)
}

/// Projection head `[B,H] -> [B,P]`.
pub fn project_var(g: &mut Graph, b: &mut Binder, m: Modality, h: Var, mode: BnMode) -> Result<Var> {
    let k = m.key();
    let w0 = b.var(g, &format!("proj.{k}.fc0.w"))?;
    let b0 = b.var(g, &format!("proj.{k}.fc0.b"))?;
    let gamma = b.var(g, &format!("proj.{k}.bn.gamma"))?;
    let beta = b.var(g, &format!("proj.{k}.bn.beta"))?;
    let w1 = b.var(g, &format!("proj.{k}.fc1.w"))?;
    let b1 = b.var(g, &format!("proj.{k}.fc1.b"))?;
    let prefix = format!("proj.{k}.bn");
    let mut state = b.bn_state(&prefix)?;
    let y = g.linear(h, w0, b0)?;
    let y = g.batchnorm(y, gamma, beta, mode, &mut state)?;
    if mode == BnMode::Train {
        b.bn_updates.insert(prefix, state);
    }
    let y = g.relu(y)?;
    g.linear(y, w1, b1)
}

/// Segmentation logits `[B,1,H,W]` from a SAR batch `[B,3,H,W]`.
pub fn segment_logits_var(g: &mut Graph, b: &mut Binder, x: Var, mode: BnMode) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let widths = b
        .weights()
        .params
        .keys()
        .filter(|k| k.starts_with("enc.sar.conv") && k.ends_with(".w"))
        .count();
    let factor = 1usize << widths;
    if shape.len() != 4 || !shape[2].is_multiple_of(factor) || !shape[3].is_multiple_of(factor) {
        return Err(CmcError::Geometry(format!(
            "tile {:?} is not divisible by the encoder downsampling {factor}",
            shape
        )));
    }
    let levels = encode_levels(g, b, Modality::Sar, x, mode)?;
    let deepest = *levels.last().expect("non-empty");
    if b.weights().params.contains_key("dec.probe.w") {
        let w = b.var(g, "dec.probe.w")?;
        let bias = b.var(g, "dec.probe.b")?;
        let y = g.conv2d(deepest, w, 1, 0)?;
        let y = g.channel_bias(y, bias)?;
        return g.upsample_nearest(y, factor);
    }
    let mut d = deepest;
    for i in (0..levels.len()).rev() {
        let w = b.var(g, &format!("dec.up{i}.w"))?;
        let bias = b.var(g, &format!("dec.up{i}.b"))?;
        let k = g.shape(w)[2];
        let up = g.upsample_nearest(d, 2)?;
        let c = g.conv2d(up, w, 1, k / 2)?;
        let c = g.channel_bias(c, bias)?;
        d = g.relu(c)?;
        if i > 0 {
            d = g.add(d, levels[i - 1])?;
        }
    }
    let w = b.var(g, "dec.head.w")?;
    let bias = b.var(g, "dec.head.b")?;
    let y = g.conv2d(d, w, 1, 0)?;
    g.channel_bias(y, bias)
}

fn batch_of(tiles: &[&Tensor]) -> Result<Tensor> {
    Tensor::stack(tiles)
}

/// Pooled features and projected embedding of one tile.
pub fn embed(weights: &ModelWeights, m: Modality, tile: &Tensor, mode: BnMode) -> Result<(Tensor, Tensor)> {
    let (h, z) = embed_batch(weights, m, &[tile], mode)?;
    Ok((h.unstack().remove(0), z.unstack().remove(0)))
}

/// Batched [`embed`]: returns `[B,H]` features and `[B,P]` embeddings.
pub fn embed_batch(
    weights: &ModelWeights,
    m: Modality,
    tiles: &[&Tensor],
    mode: BnMode,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let mut b = Binder::new(weights);
    let x = g.constant(batch_of(tiles)?)?;
    let h = features_var(&mut g, &mut b, m, x, mode)?;
    let z = project_var(&mut g, &mut b, m, h, mode)?;
    Ok((g.value(h).clone(), g.value(z).clone()))
}

/// Pooled encoder features `[B,H]` only; works on segmentation models too.
pub fn features(weights: &ModelWeights, m: Modality, tiles: &[&Tensor]) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut b = Binder::new(weights);
    let x = g.constant(batch_of(tiles)?)?;
    let h = features_var(&mut g, &mut b, m, x, BnMode::Eval)?;
    Ok(g.value(h).clone())
}

/// Building probability map `[1,H,W]` for one SAR tile.
pub fn segment(weights: &ModelWeights, tile: &Tensor) -> Result<Tensor> {
    Ok(segment_batch(weights, &[tile])?.remove(0))
}

pub fn segment_batch(weights: &ModelWeights, tiles: &[&Tensor]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let mut b = Binder::new(weights);
    let x = g.constant(batch_of(tiles)?)?;
    let logits = segment_logits_var(&mut g, &mut b, x, BnMode::Eval)?;
    let probs = g.sigmoid(logits)?;
    Ok(g.value(probs).unstack())
}

/// Copies the encoder of branch `m` of a pretrained model into the SAR
/// encoder slot of a segmentation model. The projection head is dropped and
/// the decoder is left untouched.
pub fn transplant_encoder(pretrained: &ModelWeights, m: Modality, target: &ModelWeights) -> Result<ModelWeights> {
    if pretrained.fingerprint != target.fingerprint {
        return Err(CmcError::SpecMismatch(format!(
            "backbone fingerprint {} does not match {}",
            pretrained.fingerprint, target.fingerprint
        )));
    }
    if !pretrained.has_branch(m) {
        return Err(CmcError::SpecMismatch(format!("pretrained model has no {m} branch")));
    }
    let src_prefix = format!("enc.{}.", m.key());
    let mut out = target.clone();
    for (name, t) in &pretrained.params {
        let Some(rest) = name.strip_prefix(&src_prefix) else {
            continue;
        };
        let dst = format!("enc.sar.{rest}");
        let slot = out
            .params
            .get_mut(&dst)
            .ok_or_else(|| CmcError::SpecMismatch(format!("target has no {dst}")))?;
        if slot.shape() != t.shape() {
            return Err(CmcError::SpecMismatch(format!(
                "{name} {:?} cannot replace {dst} {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec3() -> EncoderSpec {
        EncoderSpec {
            modalities: vec![Modality::Sar, Modality::Eo, Modality::Gt],
            ..EncoderSpec::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_branches_differ() {
        let a = init_weights(&spec3(), 7).unwrap();
        let b = init_weights(&spec3(), 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.get("enc.sar.conv1.w").unwrap(), a.get("enc.eo.conv1.w").unwrap());
        let c = init_weights(&spec3(), 8).unwrap();
        assert_ne!(a.get("enc.sar.conv1.w").unwrap(), c.get("enc.sar.conv1.w").unwrap());
    }

    #[test]
    fn init_conventions() {
        let w = init_weights(&spec3(), 1).unwrap();
        assert!(w.get("enc.sar.bn0.running_mean").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(w.get("enc.sar.bn0.running_var").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(w.get("proj.eo.bn.gamma").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(w.get("proj.eo.bn.beta").unwrap().data().iter().all(|&v| v == 0.0));
        w.check_inventory(&spec3().pretrain_inventory()).unwrap();
    }

    #[test]
    fn he_init_std_for_large_fan_in() {
        let t = init_tensor("probe.w", &[1000, 200], 3);
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let expect = (2.0f64 / 1000.0).sqrt();
        assert!((std - expect).abs() / expect < 0.1, "{std} vs {expect}");
    }

    #[test]
    fn branch_parity_beyond_the_stem() {
        let s = spec3();
        let shapes = |m: Modality| -> Vec<Vec<usize>> {
            let mut v: Vec<Vec<usize>> = s.encoder_inventory(m).into_iter().map(|(_, sh)| sh).collect();
            v[0][1] = 0;
            v.extend(s.projection_inventory(m).into_iter().map(|(_, sh)| sh));
            v
        };
        assert_eq!(shapes(Modality::Sar), shapes(Modality::Eo));
        assert_eq!(shapes(Modality::Sar), shapes(Modality::Gt));
    }

    #[test]
    fn embed_checks_channels_and_branch() {
        let w = init_weights(&EncoderSpec::default(), 0).unwrap();
        let tile = Tensor::zeros(&[1, 32, 32]);
        assert!(embed(&w, Modality::Sar, &tile, BnMode::Eval).is_err());
        let eo = Tensor::zeros(&[3, 32, 32]);
        assert!(embed(&w, Modality::Eo, &eo, BnMode::Eval).is_err());
    }

    #[test]
    fn zero_tile_gives_finite_embedding() {
        let w = init_weights(&EncoderSpec::default(), 0).unwrap();
        let (h, z) = embed(&w, Modality::Sar, &Tensor::zeros(&[3, 32, 32]), BnMode::Eval).unwrap();
        assert_eq!(h.shape(), &[32]);
        assert_eq!(z.shape(), &[32]);
        assert!(h.all_finite() && z.all_finite());
    }

    #[test]
    fn segment_shape_and_geometry() {
        let w = init_segmentation(&EncoderSpec::default(), 0).unwrap();
        let tile = Tensor::from_fn(&[3, 32, 32], |i| ((i * 31 % 17) as f64) / 17.0);
        let p = segment(&w, &tile).unwrap();
        assert_eq!(p.shape(), &[1, 32, 32]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let bad = Tensor::zeros(&[3, 20, 20]);
        assert!(matches!(segment(&w, &bad), Err(CmcError::Geometry(_))));
    }

    #[test]
    fn linear_probe_decoder() {
        let spec = EncoderSpec {
            decoder: DecoderKind::LinearProbe,
            ..EncoderSpec::default()
        };
        let w = init_segmentation(&spec, 0).unwrap();
        let p = segment(&w, &Tensor::ones(&[3, 32, 32])).unwrap();
        assert_eq!(p.shape(), &[1, 32, 32]);
    }

    #[test]
    fn transplant_copies_encoder_only() {
        let pre = init_weights(&spec3(), 1).unwrap();
        let target = init_segmentation(&EncoderSpec::default(), 2).unwrap();
        let out = transplant_encoder(&pre, Modality::Sar, &target).unwrap();
        assert_eq!(out.get("enc.sar.conv2.w").unwrap(), pre.get("enc.sar.conv2.w").unwrap());
        for (k, v) in &target.params {
            if k.starts_with("dec.") {
                assert_eq!(out.get(k).unwrap(), v);
            }
        }
        assert!(!out.params.keys().any(|k| k.starts_with("proj.")));
        // the mask branch's stem has one input channel
        assert!(transplant_encoder(&pre, Modality::Gt, &target).is_err());
    }

    #[test]
    fn transplant_rejects_other_backbones() {
        let pre = init_weights(&spec3(), 1).unwrap();
        let other = EncoderSpec {
            widths: vec![4, 8, 16],
            ..EncoderSpec::default()
        };
        let target = init_segmentation(&other, 2).unwrap();
        assert!(matches!(
            transplant_encoder(&pre, Modality::Sar, &target),
            Err(CmcError::SpecMismatch(_))
        ));
    }
}
