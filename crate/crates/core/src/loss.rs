//! Cosine similarity, the pairwise contrastive loss and the full-graph
//! multiview loss.
//!
//! Full-graph loss, for anchor view `v` of scene `t` and every other view `w`
//! of the same scene:
//!
//! ```text
//! ℓ(t,v,w) = −log( exp(d(z[t][v], z[t][w])/τ) / Σ_i exp(d(z[t][v], z[i][w])/τ) )
//! ```
//!
//! The denominator runs over every scene `i`, including `i = t`, so each term
//! is a softmax cross-entropy and `ℓ ≥ 0`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Reduction, Var};
use crate::error::{CmcError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    #[default]
    Sum,
    /// Sum divided by the number of ordered terms, `B·V·(V−1)`.
    Mean,
}

/// Projected embeddings of `B` scenes × `V` views.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    z: Tensor,
    modality_of_view: Vec<usize>,
    num_modalities: usize,
    temperature: f64,
}

impl EmbeddingSet {
    /// `z` is `[B, V, D]`; `modality_of_view[v]` is a 0-based modality index.
    pub fn new(
        z: Tensor,
        modality_of_view: Vec<usize>,
        num_modalities: usize,
        temperature: f64,
    ) -> Result<Self> {
        if z.rank() != 3 {
            return Err(CmcError::Dimension(format!(
                "embeddings must be [B, V, D], got {:?}",
                z.shape()
            )));
        }
        let views = z.shape()[1];
        if modality_of_view.len() != views {
            return Err(CmcError::Dimension(format!(
                "{} modality labels for {views} views",
                modality_of_view.len()
            )));
        }
        if num_modalities == 0 || !views.is_multiple_of(num_modalities) {
            return Err(CmcError::Config(format!(
                "{views} views cannot split evenly over {num_modalities} modalities"
            )));
        }
        let per = views / num_modalities;
        for m in 0..num_modalities {
            let count = modality_of_view.iter().filter(|&&x| x == m).count();
            if count != per {
                return Err(CmcError::Config(format!(
                    "modality {m} labels {count} views, expected {per}"
                )));
            }
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(CmcError::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self {
            z,
            modality_of_view,
            num_modalities,
            temperature,
        })
    }

    pub fn z(&self) -> &Tensor {
        &self.z
    }

    pub fn batch(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn views(&self) -> usize {
        self.z.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.z.shape()[2]
    }

    pub fn modality_of_view(&self) -> &[usize] {
        &self.modality_of_view
    }

    pub fn num_modalities(&self) -> usize {
        self.num_modalities
    }

    pub fn augmentations(&self) -> usize {
        self.views() / self.num_modalities
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

/// Number of unordered view relationships per scene, `C(V, 2)`.
pub fn relationships_per_instance(views: usize) -> usize {
    views * views.saturating_sub(1) / 2
}

pub fn cosine_similarity(u: &Tensor, v: &Tensor) -> Result<f64> {
    if u.numel() != v.numel() {
        return Err(CmcError::Dimension(format!(
            "cosine of {:?} and {:?}",
            u.shape(),
            v.shape()
        )));
    }
    let nu = u.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu <= 1e-12 || nv <= 1e-12 {
        return Err(CmcError::DegenerateEmbedding("zero-norm vector".into()));
    }
    let uv: f64 = u.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
    Ok((uv / (nu * nv)).clamp(-1.0, 1.0))
}

/// Differentiable cosine similarity of two `[D]` vectors, shape `[1]`.
pub fn cosine_similarity_var(g: &mut Graph, u: Var, v: Var) -> Result<Var> {
    let du = g.value(u).numel();
    let dv = g.value(v).numel();
    if du != dv {
        return Err(CmcError::Dimension(format!("cosine of {du} and {dv} elements")));
    }
    let ur = g.reshape(u, &[1, du])?;
    let vr = g.reshape(v, &[1, dv])?;
    let un = g.normalize_rows(ur)?;
    let vn = g.normalize_rows(vr)?;
    let prod = g.mul(un, vn)?;
    g.sum_all(prod)
}

/// Full similarity matrix of the rows of `z`: `[N, N]`.
fn similarity_matrix(g: &mut Graph, z: Var) -> Result<Var> {
    let zn = g.normalize_rows(z)?;
    let zt = g.transpose(zn)?;
    g.matmul(zn, zt)
}

fn check_matching(partner: &[usize]) -> Result<()> {
    let n = partner.len();
    if n < 2 || !n.is_multiple_of(2) {
        return Err(CmcError::Pairing(format!("need an even number ≥ 2 of views, got {n}")));
    }
    for (i, &j) in partner.iter().enumerate() {
        if j >= n || j == i || partner[j] != i {
            return Err(CmcError::Pairing(format!(
                "view {i} is not matched (partner {j})"
            )));
        }
    }
    Ok(())
}

/// Pairwise contrastive loss over `2N` views where `partner[i]` is the
/// positive of view `i`. Summed over both orders of every pair; the
/// denominator runs over every `k ≠ i`, which keeps the positive.
pub fn pairwise_loss_var(g: &mut Graph, z: Var, partner: &[usize], temperature: f64) -> Result<Var> {
    check_matching(partner)?;
    if !(temperature > 0.0) {
        return Err(CmcError::Config(format!("temperature must be positive, got {temperature}")));
    }
    let n = partner.len();
    if g.shape(z).len() != 2 || g.shape(z)[0] != n {
        return Err(CmcError::Dimension(format!(
            "{} partners for embeddings {:?}",
            n,
            g.shape(z)
        )));
    }
    let sim = similarity_matrix(g, z)?;
    let logits = g.scale(sim, 1.0 / temperature)?;
    let pos_idx: Vec<usize> = (0..n).map(|i| i * n + partner[i]).collect();
    let den_idx: Vec<usize> = (0..n)
        .flat_map(|i| (0..n).filter(move |&k| k != i).map(move |k| i * n + k))
        .collect();
    let pos = g.gather(logits, pos_idx, &[n])?;
    let den = g.gather(logits, den_idx, &[n, n - 1])?;
    let lse = g.reduce(Reduction::LogSumExp, den, 1)?;
    let terms = g.sub(lse, pos)?;
    g.sum_all(terms)
}

pub fn pairwise_loss(z: &Tensor, partner: &[usize], temperature: f64) -> Result<f64> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone())?;
    let l = pairwise_loss_var(&mut g, zv, partner, temperature)?;
    Ok(g.value(l).item())
}

/// Full-graph multiview loss on `z` laid out as `[B·V, D]` rows ordered
/// `(scene, view)`.
pub fn fullgraph_loss_var(
    g: &mut Graph,
    z: Var,
    batch: usize,
    views: usize,
    temperature: f64,
    reduction: LossReduction,
) -> Result<Var> {
    if batch < 2 {
        return Err(CmcError::InsufficientNegatives(batch));
    }
    if views < 2 {
        return Err(CmcError::Config(format!("need at least 2 views per scene, got {views}")));
    }
    if !(temperature > 0.0) {
        return Err(CmcError::Config(format!("temperature must be positive, got {temperature}")));
    }
    let rows = batch * views;
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 || shape[0] != rows {
        return Err(CmcError::Dimension(format!(
            "expected [{rows}, D] embeddings for {batch}×{views}, got {:?}",
            shape
        )));
    }
    let sim = similarity_matrix(g, z)?;
    let logits = g.scale(sim, 1.0 / temperature)?;
    let terms = batch * views * (views - 1);
    let mut pos_idx = Vec::with_capacity(terms);
    let mut den_idx = Vec::with_capacity(terms * batch);
    for t in 0..batch {
        for v in 0..views {
            let anchor = t * views + v;
            for w in (0..views).filter(|&w| w != v) {
                pos_idx.push(anchor * rows + t * views + w);
                den_idx.extend((0..batch).map(|i| anchor * rows + i * views + w));
            }
        }
    }
    let pos = g.gather(logits, pos_idx, &[terms])?;
    let den = g.gather(logits, den_idx, &[terms, batch])?;
    let lse = g.reduce(Reduction::LogSumExp, den, 1)?;
    let per_term = g.sub(lse, pos)?;
    let total = g.sum_all(per_term)?;
    match reduction {
        LossReduction::Sum => Ok(total),
        LossReduction::Mean => g.scale(total, 1.0 / terms as f64),
    }
}

pub fn fullgraph_cmc_loss(e: &EmbeddingSet) -> Result<f64> {
    Ok(fullgraph_cmc_loss_with_grad(e, LossReduction::Sum)?.0)
}

/// Loss value and `dL/dz` (shaped like `z`).
pub fn fullgraph_cmc_loss_with_grad(
    e: &EmbeddingSet,
    reduction: LossReduction,
) -> Result<(f64, Tensor)> {
    let (b, v, d) = (e.batch(), e.views(), e.dim());
    let mut g = Graph::new();
    let z = g.param(e.z().clone().reshape(&[b * v, d])?)?;
    let l = fullgraph_loss_var(&mut g, z, b, v, e.temperature(), reduction)?;
    g.backward(l)?;
    let grad = g
        .grad(z)
        .map(|gr| gr.to_vec())
        .unwrap_or_else(|| vec![0.0; b * v * d]);
    Ok((g.value(l).item(), Tensor::new(vec![b, v, d], grad)?))
}
