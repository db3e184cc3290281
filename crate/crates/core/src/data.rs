//! Scenes, patch geometry, splits and the synthetic scene generator.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{CmcError, Result};
use crate::modality::Modality;
use crate::par;
use crate::raster::{self, Interp};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetadata {
    pub gsd: f64,
    pub source: String,
}

/// One co-registered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub id: String,
    /// `[3,H,W]`, channels HH, VV, HV.
    pub sar: Tensor,
    /// `[3,H,W]`.
    pub eo: Tensor,
    /// `[1,H,W]`, values in {0,1}.
    pub gt_mask: Tensor,
    pub metadata: SceneMetadata,
}

impl SceneBundle {
    pub fn new(id: String, sar: Tensor, eo: Tensor, gt_mask: Tensor, metadata: SceneMetadata) -> Result<Self> {
        let ext = |t: &Tensor| (t.shape().get(1).copied(), t.shape().get(2).copied());
        if sar.rank() != 3 || eo.rank() != 3 || gt_mask.rank() != 3 {
            return Err(CmcError::Registration("scene rasters must be [C,H,W]".into()));
        }
        if ext(&sar) != ext(&eo) || ext(&sar) != ext(&gt_mask) {
            return Err(CmcError::Registration(format!(
                "scene {id}: extents {:?}, {:?}, {:?} differ",
                sar.shape(),
                eo.shape(),
                gt_mask.shape()
            )));
        }
        if sar.shape()[0] != 3 || eo.shape()[0] != 3 || gt_mask.shape()[0] != 1 {
            return Err(CmcError::Data(format!("scene {id}: unexpected channel counts")));
        }
        if gt_mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(CmcError::Data(format!("scene {id}: mask is not binary")));
        }
        Ok(Self { id, sar, eo, gt_mask, metadata })
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.sar.shape()[1], self.sar.shape()[2])
    }

    pub fn raster(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Sar => &self.sar,
            Modality::Eo => &self.eo,
            Modality::Gt => &self.gt_mask,
        }
    }
}

/// Sliding-window patch layout over a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch: usize,
    pub stride: usize,
    pub extent: (usize, usize),
    pub offsets: Vec<(usize, usize)>,
}

fn axis_offsets(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=extent - patch).step_by(stride).collect();
    if *v.last().expect("non-empty") != extent - patch {
        v.push(extent - patch);
    }
    v
}

pub fn make_grid(extent: usize, patch: usize, stride: usize) -> Result<PatchGrid> {
    make_grid_hw((extent, extent), patch, stride)
}

/// Offsets on the stride lattice, plus a final offset snapped to
/// `extent − patch` when the lattice misses the far edge.
pub fn make_grid_hw(extent: (usize, usize), patch: usize, stride: usize) -> Result<PatchGrid> {
    if patch == 0 || stride == 0 {
        return Err(CmcError::Geometry("patch size and stride must be positive".into()));
    }
    if patch > extent.0 || patch > extent.1 {
        return Err(CmcError::Geometry(format!(
            "patch {patch} exceeds extent {}×{}",
            extent.0, extent.1
        )));
    }
    let ys = axis_offsets(extent.0, patch, stride);
    let xs = axis_offsets(extent.1, patch, stride);
    let offsets = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
    Ok(PatchGrid { patch, stride, extent, offsets })
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Number of patches covering each pixel, row-major.
    pub fn coverage(&self) -> Vec<u32> {
        let (h, w) = self.extent;
        let mut c = vec![0u32; h * w];
        for &(oy, ox) in &self.offsets {
            for y in oy..oy + self.patch {
                for x in ox..ox + self.patch {
                    c[y * w + x] += 1;
                }
            }
        }
        c
    }
}

/// Co-registered crops of one scene at one grid offset.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub scene_id: String,
    pub offset: (usize, usize),
    pub sar: Tensor,
    pub eo: Tensor,
    pub gt: Tensor,
}

impl PatchSet {
    pub fn raster(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Sar => &self.sar,
            Modality::Eo => &self.eo,
            Modality::Gt => &self.gt,
        }
    }
}

pub fn extract(bundle: &SceneBundle, grid: &PatchGrid, resize_to: usize) -> Result<Vec<PatchSet>> {
    if bundle.extent() != grid.extent {
        return Err(CmcError::Geometry(format!(
            "grid built for {:?}, scene {} is {:?}",
            grid.extent,
            bundle.id,
            bundle.extent()
        )));
    }
    let s = grid.patch;
    grid.offsets
        .iter()
        .map(|&(y, x)| {
            let cut = |t: &Tensor, interp| -> Result<Tensor> {
                let c = raster::crop(t, y, x, s, s)?;
                Ok(raster::resize(&c, resize_to, resize_to, interp))
            };
            Ok(PatchSet {
                scene_id: bundle.id.clone(),
                offset: (y, x),
                sar: cut(&bundle.sar, Interp::Bilinear)?,
                eo: cut(&bundle.eo, Interp::Bilinear)?,
                gt: cut(&bundle.gt_mask, Interp::Nearest)?,
            })
        })
        .collect()
}

/// Averages overlapping patch probabilities back into a `[1,H,W]` scene.
/// Patches at another resolution are resized to the grid patch size first.
pub fn merge(predictions: &[((usize, usize), Tensor)], grid: &PatchGrid) -> Result<Tensor> {
    let (h, w) = grid.extent;
    let s = grid.patch;
    // running mean: exact when every covering patch agrees
    let mut mean = vec![0.0; h * w];
    let mut count = vec![0u32; h * w];
    for &off in &grid.offsets {
        let Some((_, p)) = predictions.iter().find(|(o, _)| *o == off) else {
            return Err(CmcError::Coverage(format!("no prediction for offset {:?}", off)));
        };
        if p.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CmcError::Domain(format!("probability outside [0,1] at offset {:?}", off)));
        }
        let p = raster::resize(p, s, s, Interp::Bilinear);
        let (oy, ox) = off;
        for y in 0..s {
            for x in 0..s {
                let i = (oy + y) * w + ox + x;
                count[i] += 1;
                mean[i] += (p.data()[y * s + x] - mean[i]) / count[i] as f64;
            }
        }
    }
    Tensor::new(vec![1, h, w], mean.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub seed: u64,
    pub ratio: f64,
}

/// Seeded shuffle, then the first `⌈ratio·n⌉` ids train and the rest
/// validate. At least one id is always held out.
pub fn split(ids: &[String], seed: u64, ratio: f64) -> Result<SplitManifest> {
    if ids.len() < 2 {
        return Err(CmcError::Data(format!("need at least 2 scenes to split, got {}", ids.len())));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CmcError::Config(format!("split ratio {ratio} must lie in (0,1)")));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut rng::stream(seed, &[0x5911]));
    let n_train = ((ratio * ids.len() as f64 - 1e-9).ceil() as usize).clamp(1, ids.len() - 1);
    let val = order.split_off(n_train);
    Ok(SplitManifest { train: order, val, seed, ratio })
}

/// Knobs of the synthetic scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    /// 0 = clean SAR, 1 = single-look speckle with heavy additive noise.
    pub difficulty: f64,
    pub min_buildings: usize,
    pub max_buildings: usize,
    pub eo_noise: f64,
    /// Density of sensor-specific clutter: bright non-building scatterers in
    /// radar, and ground cover patches in optical.
    #[serde(default = "default_clutter")]
    pub clutter: f64,
}

fn default_clutter() -> f64 {
    3.0
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            difficulty: 0.5,
            min_buildings: 2,
            max_buildings: 6,
            eo_noise: 0.03,
            clutter: default_clutter(),
        }
    }
}

impl GeneratorParams {
    /// Equivalent number of looks of the gamma speckle.
    pub fn looks(&self) -> f64 {
        1.0 + 7.0 * (1.0 - self.difficulty.clamp(0.0, 1.0))
    }

    fn sar_noise(&self) -> f64 {
        0.02 + 0.08 * self.difficulty.clamp(0.0, 1.0)
    }
}

struct Building {
    cy: f64,
    cx: f64,
    half_h: f64,
    half_w: f64,
    sin: f64,
    cos: f64,
    roof: [f64; 3],
}

impl Building {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = self.cos * dx + self.sin * dy;
        let v = -self.sin * dx + self.cos * dy;
        u.abs() <= self.half_w && v.abs() <= self.half_h
    }
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Deterministic synthetic scene: a handful of rectangular footprints seen
/// by a clean optical sensor and a speckled radar.
pub fn synth_scene(seed: u64, id: &str, extent: usize, params: &GeneratorParams) -> Result<SceneBundle> {
    if extent < 32 {
        return Err(CmcError::Geometry(format!("scene extent {extent} is below 32")));
    }
    if params.min_buildings == 0 || params.min_buildings > params.max_buildings {
        return Err(CmcError::Config("building count range is invalid".into()));
    }
    let e = extent as f64;
    let mut r = rng::stream(seed, &[0xB1D6]);
    let count = r.random_range(params.min_buildings..=params.max_buildings);
    let buildings: Vec<Building> = (0..count)
        .map(|_| {
            let angle: f64 = if r.random::<f64>() < 0.5 {
                0.0
            } else {
                r.random_range(0.0..std::f64::consts::FRAC_PI_2)
            };
            let base = r.random_range(0.55..0.85);
            Building {
                cy: r.random_range(0.1 * e..0.9 * e),
                cx: r.random_range(0.1 * e..0.9 * e),
                half_h: r.random_range(e / 16.0..e / 6.0),
                half_w: r.random_range(e / 16.0..e / 6.0),
                sin: angle.sin(),
                cos: angle.cos(),
                roof: [
                    base + r.random_range(-0.05..0.05),
                    base + r.random_range(-0.05..0.05),
                    base + r.random_range(-0.05..0.05),
                ],
            }
        })
        .collect();

    let n = extent * extent;
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for y in 0..extent {
        for x in 0..extent {
            owner[y * extent + x] = buildings
                .iter()
                .position(|b| b.contains(y as f64 + 0.5, x as f64 + 0.5));
        }
    }
    let mask: Vec<f64> = owner.iter().map(|o| if o.is_some() { 1.0 } else { 0.0 }).collect();
    let is_edge = |y: usize, x: usize| -> bool {
        if mask[y * extent + x] == 0.0 {
            return false;
        }
        let ny = [y.wrapping_sub(1), y + 1, y, y];
        let nx = [x, x, x.wrapping_sub(1), x + 1];
        ny.iter()
            .zip(&nx)
            .any(|(&a, &b)| a >= extent || b >= extent || mask[a * extent + b] == 0.0)
    };

    let clutter = params.clutter.max(0.0);
    let scaled = |r: &mut rng::Rng, lo: f64, hi: f64| -> usize { (clutter * r.random_range(lo..hi)).round() as usize };

    // optical-only ground cover: dark, colour-shifted rectangles
    let mut cover = vec![None::<[f64; 3]>; n];
    for _ in 0..scaled(&mut r, 1.0, 4.0) {
        let (y0, x0) = (r.random_range(0..extent), r.random_range(0..extent));
        let (h, w) = (r.random_range(extent / 8..extent / 3), r.random_range(extent / 8..extent / 3));
        let tone = [r.random_range(0.12..0.3), r.random_range(0.2..0.42), r.random_range(0.1..0.3)];
        for y in y0..(y0 + h).min(extent) {
            for x in x0..(x0 + w).min(extent) {
                cover[y * extent + x] = Some(tone);
            }
        }
    }

    // optical: smooth ground texture plus roofs
    let phases: Vec<f64> = (0..6).map(|_| r.random_range(0.0..std::f64::consts::TAU)).collect();
    let freqs: Vec<f64> = (0..6).map(|_| r.random_range(1.0..3.5)).collect();
    let ground = [0.32, 0.40, 0.28];
    let eo_noise = Normal::new(0.0, params.eo_noise.max(1e-12)).expect("std");
    let mut eo = vec![0.0; 3 * n];
    for c in 0..3 {
        for y in 0..extent {
            for x in 0..extent {
                let (fy, fx) = (y as f64 / e, x as f64 / e);
                let i = y * extent + x;
                let base = match owner[i] {
                    Some(b) => buildings[b].roof[c],
                    None if cover[i].is_some() => cover[i].expect("checked")[c],
                    None => {
                        ground[c]
                            + 0.05 * (freqs[2 * c] * std::f64::consts::TAU * fx + phases[2 * c]).sin()
                            + 0.05 * (freqs[2 * c + 1] * std::f64::consts::TAU * fy + phases[2 * c + 1]).sin()
                    }
                };
                eo[c * n + i] = f32_round(base + eo_noise.sample(&mut r));
            }
        }
    }

    // radar: bright footprint edges, moderate interiors, dark ground,
    // gamma speckle per channel and additive noise shared across channels
    let looks = params.looks();
    let speckle = Gamma::new(looks, 1.0 / looks).expect("gamma");
    let noise = Normal::new(0.0, params.sar_noise()).expect("std");
    let gains = [1.0, 0.85, 0.45];
    let mut response = vec![0.0; n];
    for y in 0..extent {
        for x in 0..extent {
            let i = y * extent + x;
            response[i] = if is_edge(y, x) {
                0.9
            } else if mask[i] == 1.0 {
                0.4
            } else {
                0.15
            };
        }
    }
    // radar-only clutter on the ground: undulating terrain, bright point
    // scatterers and linear features
    let tphase: Vec<f64> = (0..4).map(|_| r.random_range(0.0..std::f64::consts::TAU)).collect();
    let tfreq: Vec<f64> = (0..2).map(|_| r.random_range(1.0..3.0)).collect();
    for y in 0..extent {
        for x in 0..extent {
            let i = y * extent + x;
            if mask[i] == 0.0 {
                let (fy, fx) = (y as f64 / e, x as f64 / e);
                let t = 0.5 * (tfreq[0] * std::f64::consts::TAU * fx + tphase[0]).sin()
                    + 0.5 * (tfreq[1] * std::f64::consts::TAU * fy + tphase[1]).sin();
                response[i] *= 1.0 + 0.6 * clutter.min(1.0) * t;
            }
        }
    }
    let mut paint = |y: isize, x: isize, v: f64| {
        if y >= 0 && x >= 0 && (y as usize) < extent && (x as usize) < extent {
            let i = y as usize * extent + x as usize;
            if mask[i] == 0.0 {
                response[i] = response[i].max(v);
            }
        }
    };
    for _ in 0..scaled(&mut r, 10.0, 25.0) {
        let (y, x) = (r.random_range(0..extent) as isize, r.random_range(0..extent) as isize);
        let v = r.random_range(0.8..1.6);
        for (dy, dx) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
            paint(y + dy, x + dx, if dy == 0 && dx == 0 { v } else { 0.6 * v });
        }
    }
    for _ in 0..scaled(&mut r, 1.0, 3.5) {
        let (y, x) = (r.random_range(0.0..e), r.random_range(0.0..e));
        let angle = r.random_range(0.0..std::f64::consts::PI);
        let len = r.random_range(e / 4.0..e / 2.0);
        let v = r.random_range(0.5..0.9);
        for k in 0..len.ceil() as usize {
            let t = k as f64;
            paint((y + t * angle.sin()) as isize, (x + t * angle.cos()) as isize, v);
        }
    }

    let shared: Vec<f64> = (0..n).map(|_| noise.sample(&mut r)).collect();
    let mut sar = vec![0.0; 3 * n];
    for c in 0..3 {
        for i in 0..n {
            let own = 0.5 * noise.sample(&mut r);
            sar[c * n + i] = f32_round(gains[c] * response[i] * speckle.sample(&mut r) + shared[i] + own);
        }
    }

    SceneBundle::new(
        id.to_string(),
        Tensor::new(vec![3, extent, extent], sar)?,
        Tensor::new(vec![3, extent, extent], eo)?,
        Tensor::new(vec![1, extent, extent], mask)?,
        SceneMetadata {
            gsd: 0.5,
            source: "synthetic".into(),
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub seed: u64,
}

/// `manifest.json` of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub extent: usize,
    pub generator: GeneratorParams,
    pub seed: u64,
    pub split_seed: u64,
    pub split_ratio: f64,
    pub scenes: Vec<SceneEntry>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub scenes: Vec<SceneBundle>,
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

impl Dataset {
    /// Generates `count` scenes; scene `i` uses a seed derived from `(seed, i)`.
    pub fn generate(count: usize, extent: usize, seed: u64, params: GeneratorParams) -> Result<Self> {
        if count < 2 {
            return Err(CmcError::Data(format!("need at least 2 scenes, got {count}")));
        }
        let entries: Vec<SceneEntry> = (0..count)
            .map(|i| SceneEntry {
                id: scene_id(i),
                seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            })
            .collect();
        let scenes = par::try_map_indexed(count, |i| {
            synth_scene(entries[i].seed, &entries[i].id, extent, &params)
        })?;
        Ok(Self {
            manifest: DatasetManifest {
                version: 1,
                extent,
                generator: params,
                seed,
                split_seed: seed,
                split_ratio: 0.8,
                scenes: entries,
            },
            scenes,
        })
    }

    pub fn ids(&self) -> Vec<String> {
        self.scenes.iter().map(|s| s.id.clone()).collect()
    }

    pub fn split(&self) -> Result<SplitManifest> {
        split(&self.ids(), self.manifest.split_seed, self.manifest.split_ratio)
    }

    pub fn scene(&self, id: &str) -> Result<&SceneBundle> {
        self.scenes
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| CmcError::Data(format!("unknown scene {id}")))
    }

    pub fn scenes_for(&self, ids: &[String]) -> Result<Vec<&SceneBundle>> {
        ids.iter().map(|id| self.scene(id)).collect()
    }

    /// Writes `manifest.json` and `scenes/<id>.cmct`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("scenes"))?;
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest)? + "\n",
        )?;
        for s in &self.scenes {
            container::save(
                &dir.join("scenes").join(format!("{}.cmct", s.id)),
                &[
                    ("sar".into(), s.sar.clone()),
                    ("eo".into(), s.eo.clone()),
                    ("gt".into(), s.gt_mask.clone()),
                ],
            )?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| CmcError::Data(format!("cannot read {}: {e}", dir.join("manifest.json").display())))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| CmcError::Data(format!("bad manifest: {e}")))?;
        let scenes = manifest
            .scenes
            .iter()
            .map(|entry| {
                let path = dir.join("scenes").join(format!("{}.cmct", entry.id));
                let entries = container::load(&path)
                    .map_err(|e| CmcError::Data(format!("{}: {e}", path.display())))?;
                let take = |name: &str| {
                    entries
                        .iter()
                        .find(|(n, _)| n == name)
                        .map(|(_, t)| t.clone())
                        .ok_or_else(|| CmcError::Data(format!("{}: missing entry {name}", path.display())))
                };
                SceneBundle::new(
                    entry.id.clone(),
                    take("sar")?,
                    take("eo")?,
                    take("gt")?,
                    SceneMetadata {
                        gsd: 0.5,
                        source: "synthetic".into(),
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, scenes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_counts() {
        let g = make_grid(900, 300, 150).unwrap();
        assert_eq!(g.len(), 25);
        assert_eq!(axis_offsets(900, 300, 150), vec![0, 150, 300, 450, 600]);
        assert_eq!(make_grid(64, 32, 16).unwrap().len(), 9);
        assert_eq!(make_grid(32, 32, 16).unwrap().offsets, vec![(0, 0)]);
        assert!(matches!(make_grid(31, 32, 16), Err(CmcError::Geometry(_))));
    }

    #[test]
    fn off_lattice_edges_are_snapped() {
        assert_eq!(axis_offsets(70, 32, 16), vec![0, 16, 32, 38]);
        let g = make_grid(70, 32, 16).unwrap();
        assert!(g.coverage().iter().all(|&c| c >= 1));
    }

    #[test]
    fn merge_of_two_overlapping_patches() {
        let g = PatchGrid {
            patch: 2,
            stride: 1,
            extent: (2, 3),
            offsets: vec![(0, 0), (0, 1)],
        };
        let preds = vec![
            ((0, 0), Tensor::filled(&[1, 2, 2], 0.2)),
            ((0, 1), Tensor::filled(&[1, 2, 2], 0.6)),
        ];
        let m = merge(&preds, &g).unwrap();
        assert!((m.data()[1] - 0.4).abs() < 1e-12);
        assert!((m.data()[0] - 0.2).abs() < 1e-12);
        assert!((m.data()[2] - 0.6).abs() < 1e-12);
        assert!(matches!(merge(&preds[..1], &g), Err(CmcError::Coverage(_))));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ids: Vec<String> = (0..10).map(scene_id).collect();
        let a = split(&ids, 3, 0.8).unwrap();
        assert_eq!((a.train.len(), a.val.len()), (8, 2));
        assert_eq!(a, split(&ids, 3, 0.8).unwrap());
        let mut all: Vec<String> = a.train.iter().chain(&a.val).cloned().collect();
        all.sort();
        assert_eq!(all, ids);
        assert!(split(&ids[..1], 3, 0.8).is_err());
    }

    #[test]
    fn synthetic_scene_is_binary_and_deterministic() {
        let p = GeneratorParams::default();
        let a = synth_scene(5, "a", 64, &p).unwrap();
        let b = synth_scene(5, "a", 64, &p).unwrap();
        assert_eq!(a, b);
        assert!(a.gt_mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(a.gt_mask.data().contains(&1.0));
        assert!(synth_scene(5, "a", 16, &p).is_err());
    }

    #[test]
    fn extract_crops_exactly_without_resize() {
        let s = synth_scene(1, "s", 64, &GeneratorParams::default()).unwrap();
        let g = make_grid(64, 32, 16).unwrap();
        let patches = extract(&s, &g, 32).unwrap();
        assert_eq!(patches.len(), 9);
        let p = &patches[4];
        assert_eq!(p.offset, (16, 16));
        assert_eq!(p.sar.data()[0], s.sar.data()[16 * 64 + 16]);
        let resized = extract(&s, &g, 48).unwrap();
        assert!(resized.iter().all(|p| p.gt.data().iter().all(|&v| v == 0.0 || v == 1.0)));
    }
}
