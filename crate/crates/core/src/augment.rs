//! Seeded augmentation chains.
//!
//! A chain applied to a co-registered tile set draws its random parameters
//! once per op and applies the same draw to every member, so all modalities
//! and the mask stay aligned. Image tiles are interpolated bilinearly; mask
//! tiles use nearest neighbour and are re-binarised after every geometric op.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CmcError, Result};
use crate::raster::{self, Interp};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugmentOp {
    /// Scale both axes by `ratio`; new extent is `floor(extent·ratio)`.
    Resize { ratio: f64 },
    ResizeTo { size: usize },
    RandomCrop { size: usize },
    Hflip { p: f64 },
    Vflip { p: f64 },
    Rotate { min_deg: f64, max_deg: f64 },
    GaussianBlur { kernel: usize, sigma_min: f64, sigma_max: f64, p: f64 },
}

impl AugmentOp {
    fn tag(&self) -> u64 {
        match self {
            AugmentOp::Resize { .. } => 1,
            AugmentOp::ResizeTo { .. } => 2,
            AugmentOp::RandomCrop { .. } => 3,
            AugmentOp::Hflip { .. } => 4,
            AugmentOp::Vflip { .. } => 5,
            AugmentOp::Rotate { .. } => 6,
            AugmentOp::GaussianBlur { .. } => 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentChain {
    pub ops: Vec<AugmentOp>,
    #[serde(default)]
    pub seed: u64,
}

/// One raster of a co-registered set.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub pixels: Tensor,
    pub is_mask: bool,
}

impl Tile {
    pub fn image(pixels: Tensor) -> Self {
        Self { pixels, is_mask: false }
    }

    pub fn mask(pixels: Tensor) -> Self {
        Self { pixels, is_mask: true }
    }

    fn interp(&self) -> Interp {
        if self.is_mask {
            Interp::Nearest
        } else {
            Interp::Bilinear
        }
    }

    fn extent(&self) -> (usize, usize) {
        (self.pixels.shape()[1], self.pixels.shape()[2])
    }
}

/// Blur kernel scaled to the tile: the nearest odd integer to `tile/20`,
/// at least 3. Gives 23 at 448 px.
pub fn blur_kernel_for(tile_size: usize) -> usize {
    let x = tile_size as f64 / 20.0;
    let odd = 2 * ((x - 1.0) / 2.0).round().max(0.0) as usize + 1;
    odd.max(3)
}

fn scaled_extent(extent: usize, ratio: f64) -> usize {
    ((extent as f64 * ratio) + 1e-9).floor() as usize
}

/// resize ×1.2 → random crop → hflip → vflip → rotate ±45° → blur.
pub fn pretrain_chain(tile_size: usize) -> Result<AugmentChain> {
    if tile_size < 8 {
        return Err(CmcError::Config(format!("tile size {tile_size} is below 8")));
    }
    Ok(AugmentChain {
        ops: vec![
            AugmentOp::Resize { ratio: 1.2 },
            AugmentOp::RandomCrop { size: tile_size },
            AugmentOp::Hflip { p: 0.5 },
            AugmentOp::Vflip { p: 0.5 },
            AugmentOp::Rotate { min_deg: -45.0, max_deg: 45.0 },
            AugmentOp::GaussianBlur {
                kernel: blur_kernel_for(tile_size),
                sigma_min: 0.1,
                sigma_max: 0.2,
                p: 0.5,
            },
        ],
        seed: 0,
    })
}

/// resize to the tile size → hflip → vflip.
pub fn finetune_chain(tile_size: usize) -> AugmentChain {
    AugmentChain {
        ops: vec![
            AugmentOp::ResizeTo { size: tile_size },
            AugmentOp::Hflip { p: 0.5 },
            AugmentOp::Vflip { p: 0.5 },
        ],
        seed: 0,
    }
}

impl AugmentChain {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for op in &self.ops {
            match op {
                AugmentOp::Resize { ratio } if !(*ratio > 0.0) => {
                    return Err(CmcError::Config(format!("resize ratio {ratio} must be positive")))
                }
                AugmentOp::ResizeTo { size: 0 } | AugmentOp::RandomCrop { size: 0 } => {
                    return Err(CmcError::Config("sizes must be positive".into()))
                }
                AugmentOp::Hflip { p } | AugmentOp::Vflip { p } if !(0.0..=1.0).contains(p) => {
                    return Err(CmcError::Config(format!("probability {p} outside [0,1]")))
                }
                AugmentOp::Rotate { min_deg, max_deg } if min_deg > max_deg => {
                    return Err(CmcError::Config("rotation range is reversed".into()))
                }
                AugmentOp::GaussianBlur { kernel, sigma_min, sigma_max, p } => {
                    if kernel % 2 == 0 {
                        return Err(CmcError::Config(format!("blur kernel {kernel} must be odd")));
                    }
                    if !(*sigma_min > 0.0) || sigma_min > sigma_max || !(0.0..=1.0).contains(p) {
                        return Err(CmcError::Config("invalid blur parameters".into()));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Applies the chain using the chain's own seed.
    pub fn apply(&self, tiles: &[Tile]) -> Result<Vec<Tile>> {
        self.apply_keyed(tiles, &[])
    }

    /// Applies the chain with a stream derived from the chain seed and `key`
    /// (e.g. scene id and view index).
    pub fn apply_keyed(&self, tiles: &[Tile], key: &[u64]) -> Result<Vec<Tile>> {
        let first = tiles
            .first()
            .ok_or_else(|| CmcError::Registration("empty tile set".into()))?;
        let extent = first.extent();
        if let Some(bad) = tiles.iter().find(|t| t.extent() != extent) {
            return Err(CmcError::Registration(format!(
                "tile extent {:?} differs from {:?}",
                bad.extent(),
                extent
            )));
        }
        let mut out: Vec<Tile> = tiles.to_vec();
        let mut seen = [0u64; 8];
        for op in &self.ops {
            let tag = op.tag();
            let occurrence = seen[tag as usize];
            seen[tag as usize] += 1;
            let mut labels = key.to_vec();
            labels.extend([tag, occurrence]);
            let mut r = rng::stream(self.seed, &labels);
            let (h, w) = out[0].extent();
            match *op {
                AugmentOp::Resize { ratio } => {
                    let (nh, nw) = (scaled_extent(h, ratio), scaled_extent(w, ratio));
                    if nh == 0 || nw == 0 {
                        return Err(CmcError::Geometry(format!("resize ratio {ratio} collapses {h}×{w}")));
                    }
                    for t in &mut out {
                        t.pixels = raster::resize(&t.pixels, nh, nw, t.interp());
                    }
                }
                AugmentOp::ResizeTo { size } => {
                    for t in &mut out {
                        t.pixels = raster::resize(&t.pixels, size, size, t.interp());
                    }
                }
                AugmentOp::RandomCrop { size } => {
                    if size > h || size > w {
                        return Err(CmcError::Geometry(format!(
                            "crop {size} exceeds extent {h}×{w}"
                        )));
                    }
                    let top = r.random_range(0..=h - size);
                    let left = r.random_range(0..=w - size);
                    for t in &mut out {
                        t.pixels = raster::crop(&t.pixels, top, left, size, size)?;
                    }
                }
                AugmentOp::Hflip { p } => {
                    if r.random::<f64>() < p {
                        for t in &mut out {
                            t.pixels = raster::hflip(&t.pixels);
                        }
                    }
                }
                AugmentOp::Vflip { p } => {
                    if r.random::<f64>() < p {
                        for t in &mut out {
                            t.pixels = raster::vflip(&t.pixels);
                        }
                    }
                }
                AugmentOp::Rotate { min_deg, max_deg } => {
                    let angle = if max_deg > min_deg {
                        r.random_range(min_deg..max_deg)
                    } else {
                        min_deg
                    };
                    for t in &mut out {
                        t.pixels = raster::rotate(&t.pixels, angle, t.interp());
                    }
                }
                AugmentOp::GaussianBlur { kernel, sigma_min, sigma_max, p } => {
                    let fire = r.random::<f64>() < p;
                    let sigma = if sigma_max > sigma_min {
                        r.random_range(sigma_min..sigma_max)
                    } else {
                        sigma_min
                    };
                    if fire {
                        // photometric: masks are left untouched
                        for t in out.iter_mut().filter(|t| !t.is_mask) {
                            t.pixels = raster::gaussian_blur(&t.pixels, kernel, sigma)?;
                        }
                    }
                }
            }
            for t in out.iter_mut().filter(|t| t.is_mask) {
                t.pixels = raster::binarize(&t.pixels);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_scaling() {
        assert_eq!(blur_kernel_for(448), 23);
        assert_eq!(blur_kernel_for(32), 3);
        assert_eq!(blur_kernel_for(8), 3);
        assert_eq!(blur_kernel_for(100), 5);
    }

    #[test]
    fn resize_crop_extents() {
        assert_eq!(scaled_extent(448, 1.2), 537);
        assert_eq!(scaled_extent(32, 1.2), 38);
        let chain = AugmentChain {
            ops: vec![AugmentOp::Resize { ratio: 1.2 }],
            seed: 0,
        };
        let out = chain.apply(&[Tile::image(Tensor::zeros(&[3, 32, 32]))]).unwrap();
        assert_eq!(out[0].pixels.shape(), &[3, 38, 38]);
        let full = pretrain_chain(32).unwrap().apply(&[Tile::image(Tensor::zeros(&[3, 32, 32]))]).unwrap();
        assert_eq!(full[0].pixels.shape(), &[3, 32, 32]);
    }

    #[test]
    fn pretrain_chain_rejects_tiny_tiles() {
        assert!(pretrain_chain(7).is_err());
    }

    #[test]
    fn mismatched_extents_are_a_registration_error() {
        let chain = finetune_chain(8);
        let r = chain.apply(&[
            Tile::image(Tensor::zeros(&[3, 8, 8])),
            Tile::mask(Tensor::zeros(&[1, 8, 9])),
        ]);
        assert!(matches!(r, Err(CmcError::Registration(_))));
    }

    #[test]
    fn chain_roundtrips_through_json() {
        let c = pretrain_chain(32).unwrap().with_seed(9);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"op\":\"random_crop\""));
        let back: AugmentChain = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
