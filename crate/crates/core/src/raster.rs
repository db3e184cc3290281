//! Geometric and filtering primitives on `[C,H,W]` rasters.
//!
//! Pixel centres sit at integer coordinates. Resizing maps centres with the
//! half-pixel convention; rotation turns about the raster centre and fills
//! uncovered pixels with 0.

use crate::error::{CmcError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

fn dims(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

fn raster(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![c, h, w], data).expect("raster shape")
}

/// Maps every value to 1 if above 0.5, else 0.
pub fn binarize(t: &Tensor) -> Tensor {
    binarize_at(t, 0.5)
}

/// Maps every value to 1 if strictly above `threshold`, else 0.
pub fn binarize_at(t: &Tensor, threshold: f64) -> Tensor {
    Tensor::new(
        t.shape().to_vec(),
        t.data().iter().map(|&v| if v > threshold { 1.0 } else { 0.0 }).collect(),
    )
    .expect("same shape")
}

pub fn resize(t: &Tensor, out_h: usize, out_w: usize, interp: Interp) -> Tensor {
    let (c, h, w) = dims(t);
    if out_h == h && out_w == w {
        return t.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let p = t.plane(ch);
        for y in 0..out_h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            for x in 0..out_w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                out.push(match interp {
                    Interp::Nearest => {
                        let iy = (((y as f64 + 0.5) * sy).floor() as usize).min(h - 1);
                        let ix = (((x as f64 + 0.5) * sx).floor() as usize).min(w - 1);
                        p[iy * w + ix]
                    }
                    Interp::Bilinear => {
                        let y0 = fy.floor() as usize;
                        let x0 = fx.floor() as usize;
                        let y1 = (y0 + 1).min(h - 1);
                        let x1 = (x0 + 1).min(w - 1);
                        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                        let top = p[y0 * w + x0] * (1.0 - tx) + p[y0 * w + x1] * tx;
                        let bot = p[y1 * w + x0] * (1.0 - tx) + p[y1 * w + x1] * tx;
                        top * (1.0 - ty) + bot * ty
                    }
                });
            }
        }
    }
    raster(c, out_h, out_w, out)
}

pub fn crop(t: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
    let (c, th, tw) = dims(t);
    if top + h > th || left + w > tw {
        return Err(CmcError::Geometry(format!(
            "crop {h}×{w} at ({top},{left}) exceeds {th}×{tw}"
        )));
    }
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let p = t.plane(ch);
        for y in 0..h {
            out.extend_from_slice(&p[(top + y) * tw + left..(top + y) * tw + left + w]);
        }
    }
    Ok(raster(c, h, w, out))
}

pub fn hflip(t: &Tensor) -> Tensor {
    let (c, h, w) = dims(t);
    let mut out = Vec::with_capacity(t.numel());
    for ch in 0..c {
        let p = t.plane(ch);
        for y in 0..h {
            out.extend(p[y * w..(y + 1) * w].iter().rev());
        }
    }
    raster(c, h, w, out)
}

pub fn vflip(t: &Tensor) -> Tensor {
    let (c, h, w) = dims(t);
    let mut out = Vec::with_capacity(t.numel());
    for ch in 0..c {
        let p = t.plane(ch);
        for y in (0..h).rev() {
            out.extend_from_slice(&p[y * w..(y + 1) * w]);
        }
    }
    raster(c, h, w, out)
}

/// Rotates counter-clockwise by `degrees` about the centre, zero fill.
pub fn rotate(t: &Tensor, degrees: f64, interp: Interp) -> Tensor {
    if degrees == 0.0 {
        return t.clone();
    }
    let (c, h, w) = dims(t);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let at = |p: &[f64], y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            p[y as usize * w + x as usize]
        }
    };
    let mut out = Vec::with_capacity(t.numel());
    for ch in 0..c {
        let p = t.plane(ch);
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                // inverse map of a counter-clockwise turn in image coordinates
                let sx = cos * dx - sin * dy + cx;
                let sy = sin * dx + cos * dy + cy;
                out.push(match interp {
                    Interp::Nearest => at(p, sy.round() as isize, sx.round() as isize),
                    Interp::Bilinear => {
                        let x0 = sx.floor();
                        let y0 = sy.floor();
                        let (tx, ty) = (sx - x0, sy - y0);
                        let (x0, y0) = (x0 as isize, y0 as isize);
                        let top = at(p, y0, x0) * (1.0 - tx) + at(p, y0, x0 + 1) * tx;
                        let bot = at(p, y0 + 1, x0) * (1.0 - tx) + at(p, y0 + 1, x0 + 1) * tx;
                        top * (1.0 - ty) + bot * ty
                    }
                });
            }
        }
    }
    raster(c, h, w, out)
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(t: &Tensor, kernel: usize, sigma: f64) -> Result<Tensor> {
    if kernel.is_multiple_of(2) {
        return Err(CmcError::Geometry(format!("blur kernel {kernel} must be odd")));
    }
    if !(sigma > 0.0) {
        return Err(CmcError::Domain(format!("blur sigma must be positive, got {sigma}")));
    }
    let (c, h, w) = dims(t);
    let r = (kernel / 2) as isize;
    let mut weights: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= total);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = Vec::with_capacity(t.numel());
    let mut tmp = vec![0.0; h * w];
    for ch in 0..c {
        let p = t.plane(ch);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = (-r..=r)
                    .zip(&weights)
                    .map(|(d, k)| k * p[y * w + clamp(x as isize + d, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out.push(
                    (-r..=r)
                        .zip(&weights)
                        .map(|(d, k)| k * tmp[clamp(y as isize + d, h) * w + x])
                        .sum(),
                );
            }
        }
    }
    Ok(raster(c, h, w, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[c, h, w], |i| (i as f64 * 0.37).sin())
    }

    #[test]
    fn flips_are_involutions() {
        let t = ramp(2, 5, 7);
        assert_eq!(hflip(&hflip(&t)), t);
        assert_eq!(vflip(&vflip(&t)), t);
        assert_ne!(hflip(&t), t);
    }

    #[test]
    fn identity_resize_and_rotation() {
        let t = ramp(3, 6, 6);
        assert_eq!(resize(&t, 6, 6, Interp::Bilinear), t);
        assert_eq!(rotate(&t, 0.0, Interp::Bilinear), t);
        let r = rotate(&t, 360.0, Interp::Bilinear);
        let err = r.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn quarter_turn_moves_a_marker() {
        let mut t = Tensor::zeros(&[1, 5, 5]);
        t.data_mut()[2] = 1.0; // (0,2): top centre
        let r = rotate(&t, 90.0, Interp::Nearest);
        let idx = r.data().iter().position(|&v| v == 1.0).unwrap();
        // counter-clockwise: top centre goes to left centre
        assert_eq!((idx / 5, idx % 5), (2, 0));
    }

    #[test]
    fn constant_survives_resize() {
        let t = Tensor::filled(&[1, 4, 4], 0.7);
        let r = resize(&t, 9, 5, Interp::Bilinear);
        assert!(r.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn nearest_resize_keeps_masks_binary() {
        let t = Tensor::from_fn(&[1, 8, 8], |i| ((i / 3) % 2) as f64);
        let r = resize(&t, 11, 13, Interp::Nearest);
        assert!(r.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn crop_bounds() {
        let t = ramp(1, 4, 4);
        assert!(crop(&t, 1, 1, 4, 2).is_err());
        let c = crop(&t, 1, 2, 2, 2).unwrap();
        assert_eq!(c.data()[0], t.data()[6]);
    }

    #[test]
    fn blur_preserves_constants_and_mass_direction() {
        let t = Tensor::filled(&[2, 6, 6], 3.0);
        let b = gaussian_blur(&t, 5, 1.0).unwrap();
        assert!(b.data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
        assert!(gaussian_blur(&t, 4, 1.0).is_err());
    }
}
