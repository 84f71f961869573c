//! Label-preserving geometric and occlusion augmentation of `[C, H, W]`
//! images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub rot90_prob: f64,
    pub erase_prob: f64,
    /// Erased area as a fraction of the image.
    pub erase_area: (f64, f64),
    /// Erased rectangle height / width.
    pub erase_aspect: (f64, f64),
    pub scale_prob: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rot90_prob: 0.5,
            erase_prob: 0.5,
            erase_area: (0.02, 0.2),
            erase_aspect: (0.3, 3.3),
            scale_prob: 0.5,
            scale_range: (0.9, 1.1),
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

fn dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::shape("augment", format!("expected [C, H, W], got {s:?}"))),
    }
}

fn remap(image: &Tensor, f: impl Fn(usize, usize) -> (usize, usize)) -> Tensor {
    let (c, h, w) = dims(image).expect("checked by caller");
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = f(y, x);
                out[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).unwrap()
}

pub fn hflip(image: &Tensor) -> Tensor {
    let w = image.shape()[2];
    remap(image, |y, x| (y, w - 1 - x))
}

pub fn vflip(image: &Tensor) -> Tensor {
    let h = image.shape()[1];
    remap(image, |y, x| (h - 1 - y, x))
}

/// Counter-clockwise quarter turn of a square image.
pub fn rot90(image: &Tensor) -> Tensor {
    let w = image.shape()[2];
    remap(image, |y, x| (x, w - 1 - y))
}

/// Zeroes a `rect_h × rect_w` rectangle with top-left corner `(top, left)`.
pub fn erase(image: &Tensor, top: usize, left: usize, rect_h: usize, rect_w: usize) -> Tensor {
    let (c, h, w) = dims(image).expect("checked by caller");
    let mut out = image.clone();
    let data = out.data_mut();
    for ch in 0..c {
        for y in top..(top + rect_h).min(h) {
            for x in left..(left + rect_w).min(w) {
                data[(ch * h + y) * w + x] = 0.0;
            }
        }
    }
    out
}

/// Bilinear zoom by `factor` about the image center, then center-crop or
/// zero-pad back to the original size.
pub fn rescale(image: &Tensor, factor: f64) -> Tensor {
    let (c, h, w) = dims(image).expect("checked by caller");
    let src = image.data();
    let new_h = ((h as f64 * factor).round() as usize).max(1);
    let new_w = ((w as f64 * factor).round() as usize).max(1);
    let off_y = (h as f64 - new_h as f64) / 2.0;
    let off_x = (w as f64 - new_w as f64) / 2.0;
    let (fy, fx) = (new_h as f64 / h as f64, new_w as f64 / w as f64);
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        let ry = y as f64 - off_y.round();
        if ry < 0.0 || ry >= new_h as f64 {
            continue;
        }
        let sy = ((ry + 0.5) / fy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, ty) = (sy.floor() as usize, sy - sy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..w {
            let rx = x as f64 - off_x.round();
            if rx < 0.0 || rx >= new_w as f64 {
                continue;
            }
            let sx = ((rx + 0.5) / fx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, tx) = (sx.floor() as usize, sx - sx.floor());
            let x1 = (x0 + 1).min(w - 1);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(ch * h + yy) * w + xx];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out[(ch * h + y) * w + x] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).unwrap()
}

/// Erasing rectangle `(top, left, height, width)` drawn from the configured
/// area and aspect ranges.
pub fn sample_erase_rect<R: Rng + ?Sized>(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut R) -> (usize, usize, usize, usize) {
    let area = rng.random_range(cfg.erase_area.0..=cfg.erase_area.1) * (h * w) as f64;
    let aspect = rng.random_range(cfg.erase_aspect.0..=cfg.erase_aspect.1);
    let rh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let rw = ((area / aspect).sqrt().round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    (top, left, rh, rw)
}

/// Applies each enabled transform with its own probability, in the order
/// horizontal flip, vertical flip, quarter turn, rescale, erase.
pub fn augment<R: Rng + ?Sized>(image: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor> {
    let (_, h, w) = dims(image)?;
    if !cfg.enabled {
        return Ok(image.clone());
    }
    if cfg.rot90_prob > 0.0 && h != w {
        return Err(Error::shape("augment", format!("quarter turns need square images, got {h}x{w}")));
    }
    let mut out = image.clone();
    if rng.random_bool(cfg.hflip_prob) {
        out = hflip(&out);
    }
    if rng.random_bool(cfg.vflip_prob) {
        out = vflip(&out);
    }
    if rng.random_bool(cfg.rot90_prob) {
        out = rot90(&out);
    }
    if rng.random_bool(cfg.scale_prob) {
        let f = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
        out = rescale(&out, f);
    }
    if rng.random_bool(cfg.erase_prob) {
        let (top, left, rh, rw) = sample_erase_rect(cfg, h, w, rng);
        out = erase(&out, top, left, rh, rw);
    }
    Ok(out)
}
