//! Weak (geometric) and strong (geometric + photometric) augmentation.
//!
//! One [`GeoTransform`] is applied to an image and all its label maps, so labels
//! computed on the weak view stay pixel-aligned with the strong view.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{AlphaMatte, BoundaryMask, Grid, RgbImage, SegMask};
use crate::resample::{resize_grid_nearest, resize_matte, resize_rgb};
use crate::tensor::reflect_index;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop_min: usize,
    pub crop_max: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub hflip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_min: 512,
            crop_max: 768,
            scale_min: 0.75,
            scale_max: 1.25,
            hflip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_min == 0 || self.crop_min > self.crop_max {
            return Err(Error::config("augment.crop_min", "need 0 < crop_min <= crop_max"));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::config("augment.scale_min", "need 0 < scale_min <= scale_max"));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::config("augment.hflip_prob", "must lie in [0, 1]"));
        }
        for (key, v) in [
            ("augment.brightness", self.brightness),
            ("augment.contrast", self.contrast),
            ("augment.saturation", self.saturation),
            ("augment.hue", self.hue),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "jitter bound must be finite and >= 0"));
            }
        }
        Ok(())
    }

    pub fn jitter_bounds(&self) -> PhotoJitter {
        PhotoJitter {
            brightness: self.brightness,
            contrast: self.contrast,
            saturation: self.saturation,
            hue: self.hue,
        }
    }
}

/// Scale, then square crop (reflection-padded when the scaled image is smaller), then optional flip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub scale: f64,
    /// `(x, y)` of the crop's top-left corner in the scaled (and padded) image.
    pub crop_origin: (usize, usize),
    pub crop_size: usize,
    pub hflip: bool,
}

impl GeoTransform {
    /// The transform that leaves a square `side x side` image untouched.
    pub fn identity(side: usize) -> Self {
        Self {
            scale: 1.0,
            crop_origin: (0, 0),
            crop_size: side,
            hflip: false,
        }
    }

    fn scaled_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let s = |v: usize| ((v as f64 * self.scale).round() as usize).max(1);
        (s(h), s(w))
    }
}

pub fn sample_geo<R: Rng>(rng: &mut R, dims: (usize, usize), crop_range: (usize, usize), scale_range: (f64, f64), hflip_prob: f64) -> GeoTransform {
    let side = rng.gen_range(crop_range.0..=crop_range.1);
    let scale = if scale_range.0 == scale_range.1 {
        scale_range.0
    } else {
        rng.gen_range(scale_range.0..=scale_range.1)
    };
    let mut t = GeoTransform {
        scale,
        crop_origin: (0, 0),
        crop_size: side,
        hflip: false,
    };
    let (sh, sw) = t.scaled_dims(dims.0, dims.1);
    let x = rng.gen_range(0..=sw.max(side) - side);
    let y = rng.gen_range(0..=sh.max(side) - side);
    t.crop_origin = (x, y);
    t.hflip = rng.gen::<f64>() < hflip_prob;
    t
}

/// A label map carried through the geometric transform.
#[derive(Clone, Debug, PartialEq)]
pub enum LabelMap {
    Matte(AlphaMatte),
    Seg(SegMask),
    Boundary(BoundaryMask),
}

impl LabelMap {
    fn dims(&self) -> (usize, usize) {
        match self {
            LabelMap::Matte(m) => m.dims(),
            LabelMap::Seg(m) => m.dims(),
            LabelMap::Boundary(m) => m.dims(),
        }
    }
}

fn gather<T: Copy>(t: &GeoTransform, scaled: &Grid<T>) -> Grid<T> {
    let (sh, sw) = scaled.dims();
    let n = t.crop_size;
    let (x0, y0) = t.crop_origin;
    Grid::from_fn(n, n, |y, x| {
        let cx = if t.hflip { n - 1 - x } else { x };
        let sy = reflect_index((y0 + y) as isize, sh);
        let sx = reflect_index((x0 + cx) as isize, sw);
        scaled.get(sy, sx)
    })
}

fn geo_mask(t: &GeoTransform, g: &Grid<u8>) -> Grid<u8> {
    let (sh, sw) = t.scaled_dims(g.height(), g.width());
    gather(t, &resize_grid_nearest(g, sh, sw))
}

/// Applies `t` to the image (bilinear) and every label (bilinear for mattes,
/// nearest for masks).
pub fn apply_geo(t: &GeoTransform, image: &RgbImage, labels: &[LabelMap]) -> Result<(RgbImage, Vec<LabelMap>)> {
    let (h, w) = image.dims();
    for l in labels {
        if l.dims() != (h, w) {
            return Err(Error::DimensionMismatch {
                expected: (h, w),
                got: l.dims(),
            });
        }
    }
    let (sh, sw) = t.scaled_dims(h, w);
    let scaled = resize_rgb(image, sh, sw);
    let planes: Vec<Grid<f64>> = (0..3)
        .map(|c| gather(t, &Grid::new(sh, sw, scaled.channel(c).to_vec()).expect("non-empty")))
        .collect();
    let n = t.crop_size;
    let out = RgbImage::from_fn_clamped(n, n, |y, x| [planes[0].get(y, x), planes[1].get(y, x), planes[2].get(y, x)]);
    let labels = labels
        .iter()
        .map(|l| match l {
            LabelMap::Matte(m) => {
                let g = gather(t, resize_matte(m, sh, sw).grid());
                LabelMap::Matte(AlphaMatte::from_fn_clamped(n, n, |y, x| g.get(y, x)))
            }
            LabelMap::Seg(m) => LabelMap::Seg(SegMask::from_grid(geo_mask(t, m.grid())).expect("binary in, binary out")),
            LabelMap::Boundary(m) => LabelMap::Boundary(BoundaryMask::from_grid(geo_mask(t, m.grid())).expect("binary in, binary out")),
        })
        .collect();
    Ok((out, labels))
}

/// Photometric deltas. Applied in order: brightness `x + b`; contrast
/// `m + (x - m)(1 + c)` with `m` the mean luma; saturation `g + (x - g)(1 + s)`
/// with `g` the pixel luma; hue rotation by `h` turns. Each step clamps to `[0, 1]`
/// and is skipped when its delta is zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhotoJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

/// Draws each delta uniformly from `[-bound, bound]`.
pub fn sample_jitter<R: Rng>(rng: &mut R, bounds: &PhotoJitter) -> PhotoJitter {
    let mut draw = |b: f64| if b > 0.0 { rng.gen_range(-b..=b) } else { 0.0 };
    PhotoJitter {
        brightness: draw(bounds.brightness),
        contrast: draw(bounds.contrast),
        saturation: draw(bounds.saturation),
        hue: draw(bounds.hue),
    }
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn rotate_hue(p: [f64; 3], turns: f64) -> [f64; 3] {
    let [r, g, b] = p;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d == 0.0 {
        return p;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    let h = (h / 6.0 + turns).rem_euclid(1.0) * 6.0;
    let s = d / max;
    let c = max * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r1, g1, b1) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = max - c;
    [r1 + m, g1 + m, b1 + m]
}

pub fn apply_photo(j: &PhotoJitter, image: &RgbImage) -> RgbImage {
    let (h, w) = image.dims();
    let mut px: Vec<[f64; 3]> = (0..h * w).map(|i| image.pixel(i / w, i % w)).collect();
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    if j.brightness != 0.0 {
        for p in &mut px {
            *p = p.map(|v| clamp(v + j.brightness));
        }
    }
    if j.contrast != 0.0 {
        let mean = px.iter().map(|&p| luma(p)).sum::<f64>() / px.len() as f64;
        for p in &mut px {
            *p = p.map(|v| clamp(mean + (v - mean) * (1.0 + j.contrast)));
        }
    }
    if j.saturation != 0.0 {
        for p in &mut px {
            let g = luma(*p);
            *p = p.map(|v| clamp(g + (v - g) * (1.0 + j.saturation)));
        }
    }
    if j.hue != 0.0 {
        for p in &mut px {
            *p = rotate_hue(*p, j.hue).map(clamp);
        }
    }
    RgbImage::from_fn_clamped(h, w, |y, x| px[y * w + x])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;

    fn ramp(n: usize) -> RgbImage {
        RgbImage::from_fn_clamped(n, n, |y, x| [y as f64 / n as f64, x as f64 / n as f64, 0.3])
    }

    #[test]
    fn identity_leaves_inputs_unchanged() {
        let img = ramp(6);
        let m = AlphaMatte::from_fn_clamped(6, 6, |y, _| y as f64 / 5.0);
        let (out, labels) = apply_geo(&GeoTransform::identity(6), &img, &[LabelMap::Matte(m.clone())]).unwrap();
        assert_eq!(out, img);
        assert_eq!(labels[0], LabelMap::Matte(m));
    }

    #[test]
    fn double_flip_is_identity() {
        let img = ramp(5);
        let t = GeoTransform {
            hflip: true,
            ..GeoTransform::identity(5)
        };
        let (once, _) = apply_geo(&t, &img, &[]).unwrap();
        assert_ne!(once, img);
        let (twice, _) = apply_geo(&t, &once, &[]).unwrap();
        assert_eq!(twice, img);
    }

    #[test]
    fn small_images_are_padded() {
        let img = ramp(4);
        let t = GeoTransform {
            scale: 1.0,
            crop_origin: (0, 0),
            crop_size: 6,
            hflip: false,
        };
        let (out, _) = apply_geo(&t, &img, &[]).unwrap();
        assert_eq!(out.dims(), (6, 6));
        assert_eq!(out.pixel(4, 0), img.pixel(2, 0));
    }

    #[test]
    fn mismatched_labels_are_rejected() {
        let r = apply_geo(&GeoTransform::identity(4), &ramp(4), &[LabelMap::Seg(SegMask::from_fn(3, 4, |_, _| true))]);
        assert!(r.is_err());
    }

    #[test]
    fn fixed_crop_range_and_replay() {
        let a = sample_geo(&mut rng_for(3, &[]), (100, 80), (64, 64), (0.75, 1.25), 0.5);
        let b = sample_geo(&mut rng_for(3, &[]), (100, 80), (64, 64), (0.75, 1.25), 0.5);
        assert_eq!(a, b);
        assert_eq!(a.crop_size, 64);
    }

    #[test]
    fn brightness_oracle() {
        let img = RgbImage::filled(2, 2, [0.5; 3]);
        let j = PhotoJitter {
            brightness: 0.1,
            ..Default::default()
        };
        for v in apply_photo(&j, &img).values() {
            assert!((v - 0.6).abs() < 1e-12);
        }
        assert_eq!(apply_photo(&PhotoJitter::default(), &ramp(3)), ramp(3));
    }

    #[test]
    fn hue_full_turn_round_trips() {
        let p = [0.8, 0.3, 0.1];
        let q = rotate_hue(p, 1.0);
        for c in 0..3 {
            assert!((p[c] - q[c]).abs() < 1e-12);
        }
    }
}
