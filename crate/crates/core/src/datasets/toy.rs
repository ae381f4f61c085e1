//! Procedural two-domain world: soft-edged figures with hair-like strands,
//! flat/gradient backgrounds for the matte domain and busy textures for the
//! natural domain.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_matte_png, write_rgb_png, write_seg_png, IMAGES_DIR, LABELS_DIR};
use crate::error::{Error, Result};
use crate::labels::{composite, extract_boundary, AlphaMatte, RgbImage, SegMask};
use crate::seeding::{rng_for, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    /// Foreground + matte pairs of the matte domain.
    pub n_matte: usize,
    /// Natural-domain images with coarse segmentation labels.
    pub n_seg: usize,
    /// Images in each held-out evaluation set.
    pub n_eval: usize,
    /// Flat/gradient backgrounds used for compositing.
    pub n_backgrounds: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Required gap between the mean local variance of textured and plain backgrounds.
    pub variance_margin: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_matte: 64,
            n_seg: 256,
            n_eval: 32,
            n_backgrounds: 64,
            image_size: 128,
            seed: 0,
            variance_margin: 0.002,
        }
    }
}

/// Paths written by [`generate_toy_world`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyWorld {
    pub matte_dir: PathBuf,
    pub backgrounds_dir: PathBuf,
    pub natural_dir: PathBuf,
    /// `(name, dir)` of the two evaluation sets.
    pub eval_dirs: Vec<(String, PathBuf)>,
}

pub const MATTE_DOMAIN: &str = "matte_domain";
pub const NATURAL_DOMAIN: &str = "natural_domain";

impl ToyWorld {
    pub fn at(root: &Path) -> Self {
        Self {
            matte_dir: root.join("matte"),
            backgrounds_dir: root.join("backgrounds"),
            natural_dir: root.join("natural"),
            eval_dirs: vec![
                (MATTE_DOMAIN.to_string(), root.join("eval").join(MATTE_DOMAIN)),
                (NATURAL_DOMAIN.to_string(), root.join("eval").join(NATURAL_DOMAIN)),
            ],
        }
    }

    fn owned_dirs(&self, root: &Path) -> [PathBuf; 4] {
        [
            self.matte_dir.clone(),
            self.backgrounds_dir.clone(),
            self.natural_dir.clone(),
            root.join("eval"),
        ]
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Cool hues or greys: never close to the warm figure palette.
fn plain_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    if rng.gen::<f64>() < 0.3 {
        let v = uniform(rng, 0.2, 0.95);
        hsv(0.0, uniform(rng, 0.0, 0.15), v)
    } else {
        hsv(uniform(rng, 0.3, 0.85), uniform(rng, 0.2, 0.9), uniform(rng, 0.3, 0.95))
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    /// Approximate signed distance in pixels (negative inside).
    fn distance(&self, y: f64, x: f64) -> f64 {
        let ny = (y - self.cy) / self.ry;
        let nx = (x - self.cx) / self.rx;
        ((ny * ny + nx * nx).sqrt() - 1.0) * self.ry.min(self.rx)
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0)
    };
    let (qy, qx) = (a.0 + t * dy - p.0, a.1 + t * dx - p.1);
    (qy * qy + qx * qx).sqrt()
}

/// Foreground colours and exact matte of one figure.
pub(crate) fn render_figure(rng: &mut ChaCha8Rng, size: usize) -> (RgbImage, AlphaMatte) {
    let s = size as f64;
    let head = Ellipse {
        cy: uniform(rng, 0.28, 0.45) * s,
        cx: uniform(rng, 0.35, 0.65) * s,
        ry: uniform(rng, 0.12, 0.18) * s,
        rx: uniform(rng, 0.10, 0.15) * s,
    };
    let torso = Ellipse {
        cy: s * uniform(rng, 0.95, 1.1),
        cx: head.cx + uniform(rng, -0.08, 0.08) * s,
        ry: uniform(rng, 0.35, 0.45) * s,
        rx: uniform(rng, 0.25, 0.38) * s,
    };
    let softness = uniform(rng, 1.5, 4.0);

    let veil = (rng.gen::<f64>() < 0.6).then(|| {
        let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let e = Ellipse {
            cy: head.cy + uniform(rng, 0.05, 0.3) * s,
            cx: head.cx + side * uniform(rng, 0.15, 0.3) * s,
            ry: uniform(rng, 0.08, 0.16) * s,
            rx: uniform(rng, 0.06, 0.12) * s,
        };
        (e, uniform(rng, 0.2, 0.8), hsv(rng.gen(), uniform(rng, 0.1, 0.5), uniform(rng, 0.7, 1.0)))
    });

    // strands start on the upper half of the head outline and wander outward
    let n_strands = rng.gen_range(6..=14);
    let mut strands = Vec::with_capacity(n_strands);
    for _ in 0..n_strands {
        let theta = uniform(rng, -std::f64::consts::PI, 0.0);
        let mut p = (head.cy + head.ry * theta.sin() * 0.95, head.cx + head.rx * theta.cos() * 0.95);
        let mut dir = theta + uniform(rng, -0.4, 0.4);
        let n_seg = rng.gen_range(4..=10);
        let mut pts = vec![p];
        for _ in 0..n_seg {
            dir += uniform(rng, -0.35, 0.35);
            let step = uniform(rng, 1.5, 3.0) * s / 128.0;
            p = (p.0 + step * dir.sin(), p.1 + step * dir.cos());
            pts.push(p);
        }
        strands.push((pts, uniform(rng, 1.2, 2.2), uniform(rng, 0.6, 0.95)));
    }

    let body_hue = uniform(rng, 0.0, 0.12);
    let body_top = hsv(body_hue, uniform(rng, 0.45, 0.8), uniform(rng, 0.6, 0.95));
    let body_bottom = hsv(body_hue + uniform(rng, -0.03, 0.03), uniform(rng, 0.45, 0.8), uniform(rng, 0.45, 0.75));
    let hair = hsv(uniform(rng, 0.0, 0.12), uniform(rng, 0.3, 0.8), uniform(rng, 0.04, 0.2));

    let mut alpha = vec![0.0; size * size];
    let mut fg = vec![[0.0; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let d = head.distance(py, px).min(torso.distance(py, px));
            let mut a = (0.5 - d / (2.0 * softness)).clamp(0.0, 1.0);
            let t = py / s;
            let mut color = [0, 1, 2].map(|c| body_top[c] * (1.0 - t) + body_bottom[c] * t);
            if let Some((e, opacity, vc)) = &veil {
                let av = (0.5 - e.distance(py, px) / (2.0 * softness)).clamp(0.0, 1.0) * opacity;
                if av > a {
                    a = av;
                    color = *vc;
                }
            }
            alpha[y * size + x] = a;
            fg[y * size + x] = color;
        }
    }
    for (pts, width, peak) in &strands {
        let (mut y0, mut y1, mut x0, mut x1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in pts {
            y0 = y0.min(p.0);
            y1 = y1.max(p.0);
            x0 = x0.min(p.1);
            x1 = x1.max(p.1);
        }
        let ys = (y0 - 2.0).floor().max(0.0) as usize..((y1 + 2.0).ceil().max(0.0) as usize).min(size);
        for y in ys {
            let xs = (x0 - 2.0).floor().max(0.0) as usize..((x1 + 2.0).ceil().max(0.0) as usize).min(size);
            for x in xs {
                let p = (y as f64 + 0.5, x as f64 + 0.5);
                let d = pts
                    .windows(2)
                    .map(|w| segment_distance(p, w[0], w[1]))
                    .fold(f64::MAX, f64::min);
                let a = peak * (1.0 - d / width).clamp(0.0, 1.0);
                let i = y * size + x;
                if a > alpha[i] {
                    alpha[i] = a;
                    fg[i] = hair;
                }
            }
        }
    }
    let fg_img = RgbImage::from_fn_clamped(size, size, |y, x| fg[y * size + x]);
    let matte = AlphaMatte::from_fn_clamped(size, size, |y, x| alpha[y * size + x]);
    (fg_img, matte)
}

/// Flat colour or a linear two-colour gradient.
pub(crate) fn plain_background(rng: &mut ChaCha8Rng, size: usize) -> RgbImage {
    let c0 = plain_color(rng);
    if rng.gen::<bool>() {
        return RgbImage::filled(size, size, c0);
    }
    let c1 = plain_color(rng);
    let angle = uniform(rng, 0.0, std::f64::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let s = size as f64;
    RgbImage::from_fn_clamped(size, size, |y, x| {
        let t = (((y as f64 / s - 0.5) * dy + (x as f64 / s - 0.5) * dx) + 0.71) / 1.42;
        [0, 1, 2].map(|c| c0[c] * (1.0 - t) + c1[c] * t)
    })
}

/// Sum of high-frequency gratings, checkerboards and blocky noise.
pub(crate) fn textured_background(rng: &mut ChaCha8Rng, size: usize) -> RgbImage {
    let base = random_color(rng);
    let mut img = vec![base; size * size];
    let layers = rng.gen_range(2..=4);
    for _ in 0..layers {
        let color = random_color(rng);
        let strength = uniform(rng, 0.3, 0.8);
        match rng.gen_range(0..3) {
            0 => {
                let period = uniform(rng, 3.0, 10.0);
                let angle = uniform(rng, 0.0, std::f64::consts::PI);
                let (dy, dx) = (angle.sin(), angle.cos());
                let phase = uniform(rng, 0.0, std::f64::consts::TAU);
                for y in 0..size {
                    for x in 0..size {
                        let v = ((y as f64 * dy + x as f64 * dx) / period * std::f64::consts::TAU + phase).sin();
                        let w = strength * 0.5 * (1.0 + v);
                        let px = &mut img[y * size + x];
                        for c in 0..3 {
                            px[c] = px[c] * (1.0 - w) + color[c] * w;
                        }
                    }
                }
            }
            1 => {
                let cell = rng.gen_range(3..=8);
                for y in 0..size {
                    for x in 0..size {
                        if (y / cell + x / cell) % 2 == 0 {
                            let px = &mut img[y * size + x];
                            for c in 0..3 {
                                px[c] = px[c] * (1.0 - strength) + color[c] * strength;
                            }
                        }
                    }
                }
            }
            _ => {
                let cell = rng.gen_range(2..=5);
                let cells = size.div_ceil(cell);
                let noise: Vec<f64> = (0..cells * cells).map(|_| rng.gen()).collect();
                for y in 0..size {
                    for x in 0..size {
                        let w = strength * noise[(y / cell) * cells + x / cell];
                        let px = &mut img[y * size + x];
                        for c in 0..3 {
                            px[c] = px[c] * (1.0 - w) + color[c] * w;
                        }
                    }
                }
            }
        }
    }
    RgbImage::from_fn_clamped(size, size, |y, x| img[y * size + x])
}

/// Mean over interior pixels of the 3x3 variance of luma.
pub fn mean_local_variance(img: &RgbImage) -> f64 {
    let (h, w) = img.dims();
    if h < 3 || w < 3 {
        return 0.0;
    }
    let luma: Vec<f64> = (0..h * w)
        .map(|i| {
            let p = img.pixel(i / w, i % w);
            0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
        })
        .collect();
    let mut total = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let (mut s, mut s2) = (0.0, 0.0);
            for dy in 0..3 {
                for dx in 0..3 {
                    let v = luma[(y + dy - 1) * w + x + dx - 1];
                    s += v;
                    s2 += v * v;
                }
            }
            let m = s / 9.0;
            total += s2 / 9.0 - m * m;
        }
    }
    total / ((h - 2) * (w - 2)) as f64
}

/// Binary dilation (`radius > 0`) or erosion (`radius < 0`) with a disk;
/// pixels outside the image are ignored.
pub fn coarsen_mask(mask: &SegMask, radius: i32) -> SegMask {
    let (h, w) = mask.dims();
    let r = radius.abs();
    let offsets: Vec<(i32, i32)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let dilate = radius > 0;
    SegMask::from_fn(h, w, |y, x| {
        let mut neighbours = offsets.iter().filter_map(|&(dy, dx)| {
            let (ny, nx) = (y as i32 + dy, x as i32 + dx);
            (ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w).then(|| mask.get(ny as usize, nx as usize))
        });
        if dilate {
            neighbours.any(|v| v)
        } else {
            neighbours.all(|v| v)
        }
    })
}

fn binarize(matte: &AlphaMatte) -> SegMask {
    let (h, w) = matte.dims();
    SegMask::from_fn(h, w, |y, x| matte.get(y, x) >= 0.5)
}

fn coarse_seg(rng: &mut ChaCha8Rng, matte: &AlphaMatte) -> SegMask {
    let radius = rng.gen_range(1..=3);
    let signed = if rng.gen::<bool>() { radius } else { -radius };
    coarsen_mask(&binarize(matte), signed)
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGES_DIR))?;
    fs::create_dir_all(dir.join(LABELS_DIR))?;
    Ok(())
}

fn figure_with_band(rng: &mut ChaCha8Rng, size: usize) -> (RgbImage, AlphaMatte) {
    loop {
        let (fg, matte) = render_figure(rng, size);
        if extract_boundary(&matte).count_ones() > 0 {
            return (fg, matte);
        }
    }
}

/// Writes the matte domain, its plain backgrounds, the natural domain and both
/// evaluation sets under `out`.
pub fn generate_toy_world(out: &Path, cfg: &ToyConfig, overwrite: bool) -> Result<ToyWorld> {
    for (key, n) in [
        ("toy.n_matte", cfg.n_matte),
        ("toy.n_seg", cfg.n_seg),
        ("toy.n_eval", cfg.n_eval),
        ("toy.n_backgrounds", cfg.n_backgrounds),
    ] {
        if n == 0 {
            return Err(Error::config(key, "count must be positive"));
        }
    }
    if cfg.image_size < 16 {
        return Err(Error::config("toy.image_size", "must be at least 16"));
    }
    let world = ToyWorld::at(out);
    let non_empty = out.is_dir() && fs::read_dir(out)?.next().is_some();
    if non_empty {
        if !overwrite {
            return Err(Error::OutputExists(out.to_path_buf()));
        }
        for d in world.owned_dirs(out) {
            if d.exists() {
                fs::remove_dir_all(&d)?;
            }
        }
    }
    let size = cfg.image_size;
    let seed = cfg.seed;

    prepare_dir(&world.matte_dir)?;
    for i in 0..cfg.n_matte {
        let (fg, matte) = figure_with_band(&mut rng_for(seed, &[tag("matte"), i as u64]), size);
        let id = format!("m{i:05}");
        write_rgb_png(&world.matte_dir.join(IMAGES_DIR).join(format!("{id}.png")), &fg)?;
        write_matte_png(&world.matte_dir.join(LABELS_DIR).join(format!("{id}.png")), &matte)?;
    }

    fs::create_dir_all(world.backgrounds_dir.join(IMAGES_DIR))?;
    let mut plain_var = 0.0;
    for i in 0..cfg.n_backgrounds {
        let bg = plain_background(&mut rng_for(seed, &[tag("plain"), i as u64]), size);
        plain_var += mean_local_variance(&bg);
        write_rgb_png(&world.backgrounds_dir.join(IMAGES_DIR).join(format!("bg{i:05}.png")), &bg)?;
    }
    plain_var /= cfg.n_backgrounds as f64;

    prepare_dir(&world.natural_dir)?;
    let mut textured_var = 0.0;
    for i in 0..cfg.n_seg {
        let mut rng = rng_for(seed, &[tag("natural"), i as u64]);
        let (fg, matte) = figure_with_band(&mut rng, size);
        let bg = textured_background(&mut rng, size);
        textured_var += mean_local_variance(&bg);
        let img = composite(&fg, &bg, &matte)?;
        let seg = coarse_seg(&mut rng, &matte);
        let id = format!("n{i:05}");
        write_rgb_png(&world.natural_dir.join(IMAGES_DIR).join(format!("{id}.png")), &img)?;
        write_seg_png(&world.natural_dir.join(LABELS_DIR).join(format!("{id}.png")), &seg)?;
    }
    textured_var /= cfg.n_seg as f64;
    if textured_var - plain_var < cfg.variance_margin {
        return Err(Error::config(
            "toy.variance_margin",
            format!("textured backgrounds ({textured_var:.5}) do not exceed plain ones ({plain_var:.5}) by the margin"),
        ));
    }

    for (name, dir) in &world.eval_dirs {
        prepare_dir(dir)?;
        let textured = name == NATURAL_DOMAIN;
        for i in 0..cfg.n_eval {
            let mut rng = rng_for(seed, &[tag("eval"), tag(name), i as u64]);
            let (fg, matte) = figure_with_band(&mut rng, size);
            let bg = if textured {
                textured_background(&mut rng, size)
            } else {
                plain_background(&mut rng, size)
            };
            let img = composite(&fg, &bg, &matte)?;
            let id = format!("e{i:05}");
            write_rgb_png(&dir.join(IMAGES_DIR).join(format!("{id}.png")), &img)?;
            write_matte_png(&dir.join(LABELS_DIR).join(format!("{id}.png")), &matte)?;
        }
    }
    Ok(world)
}
