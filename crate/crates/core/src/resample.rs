//! Half-pixel-centred bilinear and nearest-neighbour resampling of pixel grids.

use crate::labels::{AlphaMatte, Grid, RgbImage};

/// Source taps for one axis of a bilinear resize from `src` to `dst` samples.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTaps {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for i in 0..dst {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let l = (pos.floor() as usize).min(src - 1);
            let h = (l + 1).min(src - 1);
            lo.push(l);
            hi.push(h);
            frac.push(pos - l as f64);
        }
        Self { lo, hi, frac }
    }
}

fn resize_plane(src: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    if (h, w) == (ho, wo) {
        return src.to_vec();
    }
    let ty = AxisTaps::new(h, ho);
    let tx = AxisTaps::new(w, wo);
    let mut out = Vec::with_capacity(ho * wo);
    for oy in 0..ho {
        let fy = ty.frac[oy];
        let r0 = &src[ty.lo[oy] * w..(ty.lo[oy] + 1) * w];
        let r1 = &src[ty.hi[oy] * w..(ty.hi[oy] + 1) * w];
        for ox in 0..wo {
            let fx = tx.frac[ox];
            let (x0, x1) = (tx.lo[ox], tx.hi[ox]);
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    out
}

pub fn resize_grid_bilinear(g: &Grid<f64>, ho: usize, wo: usize) -> Grid<f64> {
    let data = resize_plane(g.values(), g.height(), g.width(), ho, wo);
    Grid::new(ho, wo, data).expect("positive target size")
}

pub fn resize_matte(m: &AlphaMatte, ho: usize, wo: usize) -> AlphaMatte {
    let g = resize_grid_bilinear(m.grid(), ho, wo);
    AlphaMatte::from_fn_clamped(ho, wo, |y, x| g.get(y, x))
}

pub fn resize_rgb(img: &RgbImage, ho: usize, wo: usize) -> RgbImage {
    let (h, w) = img.dims();
    let planes: Vec<Vec<f64>> = (0..3).map(|c| resize_plane(img.channel(c), h, w, ho, wo)).collect();
    RgbImage::from_fn_clamped(ho, wo, |y, x| {
        let i = y * wo + x;
        [planes[0][i], planes[1][i], planes[2][i]]
    })
}

pub fn resize_grid_nearest<T: Copy>(g: &Grid<T>, ho: usize, wo: usize) -> Grid<T> {
    let (h, w) = g.dims();
    Grid::from_fn(ho, wo, |y, x| {
        let sy = (((y as f64 + 0.5) * h as f64 / ho as f64) as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / wo as f64) as usize).min(w - 1);
        g.get(sy, sx)
    })
}

/// Scale so the shorter side equals `edge`, keeping the aspect ratio.
pub fn shorter_edge_size(h: usize, w: usize, edge: usize) -> (usize, usize) {
    if h <= w {
        let nw = ((w as f64 * edge as f64 / h as f64).round() as usize).max(1);
        (edge, nw)
    } else {
        let nh = ((h as f64 * edge as f64 / w as f64).round() as usize).max(1);
        (nh, edge)
    }
}
