//! Layer kernels with hand-written backward passes.
//!
//! Layers do not own their weights; they hold indices into a [`ParamStore`]
//! so the whole network state is one flat, ordered, named collection.

use rayon::prelude::*;

use crate::resample::AxisTaps;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained by the optimizer.
    Weight,
    /// Running statistics; updated by forward passes in train mode.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub values: Vec<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub(crate) fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind, values: Vec<T>) -> usize {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate {name}");
        self.entries.push(ParamEntry {
            name,
            shape,
            kind,
            values,
        });
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self, idx: usize) -> &[T] {
        &self.entries[idx].values
    }

    pub fn values_mut(&mut self, idx: usize) -> &mut [T] {
        &mut self.entries[idx].values
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.values.len())
            .sum()
    }
}

/// Gradient buffers aligned with a [`ParamStore`]; buffers stay zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store
                .entries()
                .iter()
                .map(|e| vec![T::zero(); e.values.len()])
                .collect(),
        }
    }

    pub fn get(&self, idx: usize) -> &[T] {
        &self.grads[idx]
    }

    pub(crate) fn get_mut(&mut self, idx: usize) -> &mut [T] {
        &mut self.grads[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.grads.iter().map(|g| g.as_slice())
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv2d {
    pub weight: usize,
    pub bias: Option<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2d {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        (
            (h + 2 * self.padding - span) / self.stride + 1,
            (w + 2 * self.padding - span) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Output columns `[lo, hi)` whose input column `ox * s + off` lies inside `[0, w)`.
    fn valid_range(off: isize, s: isize, w: usize, wo: usize) -> (usize, usize) {
        let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
        let hi = if off >= w as isize {
            0
        } else {
            (((w as isize - 1 - off) / s + 1).max(0) as usize).min(wo)
        };
        (lo.min(wo), hi.max(lo.min(wo)))
    }

    /// Unfolds one sample `[cin, h, w]` into `[cin*k*k, ho*wo]` (replacing the contents of `cols`).
    fn im2col<T: Real>(&self, x: &[T], h: usize, w: usize, cols: &mut Vec<T>) {
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let (s, p, d) = (self.stride as isize, self.padding as isize, self.dilation as isize);
        cols.clear();
        cols.reserve(self.patch_len() * ho * wo);
        for ci in 0..self.in_channels {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let dy = ky as isize * d - p;
                    let dx = kx as isize * d - p;
                    let (lo, hi) = Self::valid_range(dx, s, w, wo);
                    for oy in 0..ho {
                        let iy = oy as isize * s + dy;
                        if iy < 0 || iy >= h as isize {
                            cols.resize(cols.len() + wo, T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        cols.resize(cols.len() + lo, T::zero());
                        if hi > lo {
                            let first = (lo as isize * s + dx) as usize;
                            if s == 1 {
                                cols.extend_from_slice(&src[first..first + (hi - lo)]);
                            } else {
                                cols.extend(src[first..].iter().step_by(s as usize).take(hi - lo).copied());
                            }
                        }
                        cols.resize(cols.len() + (wo - hi), T::zero());
                    }
                }
            }
        }
    }

    /// Adjoint of [`Conv2d::im2col`]: scatters columns back into `[cin, h, w]`.
    fn col2im<T: Real>(&self, cols: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let (s, p, d) = (self.stride as isize, self.padding as isize, self.dilation as isize);
        let n_out = ho * wo;
        for ci in 0..self.in_channels {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * n_out..(row + 1) * n_out];
                    let dy = ky as isize * d - p;
                    let dxo = kx as isize * d - p;
                    let (lo, hi) = Self::valid_range(dxo, s, w, wo);
                    if hi <= lo {
                        continue;
                    }
                    let first = (lo as isize * s + dxo) as usize;
                    for oy in 0..ho {
                        let iy = oy as isize * s + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let vals = &src[oy * wo + lo..oy * wo + hi];
                        if s == 1 {
                            for (o, &v) in line[first..first + vals.len()].iter_mut().zip(vals) {
                                *o += v;
                            }
                        } else {
                            for (o, &v) in line[first..].iter_mut().step_by(s as usize).zip(vals) {
                                *o += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = self.output_size(h, w);
        let n_out = ho * wo;
        let kk = self.patch_len();
        let weight = store.values(self.weight);
        let bias = self.bias.map(|b| store.values(b));
        let mut y = Tensor::zeros([n, self.out_channels, ho, wo]);
        let out_len = self.out_channels * n_out;
        y.data_mut()
            .par_chunks_mut(out_len)
            .enumerate()
            .for_each(|(b, out)| {
                let xs = x.sample(b);
                let owned;
                let cols: &[T] = if self.is_pointwise() {
                    xs
                } else {
                    let mut buf = Vec::new();
                    self.im2col(xs, h, w, &mut buf);
                    owned = buf;
                    &owned
                };
                T::gemm(
                    self.out_channels,
                    kk,
                    n_out,
                    T::one(),
                    weight,
                    (kk as isize, 1),
                    cols,
                    (n_out as isize, 1),
                    T::zero(),
                    out,
                    (n_out as isize, 1),
                );
                if let Some(bias) = bias {
                    for (co, chunk) in out.chunks_mut(n_out).enumerate() {
                        for v in chunk {
                            *v += bias[co];
                        }
                    }
                }
            });
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient when asked.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut Gradients<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let [n, _, h, w] = x.shape();
        let (ho, wo) = self.output_size(h, w);
        let n_out = ho * wo;
        let kk = self.patch_len();
        assert_eq!(dy.shape(), [n, self.out_channels, ho, wo], "conv output grad shape");
        let weight = store.values(self.weight);

        {
            let dw = grads.get_mut(self.weight);
            let mut cols = Vec::new();
            for b in 0..n {
                let xs = x.sample(b);
                let cols_ref: &[T] = if self.is_pointwise() {
                    xs
                } else {
                    self.im2col(xs, h, w, &mut cols);
                    &cols
                };
                // dW += dY_b * cols^T
                T::gemm(
                    self.out_channels,
                    n_out,
                    kk,
                    T::one(),
                    dy.sample(b),
                    (n_out as isize, 1),
                    cols_ref,
                    (1, n_out as isize),
                    T::one(),
                    dw,
                    (kk as isize, 1),
                );
            }
        }
        if let Some(bias) = self.bias {
            let db = grads.get_mut(bias);
            for b in 0..n {
                for (co, chunk) in dy.sample(b).chunks(n_out).enumerate() {
                    db[co] += chunk.iter().copied().sum::<T>();
                }
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = Tensor::zeros(x.shape());
        let in_len = self.in_channels * h * w;
        dx.data_mut()
            .par_chunks_mut(in_len)
            .enumerate()
            .for_each(|(b, dxs)| {
                if self.is_pointwise() {
                    T::gemm(
                        kk,
                        self.out_channels,
                        n_out,
                        T::one(),
                        weight,
                        (1, kk as isize),
                        dy.sample(b),
                        (n_out as isize, 1),
                        T::zero(),
                        dxs,
                        (n_out as isize, 1),
                    );
                } else {
                    let mut dcols = vec![T::zero(); kk * n_out];
                    T::gemm(
                        kk,
                        self.out_channels,
                        n_out,
                        T::one(),
                        weight,
                        (1, kk as isize),
                        dy.sample(b),
                        (n_out as isize, 1),
                        T::zero(),
                        &mut dcols,
                        (n_out as isize, 1),
                    );
                    self.col2im(&dcols, h, w, dxs);
                }
            });
        Some(dx)
    }
}

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub(crate) struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl BatchNorm {
    /// Normalizes with batch statistics and folds them into the running buffers.
    pub fn forward_train<T: Real>(&self, store: &mut ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, BnCache<T>) {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.channels);
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for b in 0..n {
                s += x.plane(b, ch).iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let m = s / count;
            let mut sq = 0.0f64;
            for b in 0..n {
                sq += x.plane(b, ch).iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
            }
            mean[ch] = T::lit(m);
            var[ch] = T::lit(sq / count);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(BN_EPS)).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let gamma = store.values(self.gamma);
        let beta = store.values(self.beta);
        for b in 0..n {
            for ch in 0..c {
                let src = x.plane(b, ch);
                let (m, is) = (mean[ch], inv_std[ch]);
                let xh = xhat.plane_mut(b, ch);
                for (d, &s) in xh.iter_mut().zip(src) {
                    *d = (s - m) * is;
                }
                let (g, bt) = (gamma[ch], beta[ch]);
                let xh = xhat.plane(b, ch);
                for (d, &s) in y.plane_mut(b, ch).iter_mut().zip(xh) {
                    *d = g * s + bt;
                }
            }
        }
        let mom = T::lit(BN_MOMENTUM);
        let unbias = if count > 1.0 { T::lit(count / (count - 1.0)) } else { T::one() };
        for ch in 0..c {
            let rm = &mut store.values_mut(self.running_mean)[ch];
            *rm = (T::one() - mom) * *rm + mom * mean[ch];
            let rv = &mut store.values_mut(self.running_var)[ch];
            *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
        }
        (y, BnCache { xhat, inv_std })
    }

    /// Batch statistics without touching the running buffers.
    pub fn forward_batch_stats<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let mut scratch = ParamStore::default();
        for idx in [self.gamma, self.beta, self.running_mean, self.running_var] {
            let e = &store.entries()[idx];
            scratch.push(e.name.clone(), e.shape.clone(), e.kind, e.values.clone());
        }
        let local = BatchNorm {
            gamma: 0,
            beta: 1,
            running_mean: 2,
            running_var: 3,
            channels: self.channels,
        };
        local.forward_train(&mut scratch, x).0
    }

    pub fn forward_eval<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, _, _] = x.shape();
        let gamma = store.values(self.gamma);
        let beta = store.values(self.beta);
        let rm = store.values(self.running_mean);
        let rv = store.values(self.running_var);
        let mut y = x.clone();
        for b in 0..n {
            for ch in 0..c {
                let scale = gamma[ch] / (rv[ch] + T::lit(BN_EPS)).sqrt();
                let shift = beta[ch] - rm[ch] * scale;
                for v in y.plane_mut(b, ch) {
                    *v = *v * scale + shift;
                }
            }
        }
        y
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &BnCache<T>,
        dy: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Tensor<T> {
        let [n, c, h, w] = dy.shape();
        let count = T::lit((n * h * w) as f64);
        let gamma = store.values(self.gamma);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            let (mut sg, mut sb) = (0.0f64, 0.0f64);
            for b in 0..n {
                for (&g, &xh) in dy.plane(b, ch).iter().zip(cache.xhat.plane(b, ch)) {
                    sg += (g * xh).as_f64();
                    sb += g.as_f64();
                }
            }
            dgamma[ch] = T::lit(sg);
            dbeta[ch] = T::lit(sb);
        }
        let mut dx = Tensor::zeros(dy.shape());
        for b in 0..n {
            for ch in 0..c {
                let k = gamma[ch] * cache.inv_std[ch] / count;
                let (dg, db) = (dgamma[ch], dbeta[ch]);
                let src = dy.plane(b, ch);
                let xh = cache.xhat.plane(b, ch);
                for ((d, &g), &xv) in dx.plane_mut(b, ch).iter_mut().zip(src).zip(xh) {
                    *d = k * (count * g - db - xv * dg);
                }
            }
        }
        for (d, s) in grads.get_mut(self.gamma).iter_mut().zip(&dgamma) {
            *d += *s;
        }
        for (d, s) in grads.get_mut(self.beta).iter_mut().zip(&dbeta) {
            *d += *s;
        }
        dx
    }
}

pub(crate) fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient through a ReLU given its output.
pub(crate) fn relu_backward<T: Real>(out: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &o) in dx.data_mut().iter_mut().zip(out.data()) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

pub(crate) fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

pub(crate) fn sigmoid_backward<T: Real>(out: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &s) in dx.data_mut().iter_mut().zip(out.data()) {
        *d = *d * s * (T::one() - s);
    }
    dx
}

pub(crate) fn upsample_bilinear<T: Real>(x: &Tensor<T>, ho: usize, wo: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let ty = AxisTaps::new(h, ho);
    let tx = AxisTaps::new(w, wo);
    let mut y = Tensor::zeros([n, c, ho, wo]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = y.plane_mut(b, ch);
            for oy in 0..ho {
                let fy = T::lit(ty.frac[oy]);
                let r0 = &src[ty.lo[oy] * w..(ty.lo[oy] + 1) * w];
                let r1 = &src[ty.hi[oy] * w..(ty.hi[oy] + 1) * w];
                for ox in 0..wo {
                    let fx = T::lit(tx.frac[ox]);
                    let (x0, x1) = (tx.lo[ox], tx.hi[ox]);
                    let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                    let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                    dst[oy * wo + ox] = top + (bot - top) * fy;
                }
            }
        }
    }
    y
}

pub(crate) fn upsample_bilinear_backward<T: Real>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, ho, wo] = dy.shape();
    let ty = AxisTaps::new(h, ho);
    let tx = AxisTaps::new(w, wo);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let src = dy.plane(b, ch);
            let dst = dx.plane_mut(b, ch);
            for oy in 0..ho {
                let fy = T::lit(ty.frac[oy]);
                let (y0, y1) = (ty.lo[oy], ty.hi[oy]);
                for ox in 0..wo {
                    let fx = T::lit(tx.frac[ox]);
                    let (x0, x1) = (tx.lo[ox], tx.hi[ox]);
                    let g = src[oy * wo + ox];
                    let gt = g * (T::one() - fy);
                    let gb = g * fy;
                    dst[y0 * w + x0] += gt * (T::one() - fx);
                    dst[y0 * w + x1] += gt * fx;
                    dst[y1 * w + x0] += gb * (T::one() - fx);
                    dst[y1 * w + x1] += gb * fx;
                }
            }
        }
    }
    dx
}
