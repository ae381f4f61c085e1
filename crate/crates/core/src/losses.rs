//! Matting losses with analytic gradients w.r.t. the prediction.
//!
//! Every loss is a mean so the boundary weight does not depend on resolution.
//! The absolute value uses `sign(0) = 0` as its subgradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Spatial derivative used by the gradient-magnitude loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientOperator {
    /// `I[y][x+1] - I[y][x]`; last column (row) has no x (y) difference.
    #[default]
    Forward,
    /// 3x3 Sobel responses on interior pixels.
    Sobel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_lambda")]
    pub lambda_boundary: f64,
    #[serde(default)]
    pub gradient_operator: GradientOperator,
}

fn default_lambda() -> f64 {
    0.01
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_boundary: default_lambda(),
            gradient_operator: GradientOperator::Forward,
        }
    }
}

/// A loss value and its gradient w.r.t. the prediction.
#[derive(Clone, Debug)]
pub struct Loss<T> {
    pub value: f64,
    pub grad: Tensor<T>,
}

/// Per-term breakdown for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_mse: f64,
    pub l_grad: f64,
    pub l_boundary: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TotalLoss<T> {
    pub terms: LossTerms,
    pub d_matte: Tensor<T>,
    pub d_boundary: Tensor<T>,
}

fn check_shapes<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "loss shape mismatch: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.data().is_empty() {
        return Err(Error::invalid("loss over an empty batch"));
    }
    Ok(())
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Mean squared difference.
pub fn loss_mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Loss<T>> {
    check_shapes(pred, target)?;
    let n = pred.data().len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let scale = T::lit(2.0 / n);
    let mut sum = 0.0;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let e = p - t;
        sum += e.as_f64() * e.as_f64();
        *g = scale * e;
    }
    Ok(Loss { value: sum / n, grad })
}

/// Mean absolute difference.
pub fn loss_boundary<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Loss<T>> {
    check_shapes(pred, target)?;
    let n = pred.data().len() as f64;
    let inv = T::lit(1.0 / n);
    let mut grad = Tensor::zeros(pred.shape());
    let mut sum = 0.0;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let e = p - t;
        sum += e.as_f64().abs();
        *g = inv * sign(e);
    }
    Ok(Loss { value: sum / n, grad })
}

/// Sum of the mean absolute x-gradient difference and the mean absolute
/// y-gradient difference.
pub fn loss_grad<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, op: GradientOperator) -> Result<Loss<T>> {
    check_shapes(pred, target)?;
    let [n, c, h, w] = pred.shape();
    let min_side = match op {
        GradientOperator::Forward => 2,
        GradientOperator::Sobel => 3,
    };
    if h < min_side || w < min_side {
        return Err(Error::invalid(format!(
            "gradient loss needs at least {min_side}x{min_side} maps, got {h}x{w}"
        )));
    }
    let mut grad = Tensor::zeros(pred.shape());
    let mut value = 0.0;
    match op {
        GradientOperator::Forward => {
            let count_x = (n * c * h * (w - 1)) as f64;
            let count_y = (n * c * (h - 1) * w) as f64;
            let (sx, sy) = (T::lit(1.0 / count_x), T::lit(1.0 / count_y));
            let (mut acc_x, mut acc_y) = (0.0, 0.0);
            for b in 0..n {
                for ch in 0..c {
                    let p = pred.plane(b, ch);
                    let t = target.plane(b, ch);
                    let g = grad.plane_mut(b, ch);
                    for y in 0..h {
                        for x in 0..w {
                            let i = y * w + x;
                            if x + 1 < w {
                                let e = (p[i + 1] - p[i]) - (t[i + 1] - t[i]);
                                acc_x += e.as_f64().abs();
                                let s = sx * sign(e);
                                g[i + 1] += s;
                                g[i] -= s;
                            }
                            if y + 1 < h {
                                let e = (p[i + w] - p[i]) - (t[i + w] - t[i]);
                                acc_y += e.as_f64().abs();
                                let s = sy * sign(e);
                                g[i + w] += s;
                                g[i] -= s;
                            }
                        }
                    }
                }
            }
            value += acc_x / count_x + acc_y / count_y;
        }
        GradientOperator::Sobel => {
            const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
            const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
            let count = (n * c * (h - 2) * (w - 2)) as f64;
            let inv = T::lit(1.0 / count);
            let mut acc = 0.0;
            for b in 0..n {
                for ch in 0..c {
                    let p = pred.plane(b, ch);
                    let t = target.plane(b, ch);
                    let g = grad.plane_mut(b, ch);
                    for y in 1..h - 1 {
                        for x in 1..w - 1 {
                            for k in [&KX, &KY] {
                                let mut e = T::zero();
                                for (dy, row) in k.iter().enumerate() {
                                    for (dx, &kv) in row.iter().enumerate() {
                                        let j = (y + dy - 1) * w + (x + dx - 1);
                                        e += T::lit(kv) * (p[j] - t[j]);
                                    }
                                }
                                acc += e.as_f64().abs();
                                let s = inv * sign(e);
                                for (dy, row) in k.iter().enumerate() {
                                    for (dx, &kv) in row.iter().enumerate() {
                                        let j = (y + dy - 1) * w + (x + dx - 1);
                                        g[j] += s * T::lit(kv);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            value += acc / count;
        }
    }
    Ok(Loss { value, grad })
}

/// `L_mse + L_grad` with its gradient.
pub fn loss_matte<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, cfg: &LossConfig) -> Result<(LossTerms, Tensor<T>)> {
    let mse = loss_mse(pred, target)?;
    let grad = loss_grad(pred, target, cfg.gradient_operator)?;
    let mut d = mse.grad;
    d.add_assign(&grad.grad);
    Ok((
        LossTerms {
            l_mse: mse.value,
            l_grad: grad.value,
            l_boundary: 0.0,
            total: mse.value + grad.value,
        },
        d,
    ))
}

/// `L_mse + L_grad + lambda * L_boundary` with gradients for both heads.
pub fn loss_total<T: Real>(
    pred_matte: &Tensor<T>,
    target_matte: &Tensor<T>,
    pred_boundary: &Tensor<T>,
    target_boundary: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<TotalLoss<T>> {
    if cfg.lambda_boundary < 0.0 || !cfg.lambda_boundary.is_finite() {
        return Err(Error::config("loss.lambda_boundary", "must be a finite value >= 0"));
    }
    let (mut terms, d_matte) = loss_matte(pred_matte, target_matte, cfg)?;
    let b = loss_boundary(pred_boundary, target_boundary)?;
    let lambda = T::lit(cfg.lambda_boundary);
    terms.l_boundary = b.value;
    terms.total += cfg.lambda_boundary * b.value;
    Ok(TotalLoss {
        terms,
        d_matte,
        d_boundary: b.grad.map(|g| g * lambda),
    })
}
