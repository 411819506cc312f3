//! Training objectives with analytic gradients.
//!
//! Tensors are `(batch, channel, rows, cols)`. The x direction runs along
//! columns and y along rows, with unit pixel spacing.

use ndarray::{s, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, ArrayViewMut2, Zip};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::{Error, Result};

/// Scalar loss and its per-term breakdown.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub mse: Option<f64>,
    pub physics: Option<f64>,
    pub bce: Option<f64>,
}

/// A loss value together with its gradient w.r.t. the prediction.
#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    pub value: LossValue,
    pub grad: Array4<T>,
}

fn check_shapes<T>(pred: &ArrayView4<T>, truth: &ArrayView4<T>, channels: usize) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            expected: truth.shape().to_vec(),
            got: pred.shape().to_vec(),
        });
    }
    if pred.shape()[1] != channels {
        return Err(Error::ChannelMismatch(format!(
            "expected {channels} channels, got {}",
            pred.shape()[1]
        )));
    }
    Ok(())
}

fn mse_generic<T: Scalar>(pred: ArrayView4<T>, truth: ArrayView4<T>, channels: usize) -> Result<LossGrad<T>> {
    check_shapes(&pred, &truth, channels)?;
    let n = pred.len().max(1) as f64;
    let diff = &pred - &truth;
    let value = diff.iter().map(|d| d.as_f64().powi(2)).sum::<f64>() / n;
    let scale = T::from_f64_lossy(2.0 / n);
    Ok(LossGrad {
        value: LossValue {
            total: value,
            mse: Some(value),
            ..Default::default()
        },
        grad: diff.mapv(|d| d * scale),
    })
}

/// Mean squared error over cases, pixels and the three stress components.
pub fn mse_stress_components<T: Scalar>(pred: ArrayView4<T>, truth: ArrayView4<T>) -> Result<LossGrad<T>> {
    mse_generic(pred, truth, 3)
}

/// Mean squared error over samples, pixels and the two increment features
/// (channel 0: dσV, channel 1: dD).
pub fn mse_increments<T: Scalar>(pred: ArrayView4<T>, truth: ArrayView4<T>) -> Result<LossGrad<T>> {
    mse_generic(pred, truth, 2)
}

fn check_stencil(rows: usize, cols: usize) -> Result<()> {
    if rows < 2 || cols < 2 {
        return Err(Error::InvalidArgument(format!(
            "difference stencil needs at least 2x2 pixels, got {rows}x{cols}"
        )));
    }
    Ok(())
}

/// Adds `d f / d x` (along columns) into `out`.
fn add_dx<T: Scalar>(f: ArrayView2<T>, mut out: ArrayViewMut2<T>) {
    let w = f.ncols();
    let half = T::from_f64_lossy(0.5);
    for (src, mut dst) in f.rows().into_iter().zip(out.rows_mut()) {
        dst[0] += src[1] - src[0];
        for j in 1..w - 1 {
            dst[j] += (src[j + 1] - src[j - 1]) * half;
        }
        dst[w - 1] += src[w - 1] - src[w - 2];
    }
}

/// Adds the adjoint of [`add_dx`] applied to `g` into `out`.
fn add_dx_adjoint<T: Scalar>(g: ArrayView2<T>, mut out: ArrayViewMut2<T>) {
    let w = g.ncols();
    let half = T::from_f64_lossy(0.5);
    for (src, mut dst) in g.rows().into_iter().zip(out.rows_mut()) {
        dst[1] += src[0];
        dst[0] -= src[0];
        for j in 1..w - 1 {
            dst[j + 1] += src[j] * half;
            dst[j - 1] -= src[j] * half;
        }
        dst[w - 1] += src[w - 1];
        dst[w - 2] -= src[w - 1];
    }
}

fn add_dy<T: Scalar>(f: ArrayView2<T>, out: ArrayViewMut2<T>) {
    add_dx(f.t(), out.reversed_axes());
}

fn add_dy_adjoint<T: Scalar>(g: ArrayView2<T>, out: ArrayViewMut2<T>) {
    add_dx_adjoint(g.t(), out.reversed_axes());
}

/// Discrete ∇·σ of one `(3, rows, cols)` field ordered σ11, σ22, σ12:
/// row 0 is ∂σ11/∂x + ∂σ12/∂y, row 1 is ∂σ12/∂x + ∂σ22/∂y.
pub fn divergence<T: Scalar>(stress: ArrayView3<T>) -> Result<Array3<T>> {
    let (c, h, w) = stress.dim();
    if c != 3 {
        return Err(Error::ChannelMismatch(format!("stress field needs 3 channels, got {c}")));
    }
    check_stencil(h, w)?;
    let mut out = Array3::zeros((2, h, w));
    add_dx(stress.slice(s![0, .., ..]), out.slice_mut(s![0, .., ..]));
    add_dy(stress.slice(s![2, .., ..]), out.slice_mut(s![0, .., ..]));
    add_dx(stress.slice(s![2, .., ..]), out.slice_mut(s![1, .., ..]));
    add_dy(stress.slice(s![1, .., ..]), out.slice_mut(s![1, .., ..]));
    Ok(out)
}

/// Adjoint of [`divergence`]: maps a `(2, rows, cols)` cotangent back to
/// the three stress channels.
pub fn divergence_adjoint<T: Scalar>(g: ArrayView3<T>) -> Array3<T> {
    let (_, h, w) = g.dim();
    let mut out = Array3::zeros((3, h, w));
    add_dx_adjoint(g.slice(s![0, .., ..]), out.slice_mut(s![0, .., ..]));
    add_dy_adjoint(g.slice(s![0, .., ..]), out.slice_mut(s![2, .., ..]));
    add_dx_adjoint(g.slice(s![1, .., ..]), out.slice_mut(s![2, .., ..]));
    add_dy_adjoint(g.slice(s![1, .., ..]), out.slice_mut(s![1, .., ..]));
    out
}

/// Mean over cases and pixels of ‖∇·σ̂‖².
pub fn physics_residual<T: Scalar>(pred_stress: ArrayView4<T>) -> Result<LossGrad<T>> {
    let (b, _, h, w) = pred_stress.dim();
    let count = (b * h * w).max(1) as f64;
    let scale = T::from_f64_lossy(2.0 / count);
    let mut grad = Array4::zeros(pred_stress.raw_dim());
    let mut total = 0.0;
    for (k, sample) in pred_stress.outer_iter().enumerate() {
        let div = divergence(sample)?;
        total += div.iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
        let adj = divergence_adjoint(div.view());
        Zip::from(grad.slice_mut(s![k, .., .., ..]))
            .and(&adj)
            .for_each(|g, &a| *g = a * scale);
    }
    let value = total / count;
    Ok(LossGrad {
        value: LossValue {
            total: value,
            physics: Some(value),
            ..Default::default()
        },
        grad,
    })
}

/// Weights of the hybrid stress objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridWeights {
    pub mse: f64,
    pub physics: f64,
}

impl Default for HybridWeights {
    fn default() -> Self {
        HybridWeights { mse: 0.5, physics: 0.5 }
    }
}

pub fn hybrid_total(mse: f64, physics: f64, weights: HybridWeights) -> Result<LossValue> {
    if !(mse >= 0.0 && physics >= 0.0) {
        return Err(Error::Domain(format!("loss terms must be non-negative, got {mse}, {physics}")));
    }
    Ok(LossValue {
        total: weights.mse * mse + weights.physics * physics,
        mse: Some(mse),
        physics: Some(physics),
        bce: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BcePolicy {
    /// Clamp predictions into `[eps, 1 - eps]` before taking logs.
    Clamp(f64),
    /// Reject predictions outside the open unit interval.
    Exact,
}

impl Default for BcePolicy {
    fn default() -> Self {
        BcePolicy::Clamp(1e-7)
    }
}

/// Mean binary cross-entropy between probabilities and binary labels.
/// Clamped entries have zero gradient.
pub fn bce_damage<T: Scalar>(pred: ArrayView4<T>, truth: ArrayView4<T>, policy: BcePolicy) -> Result<LossGrad<T>> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            expected: truth.shape().to_vec(),
            got: pred.shape().to_vec(),
        });
    }
    let n = pred.len().max(1) as f64;
    let mut grad = Array4::zeros(pred.raw_dim());
    let mut total = 0.0;
    for ((g, &p), &y) in grad.iter_mut().zip(pred.iter()).zip(truth.iter()) {
        let (p, y) = (p.as_f64(), y.as_f64());
        let (q, active) = match policy {
            BcePolicy::Clamp(eps) => {
                let q = p.clamp(eps, 1.0 - eps);
                (q, q == p)
            }
            BcePolicy::Exact => {
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::Domain(format!("BCE prediction {p} outside (0, 1)")));
                }
                (p, true)
            }
        };
        total -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
        if active {
            *g = T::from_f64_lossy((q - y) / (q * (1.0 - q)) / n);
        }
    }
    let value = total / n;
    Ok(LossGrad {
        value: LossValue {
            total: value,
            bce: Some(value),
            ..Default::default()
        },
        grad,
    })
}
