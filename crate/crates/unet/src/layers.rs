//! Layers with explicit forward caches and backward passes.

use cfrc_core::Scalar;
use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{col2im, conv_out, from_channel_major, im2col, to_channel_major};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, caches kept for backward.
    Train,
    /// Frozen running statistics, no caches.
    Eval,
}

/// A named tensor with an accumulated gradient. Running statistics are
/// stored as non-trainable parameters so they travel with checkpoints.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    fn new(value: ArrayD<T>, trainable: bool) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad, trainable }
    }

    fn matrix(&self) -> ndarray::ArrayView2<'_, T> {
        self.value.view().into_dimensionality::<Ix2>().expect("2-D parameter")
    }

    fn vector(&self) -> ndarray::ArrayView1<'_, T> {
        self.value.view().into_dimensionality::<Ix1>().expect("1-D parameter")
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> ArrayD<T> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::from_f64_lossy(rng.random_range(-bound..bound)))
}

fn add_bias<T: Scalar>(y: &mut Array2<T>, b: ndarray::ArrayView1<T>) {
    for (mut row, &bias) in y.rows_mut().into_iter().zip(b.iter()) {
        row.mapv_inplace(|v| v + bias);
    }
}

fn accumulate<T: Scalar>(param: &mut Param<T>, g: ArrayD<T>) {
    param.grad += &g;
}

/// Unfolded input columns and the input shape, kept for backward.
type ColumnCache<T> = (Array2<T>, (usize, usize, usize, usize));

/// 2-D convolution; weight shape `(out, in·k·k)`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<ColumnCache<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Conv2d {
            weight: Param::new(uniform(rng, &[out_c, in_c * k * k], bound), true),
            bias: Param::new(ArrayD::zeros(IxDyn(&[out_c])), true),
            k,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let (n, _, h, w) = x.dim();
        let (ho, wo) = (conv_out(h, self.k, self.stride, self.pad), conv_out(w, self.k, self.stride, self.pad));
        let cols = im2col(x.view(), self.k, self.stride, self.pad);
        let mut y = self.weight.matrix().dot(&cols);
        add_bias(&mut y, self.bias.vector());
        self.cache = (mode == Mode::Train).then(|| (cols, x.dim()));
        from_channel_major(y, n, ho, wo)
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let (cols, shape) = self.cache.take().expect("backward without a training forward");
        let dym = to_channel_major(dy.view());
        accumulate(&mut self.weight, dym.dot(&cols.t()).into_dyn());
        accumulate(&mut self.bias, dym.sum_axis(Axis(1)).into_dyn());
        let dcols = self.weight.matrix().t().dot(&dym);
        col2im(dcols.view(), shape, self.k, self.stride, self.pad)
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Param<T>); 2] {
        [("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

/// Transposed convolution; weight shape `(in, out·k·k)`. The forward pass
/// is the adjoint of a convolution with the same geometry.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<Array2<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        // Each output pixel receives about in·k²/stride² contributions.
        let fan_in = (in_c * k * k) as f64 / (stride * stride) as f64;
        let bound = (6.0 / fan_in).sqrt();
        ConvTranspose2d {
            weight: Param::new(uniform(rng, &[in_c, out_c * k * k], bound), true),
            bias: Param::new(ArrayD::zeros(IxDyn(&[out_c])), true),
            out_c,
            k,
            stride,
            pad,
            cache: None,
        }
    }

    fn out_size(&self, size: usize) -> usize {
        (size - 1) * self.stride + self.k - 2 * self.pad
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let (n, _, h, w) = x.dim();
        let xm = to_channel_major(x.view());
        let cols = self.weight.matrix().t().dot(&xm);
        let shape = (n, self.out_c, self.out_size(h), self.out_size(w));
        let mut y = col2im(cols.view(), shape, self.k, self.stride, self.pad);
        let b = self.bias.vector();
        for mut sample in y.outer_iter_mut() {
            for (mut plane, &bias) in sample.outer_iter_mut().zip(b.iter()) {
                plane.mapv_inplace(|v| v + bias);
            }
        }
        self.cache = (mode == Mode::Train).then_some(xm);
        y
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let xm = self.cache.take().expect("backward without a training forward");
        let (n, _, h, w) = dy.dim();
        let dcols = im2col(dy.view(), self.k, self.stride, self.pad);
        accumulate(&mut self.weight, xm.dot(&dcols.t()).into_dyn());
        accumulate(&mut self.bias, dy.sum_axis(Axis(0)).sum_axis(Axis(1)).sum_axis(Axis(1)).into_dyn());
        let dx = self.weight.matrix().dot(&dcols);
        let (hi, wi) = ((h + 2 * self.pad - self.k) / self.stride + 1, (w + 2 * self.pad - self.k) / self.stride + 1);
        from_channel_major(dx, n, hi, wi)
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Param<T>); 2] {
        [("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

/// Per-channel batch normalization over `(batch, rows, cols)`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<(Array4<T>, Array1<T>)>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(c: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm2d {
            gamma: Param::new(ArrayD::ones(IxDyn(&[c])), true),
            beta: Param::new(ArrayD::zeros(IxDyn(&[c])), true),
            running_mean: Param::new(ArrayD::zeros(IxDyn(&[c])), false),
            running_var: Param::new(ArrayD::ones(IxDyn(&[c])), false),
            momentum,
            eps,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f64;
        let eps = T::from_f64_lossy(self.eps);
        let mut y = x.clone();
        let mut inv_std = Array1::zeros(c);
        let mut xhat = Array4::zeros(x.raw_dim());
        for ch in 0..c {
            let plane = x.index_axis(Axis(1), ch);
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = plane.iter().map(|v| v.as_f64()).sum::<f64>() / count;
                    let var = plane.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / count;
                    let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                    let m = self.momentum;
                    let rm = &mut self.running_mean.value[ch];
                    *rm = T::from_f64_lossy((1.0 - m) * rm.as_f64() + m * mean);
                    let rv = &mut self.running_var.value[ch];
                    *rv = T::from_f64_lossy((1.0 - m) * rv.as_f64() + m * unbiased);
                    (T::from_f64_lossy(mean), T::from_f64_lossy(var))
                }
                Mode::Eval => (self.running_mean.value[ch], self.running_var.value[ch]),
            };
            let istd = T::one() / (var + eps).sqrt();
            inv_std[ch] = istd;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            let mut xh = xhat.index_axis_mut(Axis(1), ch);
            xh.zip_mut_with(&plane, |o, &v| *o = (v - mean) * istd);
            y.index_axis_mut(Axis(1), ch).zip_mut_with(&xh, |o, &v| *o = v * g + b);
        }
        self.cache = (mode == Mode::Train).then_some((xhat, inv_std));
        y
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let (xhat, inv_std) = self.cache.take().expect("backward without a training forward");
        let (n, c, h, w) = dy.dim();
        let count = T::from_usize(n * h * w).expect("count");
        let mut dx = Array4::zeros(dy.raw_dim());
        for ch in 0..c {
            let g = dy.index_axis(Axis(1), ch);
            let xh = xhat.index_axis(Axis(1), ch);
            let sum_g: T = g.iter().copied().sum();
            let sum_gx: T = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum();
            self.beta.grad[ch] += sum_g;
            self.gamma.grad[ch] += sum_gx;
            let scale = self.gamma.value[ch] * inv_std[ch] / count;
            let mut out = dx.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut out)
                .and(&g)
                .and(&xh)
                .for_each(|o, &gi, &xi| *o = scale * (count * gi - sum_g - xi * sum_gx));
        }
        dx
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Param<T>); 4] {
        [
            ("gamma", &mut self.gamma),
            ("beta", &mut self.beta),
            ("running_mean", &mut self.running_mean),
            ("running_var", &mut self.running_var),
        ]
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    mask: Option<Array4<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        if mode == Mode::Train {
            self.mask = Some(x.mapv(|v| if v > T::zero() { T::one() } else { T::zero() }));
        }
        x.mapv(|v| v.max(T::zero()))
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        dy * &self.mask.take().expect("backward without a training forward")
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid<T> {
    out: Option<Array4<T>>,
}

impl<T: Scalar> Sigmoid<T> {
    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let y = x.mapv(|v| T::one() / (T::one() + (-v).exp()));
        if mode == Mode::Train {
            self.out = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let y = self.out.take().expect("backward without a training forward");
        let mut dx = dy.clone();
        dx.zip_mut_with(&y, |g, &s| *g = *g * s * (T::one() - s));
        dx
    }
}
