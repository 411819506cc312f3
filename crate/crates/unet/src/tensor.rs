//! Patch extraction, channel concatenation and layout helpers for
//! `(batch, channel, rows, cols)` tensors.

use cfrc_core::Scalar;
use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4, Axis};

/// Output extent of a strided window sweep.
pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unrolls `k × k` patches into columns: rows index `(channel, ki, kj)`,
/// columns index `(sample, out_row, out_col)`. Padding reads as zero.
pub fn im2col<T: Scalar>(x: ArrayView4<T>, k: usize, stride: usize, pad: usize) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let mut cols = Array2::zeros((c * k * k, n * ho * wo));
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ch * k + ki) * k + kj;
                let mut row = cols.row_mut(r);
                let row = row.as_slice_mut().expect("standard layout");
                for b in 0..n {
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (b * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                row[base + ox] = x[[b, ch, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back, summing overlaps.
pub fn col2im<T: Scalar>(
    cols: ArrayView2<T>,
    shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let (n, c, h, w) = shape;
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let mut x = Array4::zeros(shape);
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ch * k + ki) * k + kj;
                let row = cols.row(r);
                for b in 0..n {
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (b * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                x[[b, ch, iy as usize, ix as usize]] += row[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `(N, C, H, W)` to `(C, N·H·W)`.
pub fn to_channel_major<T: Scalar>(x: ArrayView4<T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    x.permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, n * h * w))
        .expect("contiguous")
}

/// `(C, N·H·W)` back to `(N, C, H, W)`.
pub fn from_channel_major<T: Scalar>(m: Array2<T>, n: usize, h: usize, w: usize) -> Array4<T> {
    let c = m.nrows();
    m.into_shape_with_order((c, n, h, w))
        .expect("contiguous")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
}

pub fn concat_channels<T: Scalar>(a: ArrayView4<T>, b: ArrayView4<T>) -> Array4<T> {
    ndarray::concatenate(Axis(1), &[a, b]).expect("matching spatial shapes")
}

/// Splits a gradient of a channel concatenation into its two parts.
pub fn split_channels<T: Scalar>(g: &Array4<T>, first: usize) -> (Array4<T>, Array4<T>) {
    (
        g.slice(s![.., ..first, .., ..]).to_owned(),
        g.slice(s![.., first.., .., ..]).to_owned(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        // <im2col(x), c> = <x, col2im(c)> for arbitrary x, c.
        for &(k, s, p, h) in &[(3, 1, 1, 5), (4, 2, 1, 8), (1, 1, 0, 3), (4, 2, 1, 2)] {
            let x = Array4::from_shape_fn((2, 3, h, h), |(a, b, c, d)| ((a * 31 + b * 7 + c * 3 + d) % 13) as f64 - 6.0);
            let cols = im2col(x.view(), k, s, p);
            let c = Array2::from_shape_fn(cols.raw_dim(), |(i, j)| ((i * 5 + j * 11) % 17) as f64 - 8.0);
            let lhs: f64 = (&cols * &c).sum();
            let rhs: f64 = (&x * &col2im(c.view(), x.dim(), k, s, p)).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{k} {s} {p}");
        }
    }

    #[test]
    fn channel_major_round_trip() {
        let x = Array4::from_shape_fn((2, 3, 4, 5), |(a, b, c, d)| (a * 1000 + b * 100 + c * 10 + d) as f32);
        let m = to_channel_major(x.view());
        assert_eq!(m[[1, 20 + 2 * 5 + 2]], 1122.0);
        assert_eq!(from_channel_major(m, 2, 4, 5), x);
    }
}
