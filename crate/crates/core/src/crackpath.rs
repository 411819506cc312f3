//! Main-crack trajectory extraction and evaluation metrics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::fields::{mean, FieldFrame, Grid};
use crate::{Error, Result};

/// How a row's retained pixels are reduced to one column index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowReduction {
    /// Mean column of all retained pixels.
    #[default]
    Mean,
    /// Centroid of one connected run, following the previous row.
    Segment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrackParams {
    pub threshold: f64,
    pub median_window: usize,
    pub sg_window: usize,
    pub sg_order: usize,
    pub reduction: RowReduction,
}

impl Default for CrackParams {
    fn default() -> Self {
        CrackParams {
            threshold: 0.9,
            median_window: 5,
            sg_window: 11,
            sg_order: 2,
            reduction: RowReduction::Mean,
        }
    }
}

/// Column index of the main crack for every row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrackPath {
    pub x_index: Vec<f64>,
    /// Rows where damage was detected before interpolation.
    pub valid_mask: Vec<bool>,
}

pub fn binarize(damage: &Grid, threshold: f64) -> Array2<bool> {
    damage.mapv(|d| d as f64 > threshold)
}

/// Runs of consecutive `true` entries as inclusive `(start, end)` pairs.
fn segments(row: impl Iterator<Item = bool>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    let mut last = 0;
    for (j, on) in row.enumerate() {
        match (on, start) {
            (true, None) => start = Some(j),
            (false, Some(s)) => {
                out.push((s, j - 1));
                start = None;
            }
            _ => {}
        }
        last = j;
    }
    if let Some(s) = start {
        out.push((s, last));
    }
    out
}

fn raw_indices(mask: &Array2<bool>, reduction: RowReduction) -> Vec<Option<f64>> {
    let mut prev: Option<f64> = None;
    mask.rows()
        .into_iter()
        .map(|row| {
            let value = match reduction {
                RowReduction::Mean => {
                    let (sum, count) = row
                        .iter()
                        .enumerate()
                        .filter(|(_, &on)| on)
                        .fold((0.0, 0usize), |(s, c), (j, _)| (s + j as f64, c + 1));
                    (count > 0).then(|| sum / count as f64)
                }
                RowReduction::Segment => {
                    let segs = segments(row.iter().copied());
                    let chosen = match prev {
                        Some(p) => segs.iter().min_by(|a, b| {
                            gap(a, p).total_cmp(&gap(b, p)).then((b.1 - b.0).cmp(&(a.1 - a.0)))
                        }),
                        None => segs.iter().max_by(|a, b| (a.1 - a.0).cmp(&(b.1 - b.0)).then(b.0.cmp(&a.0))),
                    };
                    chosen.map(|&(a, b)| (a + b) as f64 / 2.0)
                }
            };
            if value.is_some() {
                prev = value;
            }
            value
        })
        .collect()
}

/// Distance from `p` to a column run; zero when the run covers `p`.
fn gap(seg: &(usize, usize), p: f64) -> f64 {
    if p < seg.0 as f64 {
        seg.0 as f64 - p
    } else if p > seg.1 as f64 {
        p - seg.1 as f64
    } else {
        0.0
    }
}

/// Running median with the window truncated at both ends.
pub fn median_filter(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = values.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            let mut w: Vec<f64> = values[lo..hi].to_vec();
            w.sort_by(f64::total_cmp);
            let m = w.len();
            if m % 2 == 1 {
                w[m / 2]
            } else {
                0.5 * (w[m / 2 - 1] + w[m / 2])
            }
        })
        .collect()
}

/// Least-squares polynomial weights: the fitted value at `at` from samples
/// at positions `0..len` is `Σ c_k y_k`.
pub fn polyfit_weights(len: usize, order: usize, at: f64) -> Vec<f64> {
    let m = order + 1;
    // Normal equations (VᵀV) a = e(at), then c = V a.
    let mut a = vec![vec![0.0; m + 1]; m];
    for (r, row) in a.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().take(m).enumerate() {
            *v = (0..len).map(|k| (k as f64 - at).powi((r + c) as i32)).sum();
        }
        row[m] = if r == 0 { 1.0 } else { 0.0 };
    }
    for col in 0..m {
        let pivot = (col..m)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .expect("non-empty");
        a.swap(col, pivot);
        let p = a[col][col];
        for v in a[col].iter_mut() {
            *v /= p;
        }
        for r in 0..m {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    let pivot_row = a[col].clone();
                    for (v, pv) in a[r].iter_mut().zip(pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
    }
    (0..len)
        .map(|k| (0..m).map(|r| a[r][m] * (k as f64 - at).powi(r as i32)).sum())
        .collect()
}

/// Savitzky–Golay smoothing; edge samples use the polynomial fitted to the
/// first or last full window. Each output is written as `y_i + Σ c_k (y_k − y_i)`
/// so constant inputs pass through bit for bit.
pub fn savitzky_golay(values: &[f64], window: usize, order: usize) -> Vec<f64> {
    let n = values.len();
    let mut w = window.min(n);
    if w % 2 == 0 {
        w = w.saturating_sub(1);
    }
    if w < 2 {
        return values.to_vec();
    }
    let order = order.min(w - 1);
    let half = w / 2;
    (0..n)
        .map(|i| {
            let start = i.saturating_sub(half).min(n - w);
            let weights = polyfit_weights(w, order, (i - start) as f64);
            let yi = values[i];
            yi + weights
                .iter()
                .zip(&values[start..start + w])
                .map(|(c, y)| c * (y - yi))
                .sum::<f64>()
        })
        .collect()
}

/// Fills undetected rows by linear interpolation with constant-hold ends.
fn interpolate(detected: &[(usize, f64)], rows: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    let first = detected[0];
    let last = detected[detected.len() - 1];
    for (r, v) in out.iter_mut().enumerate() {
        *v = if r <= first.0 {
            first.1
        } else if r >= last.0 {
            last.1
        } else {
            let k = detected.partition_point(|&(row, _)| row <= r);
            let (r0, x0) = detected[k - 1];
            if r0 == r {
                x0
            } else {
                let (r1, x1) = detected[k];
                x0 + (x1 - x0) * (r - r0) as f64 / (r1 - r0) as f64
            }
        };
    }
    out
}

pub fn extract_crack_path(damage: &Grid, params: &CrackParams) -> Result<CrackPath> {
    let mask = binarize(damage, params.threshold);
    let raw = raw_indices(&mask, params.reduction);
    let detected: Vec<(usize, f64)> = raw.iter().enumerate().filter_map(|(r, v)| v.map(|x| (r, x))).collect();
    if detected.is_empty() {
        return Err(Error::NoDamage(params.threshold));
    }
    let values: Vec<f64> = detected.iter().map(|d| d.1).collect();
    let smoothed = savitzky_golay(&median_filter(&values, params.median_window), params.sg_window, params.sg_order);
    let hi = (damage.ncols().max(1) - 1) as f64;
    let filtered: Vec<(usize, f64)> = detected.iter().zip(smoothed).map(|(&(r, _), x)| (r, x)).collect();
    let x_index = interpolate(&filtered, damage.nrows())
        .into_iter()
        .map(|x| x.clamp(0.0, hi))
        .collect();
    Ok(CrackPath {
        x_index,
        valid_mask: raw.iter().map(Option::is_some).collect(),
    })
}

/// Root-mean-square path deviation as a percentage of the row count.
pub fn percent_rmse_path(truth: &CrackPath, pred: &CrackPath) -> Result<f64> {
    if truth.x_index.len() != pred.x_index.len() {
        return Err(Error::Misaligned(format!(
            "path lengths {} and {}",
            truth.x_index.len(),
            pred.x_index.len()
        )));
    }
    let undefined = truth
        .x_index
        .iter()
        .chain(&pred.x_index)
        .filter(|v| !v.is_finite())
        .count();
    if undefined > 0 {
        return Err(Error::UndefinedRows(undefined));
    }
    let l = truth.x_index.len() as f64;
    let ms = truth
        .x_index
        .iter()
        .zip(&pred.x_index)
        .map(|(a, b)| ((a - b) / l).powi(2))
        .sum::<f64>()
        / l;
    Ok(ms.sqrt() * 100.0)
}

/// Von Mises RMSE over all frames and pixels, MPa.
pub fn rmse_stress(truth: &[FieldFrame], pred: &[FieldFrame]) -> Result<f64> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::Misaligned(format!("{} vs {} frames", truth.len(), pred.len())));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (t, p) in truth.iter().zip(pred) {
        if (t.strain - p.strain).abs() > 1e-9 || t.sv.dim() != p.sv.dim() {
            return Err(Error::Misaligned(format!(
                "frame at strain {} against {}",
                t.strain, p.strain
            )));
        }
        sum += t.sv.iter().zip(p.sv.iter()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>();
        count += t.sv.len();
    }
    Ok((sum / count as f64).sqrt())
}

pub fn macro_von_mises(frame: &FieldFrame) -> f64 {
    mean(&frame.sv)
}
