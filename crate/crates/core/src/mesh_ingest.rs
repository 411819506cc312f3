//! Unstructured-mesh resampling, channel normalization and mirror augmentation.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::fields::{Channel, DeformationSequence, FieldFrame, Grid};
use crate::{Error, Result};

/// Finite-element output: nodes, triangles and per-node scalar arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnstructuredField {
    /// Node coordinates in µm.
    pub points: Vec<[f64; 2]>,
    pub cells: Vec<[usize; 3]>,
    pub point_data: BTreeMap<String, Vec<f64>>,
}

impl UnstructuredField {
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let n = self.points.len();
        if let Some(cell) = self.cells.iter().find(|c| c.iter().any(|&i| i >= n)) {
            return Err(Error::Validation(format!("cell {cell:?} references a missing point")));
        }
        for (name, values) in &self.point_data {
            if values.len() != n {
                return Err(Error::Validation(format!(
                    "array {name} has {} values for {n} points",
                    values.len()
                )));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name.clone()));
            }
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("points".into()));
        }
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let field: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        field.validate()?;
        Ok(field)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdwParams {
    pub power: f64,
    pub k: usize,
    /// Distance below which a node value is returned as is.
    pub snap: f64,
}

impl Default for IdwParams {
    fn default() -> Self {
        IdwParams {
            power: 2.0,
            k: 8,
            snap: 1e-9,
        }
    }
}

/// Uniform bucket grid for k-nearest-neighbor queries over 2-D points.
pub struct PointIndex<'a> {
    points: &'a [[f64; 2]],
    origin: [f64; 2],
    cell: f64,
    dims: [usize; 2],
    buckets: Vec<Vec<usize>>,
}

impl<'a> PointIndex<'a> {
    pub fn new(points: &'a [[f64; 2]]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
        let per_side = ((points.len() as f64 / 2.0).sqrt().ceil() as usize).max(1);
        let cell = extent / per_side as f64;
        let dims = [
            ((hi[0] - lo[0]) / cell).floor() as usize + 1,
            ((hi[1] - lo[1]) / cell).floor() as usize + 1,
        ];
        let mut buckets = vec![Vec::new(); dims[0] * dims[1]];
        let mut index = PointIndex {
            points,
            origin: lo,
            cell,
            dims,
            buckets: Vec::new(),
        };
        for (i, p) in points.iter().enumerate() {
            let [cx, cy] = index.cell_of(p);
            buckets[cy * dims[0] + cx].push(i);
        }
        index.buckets = buckets;
        Ok(index)
    }

    fn cell_of(&self, p: &[f64; 2]) -> [usize; 2] {
        let mut out = [0usize; 2];
        for a in 0..2 {
            let c = ((p[a] - self.origin[a]) / self.cell).floor();
            out[a] = (c.max(0.0) as usize).min(self.dims[a] - 1);
        }
        out
    }

    /// Indices and distances of the `k` nearest points, closest first.
    /// Ties are broken by point index so results are deterministic.
    pub fn nearest(&self, q: [f64; 2], k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.points.len());
        // Distances from the projection of q onto the index box are lower
        // bounds for distances from q itself.
        let [cx, cy] = self.cell_of(&q);
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        let max_ring = self.dims[0].max(self.dims[1]);
        for r in 0..=max_ring {
            let (x0, x1) = (cx as isize - r as isize, cx as isize + r as isize);
            let (y0, y1) = (cy as isize - r as isize, cy as isize + r as isize);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let on_ring = x == x0 || x == x1 || y == y0 || y == y1;
                    if !on_ring || x < 0 || y < 0 || x >= self.dims[0] as isize || y >= self.dims[1] as isize {
                        continue;
                    }
                    for &i in &self.buckets[y as usize * self.dims[0] + x as usize] {
                        let p = self.points[i];
                        let d = (p[0] - q[0]).hypot(p[1] - q[1]);
                        let pos = best.partition_point(|&(j, e)| e < d || (e == d && j < i));
                        if pos < k {
                            best.insert(pos, (i, d));
                            best.truncate(k);
                        }
                    }
                }
            }
            if best.len() == k && best[k - 1].1 <= r as f64 * self.cell {
                break;
            }
        }
        best
    }
}

/// Inverse-distance-weighted value at `q` from the `k` nearest nodes.
pub fn idw_at(index: &PointIndex, values: &[f64], q: [f64; 2], params: &IdwParams) -> f64 {
    let near = index.nearest(q, params.k);
    if let Some(&(i, d)) = near.first() {
        if d <= params.snap {
            return values[i];
        }
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (i, d) in near {
        let w = d.powf(-params.power);
        num += w * values[i];
        den += w;
    }
    num / den
}

/// Resamples every point array onto the centers of an `n × n` pixel grid
/// spanning `[0, domain]²`. Row index grows with y, column index with x.
pub fn resample_to_grid(
    field: &UnstructuredField,
    domain: f64,
    n: usize,
    params: &IdwParams,
) -> Result<BTreeMap<String, Grid>> {
    field.validate()?;
    if !(params.power > 0.0) || params.k == 0 || n == 0 || !(domain > 0.0) {
        return Err(Error::InvalidArgument(
            "IDW needs power > 0, k >= 1 and a non-empty grid".into(),
        ));
    }
    let index = PointIndex::new(&field.points)?;
    let h = domain / n as f64;
    let neighbors: Vec<Vec<(usize, f64)>> = (0..n * n)
        .map(|idx| {
            let (row, col) = (idx / n, idx % n);
            index.nearest([(col as f64 + 0.5) * h, (row as f64 + 0.5) * h], params.k)
        })
        .collect();
    let mut out = BTreeMap::new();
    for (name, values) in &field.point_data {
        let grid = Array2::from_shape_fn((n, n), |(row, col)| {
            let near = &neighbors[row * n + col];
            if near[0].1 <= params.snap {
                return values[near[0].0] as f32;
            }
            let (mut num, mut den) = (0.0, 0.0);
            for &(i, d) in near {
                let w = d.powf(-params.power);
                num += w * values[i];
                den += w;
            }
            (num / den) as f32
        });
        out.insert(name.clone(), grid);
    }
    Ok(out)
}

/// Builds a frame from resampled arrays named after [`Channel`]s.
pub fn frame_from_resampled(strain: f64, arrays: &BTreeMap<String, Grid>) -> Result<FieldFrame> {
    let n = arrays
        .values()
        .next()
        .map(|g| g.nrows())
        .ok_or_else(|| Error::MissingChannel("any".into()))?;
    let mut frame = FieldFrame::zeros(strain, n);
    for c in Channel::FRAME {
        let grid = arrays.get(c.name()).ok_or_else(|| Error::MissingChannel(c.name().into()))?;
        *frame.channel_mut(c).expect("frame channel") = grid.clone();
    }
    Ok(frame)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloorPolicy {
    #[default]
    Clamp,
    Reject,
}

pub const STD_FLOOR: f64 = 1e-8;

/// Mean and standard deviation of one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Streaming per-channel moments, mergeable across workers.
#[derive(Debug, Clone, Default)]
pub struct StatsAccumulator {
    moments: BTreeMap<String, (f64, f64, f64)>,
}

impl StatsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_grid(&mut self, channel: Channel, grid: &Grid) {
        let count = grid.len() as f64;
        if count == 0.0 {
            return;
        }
        let mean = grid.iter().map(|&v| v as f64).sum::<f64>() / count;
        let m2 = grid.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
        self.merge_moments(channel.name(), (count, mean, m2));
    }

    pub fn push_frame(&mut self, frame: &FieldFrame) {
        for c in Channel::FRAME {
            self.push_grid(c, frame.channel(c).expect("frame channel"));
        }
    }

    fn merge_moments(&mut self, name: &str, (nb, mb, m2b): (f64, f64, f64)) {
        let entry = self.moments.entry(name.to_string()).or_insert((0.0, 0.0, 0.0));
        let (na, ma, m2a) = *entry;
        let n = na + nb;
        let delta = mb - ma;
        *entry = (n, ma + delta * nb / n, m2a + m2b + delta * delta * na * nb / n);
    }

    pub fn merge(&mut self, other: &StatsAccumulator) {
        for (name, &m) in &other.moments {
            self.merge_moments(name, m);
        }
    }

    pub fn finish(&self, policy: FloorPolicy) -> Result<NormStats> {
        if self.moments.is_empty() {
            return Err(Error::InvalidArgument("no training data for normalization".into()));
        }
        let mut channels = BTreeMap::new();
        for (name, &(n, mean, m2)) in &self.moments {
            let std = (m2 / n).sqrt();
            let std = if std > STD_FLOOR {
                std
            } else if policy == FloorPolicy::Reject {
                return Err(Error::DegenerateChannel(name.clone(), std));
            } else {
                STD_FLOOR
            };
            channels.insert(name.clone(), ChannelStats { mean, std });
        }
        Ok(NormStats { channels })
    }
}

/// Per-channel normalization constants fitted on training data only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub channels: BTreeMap<String, ChannelStats>,
}

impl NormStats {
    pub fn get(&self, channel: Channel) -> Result<ChannelStats> {
        self.channels
            .get(channel.name())
            .copied()
            .ok_or_else(|| Error::ChannelMismatch(format!("no statistics for channel {channel}")))
    }

    pub fn normalize_value(&self, channel: Channel, x: f64) -> Result<f64> {
        let s = self.get(channel)?;
        Ok((x - s.mean) / s.std)
    }

    pub fn denormalize_value(&self, channel: Channel, z: f64) -> Result<f64> {
        let s = self.get(channel)?;
        Ok(z * s.std + s.mean)
    }

    pub fn normalize_grid(&self, channel: Channel, grid: &Grid) -> Result<Grid> {
        let s = self.get(channel)?;
        Ok(grid.mapv(|v| ((v as f64 - s.mean) / s.std) as f32))
    }

    pub fn denormalize_grid(&self, channel: Channel, grid: &Grid) -> Result<Grid> {
        let s = self.get(channel)?;
        Ok(grid.mapv(|v| (v as f64 * s.std + s.mean) as f32))
    }

    fn map_frame(&self, frame: &FieldFrame, f: impl Fn(&Self, Channel, &Grid) -> Result<Grid>) -> Result<FieldFrame> {
        let mut out = frame.clone();
        for c in Channel::FRAME {
            *out.channel_mut(c).expect("frame channel") = f(self, c, frame.channel(c).expect("frame channel"))?;
        }
        Ok(out)
    }

    /// Maps every stress and damage channel to zero mean, unit variance.
    /// The result is a feature array, so it is not re-validated as a frame.
    pub fn normalize(&self, frame: &FieldFrame) -> Result<FieldFrame> {
        self.map_frame(frame, Self::normalize_grid)
    }

    pub fn denormalize(&self, frame: &FieldFrame) -> Result<FieldFrame> {
        self.map_frame(frame, Self::denormalize_grid)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Fits statistics over every pixel of every frame channel.
pub fn fit_norm_stats(training_frames: &[FieldFrame], policy: FloorPolicy) -> Result<NormStats> {
    if training_frames.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut acc = StatsAccumulator::new();
    for f in training_frames {
        acc.push_frame(f);
    }
    acc.finish(policy)
}

pub fn mirror_grid(grid: &Grid) -> Grid {
    let mut out = grid.clone();
    out.invert_axis(Axis(1));
    out.as_standard_layout().to_owned()
}

pub fn mirror_frame(frame: &FieldFrame) -> FieldFrame {
    FieldFrame {
        strain: frame.strain,
        s11: mirror_grid(&frame.s11),
        s22: mirror_grid(&frame.s22),
        s12: mirror_grid(&frame.s12).mapv(|v| -v),
        sv: mirror_grid(&frame.sv),
        damage: mirror_grid(&frame.damage),
    }
}

/// Reflects a case about the vertical axis; shear changes sign.
pub fn mirror_augment(sequence: &DeformationSequence) -> DeformationSequence {
    let case_id = match sequence.case_id.strip_suffix("-mirror") {
        Some(base) => base.to_string(),
        None => format!("{}-mirror", sequence.case_id),
    };
    DeformationSequence {
        case_id,
        seed: sequence.seed,
        microstructure: mirror_grid(&sequence.microstructure),
        frames: sequence.frames.iter().map(mirror_frame).collect(),
        uts_index: sequence.uts_index,
        final_damage: mirror_grid(&sequence.final_damage),
    }
}
