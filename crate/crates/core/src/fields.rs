//! Grid-valued field frames and deformation sequences.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A square single-channel field, row-major, row index = y, column index = x.
pub type Grid = Array2<f32>;

/// Named per-pixel quantities that travel through the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    /// Fiber indicator (1 = fiber, 0 = matrix).
    M,
    /// Applied strain broadcast over the grid.
    Eps,
    S11,
    S22,
    S12,
    /// von Mises stress.
    Sv,
    /// Damage in [0, 1].
    D,
    /// Von Mises increment between consecutive strain steps.
    DSv,
    /// Damage increment between consecutive strain steps.
    DD,
    /// Final (binarized) damage pattern.
    Df,
}

impl Channel {
    pub const FRAME: [Channel; 5] = [Channel::S11, Channel::S22, Channel::S12, Channel::Sv, Channel::D];
    pub const ALL: [Channel; 10] = [
        Channel::M,
        Channel::Eps,
        Channel::S11,
        Channel::S22,
        Channel::S12,
        Channel::Sv,
        Channel::D,
        Channel::DSv,
        Channel::DD,
        Channel::Df,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::M => "M",
            Channel::Eps => "eps",
            Channel::S11 => "s11",
            Channel::S22 => "s22",
            Channel::S12 => "s12",
            Channel::Sv => "sv",
            Channel::D => "D",
            Channel::DSv => "dsv",
            Channel::DD => "dD",
            Channel::Df => "Df",
        }
    }

    pub fn from_name(name: &str) -> Option<Channel> {
        Channel::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl std::fmt::Display for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One strain step: stress components, von Mises stress and damage.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldFrame {
    pub strain: f64,
    pub s11: Grid,
    pub s22: Grid,
    pub s12: Grid,
    pub sv: Grid,
    pub damage: Grid,
}

impl FieldFrame {
    pub fn zeros(strain: f64, n: usize) -> Self {
        let z = Grid::zeros((n, n));
        FieldFrame {
            strain,
            s11: z.clone(),
            s22: z.clone(),
            s12: z.clone(),
            sv: z.clone(),
            damage: z,
        }
    }

    pub fn size(&self) -> usize {
        self.sv.nrows()
    }

    pub fn channel(&self, c: Channel) -> Option<&Grid> {
        match c {
            Channel::S11 => Some(&self.s11),
            Channel::S22 => Some(&self.s22),
            Channel::S12 => Some(&self.s12),
            Channel::Sv => Some(&self.sv),
            Channel::D => Some(&self.damage),
            _ => None,
        }
    }

    pub fn channel_mut(&mut self, c: Channel) -> Option<&mut Grid> {
        match c {
            Channel::S11 => Some(&mut self.s11),
            Channel::S22 => Some(&mut self.s22),
            Channel::S12 => Some(&mut self.s12),
            Channel::Sv => Some(&mut self.sv),
            Channel::D => Some(&mut self.damage),
            _ => None,
        }
    }

    /// Pixel mean of the von Mises field (macro stress).
    pub fn macro_stress(&self) -> f64 {
        mean(&self.sv)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.sv.nrows();
        for c in Channel::FRAME {
            let g = self.channel(c).expect("frame channel");
            if g.dim() != (n, n) {
                return Err(Error::ShapeMismatch {
                    expected: vec![n, n],
                    got: g.shape().to_vec(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(c.name().into()));
            }
        }
        if self.damage.iter().any(|&d| !(0.0..=1.0).contains(&d)) {
            return Err(Error::Validation("damage outside [0, 1]".into()));
        }
        if self.sv.iter().any(|&s| s < 0.0) {
            return Err(Error::Validation("negative von Mises stress".into()));
        }
        Ok(())
    }
}

/// Mean of a grid accumulated in f64. Columns are summed in mirrored pairs,
/// so a left-right flip of the grid gives a bit-identical mean.
pub fn mean(g: &Grid) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    let w = g.ncols();
    let mut total = 0.0;
    for row in g.rows() {
        let mut acc = 0.0;
        for j in 0..w / 2 {
            acc += row[j] as f64 + row[w - 1 - j] as f64;
        }
        if w % 2 == 1 {
            acc += row[w / 2] as f64;
        }
        total += acc;
    }
    total / g.len() as f64
}

/// Frames of one case from zero strain to the final strain.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationSequence {
    pub case_id: String,
    pub seed: u64,
    pub microstructure: Grid,
    pub frames: Vec<FieldFrame>,
    pub uts_index: usize,
    pub final_damage: Grid,
}

impl DeformationSequence {
    /// Builds a sequence, deriving the UTS index and final damage from the frames.
    pub fn from_frames(case_id: impl Into<String>, seed: u64, microstructure: Grid, frames: Vec<FieldFrame>) -> Result<Self> {
        let last = frames
            .last()
            .ok_or_else(|| Error::Validation("sequence has no frames".into()))?;
        let final_damage = last.damage.clone();
        let uts_index = uts_index(&frames);
        let seq = DeformationSequence {
            case_id: case_id.into(),
            seed,
            microstructure,
            frames,
            uts_index,
            final_damage,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn size(&self) -> usize {
        self.microstructure.nrows()
    }

    pub fn strains(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.strain).collect()
    }

    pub fn macro_curve(&self) -> Vec<f64> {
        self.frames.iter().map(FieldFrame::macro_stress).collect()
    }

    pub fn max_stress(&self) -> f32 {
        self.frames
            .iter()
            .flat_map(|f| f.sv.iter().copied())
            .fold(0.0, f32::max)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.microstructure.nrows();
        if self.microstructure.ncols() != n {
            return Err(Error::Validation("microstructure grid is not square".into()));
        }
        if self.frames.is_empty() {
            return Err(Error::Validation("sequence has no frames".into()));
        }
        if self.frames[0].strain != 0.0 {
            return Err(Error::Validation(format!(
                "first frame strain must be 0, got {}",
                self.frames[0].strain
            )));
        }
        for w in self.frames.windows(2) {
            if !(w[1].strain > w[0].strain) {
                return Err(Error::Validation(format!(
                    "strains not strictly increasing: {} then {}",
                    w[0].strain, w[1].strain
                )));
            }
        }
        for f in &self.frames {
            if f.size() != n {
                return Err(Error::ShapeMismatch {
                    expected: vec![n, n],
                    got: vec![f.size(), f.size()],
                });
            }
            f.validate()?;
        }
        if self.uts_index >= self.frames.len() {
            return Err(Error::Validation(format!("uts_index {} out of range", self.uts_index)));
        }
        if self.final_damage.dim() != (n, n) {
            return Err(Error::Validation("final damage shape".into()));
        }
        Ok(())
    }
}

/// Index of the first frame reaching the maximum macro stress.
pub fn uts_index(frames: &[FieldFrame]) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, f) in frames.iter().enumerate() {
        let m = f.macro_stress();
        if m > best_val {
            best_val = m;
            best = i;
        }
    }
    best
}
