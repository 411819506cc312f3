//! Stage-specific training samples built from simulated cases.

use cfrc_core::fields::{Channel, DeformationSequence, Grid};
use cfrc_core::mesh_ingest::{mirror_augment, FloorPolicy, NormStats, StatsAccumulator};
use cfrc_core::{Error, Result};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

/// The four trainable networks, in their required training order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Microstructure to stress components at the UTS.
    Damage1,
    /// Stress components and microstructure to binary final damage.
    Damage2,
    /// Pre-UTS increments.
    Uts,
    /// Post-UTS increments, conditioned on final damage.
    Necking,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Damage1, Stage::Damage2, Stage::Uts, Stage::Necking];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Damage1 => "damage1",
            Stage::Damage2 => "damage2",
            Stage::Uts => "uts",
            Stage::Necking => "necking",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }

    pub fn in_channels(self) -> usize {
        match self {
            Stage::Damage1 => 1,
            Stage::Damage2 | Stage::Uts => 4,
            Stage::Necking => 5,
        }
    }

    pub fn out_channels(self) -> usize {
        match self {
            Stage::Damage1 => 3,
            Stage::Damage2 => 1,
            Stage::Uts | Stage::Necking => 2,
        }
    }

    pub fn sigmoid_head(self) -> bool {
        self == Stage::Damage2
    }

    /// Stages that must be trained before this one.
    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Damage1 => &[],
            Stage::Damage2 => &[Stage::Damage1],
            Stage::Uts => &[Stage::Damage1, Stage::Damage2],
            Stage::Necking => &[Stage::Damage1, Stage::Damage2, Stage::Uts],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetParams {
    /// Frames on each side of the UTS shared by the two increment networks.
    pub phase_overlap: usize,
    /// Final damage above this value counts as damaged.
    pub damage_threshold: f64,
    pub floor_policy: FloorPolicy,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            phase_overlap: 3,
            damage_threshold: 0.5,
            floor_policy: FloorPolicy::Clamp,
        }
    }
}

/// One normalized `(channels, rows, cols)` input/target pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Array3<f32>,
    pub target: Array3<f32>,
}

/// Appends the mirror image of every case.
pub fn with_mirrors(cases: &[DeformationSequence]) -> Vec<DeformationSequence> {
    cases.iter().cloned().chain(cases.iter().map(mirror_augment)).collect()
}

pub fn binarize_final(final_damage: &Grid, threshold: f64) -> Grid {
    final_damage.mapv(|d| if d as f64 > threshold { 1.0 } else { 0.0 })
}

fn diff(a: &Grid, b: &Grid) -> Grid {
    b - a
}

/// Fits every channel's statistics over the given training cases (callers
/// pass the mirror-augmented training split only).
pub fn fit_dataset_stats(train: &[DeformationSequence], params: &DatasetParams) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training cases".into()));
    }
    let mut acc = StatsAccumulator::new();
    for case in train {
        acc.push_grid(Channel::M, &case.microstructure);
        acc.push_grid(Channel::Df, &binarize_final(&case.final_damage, params.damage_threshold));
        for (k, frame) in case.frames.iter().enumerate() {
            acc.push_frame(frame);
            acc.push_grid(Channel::Eps, &Array2::from_elem(frame.sv.dim(), frame.strain as f32));
            if let Some(next) = case.frames.get(k + 1) {
                acc.push_grid(Channel::DSv, &diff(&frame.sv, &next.sv));
                acc.push_grid(Channel::DD, &diff(&frame.damage, &next.damage));
            }
        }
    }
    acc.finish(params.floor_policy)
}

fn stack(planes: &[Grid]) -> Array3<f32> {
    let views: Vec<_> = planes.iter().map(|p| p.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal plane shapes")
}

/// Normalized increment-network input: M, ε-contour, σV, D and optionally
/// the binary final damage.
pub fn increment_input(
    norm: &NormStats,
    micro: &Grid,
    eps: f64,
    sv: &Grid,
    damage: &Grid,
    final_damage: Option<&Grid>,
) -> Result<Array3<f32>> {
    let mut planes = vec![
        norm.normalize_grid(Channel::M, micro)?,
        norm.normalize_grid(Channel::Eps, &Array2::from_elem(micro.dim(), eps as f32))?,
        norm.normalize_grid(Channel::Sv, sv)?,
        norm.normalize_grid(Channel::D, damage)?,
    ];
    if let Some(df) = final_damage {
        planes.push(norm.normalize_grid(Channel::Df, df)?);
    }
    Ok(stack(&planes))
}

/// Normalized damage-stage-2 input: stress components then M.
pub fn damage2_input(norm: &NormStats, stress_normalized: [&Grid; 3], micro: &Grid) -> Result<Array3<f32>> {
    Ok(stack(&[
        stress_normalized[0].clone(),
        stress_normalized[1].clone(),
        stress_normalized[2].clone(),
        norm.normalize_grid(Channel::M, micro)?,
    ]))
}

/// Builds the teacher-forced samples of one stage.
pub fn stage_samples(
    stage: Stage,
    cases: &[DeformationSequence],
    norm: &NormStats,
    params: &DatasetParams,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for case in cases {
        let uts = &case.frames[case.uts_index];
        let stress = [
            norm.normalize_grid(Channel::S11, &uts.s11)?,
            norm.normalize_grid(Channel::S22, &uts.s22)?,
            norm.normalize_grid(Channel::S12, &uts.s12)?,
        ];
        let last_step = case.frames.len() - 1;
        match stage {
            Stage::Damage1 => out.push(Sample {
                input: stack(&[norm.normalize_grid(Channel::M, &case.microstructure)?]),
                target: stack(&stress),
            }),
            Stage::Damage2 => out.push(Sample {
                input: damage2_input(norm, [&stress[0], &stress[1], &stress[2]], &case.microstructure)?,
                target: stack(&[binarize_final(&case.final_damage, params.damage_threshold)]),
            }),
            Stage::Uts | Stage::Necking => {
                let steps = if stage == Stage::Uts {
                    0..(case.uts_index + params.phase_overlap).min(last_step)
                } else {
                    case.uts_index.saturating_sub(params.phase_overlap)..last_step
                };
                let df = binarize_final(&case.final_damage, params.damage_threshold);
                for t in steps {
                    let (now, next) = (&case.frames[t], &case.frames[t + 1]);
                    out.push(Sample {
                        input: increment_input(
                            norm,
                            &case.microstructure,
                            now.strain,
                            &now.sv,
                            &now.damage,
                            (stage == Stage::Necking).then_some(&df),
                        )?,
                        target: stack(&[
                            norm.normalize_grid(Channel::DSv, &diff(&now.sv, &next.sv))?,
                            norm.normalize_grid(Channel::DD, &diff(&now.damage, &next.damage))?,
                        ]),
                    });
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Validation(format!("stage {} has no training samples", stage.name())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cfrc_core::fields::FieldFrame;

    pub(crate) fn toy_case(id: &str, n: usize, frames: usize, peak: usize) -> DeformationSequence {
        let fr: Vec<FieldFrame> = (0..frames)
            .map(|t| {
                let mut f = FieldFrame::zeros(t as f64 * 0.001, n);
                let level = if t <= peak { t as f32 * 10.0 } else { (2 * peak - t) as f32 * 10.0 };
                for ((i, j), v) in f.sv.indexed_iter_mut() {
                    *v = level * (1.0 + 0.1 * ((i + 2 * j) % 3) as f32);
                }
                f.s11 = f.sv.clone();
                f.s12 = f.sv.mapv(|v| 0.1 * v * if n > 1 { 1.0 } else { 0.0 });
                for ((i, _), d) in f.damage.indexed_iter_mut() {
                    *d = if t > peak && i == 1 { 0.3 * (t - peak) as f32 } else { 0.0 }.min(1.0);
                }
                f
            })
            .collect();
        let m = Array2::from_shape_fn((n, n), |(i, j)| ((i * 3 + j) % 4 == 0) as u8 as f32);
        DeformationSequence::from_frames(id, 0, m, fr).unwrap()
    }

    #[test]
    fn stage_contracts() {
        assert_eq!(Stage::Uts.in_channels(), 4);
        assert_eq!(Stage::Necking.in_channels(), 5);
        assert_eq!(Stage::Uts.out_channels(), 2);
        assert_eq!(Stage::parse("necking").unwrap(), Stage::Necking);
        assert!(Stage::parse("bogus").is_err());
        assert_eq!(Stage::Necking.prerequisites().len(), 3);
    }

    #[test]
    fn sample_windows_overlap_at_the_peak() {
        let case = toy_case("a", 4, 10, 5);
        let cases = with_mirrors(&[case]);
        let params = DatasetParams::default();
        let norm = fit_dataset_stats(&cases, &params).unwrap();
        let uts = stage_samples(Stage::Uts, &cases, &norm, &params).unwrap();
        let neck = stage_samples(Stage::Necking, &cases, &norm, &params).unwrap();
        // Steps 0..8 before, 2..9 after, for both the case and its mirror.
        assert_eq!(uts.len(), 2 * 8);
        assert_eq!(neck.len(), 2 * 7);
        assert_eq!(uts[0].input.dim(), (4, 4, 4));
        assert_eq!(neck[0].input.dim(), (5, 4, 4));
        assert_eq!(uts[0].target.dim(), (2, 4, 4));
        let d1 = stage_samples(Stage::Damage1, &cases, &norm, &params).unwrap();
        assert_eq!((d1.len(), d1[0].input.dim().0, d1[0].target.dim().0), (2, 1, 3));
        let d2 = stage_samples(Stage::Damage2, &cases, &norm, &params).unwrap();
        assert_eq!(d2[0].input.dim().0, 4);
        assert!(d2.iter().all(|s| s.target.iter().all(|&v| v == 0.0 || v == 1.0)));
    }

    #[test]
    fn increment_targets_denormalize_to_true_differences() {
        let case = toy_case("a", 3, 6, 3);
        let params = DatasetParams::default();
        let norm = fit_dataset_stats(std::slice::from_ref(&case), &params).unwrap();
        let s = &stage_samples(Stage::Uts, std::slice::from_ref(&case), &norm, &params).unwrap()[1];
        let dsv = norm
            .denormalize_grid(Channel::DSv, &s.target.index_axis(Axis(0), 0).to_owned())
            .unwrap();
        let truth = &case.frames[2].sv - &case.frames[1].sv;
        assert!((&dsv - &truth).iter().all(|d| d.abs() < 1e-4));
    }

    #[test]
    fn empty_training_set_is_rejected() {
        assert!(fit_dataset_stats(&[], &DatasetParams::default()).is_err());
    }
}
