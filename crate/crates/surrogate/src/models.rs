//! Model interfaces used by the rollout, with U-Net backed implementations
//! and stubs for scripted and oracle-echo runs.

use cfrc_core::fields::{Channel, DeformationSequence, Grid};
use cfrc_core::mesh_ingest::NormStats;
use cfrc_core::{Error, Result};
use cfrc_unet::{Mode, UNet};
use ndarray::{Array2, Array3, Array4, Axis};

use crate::dataset::{binarize_final, damage2_input, increment_input, Stage};

/// State handed to an increment model for one strain step.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    /// Index of the current frame (the increment leads to frame `step + 1`).
    pub step: usize,
    pub micro: &'a Grid,
    pub eps: f64,
    pub sv: &'a Array2<f64>,
    pub damage: &'a Array2<f64>,
    /// Binary final damage; required by post-UTS models.
    pub final_damage: Option<&'a Grid>,
}

/// Per-pixel increments in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Increments {
    pub dsv: Array2<f64>,
    pub dd: Array2<f64>,
}

pub trait IncrementModel {
    fn predict(&mut self, input: &StepInput<'_>) -> Result<Increments>;
}

pub trait FinalDamageModel {
    /// Per-pixel damage probability in `[0, 1]`.
    fn predict(&mut self, micro: &Grid) -> Result<Grid>;
}

fn batch_of_one(x: Array3<f32>) -> Array4<f32> {
    x.insert_axis(Axis(0))
}

fn check_grid(net: &UNet<f32>, grid: &Grid) -> Result<()> {
    let r = net.config().resolution;
    if grid.dim() != (r, r) {
        return Err(Error::ShapeMismatch {
            expected: vec![r, r],
            got: grid.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_norm(checkpoint: Option<&NormStats>, norm: &NormStats, what: &str) -> Result<()> {
    match checkpoint {
        Some(n) if n == norm => Ok(()),
        Some(_) => Err(Error::Validation(format!(
            "{what} checkpoint normalization differs from the bundle statistics"
        ))),
        None => Err(Error::Validation(format!("{what} checkpoint carries no normalization statistics"))),
    }
}

/// UTS-Net or Necking-Net.
#[derive(Debug, Clone)]
pub struct UNetIncrement {
    pub net: UNet<f32>,
    pub norm: NormStats,
    pub stage: Stage,
}

impl UNetIncrement {
    /// Wraps a network, checking its channel contract and that its
    /// checkpoint statistics (if given) match `norm`.
    pub fn new(net: UNet<f32>, norm: NormStats, stage: Stage, checkpoint_norm: Option<&NormStats>) -> Result<Self> {
        if !matches!(stage, Stage::Uts | Stage::Necking) {
            return Err(Error::InvalidArgument(format!("{} is not an increment stage", stage.name())));
        }
        let cfg = net.config();
        if (cfg.in_channels, cfg.out_channels) != (stage.in_channels(), stage.out_channels()) {
            return Err(Error::ChannelMismatch(format!(
                "{} network has {}→{} channels, expected {}→{}",
                stage.name(),
                cfg.in_channels,
                cfg.out_channels,
                stage.in_channels(),
                stage.out_channels()
            )));
        }
        check_norm(checkpoint_norm.or(Some(&norm)), &norm, stage.name())?;
        Ok(UNetIncrement { net, norm, stage })
    }
}

impl IncrementModel for UNetIncrement {
    fn predict(&mut self, input: &StepInput<'_>) -> Result<Increments> {
        check_grid(&self.net, input.micro)?;
        let final_damage = match (self.stage, input.final_damage) {
            (Stage::Necking, None) => return Err(Error::MissingChannel(Channel::Df.name().into())),
            (Stage::Necking, df) => df,
            _ => None,
        };
        let x = increment_input(
            &self.norm,
            input.micro,
            input.eps,
            &input.sv.mapv(|v| v as f32),
            &input.damage.mapv(|v| v as f32),
            final_damage,
        )?;
        let y = self.net.forward(&batch_of_one(x), Mode::Eval)?;
        let plane = |c: usize| y.index_axis(Axis(0), 0).index_axis(Axis(0), c).to_owned();
        Ok(Increments {
            dsv: self.norm.denormalize_grid(Channel::DSv, &plane(0))?.mapv(f64::from),
            dd: self.norm.denormalize_grid(Channel::DD, &plane(1))?.mapv(f64::from),
        })
    }
}

/// Two-stage Damage-Net.
#[derive(Debug, Clone)]
pub struct UNetFinalDamage {
    pub stage1: UNet<f32>,
    pub stage2: UNet<f32>,
    pub norm: NormStats,
}

impl UNetFinalDamage {
    pub fn new(stage1: UNet<f32>, stage2: UNet<f32>, norm: NormStats) -> Result<Self> {
        for (net, stage) in [(&stage1, Stage::Damage1), (&stage2, Stage::Damage2)] {
            let cfg = net.config();
            if (cfg.in_channels, cfg.out_channels) != (stage.in_channels(), stage.out_channels()) {
                return Err(Error::ChannelMismatch(format!("{} network channel counts", stage.name())));
            }
        }
        if stage1.config().resolution != stage2.config().resolution {
            return Err(Error::Validation("damage stages disagree on resolution".into()));
        }
        Ok(UNetFinalDamage { stage1, stage2, norm })
    }

    /// Stage-1 output: normalized (σ11, σ22, σ12) at the UTS.
    pub fn predict_stress_normalized(&mut self, micro: &Grid) -> Result<[Grid; 3]> {
        check_grid(&self.stage1, micro)?;
        let m = self.norm.normalize_grid(Channel::M, micro)?.insert_axis(Axis(0));
        let y = self.stage1.forward(&batch_of_one(m), Mode::Eval)?;
        let plane = |c: usize| y.index_axis(Axis(0), 0).index_axis(Axis(0), c).to_owned();
        Ok([plane(0), plane(1), plane(2)])
    }
}

impl FinalDamageModel for UNetFinalDamage {
    fn predict(&mut self, micro: &Grid) -> Result<Grid> {
        let s = self.predict_stress_normalized(micro)?;
        let x = damage2_input(&self.norm, [&s[0], &s[1], &s[2]], micro)?;
        let y = self.stage2.forward(&batch_of_one(x), Mode::Eval)?;
        Ok(y.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned())
    }
}

/// Replays the true increments and final damage of a simulated case.
#[derive(Debug, Clone)]
pub struct OracleEcho {
    pub truth: DeformationSequence,
}

impl IncrementModel for OracleEcho {
    fn predict(&mut self, input: &StepInput<'_>) -> Result<Increments> {
        let frames = &self.truth.frames;
        let (now, next) = match (frames.get(input.step), frames.get(input.step + 1)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "oracle echo has no increment for step {}",
                    input.step
                )))
            }
        };
        let delta = |a: &Grid, b: &Grid| ndarray::Zip::from(a).and(b).map_collect(|&a, &b| b as f64 - a as f64);
        Ok(Increments {
            dsv: delta(&now.sv, &next.sv),
            dd: delta(&now.damage, &next.damage),
        })
    }
}

impl FinalDamageModel for OracleEcho {
    fn predict(&mut self, _micro: &Grid) -> Result<Grid> {
        Ok(self.truth.final_damage.clone())
    }
}

/// Emits spatially constant increments from a script; the last entry
/// repeats once the script is exhausted.
#[derive(Debug, Clone, PartialEq)]
pub struct Scripted {
    pub dsv: Vec<f64>,
    pub dd: f64,
    /// Number of calls served so far.
    pub calls: usize,
}

impl Scripted {
    pub fn new(dsv: Vec<f64>, dd: f64) -> Self {
        Scripted { dsv, dd, calls: 0 }
    }
}

impl IncrementModel for Scripted {
    fn predict(&mut self, input: &StepInput<'_>) -> Result<Increments> {
        let v = *self
            .dsv
            .get(self.calls)
            .or(self.dsv.last())
            .ok_or_else(|| Error::InvalidArgument("empty script".into()))?;
        self.calls += 1;
        Ok(Increments {
            dsv: Array2::from_elem(input.sv.dim(), v),
            dd: Array2::from_elem(input.sv.dim(), self.dd),
        })
    }
}

/// Constant damage probability, for scripted runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantDamage(pub f32);

impl FinalDamageModel for ConstantDamage {
    fn predict(&mut self, micro: &Grid) -> Result<Grid> {
        Ok(Array2::from_elem(micro.dim(), self.0))
    }
}

/// Binary final damage passed to the post-UTS model.
pub fn final_damage_input(probability: &Grid, threshold: f64) -> Grid {
    binarize_final(probability, threshold)
}
