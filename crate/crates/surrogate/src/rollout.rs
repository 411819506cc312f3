//! Auto-regressive Composite-Net inference.

use cfrc_core::fields::{DeformationSequence, FieldFrame, Grid};
use cfrc_core::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::models::{final_damage_input, FinalDamageModel, IncrementModel, StepInput};

/// Macro stress increment (MPa) below which the rollout leaves the pre-UTS phase.
pub const SWITCH_THRESHOLD: f64 = 0.1;
/// Macro stress (MPa) the switch additionally requires.
pub const GUARD_FLOOR: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutParams {
    pub d_eps: f64,
    pub eps_f: f64,
    pub switch_threshold: f64,
    pub guard_floor: f64,
    /// Clamp damage increments to be non-negative before accumulating.
    pub monotone_damage: bool,
    /// Probability above which predicted final damage counts as damaged.
    pub damage_threshold: f64,
}

impl Default for RolloutParams {
    fn default() -> Self {
        RolloutParams {
            d_eps: 0.0002,
            eps_f: 0.012,
            switch_threshold: SWITCH_THRESHOLD,
            guard_floor: GUARD_FLOOR,
            monotone_damage: true,
            damage_threshold: 0.5,
        }
    }
}

impl RolloutParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_eps > 0.0 && self.eps_f > 0.0 && self.d_eps <= self.eps_f) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < d_eps <= eps_f, got {} and {}",
                self.d_eps, self.eps_f
            )));
        }
        if !(self.switch_threshold.is_finite() && self.guard_floor.is_finite()) {
            return Err(Error::InvalidArgument("switch threshold and guard floor must be finite".into()));
        }
        Ok(())
    }

    /// Number of increments taken from strain `eps0` to `eps_f`.
    pub fn steps_from(&self, eps0: f64) -> usize {
        ((self.eps_f - eps0) / self.d_eps).round().max(0.0) as usize
    }
}

/// True iff the macro stress increment has flattened below the threshold
/// while the macro stress is above the guard floor.
pub fn should_switch(d_sigma_m: f64, sigma_m: f64, floor: f64) -> bool {
    should_switch_at(d_sigma_m, sigma_m, SWITCH_THRESHOLD, floor)
}

pub fn should_switch_at(d_sigma_m: f64, sigma_m: f64, threshold: f64, floor: f64) -> bool {
    d_sigma_m < threshold && sigma_m > floor
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    PreUts,
    PostUts,
    Done,
}

/// Accumulated rollout state, kept in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeState {
    pub eps: f64,
    pub sv: Array2<f64>,
    pub damage: Array2<f64>,
    pub phase: Phase,
    /// Predicted final damage probability, set when the post-UTS phase starts.
    pub final_damage: Option<Grid>,
    /// Pixel mean of each applied σV increment.
    pub dsm_history: Vec<f64>,
}

impl CompositeState {
    /// Zero strain, zero stress, no damage.
    pub fn initial(n: usize) -> Self {
        CompositeState {
            eps: 0.0,
            sv: Array2::zeros((n, n)),
            damage: Array2::zeros((n, n)),
            phase: Phase::PreUts,
            final_damage: None,
            dsm_history: Vec::new(),
        }
    }

    fn frame(&self) -> FieldFrame {
        let n = self.sv.nrows();
        let mut f = FieldFrame::zeros(self.eps, n);
        // Stress components are not predicted; von Mises stress cannot be negative.
        f.sv = self.sv.mapv(|v| v.max(0.0) as f32);
        f.damage = self.damage.mapv(|v| v as f32);
        f
    }
}

pub fn pixel_mean(a: &Array2<f64>) -> f64 {
    a.sum() / a.len() as f64
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub sequence: DeformationSequence,
    /// 1-based step after which the post-UTS phase began.
    pub switch_step: Option<usize>,
    pub dsm_history: Vec<f64>,
    /// Phase used for each step.
    pub phases: Vec<Phase>,
    pub final_damage: Option<Grid>,
}

impl RolloutResult {
    /// Set when ε_f was reached without the switch firing.
    pub fn switch_never_fired(&self) -> bool {
        self.switch_step.is_none()
    }
}

/// Rolls a case out from zero strain.
pub fn rollout_case(
    case_id: &str,
    seed: u64,
    micro: &Grid,
    uts: &mut dyn IncrementModel,
    necking: &mut dyn IncrementModel,
    damage: &mut dyn FinalDamageModel,
    params: &RolloutParams,
) -> Result<RolloutResult> {
    if micro.nrows() != micro.ncols() {
        return Err(Error::ShapeMismatch {
            expected: vec![micro.nrows(), micro.nrows()],
            got: micro.shape().to_vec(),
        });
    }
    rollout_from(case_id, seed, micro, CompositeState::initial(micro.nrows()), uts, necking, damage, params)
}

/// Rolls a case out from an arbitrary pre-UTS state until ε_f.
#[allow(clippy::too_many_arguments)]
pub fn rollout_from(
    case_id: &str,
    seed: u64,
    micro: &Grid,
    mut state: CompositeState,
    uts: &mut dyn IncrementModel,
    necking: &mut dyn IncrementModel,
    damage: &mut dyn FinalDamageModel,
    params: &RolloutParams,
) -> Result<RolloutResult> {
    params.validate()?;
    if state.phase != Phase::PreUts {
        return Err(Error::InvalidArgument("rollout must start in the pre-UTS phase".into()));
    }
    if state.sv.dim() != micro.dim() || state.damage.dim() != micro.dim() {
        return Err(Error::ShapeMismatch {
            expected: micro.shape().to_vec(),
            got: state.sv.shape().to_vec(),
        });
    }
    let eps0 = state.eps;
    let steps = params.steps_from(eps0);
    let mut frames = Vec::with_capacity(steps + 1);
    frames.push(state.frame());
    let mut switch_step = None;
    let mut phases = Vec::with_capacity(steps);
    let mut necking_input: Option<Grid> = None;

    for k in 0..steps {
        let input = StepInput {
            step: k,
            micro,
            eps: state.eps,
            sv: &state.sv,
            damage: &state.damage,
            final_damage: necking_input.as_ref(),
        };
        let inc = match state.phase {
            Phase::PreUts => uts.predict(&input)?,
            Phase::PostUts => necking.predict(&input)?,
            Phase::Done => unreachable!("loop ends before the done phase"),
        };
        phases.push(state.phase);
        if inc.dsv.dim() != micro.dim() || inc.dd.dim() != micro.dim() {
            return Err(Error::ShapeMismatch {
                expected: micro.shape().to_vec(),
                got: inc.dsv.shape().to_vec(),
            });
        }
        if inc.dsv.iter().chain(inc.dd.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("rollout step {}", k + 1)));
        }
        state.sv += &inc.dsv;
        let monotone = params.monotone_damage;
        ndarray::Zip::from(&mut state.damage).and(&inc.dd).for_each(|d, &dd| {
            let dd = if monotone { dd.max(0.0) } else { dd };
            *d = (*d + dd).clamp(0.0, 1.0);
        });
        state.eps = eps0 + (k + 1) as f64 * params.d_eps;
        let dsm = pixel_mean(&inc.dsv);
        state.dsm_history.push(dsm);
        frames.push(state.frame());

        if state.phase == Phase::PreUts
            && should_switch_at(dsm, pixel_mean(&state.sv), params.switch_threshold, params.guard_floor)
        {
            state.phase = Phase::PostUts;
            switch_step = Some(k + 1);
            let df = damage.predict(micro)?;
            if df.dim() != micro.dim() || df.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("final damage at rollout step {}", k + 1)));
            }
            necking_input = Some(final_damage_input(&df, params.damage_threshold));
            state.final_damage = Some(df);
        }
    }
    state.phase = Phase::Done;
    if switch_step.is_none() {
        log::warn!("{case_id}: switch never fired before eps_f = {}", params.eps_f);
    }
    let sequence = DeformationSequence::from_frames(case_id, seed, micro.clone(), frames)?;
    Ok(RolloutResult {
        sequence,
        switch_step,
        dsm_history: state.dsm_history,
        phases,
        final_damage: state.final_damage,
    })
}
