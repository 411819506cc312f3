//! Teacher-forced training of one network stage.

use std::io::Write;

use cfrc_core::fields::Channel;
use cfrc_core::losses::{
    bce_damage, hybrid_total, mse_increments, mse_stress_components, physics_residual, BcePolicy, HybridWeights,
    LossGrad, LossValue,
};
use cfrc_core::mesh_ingest::NormStats;
use cfrc_core::{Error, Result};
use cfrc_unet::{Adam, Head, Mode, PlateauScheduler, UNet, UNetConfig};
use ndarray::{s, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Sample, Stage};

/// Network size shared by the stages; channel counts and head follow the stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchParams {
    pub levels: usize,
    pub base_channels: usize,
    pub bn_momentum: f64,
}

impl Default for ArchParams {
    fn default() -> Self {
        ArchParams {
            levels: 8,
            base_channels: 8,
            bn_momentum: 0.1,
        }
    }
}

/// Network configuration for `stage` at the given grid resolution.
pub fn stage_config(stage: Stage, arch: &ArchParams, resolution: usize) -> Result<UNetConfig> {
    let head = if stage.sigmoid_head() { Head::Sigmoid } else { Head::Linear };
    let mut cfg = UNetConfig::reduced(stage.in_channels(), stage.out_channels(), head, arch.levels, resolution);
    cfg.base_channels = arch.base_channels;
    cfg.bottleneck_channels = arch
        .base_channels
        .checked_shl(arch.levels as u32)
        .ok_or_else(|| Error::Config("too many U-Net levels".into()))?;
    cfg.bn_momentum = arch.bn_momentum;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without improvement before the learning rate is halved.
    pub plateau_patience: usize,
    /// Stop once the epoch loss falls below this value.
    pub target_loss: Option<f64>,
    pub seed: u64,
    /// Multiplies the equilibrium residual of physical (MPa) stresses.
    pub physics_scale: f64,
    pub hybrid: HybridWeights,
    pub bce: BcePolicy,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            max_epochs: 200,
            batch_size: 4,
            learning_rate: 1e-4,
            plateau_patience: 10,
            target_loss: None,
            seed: 0,
            physics_scale: 1e-3,
            hybrid: HybridWeights::default(),
            bce: BcePolicy::default(),
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.physics_scale >= 0.0) {
            return Err(Error::Config("physics_scale must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: UNet<f32>,
    /// Mean training loss of every epoch run.
    pub epoch_losses: Vec<LossValue>,
    pub final_lr: f64,
    pub reached_target: bool,
}

fn batch(samples: &[Sample], idx: &[usize]) -> (Array4<f32>, Array4<f32>) {
    let stack = |f: &dyn Fn(&Sample) -> &ndarray::Array3<f32>| {
        let views: Vec<_> = idx.iter().map(|&i| f(&samples[i]).view().insert_axis(Axis(0))).collect();
        ndarray::concatenate(Axis(0), &views).expect("samples share a shape")
    };
    (stack(&|s| &s.input), stack(&|s| &s.target))
}

/// Loss and gradient of one stage for normalized predictions and targets.
pub fn stage_loss(
    stage: Stage,
    pred: &Array4<f32>,
    target: &Array4<f32>,
    norm: &NormStats,
    params: &TrainParams,
) -> Result<LossGrad<f32>> {
    match stage {
        Stage::Damage1 => {
            let mse = mse_stress_components(pred.view(), target.view())?;
            let mut physical = pred.clone();
            let mut scales = [0f32; 3];
            for (c, ch) in [Channel::S11, Channel::S22, Channel::S12].into_iter().enumerate() {
                let st = norm.get(ch)?;
                scales[c] = st.std as f32;
                physical
                    .slice_mut(s![.., c, .., ..])
                    .mapv_inplace(|z| (z as f64 * st.std + st.mean) as f32);
            }
            let phys = physics_residual(physical.view())?;
            let k = params.physics_scale;
            let value = hybrid_total(mse.value.total, k * phys.value.total, params.hybrid)?;
            let mut grad = mse.grad * params.hybrid.mse as f32;
            for c in 0..3 {
                let w = (params.hybrid.physics * k) as f32 * scales[c];
                grad.slice_mut(s![.., c, .., ..])
                    .scaled_add(w, &phys.grad.slice(s![.., c, .., ..]));
            }
            Ok(LossGrad { value, grad })
        }
        Stage::Damage2 => bce_damage(pred.view(), target.view(), params.bce),
        Stage::Uts | Stage::Necking => mse_increments(pred.view(), target.view()),
    }
}

fn fmt_term(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6e}"))
}

/// Trains a freshly initialized network for `stage` on teacher-forced samples.
/// Every optimizer step appends a line to `log`.
pub fn train_stage(
    stage: Stage,
    samples: &[Sample],
    config: UNetConfig,
    norm: &NormStats,
    params: &TrainParams,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    params.validate()?;
    if samples.is_empty() {
        return Err(Error::Validation(format!("stage {} has no training samples", stage.name())));
    }
    let (ci, co) = (samples[0].input.dim().0, samples[0].target.dim().0);
    if (ci, co) != (stage.in_channels(), stage.out_channels())
        || (config.in_channels, config.out_channels) != (ci, co)
    {
        return Err(Error::ChannelMismatch(format!(
            "stage {} expects {}→{} channels; samples have {ci}→{co}, network {}→{}",
            stage.name(),
            stage.in_channels(),
            stage.out_channels(),
            config.in_channels,
            config.out_channels
        )));
    }
    let mut model = UNet::<f32>::build(config, params.seed)?;
    let mut adam = Adam::new(params.learning_rate);
    let mut scheduler = PlateauScheduler::new(params.plateau_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x5eed_0000);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::new();
    let mut step = 0usize;
    let mut reached_target = false;

    for epoch in 0..params.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = LossValue::default();
        let mut batches = 0usize;
        for idx in order.chunks(params.batch_size) {
            let (x, y) = batch(samples, idx);
            let pred = model.forward(&x, Mode::Train).map_err(|_| {
                Error::NonFinite(format!("stage {} diverged at step {step}", stage.name()))
            })?;
            let loss = stage_loss(stage, &pred, &y, norm, params)?;
            if !loss.value.total.is_finite() {
                return Err(Error::NonFinite(format!("stage {} loss at step {step}", stage.name())));
            }
            model.zero_grad();
            model.backward(&loss.grad);
            adam.step(&mut model);
            step += 1;
            writeln!(
                log,
                "step={step} epoch={epoch} loss_total={:.6e} loss_mse={} loss_physics={} loss_bce={}",
                loss.value.total,
                fmt_term(loss.value.mse),
                fmt_term(loss.value.physics),
                fmt_term(loss.value.bce)
            )?;
            sums.total += loss.value.total;
            let add = |a: Option<f64>, b: Option<f64>| b.map(|b| a.unwrap_or(0.0) + b);
            sums.mse = add(sums.mse, loss.value.mse);
            sums.physics = add(sums.physics, loss.value.physics);
            sums.bce = add(sums.bce, loss.value.bce);
            batches += 1;
        }
        let nb = batches as f64;
        let mean = LossValue {
            total: sums.total / nb,
            mse: sums.mse.map(|v| v / nb),
            physics: sums.physics.map(|v| v / nb),
            bce: sums.bce.map(|v| v / nb),
        };
        epoch_losses.push(mean);
        adam.lr = scheduler.observe(mean.total, adam.lr);
        log::debug!("{} epoch {epoch}: loss {:.4e} lr {:.2e}", stage.name(), mean.total, adam.lr);
        if params.target_loss.is_some_and(|t| mean.total < t) {
            reached_target = true;
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
        final_lr: adam.lr,
        reached_target,
    })
}
