//! Adam optimizer and plateau learning-rate schedule.

use cfrc_core::Scalar;
use ndarray::ArrayD;

use crate::model::UNet;

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: Vec<(ArrayD<T>, ArrayD<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Applies one update from the accumulated gradients.
    pub fn step(&mut self, model: &mut UNet<T>) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = T::from_f64_lossy(self.lr * c2.sqrt() / c1);
        let eps = T::from_f64_lossy(self.eps * c2.sqrt());
        let (b1t, b2t) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
        let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - b1), T::from_f64_lossy(1.0 - b2));
        let moments = &mut self.moments;
        let mut index = 0;
        model.visit_params(&mut |_, p| {
            if !p.trainable {
                return;
            }
            if moments.len() <= index {
                moments.push((ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            }
            let (m, v) = &mut moments[index];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1t * *m + one_b1 * g;
                    *v = b2t * *v + one_b2 * g * g;
                    *w -= lr * *m / (v.sqrt() + eps);
                });
            index += 1;
        });
    }
}

/// Halves (by default) the learning rate when the monitored loss stops
/// improving for `patience` consecutive checks.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    best: f64,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize) -> Self {
        PlateauScheduler {
            factor: 0.5,
            patience,
            min_lr: 1e-7,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Returns the learning rate to use after observing `loss`.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait > self.patience {
            self.wait = 0;
            (lr * self.factor).max(self.min_lr)
        } else {
            lr
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;
    use crate::model::{Head, UNetConfig};
    use ndarray::Array4;

    #[test]
    fn plateau_halves_after_patience() {
        let mut s = PlateauScheduler::new(2);
        let mut lr = 1e-3;
        for loss in [1.0, 0.9, 0.95, 0.95] {
            lr = s.observe(loss, lr);
        }
        assert_eq!(lr, 1e-3);
        lr = s.observe(0.95, lr);
        assert_eq!(lr, 5e-4);
        lr = s.observe(0.5, lr);
        assert_eq!(lr, 5e-4);
    }

    #[test]
    fn adam_first_step_moves_each_weight_by_lr() {
        let cfg = UNetConfig::reduced(1, 1, Head::Linear, 1, 4);
        let mut net = UNet::<f64>::build(cfg, 0).unwrap();
        let x = Array4::from_shape_fn((2, 1, 4, 4), |(a, _, c, d)| (a + c * d) as f64 * 0.1);
        let y = net.forward(&x, Mode::Train).unwrap();
        net.zero_grad();
        net.backward(&Array4::ones(y.raw_dim()));
        let mut before = Vec::new();
        let mut grads = Vec::new();
        net.visit_params(&mut |_, p| {
            if p.trainable {
                before.extend(p.value.iter().copied());
                grads.extend(p.grad.iter().copied());
            }
        });
        let mut adam = Adam::new(1e-2);
        adam.step(&mut net);
        let mut after = Vec::new();
        net.visit_params(&mut |_, p| {
            if p.trainable {
                after.extend(p.value.iter().copied());
            }
        });
        for ((b, a), g) in before.iter().zip(&after).zip(&grads) {
            // Far above eps the first Adam step has magnitude lr.
            if g.abs() > 1e-3 {
                assert!(((b - a) - 1e-2 * g.signum()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn training_reduces_a_simple_regression_loss() {
        let cfg = UNetConfig::reduced(1, 1, Head::Linear, 2, 8);
        let mut net = UNet::<f32>::build(cfg, 1).unwrap();
        let x = Array4::from_shape_fn((4, 1, 8, 8), |(a, _, c, d)| ((a * 3 + c + d) % 5) as f32 / 5.0);
        let target = x.mapv(|v| 2.0 * v - 0.5);
        let mut adam = Adam::new(1e-2);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..60 {
            let y = net.forward(&x, Mode::Train).unwrap();
            let diff = &y - &target;
            last = diff.iter().map(|d| (*d as f64).powi(2)).sum::<f64>() / diff.len() as f64;
            first.get_or_insert(last);
            net.zero_grad();
            net.backward(&diff.mapv(|d| 2.0 * d / y.len() as f32));
            adam.step(&mut net);
        }
        assert!(last < 0.2 * first.unwrap(), "{first:?} -> {last}");
    }
}
