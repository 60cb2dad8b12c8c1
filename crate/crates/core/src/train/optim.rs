//! Adam and the plateau learning-rate schedule with early stopping.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Adam<S: Real = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Real> Adam<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update from the gradients stored in `store`.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Usage(
                "optimizer state belongs to a different parameter set".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (S::lit(self.beta1), S::lit(self.beta2), S::lit(self.eps));
        let (one, step_size, c2) = (S::one(), S::lit(lr / c1), S::lit(c2));
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w = *w - step_size * *m / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub initial_lr: f64,
    pub decay: f64,
    /// Stagnant epochs before the learning rate decays.
    pub decay_patience: usize,
    /// Stagnant epochs before training stops.
    pub stop_patience: usize,
    pub min_lr: f64,
    pub max_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-4,
            decay: 0.6,
            decay_patience: 4,
            stop_patience: 10,
            min_lr: 1e-6,
            max_epochs: 70,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.initial_lr > 0.0
            && self.decay > 0.0
            && self.decay < 1.0
            && self.decay_patience > 0
            && self.stop_patience > 0
            && self.min_lr > 0.0
            && self.max_epochs > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid schedule {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LearningRate,
    Stagnation,
    MaxEpochs,
}

/// Tracks validation loss across epochs. A decay restarts the decay
/// counter but not the stop counter; an improvement restarts both.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Plateau {
    pub cfg: ScheduleConfig,
    pub lr: f64,
    pub best: f64,
    pub epochs: usize,
    decay_wait: usize,
    stop_wait: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochOutcome {
    pub improved: bool,
    /// Learning rate for the next epoch.
    pub lr: f64,
    pub stop: Option<StopReason>,
}

impl Plateau {
    pub fn new(cfg: ScheduleConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            lr: cfg.initial_lr,
            best: f64::INFINITY,
            epochs: 0,
            decay_wait: 0,
            stop_wait: 0,
            cfg,
        })
    }

    pub fn end_epoch(&mut self, val_loss: f64) -> EpochOutcome {
        self.epochs += 1;
        let improved = val_loss < self.best;
        if improved {
            self.best = val_loss;
            self.decay_wait = 0;
            self.stop_wait = 0;
        } else {
            self.decay_wait += 1;
            self.stop_wait += 1;
            if self.decay_wait >= self.cfg.decay_patience {
                self.lr *= self.cfg.decay;
                self.decay_wait = 0;
            }
        }
        let stop = if self.lr < self.cfg.min_lr {
            Some(StopReason::LearningRate)
        } else if self.stop_wait >= self.cfg.stop_patience {
            Some(StopReason::Stagnation)
        } else if self.epochs >= self.cfg.max_epochs {
            Some(StopReason::MaxEpochs)
        } else {
            None
        };
        EpochOutcome {
            improved,
            lr: self.lr,
            stop,
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn four_stagnant_epochs_decay() {
        let mut p = Plateau::new(ScheduleConfig::default()).unwrap();
        assert!(p.end_epoch(1.0).improved);
        for _ in 0..3 {
            assert_eq!(p.end_epoch(1.0).lr, 1e-4);
        }
        let o = p.end_epoch(1.5);
        assert!((o.lr - 6e-5).abs() < 1e-18);
        assert_eq!(o.stop, None);
    }

    #[test]
    fn ten_stagnant_epochs_stop() {
        let mut p = Plateau::new(ScheduleConfig::default()).unwrap();
        p.end_epoch(1.0);
        for i in 1..=10 {
            let o = p.end_epoch(2.0);
            assert_eq!(o.stop.is_some(), i == 10);
        }
        assert_eq!(p.end_epoch(2.0).stop, Some(StopReason::Stagnation));
    }

    #[test]
    fn lr_floor_and_epoch_cap() {
        let cfg = ScheduleConfig {
            initial_lr: 1.5e-6,
            decay_patience: 1,
            ..Default::default()
        };
        let mut p = Plateau::new(cfg).unwrap();
        p.end_epoch(1.0);
        assert_eq!(p.end_epoch(1.0).stop, Some(StopReason::LearningRate));

        let mut p = Plateau::new(ScheduleConfig {
            max_epochs: 3,
            ..Default::default()
        })
        .unwrap();
        let stops: Vec<_> = (0..3)
            .map(|i| p.end_epoch(1.0 - i as f64 * 0.1).stop)
            .collect();
        assert_eq!(stops, vec![None, None, Some(StopReason::MaxEpochs)]);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(Plateau::new(ScheduleConfig {
            decay: 1.0,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        store.get_mut(id).grad = Tensor::from_vec(&[3], vec![0.5, -2.0, 0.0]).unwrap();
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 0.1).unwrap();
        let w = store.value(id).data();
        // m̂ = g and v̂ = g², so the step is lr·sign(g).
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 2.1).abs() < 1e-6);
        assert_eq!(w[2], 3.0);
    }

    proptest! {
        #[test]
        fn zero_gradient_keeps_parameters(values in prop::collection::vec(-10.0f32..10.0, 1..20), lr in 1e-6f64..1.0) {
            let mut store = ParamStore::<f32>::new();
            let id = store.add("w", Tensor::from_vec(&[values.len()], values.clone()).unwrap());
            let mut adam = Adam::new(&store);
            adam.step(&mut store, lr).unwrap();
            prop_assert_eq!(store.value(id).data(), &values[..]);
        }
    }
}
