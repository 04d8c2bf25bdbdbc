//! Learning-rate range test.
//!
//! The learning rate grows geometrically from `lr_min` to `lr_max`, one
//! optimizer step per value. The loss is smoothed with an exponential
//! moving average (bias corrected), and the learning rate one decade below
//! the smoothed minimum is returned. The scan stops early once the smoothed
//! loss exceeds four times its minimum or turns non-finite.

use serde::{Deserialize, Serialize};

use super::TrainError;

/// Something that takes one step at a given learning rate and reports the
/// loss measured before the step.
pub trait LrProbe {
    fn step(&mut self, lr: f64) -> Result<f64, TrainError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrScan {
    pub lr_min: f64,
    pub lr_max: f64,
    pub steps: usize,
}

impl Default for LrScan {
    fn default() -> Self {
        LrScan {
            lr_min: 1e-7,
            lr_max: 1.0,
            steps: 100,
        }
    }
}

pub const SMOOTHING: f64 = 0.98;
const DIVERGENCE_FACTOR: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LrTrace {
    pub lrs: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub chosen: f64,
}

impl LrScan {
    pub fn lr_at(&self, i: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr_min;
        }
        let frac = i as f64 / (self.steps - 1) as f64;
        self.lr_min * (self.lr_max / self.lr_min).powf(frac)
    }

    pub fn run(&self, probe: &mut dyn LrProbe) -> Result<LrTrace, TrainError> {
        if !(self.lr_min > 0.0 && self.lr_max >= self.lr_min && self.steps >= 1) {
            return Err(TrainError::InvalidConfig(format!("bad LR scan {self:?}")));
        }
        let mut avg = 0.0;
        let mut best = (f64::INFINITY, self.lr_min);
        let mut trace = LrTrace {
            lrs: Vec::new(),
            smoothed: Vec::new(),
            chosen: self.lr_min,
        };
        for i in 0..self.steps {
            let lr = self.lr_at(i);
            let loss = probe.step(lr)?;
            if !loss.is_finite() {
                if i == 0 {
                    return Err(TrainError::DivergedImmediately { lr, loss });
                }
                break;
            }
            avg = SMOOTHING * avg + (1.0 - SMOOTHING) * loss;
            let smooth = avg / (1.0 - SMOOTHING.powi(i as i32 + 1));
            trace.lrs.push(lr);
            trace.smoothed.push(smooth);
            if smooth < best.0 {
                best = (smooth, lr);
            }
            if smooth > DIVERGENCE_FACTOR * best.0 && best.0 > 0.0 {
                break;
            }
        }
        trace.chosen = (best.1 / 10.0).clamp(self.lr_min, self.lr_max);
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Gradient descent on `Σ a_k θ_k² / 2`.
    struct Quadratic {
        curv: Vec<f64>,
        theta: Vec<f64>,
    }

    impl LrProbe for Quadratic {
        fn step(&mut self, lr: f64) -> Result<f64, TrainError> {
            let loss = self.curv.iter().zip(&self.theta).map(|(a, t)| 0.5 * a * t * t).sum();
            for (t, a) in self.theta.iter_mut().zip(&self.curv) {
                *t -= lr * a * *t;
            }
            Ok(loss)
        }
    }

    struct Frozen;

    impl LrProbe for Frozen {
        fn step(&mut self, _lr: f64) -> Result<f64, TrainError> {
            Ok(1.3)
        }
    }

    struct Broken;

    impl LrProbe for Broken {
        fn step(&mut self, _lr: f64) -> Result<f64, TrainError> {
            Ok(f64::NAN)
        }
    }

    #[test]
    fn quadratic_within_a_decade_of_stable_step() {
        for a_max in [4.0, 50.0, 1000.0] {
            let mut q = Quadratic {
                curv: vec![a_max, a_max / 3.0, a_max / 10.0],
                theta: vec![1.0, -2.0, 0.5],
            };
            let lr = LrScan::default().run(&mut q).unwrap().chosen;
            // plain gradient descent is stable below 2 / a_max
            let stable = 2.0 / a_max;
            assert!(lr >= stable / 10.0 && lr <= stable * 10.0, "a={a_max} lr={lr}");
        }
    }

    #[test]
    fn frozen_model_gets_lr_min() {
        let s = LrScan::default();
        assert_eq!(s.run(&mut Frozen).unwrap().chosen, s.lr_min);
    }

    #[test]
    fn non_finite_first_loss() {
        assert!(matches!(
            LrScan::default().run(&mut Broken),
            Err(TrainError::DivergedImmediately { .. })
        ));
    }

    #[test]
    fn geometric_schedule() {
        let s = LrScan::default();
        assert!((s.lr_at(0) - 1e-7).abs() < 1e-20);
        assert!((s.lr_at(99) - 1.0).abs() < 1e-12);
        assert!((s.lr_at(33) / s.lr_at(32) - s.lr_at(1) / s.lr_at(0)).abs() < 1e-9);
    }
}
