//! Adam with decoupled weight decay, and gradient accumulation.

use candle_core::backprop::GradStore;
use candle_core::{Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::model::params::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Gradients aligned with a parameter list; `None` where nothing flowed.
#[derive(Debug, Clone)]
pub struct Gradients(pub Vec<Option<Tensor>>);

impl Gradients {
    pub fn zeros(n: usize) -> Self {
        Gradients(vec![None; n])
    }

    /// Add the gradients of `store` for `params`.
    pub fn add(&mut self, params: &[Param], store: &GradStore) -> Result<()> {
        for (slot, p) in self.0.iter_mut().zip(params) {
            if let Some(g) = store.get(p.var.as_tensor()) {
                // detached, so optimizer state never holds on to the graph
                let g = g.detach();
                *slot = Some(match slot.take() {
                    Some(acc) => (acc + g)?,
                    None => g,
                });
            }
        }
        Ok(())
    }

    /// Largest absolute entry, for diagnostics.
    pub fn max_abs(&self) -> Result<f64> {
        let mut m = 0.0f64;
        for g in self.0.iter().flatten() {
            let v = g.abs()?.flatten_all()?.max(0)?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            m = m.max(v);
        }
        Ok(m)
    }
}

/// `θ ← θ − lr·λ·θ − lr·m̂ / (√v̂ + ε)`, decay only where `Param::decay`.
pub struct AdamW {
    params: Vec<Param>,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: i32,
    pub config: AdamWConfig,
}

impl AdamW {
    pub fn new(params: &[Param], config: AdamWConfig) -> Self {
        AdamW {
            params: params.to_vec(),
            m: vec![None; params.len()],
            v: vec![None; params.len()],
            t: 0,
            config,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = &grads.0[i] else { continue };
            let m = match &self.m[i] {
                Some(m) => ((m * c.beta1)? + (g * (1.0 - c.beta1))?)?,
                None => (g * (1.0 - c.beta1))?,
            };
            let g2 = g.sqr()?;
            let v = match &self.v[i] {
                Some(v) => ((v * c.beta2)? + (g2 * (1.0 - c.beta2))?)?,
                None => (g2 * (1.0 - c.beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            let theta = p.var.as_tensor();
            let theta = if p.decay && c.weight_decay > 0.0 {
                (theta * (1.0 - lr * c.weight_decay))?
            } else {
                theta.clone()
            };
            p.var.set(&(theta - (update * lr)?)?)?;
            self.m[i] = Some(m.detach());
            self.v[i] = Some(v.detach());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamBuilder;
    use candle_core::DType;

    #[test]
    fn two_steps_by_hand() {
        let pb = ParamBuilder::new(0, DType::F64);
        let w = pb.constant("w", &[1], 2.0, true).unwrap();
        let b = pb.constant("b", &[1], 2.0, false).unwrap();
        let store = pb.finish();
        let mut opt = AdamW::new(store.params(), AdamWConfig::default());
        let (lr, wd) = (0.1, 0.01);
        let mut expect_w = 2.0f64;
        let mut expect_b = 2.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in [(1, 0.5f64), (2, -1.5)] {
            let gt = Tensor::new(&[g], &candle_core::Device::Cpu).unwrap();
            opt.step(&Gradients(vec![Some(gt.clone()), Some(gt)]), lr).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let upd = (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            expect_w = expect_w * (1.0 - lr * wd) - lr * upd;
            expect_b -= lr * upd;
        }
        let got_w = w.as_tensor().to_vec1::<f64>().unwrap()[0];
        let got_b = b.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((got_w - expect_w).abs() < 1e-12);
        assert!((got_b - expect_b).abs() < 1e-12);
        assert!(got_w < got_b);
    }

    #[test]
    fn missing_gradient_leaves_param() {
        let pb = ParamBuilder::new(0, DType::F32);
        let w = pb.constant("w", &[3], 1.0, true).unwrap();
        let store = pb.finish();
        let mut opt = AdamW::new(store.params(), AdamWConfig::default());
        opt.step(&Gradients::zeros(1), 0.1).unwrap();
        assert_eq!(w.as_tensor().to_vec1::<f32>().unwrap(), vec![1.0; 3]);
    }
}
