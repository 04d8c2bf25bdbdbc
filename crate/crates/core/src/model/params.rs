//! Named trainable parameters and their initialization.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::{self, Rng};

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
    /// Whether decoupled weight decay applies (matrices yes; biases, norms
    /// and state-space parameters no).
    pub decay: bool,
}

/// Flat, ordered list of every parameter of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|p| p.var.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }

    /// Copy of every parameter's current value.
    pub fn snapshot(&self) -> candle_core::Result<Vec<Tensor>> {
        self.params.iter().map(|p| p.var.as_tensor().copy()).collect()
    }

    pub fn restore(&self, values: &[Tensor]) -> candle_core::Result<()> {
        if values.len() != self.params.len() {
            candle_core::bail!("snapshot has {} tensors, model has {}", values.len(), self.params.len());
        }
        for (p, v) in self.params.iter().zip(values) {
            p.var.set(v)?;
        }
        Ok(())
    }

    pub fn by_name(&self) -> HashMap<&str, &Param> {
        self.params.iter().map(|p| (p.name.as_str(), p)).collect()
    }
}

/// Hands out parameters under a hierarchical name prefix.
#[derive(Clone)]
pub struct ParamBuilder {
    store: Rc<RefCell<Vec<Param>>>,
    rng: Rc<RefCell<Rng>>,
    prefix: String,
    pub dtype: DType,
    pub device: Device,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamBuilder {
            store: Rc::new(RefCell::new(Vec::new())),
            rng: Rc::new(RefCell::new(rng::seeded(seed))),
            prefix: String::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn sub(&self, name: impl AsRef<str>) -> Self {
        let mut b = self.clone();
        b.prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        b
    }

    pub fn finish(self) -> ParamStore {
        ParamStore {
            params: self.store.borrow().clone(),
        }
    }

    /// Register a parameter from explicit f64 values.
    pub fn from_values(
        &self,
        name: &str,
        shape: &[usize],
        values: Vec<f64>,
        decay: bool,
    ) -> candle_core::Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.borrow_mut().push(Param {
            name: full,
            var: var.clone(),
            decay,
        });
        Ok(var)
    }

    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64, decay: bool) -> candle_core::Result<Var> {
        let n = shape.iter().product();
        let values = {
            let mut rng = self.rng.borrow_mut();
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        self.from_values(name, shape, values, decay)
    }

    pub fn normal(&self, name: &str, shape: &[usize], std: f64, decay: bool) -> candle_core::Result<Var> {
        let n = shape.iter().product();
        let values = self.sample_normal(n, std);
        self.from_values(name, shape, values, decay)
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64, decay: bool) -> candle_core::Result<Var> {
        let n = shape.iter().product();
        self.from_values(name, shape, vec![value; n], decay)
    }

    pub fn sample_uniform(&self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        let mut rng = self.rng.borrow_mut();
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    pub fn sample_normal(&self, n: usize, std: f64) -> Vec<f64> {
        let mut rng = self.rng.borrow_mut();
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *rng);
                z * std
            })
            .collect()
    }
}
