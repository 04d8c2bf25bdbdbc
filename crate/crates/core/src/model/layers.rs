//! Building blocks shared by encoders and predictors. Activations are kept
//! token-major, `(batch, time, features)`, throughout.

use std::cell::RefCell;

use candle_core::{DType, Result, Tensor, Var, D};
use rand::Rng as _;

use super::fused::{add_bias, layer_norm};
use super::params::ParamBuilder;
use crate::rng::{self, Rng};

/// Per-forward state: whether dropout is active and where its masks come from.
pub struct Ctx {
    train: bool,
    rng: RefCell<Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx {
            train: false,
            rng: RefCell::new(rng::seeded(0)),
        }
    }

    pub fn train(seed: u64) -> Self {
        Ctx {
            train: true,
            rng: RefCell::new(rng::seeded(seed)),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn dropout(&self, x: &Tensor, p: f64) -> Result<Tensor> {
        if !self.train || p <= 0.0 {
            return Ok(x.clone());
        }
        let n = x.elem_count();
        let keep = 1.0 - p;
        let mask: Vec<f32> = {
            let mut rng = self.rng.borrow_mut();
            (0..n)
                .map(|_| if rng.random::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
                .collect()
        };
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        x.mul(&mask)
    }
}

/// `x @ w + b` over the last axis, with `w` stored as `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Linear {
            weight: pb.uniform("weight", &[fan_in, fan_out], bound, true)?,
            bias: Some(pb.uniform("bias", &[fan_out], bound, false)?),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().unwrap();
        let rows = x.elem_count() / last;
        let mut y = x.reshape((rows, last))?.matmul(self.weight.as_tensor())?;
        if let Some(b) = &self.bias {
            y = add_bias(&y, b.as_tensor())?;
        }
        let mut out = dims;
        *out.last_mut().unwrap() = self.out_dim();
        y.reshape(out)
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: pb.constant("gamma", &[dim], 1.0, false)?,
            beta: pb.constant("beta", &[dim], 0.0, false)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, self.gamma.as_tensor(), self.beta.as_tensor(), self.eps)
    }
}

/// 1-d convolution over the time axis of `(batch, time, channels)` with
/// "same" padding: output length is `ceil(L / stride)`.
///
/// Lowered to an explicit patch matrix and one matmul, which keeps the
/// backward pass on the fast matmul path for any stride.
#[derive(Debug, Clone)]
pub struct Conv1d {
    /// `(kernel · in_channels, out_channels)`, tap-major.
    pub weight: Var,
    pub bias: Var,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
}

impl Conv1d {
    pub fn new(pb: &ParamBuilder, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        let bound = 1.0 / ((cin * kernel) as f64).sqrt();
        Ok(Conv1d {
            weight: pb.uniform("weight", &[kernel * cin, cout], bound, true)?,
            bias: pb.uniform("bias", &[cout], bound, false)?,
            kernel,
            stride,
            in_channels: cin,
        })
    }

    pub fn out_len(&self, len: usize) -> usize {
        len.div_ceil(self.stride)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, len, c) = x.dims3()?;
        let out = self.out_len(len);
        // total padding so that the last window fits, split left-heavy-right
        let needed = (out - 1) * self.stride + self.kernel;
        let pad = needed.saturating_sub(len);
        let left = pad / 2;
        // extra right padding so each tap can be reshaped to (out, stride)
        let span = out * self.stride;
        let right = (self.kernel - 1 + span).saturating_sub(len + left);
        let xp = x.pad_with_zeros(1, left, right)?;
        let mut taps = Vec::with_capacity(self.kernel);
        for k in 0..self.kernel {
            let t = xp.narrow(1, k, span)?;
            let t = if self.stride == 1 {
                t
            } else {
                t.reshape((b, out, self.stride, c))?.narrow(2, 0, 1)?.reshape((b, out, c))?
            };
            taps.push(t);
        }
        let cols = Tensor::cat(&taps, 2)?.reshape((b * out, self.kernel * c))?;
        let y = add_bias(&cols.matmul(self.weight.as_tensor())?, self.bias.as_tensor())?;
        y.reshape((b, out, self.weight.dims()[1]))
    }
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.gelu_erf()
}

/// `0.5 (1 + tanh(x / 2))`; finite gradients for any input.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    ((x * 0.5)?.tanh()? + 1.0)? * 0.5
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    shifted.broadcast_sub(&lse)
}

/// Fixed sinusoidal position table `(len, dim)`.
pub fn sinusoidal_positions(len: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let mut v = vec![0f64; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 * freq;
            v[pos * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::from_vec(v, (len, dim), &candle_core::Device::Cpu)?.to_dtype(dtype)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn pb() -> ParamBuilder {
        ParamBuilder::new(1, DType::F64)
    }

    /// Direct same-padded convolution on `(time, channels)` slices.
    fn conv_oracle(x: &[Vec<f64>], w: &[f64], bias: &[f64], k: usize, s: usize) -> Vec<Vec<f64>> {
        let (len, cin) = (x.len(), x[0].len());
        let cout = bias.len();
        let out = len.div_ceil(s);
        let pad = ((out - 1) * s + k).saturating_sub(len) / 2;
        (0..out)
            .map(|o| {
                (0..cout)
                    .map(|co| {
                        let mut acc = bias[co];
                        for tap in 0..k {
                            let t = (o * s + tap) as isize - pad as isize;
                            if t < 0 || t as usize >= len {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x[t as usize][ci] * w[(tap * cin + ci) * cout + co];
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        for (len, k, s) in [(10, 3, 1), (11, 3, 2), (4, 3, 2), (23, 9, 5), (100, 9, 5), (7, 3, 2), (2, 3, 2)] {
            let conv = Conv1d::new(&pb(), 3, 4, k, s).unwrap();
            let mut r = rng::seeded(len as u64);
            let x: Vec<Vec<f64>> = (0..len).map(|_| rng::normal_vec(&mut r, 3)).collect();
            let flat: Vec<f64> = x.iter().flatten().copied().collect();
            let xt = Tensor::from_vec(flat, (1, len, 3), &Device::Cpu).unwrap();
            let y = conv.forward(&xt).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
            let w = conv.weight.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let b = conv.bias.to_vec1::<f64>().unwrap();
            let want = conv_oracle(&x, &w, &b, k, s);
            assert_eq!(y.len(), len.div_ceil(s));
            for (a, e) in y.iter().flatten().zip(want.iter().flatten()) {
                assert!((a - e).abs() < 1e-12, "len {len} k {k} s {s}");
            }
        }
    }

    #[test]
    fn layer_norm_normalizes() {
        let ln = LayerNorm::new(&pb(), 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 6.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 1000.0, -3.0], [0.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let p = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in &p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let lp = log_softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        assert!((lp[1][0] - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!(lp[0][1].abs() < 1e-12);
    }

    #[test]
    fn sigmoid_values() {
        let x = Tensor::new(&[0.0f64, 2.0, -800.0], &Device::Cpu).unwrap();
        let y = sigmoid(&x).unwrap().to_vec1::<f64>().unwrap();
        assert!((y[0] - 0.5).abs() < 1e-15);
        assert!((y[1] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        assert_eq!(y[2], 0.0);
    }

    #[test]
    fn dropout_only_in_training() {
        let x = Tensor::ones((4, 100), DType::F32, &Device::Cpu).unwrap();
        let y = Ctx::eval().dropout(&x, 0.5).unwrap();
        assert_eq!(y.to_vec2::<f32>().unwrap(), x.to_vec2::<f32>().unwrap());
        let y = Ctx::train(3).dropout(&x, 0.5).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(y.iter().all(|&v| v == 0.0 || v == 2.0));
        let zeros = y.iter().filter(|&&v| v == 0.0).count();
        assert!((120..280).contains(&zeros));
    }
}
