//! Stacked bidirectional LSTM.

use candle_core::{Result, Tensor};

use super::layers::{sigmoid, Linear};
use super::params::ParamBuilder;

/// One direction of one layer. Gate order in the packed matrices: i, f, g, o.
#[derive(Debug, Clone)]
pub struct LstmCell {
    /// Input projection `(in, 4·hidden)` with the (single) gate bias.
    pub input: Linear,
    /// Recurrent projection `(hidden, 4·hidden)`, no bias.
    pub recurrent: Linear,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(pb: &ParamBuilder, input: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let ipb = pb.sub("input");
        let rpb = pb.sub("recurrent");
        Ok(LstmCell {
            input: Linear {
                weight: ipb.uniform("weight", &[input, 4 * hidden], bound, true)?,
                bias: Some(ipb.uniform("bias", &[4 * hidden], bound, false)?),
            },
            recurrent: Linear {
                weight: rpb.uniform("weight", &[hidden, 4 * hidden], bound, true)?,
                bias: None,
            },
            hidden,
        })
    }

    /// Run over `(B, T, in)`; `reverse` walks from the last step to the first.
    /// Returns `(B, T, hidden)` aligned with the input positions.
    pub fn forward(&self, x: &Tensor, reverse: bool) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        let hd = self.hidden;
        let pre = self.input.forward(x)?;
        let mut h = Tensor::zeros((b, hd), x.dtype(), x.device())?;
        let mut c = h.clone();
        let mut outs = vec![None; t];
        for step in 0..t {
            let i = if reverse { t - 1 - step } else { step };
            let gates = (pre.narrow(1, i, 1)?.squeeze(1)? + self.recurrent.forward(&h)?)?;
            let ig = sigmoid(&gates.narrow(1, 0, hd)?)?;
            let fg = sigmoid(&gates.narrow(1, hd, hd)?)?;
            let gg = gates.narrow(1, 2 * hd, hd)?.tanh()?;
            let og = sigmoid(&gates.narrow(1, 3 * hd, hd)?)?;
            c = ((fg * &c)? + (ig * gg)?)?;
            h = (og * c.tanh()?)?;
            outs[i] = Some(h.clone());
        }
        let outs: Vec<Tensor> = outs.into_iter().map(Option::unwrap).collect();
        Tensor::stack(&outs, 1)
    }
}

/// Bidirectional layers; each layer's output concatenates both directions.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub layers: Vec<(LstmCell, LstmCell)>,
}

impl BiLstm {
    pub fn new(pb: &ParamBuilder, input: usize, hidden: usize, layers: usize) -> Result<Self> {
        let layers = (0..layers)
            .map(|l| {
                let lpb = pb.sub(format!("layer{l}"));
                let inp = if l == 0 { input } else { 2 * hidden };
                Ok((LstmCell::new(&lpb.sub("fwd"), inp, hidden)?, LstmCell::new(&lpb.sub("bwd"), inp, hidden)?))
            })
            .collect::<Result<_>>()?;
        Ok(BiLstm { layers })
    }

    pub fn out_dim(&self) -> usize {
        2 * self.layers[0].0.hidden
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (f, b) in &self.layers {
            h = Tensor::cat(&[f.forward(&h, false)?, b.forward(&h, true)?], 2)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn shapes() {
        let pb = ParamBuilder::new(1, DType::F32);
        let l = BiLstm::new(&pb, 6, 4, 2).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 5, 6), &Device::Cpu).unwrap();
        assert_eq!(l.forward(&x).unwrap().dims(), &[2, 5, 8]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let pb = ParamBuilder::new(2, DType::F64);
        let l = BiLstm::new(&pb, 3, 4, 2).unwrap();
        for (f, b) in &l.layers {
            for cell in [f, b] {
                let bias = cell.input.bias.as_ref().unwrap();
                bias.set(&bias.zeros_like().unwrap()).unwrap();
            }
        }
        let x = Tensor::zeros((1, 6, 3), DType::F64, &Device::Cpu).unwrap();
        let y = l.forward(&x).unwrap();
        assert_eq!(y.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn reversal_swaps_directions() {
        // a single layer whose two directions share weights is reversal-equivariant
        // up to swapping the halves
        let pb = ParamBuilder::new(3, DType::F64);
        let mut l = BiLstm::new(&pb, 3, 4, 1).unwrap();
        l.layers[0].1 = l.layers[0].0.clone();
        let x = Tensor::randn(0f64, 1.0, (1, 2, 3), &Device::Cpu).unwrap();
        let y = l.forward(&x).unwrap();
        let yr = l.forward(&x.flip(&[1]).unwrap()).unwrap().flip(&[1]).unwrap();
        let swapped = Tensor::cat(&[yr.narrow(2, 4, 4).unwrap(), yr.narrow(2, 0, 4).unwrap()], 2).unwrap();
        let d = (y - swapped).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
    }
}
