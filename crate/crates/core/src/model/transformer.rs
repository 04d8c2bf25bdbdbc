//! Pre-norm transformer encoder with sinusoidal absolute positions.

use candle_core::{Result, Tensor};

use super::layers::{gelu, sinusoidal_positions, softmax_last, Ctx, LayerNorm, Linear};
use super::params::ParamBuilder;

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            candle_core::bail!("model dim {dim} not divisible by {heads} heads");
        }
        Ok(SelfAttention {
            q: Linear::new(&pb.sub("q"), dim, dim)?,
            k: Linear::new(&pb.sub("k"), dim, dim)?,
            v: Linear::new(&pb.sub("v"), dim, dim)?,
            o: Linear::new(&pb.sub("o"), dim, dim)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        x.reshape((b, t, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()
    }

    /// Attention weights `(B, heads, T, T)`.
    pub fn weights(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.dim(2)? / self.heads;
        let q = self.split(&self.q.forward(x)?)?;
        let k = self.split(&self.k.forward(x)?)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (d as f64).sqrt())?;
        softmax_last(&scores)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let v = self.split(&self.v.forward(x)?)?;
        let y = self.weights(x)?.matmul(&v)?;
        let y = y.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
        self.o.forward(&y)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    dropout: f64,
}

impl TransformerBlock {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize, ff: usize, dropout: f64) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(&pb.sub("norm1"), dim)?,
            attn: SelfAttention::new(&pb.sub("attn"), dim, heads)?,
            norm2: LayerNorm::new(&pb.sub("norm2"), dim)?,
            ff1: Linear::new(&pb.sub("ff1"), dim, ff)?,
            ff2: Linear::new(&pb.sub("ff2"), ff, dim)?,
            dropout,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let a = self.attn.forward(&self.norm1.forward(x)?)?;
        let x = (x + ctx.dropout(&a, self.dropout)?)?;
        let f = self.ff2.forward(&gelu(&self.ff1.forward(&self.norm2.forward(&x)?)?)?)?;
        &x + ctx.dropout(&f, self.dropout)?
    }
}

#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub dim: usize,
    /// Add the sinusoidal position table to the input.
    pub positions: bool,
}

impl TransformerStack {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize, ff: usize, layers: usize, dropout: f64) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| TransformerBlock::new(&pb.sub(format!("block{i}")), dim, heads, ff, dropout))
            .collect::<Result<_>>()?;
        Ok(TransformerStack {
            blocks,
            norm: LayerNorm::new(&pb.sub("norm"), dim)?,
            dim,
            positions: true,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let mut h = if self.positions {
            let pos = sinusoidal_positions(x.dim(1)?, self.dim, x.dtype())?;
            x.broadcast_add(&pos)?
        } else {
            x.clone()
        };
        for b in &self.blocks {
            h = b.forward(&h, ctx)?;
        }
        self.norm.forward(&h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn attention_rows_sum_to_one() {
        let pb = ParamBuilder::new(1, DType::F32);
        let attn = SelfAttention::new(&pb, 16, 8).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 7, 16), &Device::Cpu).unwrap();
        let w = attn.weights(&x).unwrap();
        assert_eq!(w.dims(), &[2, 8, 7, 7]);
        let sums = w.sum(3).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
    }

    #[test]
    fn positions_break_symmetry() {
        let pb = ParamBuilder::new(2, DType::F64);
        let mut tf = TransformerStack::new(&pb, 8, 2, 16, 2, 0.1).unwrap();
        // palindrome: tokens 0 and 4 are identical
        let row = [0.3f64, -1.0, 0.5, 2.0, 0.1, 0.0, 1.0, -0.7];
        let mid = [1.0f64; 8];
        let mut v = Vec::new();
        for t in [&row, &mid, &row.map(|x| -x), &mid, &row] {
            v.extend_from_slice(t);
        }
        let x = Tensor::from_vec(v, (1, 5, 8), &Device::Cpu).unwrap();
        let gap = |tf: &TransformerStack| {
            let y = tf.forward(&x, &Ctx::eval()).unwrap().squeeze(0).unwrap();
            let d = (y.get(0).unwrap() - y.get(4).unwrap()).unwrap();
            d.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
        };
        assert!(gap(&tf) > 1e-6);
        tf.positions = false;
        assert!(gap(&tf) < 1e-12);
    }

    #[test]
    fn shape_preserved() {
        let pb = ParamBuilder::new(3, DType::F32);
        let tf = TransformerStack::new(&pb, 16, 8, 64, 4, 0.1).unwrap();
        let x = Tensor::zeros((2, 15, 16), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(tf.forward(&x, &Ctx::train(0)).unwrap().dims(), &[2, 15, 16]);
    }
}
