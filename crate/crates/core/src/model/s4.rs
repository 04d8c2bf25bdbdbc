//! Bidirectional diagonal S4 layer and the stacked S4 predictor.

use candle_core::{Result, Tensor, Var};
use num_complex::Complex64;

use super::fused::scale_cols;
use super::layers::{gelu, Ctx, LayerNorm, Linear};
use super::params::ParamBuilder;
use super::ssm::{causal_conv, ssm_kernel, SsmParams};

/// One direction of the layer: `H` independent diagonal systems with `M`
/// complex modes each. `Re(A)` is stored as `log(-Re A)` so it stays negative
/// under any update; `B` is fixed to 1.
#[derive(Debug, Clone)]
pub struct SsmDirection {
    pub log_neg_re_a: Var,
    pub im_a: Var,
    pub log_dt: Var,
    /// `(H, M, 2)`.
    pub c: Var,
    pub d: Var,
}

impl SsmDirection {
    fn new(pb: &ParamBuilder, channels: usize, modes: usize) -> Result<Self> {
        let log_neg_re_a = vec![0.5f64.ln(); channels * modes];
        let im_a: Vec<f64> = (0..channels)
            .flat_map(|_| (0..modes).map(|n| std::f64::consts::PI * n as f64))
            .collect();
        let log_dt = pb.sample_uniform(channels, 1e-3f64.ln(), 1e-1f64.ln());
        Ok(SsmDirection {
            log_neg_re_a: pb.from_values("log_neg_re_a", &[channels, modes], log_neg_re_a, false)?,
            im_a: pb.from_values("im_a", &[channels, modes], im_a, false)?,
            log_dt: pb.from_values("log_dt", &[channels, 1], log_dt, false)?,
            c: pb.normal("c", &[channels, modes, 2], std::f64::consts::FRAC_1_SQRT_2, false)?,
            d: pb.normal("d", &[channels], 1.0, false)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.log_neg_re_a.dims()[0]
    }

    pub fn modes(&self) -> usize {
        self.log_neg_re_a.dims()[1]
    }

    /// Convolution kernel `(H, len)`.
    pub fn kernel(&self, len: usize) -> Result<Tensor> {
        let dt = self.log_dt.exp()?;
        let a_re = self.log_neg_re_a.exp()?.neg()?;
        let a_im = self.im_a.as_tensor().clone();
        let dta_re = a_re.broadcast_mul(&dt)?;
        let dta_im = a_im.broadcast_mul(&dt)?;
        let mag = dta_re.exp()?;
        let z_re = (&mag * dta_im.cos()?)?;
        let z_im = (&mag * dta_im.sin()?)?;
        // B̃ = (z - 1) / A
        let num_re = (&z_re - 1.0)?;
        let den = (a_re.sqr()? + a_im.sqr()?)?;
        let bt_re = ((&num_re * &a_re)? + (&z_im * &a_im)?)?.div(&den)?;
        let bt_im = ((&z_im * &a_re)? - (&num_re * &a_im)?)?.div(&den)?;
        let c_re = self.c.narrow(2, 0, 1)?.squeeze(2)?;
        let c_im = self.c.narrow(2, 1, 1)?.squeeze(2)?;
        let cb_re = ((&c_re * &bt_re)? - (&c_im * &bt_im)?)?;
        let cb_im = ((&c_re * &bt_im)? + (&c_im * &bt_re)?)?;
        let cb = Tensor::stack(&[cb_re, cb_im], 2)?;
        let z = Tensor::stack(&[z_re, z_im], 2)?;
        ssm_kernel(&cb, &z, len)
    }

    fn forward(&self, u: &Tensor, reverse: bool) -> Result<Tensor> {
        let len = u.dim(1)?;
        let y = causal_conv(u, &self.kernel(len)?, reverse)?;
        y + scale_cols(u, self.d.as_tensor())?
    }

    /// Plain-Rust description of the current parameter values.
    pub fn to_params(&self) -> Result<SsmParams> {
        let f = |v: &Var| v.as_tensor().to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>();
        let (h, m) = (self.channels(), self.modes());
        let (lre, im, ldt, c, d) = (f(&self.log_neg_re_a)?, f(&self.im_a)?, f(&self.log_dt)?, f(&self.c)?, f(&self.d)?);
        let grid = |g: &dyn Fn(usize) -> Complex64| -> Vec<Vec<Complex64>> {
            (0..h).map(|ch| (0..m).map(|n| g(ch * m + n)).collect()).collect()
        };
        SsmParams::new(
            grid(&|i| Complex64::new(-lre[i].exp(), im[i])),
            grid(&|_| Complex64::new(1.0, 0.0)),
            grid(&|i| Complex64::new(c[2 * i], c[2 * i + 1])),
            d,
            ldt.iter().map(|v| v.exp()).collect(),
        )
        .map_err(|e| candle_core::Error::Msg(e.to_string()))
    }

    /// Overwrite the parameters from a plain-Rust system with `B = 1`.
    pub fn set_from(&self, p: &SsmParams) -> Result<()> {
        let dtype = self.c.dtype();
        let dev = self.c.device().clone();
        let (h, m) = (p.channels(), p.states());
        if (h, m) != (self.channels(), self.modes()) {
            candle_core::bail!("system is {h}x{m}, layer is {}x{}", self.channels(), self.modes());
        }
        let flat = |g: &dyn Fn(Complex64) -> f64, src: &[Vec<Complex64>]| -> Vec<f64> {
            src.iter().flatten().map(|&v| g(v)).collect()
        };
        let set = |var: &Var, v: Vec<f64>| -> Result<()> {
            var.set(&Tensor::from_vec(v, var.shape(), &dev)?.to_dtype(dtype)?)
        };
        set(&self.log_neg_re_a, flat(&|v| (-v.re).ln(), &p.a))?;
        set(&self.im_a, flat(&|v| v.im, &p.a))?;
        set(&self.log_dt, p.dt.iter().map(|v| v.ln()).collect())?;
        set(&self.c, p.c.iter().flatten().flat_map(|v| [v.re, v.im]).collect())?;
        set(&self.d, p.d.clone())
    }
}

/// Forward and time-reversed systems, outputs concatenated to `2H`.
#[derive(Debug, Clone)]
pub struct BiSsm {
    pub forward: SsmDirection,
    pub backward: SsmDirection,
}

impl BiSsm {
    pub fn new(pb: &ParamBuilder, channels: usize, modes: usize) -> Result<Self> {
        Ok(BiSsm {
            forward: SsmDirection::new(&pb.sub("fwd"), channels, modes)?,
            backward: SsmDirection::new(&pb.sub("bwd"), channels, modes)?,
        })
    }

    /// `(B, L, H) -> (B, L, 2H)`.
    pub fn forward(&self, u: &Tensor) -> Result<Tensor> {
        let f = self.forward.forward(u, false)?;
        let b = self.backward.forward(u, true)?;
        Tensor::cat(&[f, b], 2)
    }
}

/// Pre-norm residual block: `x + Linear(dropout(GELU(BiSsm(LN(x)))))`.
#[derive(Debug, Clone)]
pub struct S4Block {
    pub norm: LayerNorm,
    pub ssm: BiSsm,
    pub out: Linear,
    dropout: f64,
}

impl S4Block {
    pub fn new(pb: &ParamBuilder, dim: usize, modes: usize, dropout: f64) -> Result<Self> {
        Ok(S4Block {
            norm: LayerNorm::new(&pb.sub("norm"), dim)?,
            ssm: BiSsm::new(&pb.sub("ssm"), dim, modes)?,
            out: Linear::new(&pb.sub("out"), 2 * dim, dim)?,
            dropout,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let y = self.ssm.forward(&self.norm.forward(x)?)?;
        let y = ctx.dropout(&gelu(&y)?, self.dropout)?;
        x + self.out.forward(&y)?
    }
}

/// Stack of S4 blocks followed by a final normalization.
#[derive(Debug, Clone)]
pub struct S4Stack {
    pub blocks: Vec<S4Block>,
    pub norm: LayerNorm,
}

impl S4Stack {
    /// `state_dim` counts real state dimensions; the layer keeps
    /// `state_dim / 2` complex modes.
    pub fn new(pb: &ParamBuilder, dim: usize, state_dim: usize, layers: usize, dropout: f64) -> Result<Self> {
        let modes = (state_dim / 2).max(1);
        let blocks = (0..layers)
            .map(|i| S4Block::new(&pb.sub(format!("block{i}")), dim, modes, dropout))
            .collect::<Result<_>>()?;
        Ok(S4Stack {
            blocks,
            norm: LayerNorm::new(&pb.sub("norm"), dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h, ctx)?;
        }
        self.norm.forward(&h)
    }
}
