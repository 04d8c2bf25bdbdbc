//! Row-wise operations over the last axis with hand-written gradients.
//!
//! Candle's generic broadcast backward reduces over strided axes one
//! element at a time; these ops compute the per-column sums directly.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp2, CustomOp3, DType, Layout, Result, Shape, Tensor, WithDType};
use num_traits::Float;

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("fused op expects contiguous input".into()))?;
    Ok(&T::cpu_storage_as_slice(s)?[a..b])
}

fn values<T: WithDType>(t: &Tensor) -> Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

fn last_dim(l: &Layout) -> Result<usize> {
    l.shape()
        .dims()
        .last()
        .copied()
        .ok_or_else(|| candle_core::Error::Msg("fused op needs rank >= 1".into()))
}

fn col_sums<T: Float>(rows: impl Iterator<Item = impl Iterator<Item = T>>, width: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); width];
    for row in rows {
        for (a, v) in acc.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    acc
}

macro_rules! dispatch {
    ($dtype:expr, $f:ident ( $($arg:expr),* )) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
            other => candle_core::bail!("fused op: unsupported dtype {other:?}"),
        }
    };
}

// ------------------------------------------------------------- bias add

/// `x + b` with `b` broadcast along every axis but the last.
pub fn add_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&b.contiguous()?, BiasAdd)
}

struct BiasAdd;

fn bias_fwd<T: WithDType + Float>(s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<CpuStorage> {
    let (x, b) = (slice::<T>(s1, l1)?, slice::<T>(s2, l2)?);
    let out: Vec<T> = x.chunks_exact(b.len()).flat_map(|r| r.iter().zip(b).map(|(&a, &c)| a + c)).collect();
    Ok(T::to_cpu_storage_owned(out))
}

fn bias_bwd<T: WithDType + Float>(grad: &Tensor, b: &Tensor) -> Result<Tensor> {
    let g = values::<T>(grad)?;
    let w = b.elem_count();
    let sums = col_sums(g.chunks_exact(w).map(|r| r.iter().copied()), w);
    Tensor::from_vec(sums, b.shape(), b.device())
}

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "bias-add"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        if l2.shape().elem_count() != last_dim(l1)? {
            candle_core::bail!("bias-add: bias {:?} does not match {:?}", l2.shape(), l1.shape());
        }
        Ok((dispatch!(s1.dtype(), bias_fwd(s1, l1, s2, l2))?, l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let gb = dispatch!(b.dtype(), bias_bwd(grad, b))?;
        Ok((Some(grad.clone()), Some(gb)))
    }
}

// --------------------------------------------------------- column scale

/// `x * d` with `d` broadcast along every axis but the last.
pub fn scale_cols(x: &Tensor, d: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&d.contiguous()?, ScaleCols)
}

struct ScaleCols;

fn scale_fwd<T: WithDType + Float>(s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<CpuStorage> {
    let (x, d) = (slice::<T>(s1, l1)?, slice::<T>(s2, l2)?);
    let out: Vec<T> = x.chunks_exact(d.len()).flat_map(|r| r.iter().zip(d).map(|(&a, &c)| a * c)).collect();
    Ok(T::to_cpu_storage_owned(out))
}

fn scale_bwd<T: WithDType + Float>(x: &Tensor, d: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let (xv, dv, g) = (values::<T>(x)?, values::<T>(d)?, values::<T>(grad)?);
    let w = dv.len();
    let gx: Vec<T> = g.chunks_exact(w).flat_map(|r| r.iter().zip(&dv).map(|(&a, &c)| a * c)).collect();
    let gd = col_sums(
        g.chunks_exact(w).zip(xv.chunks_exact(w)).map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b)),
        w,
    );
    Ok((
        Tensor::from_vec(gx, x.shape(), x.device())?,
        Tensor::from_vec(gd, d.shape(), d.device())?,
    ))
}

impl CustomOp2 for ScaleCols {
    fn name(&self) -> &'static str {
        "scale-cols"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        if l2.shape().elem_count() != last_dim(l1)? {
            candle_core::bail!("scale-cols: scale {:?} does not match {:?}", l2.shape(), l1.shape());
        }
        Ok((dispatch!(s1.dtype(), scale_fwd(s1, l1, s2, l2))?, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, d: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let (gx, gd) = dispatch!(x.dtype(), scale_bwd(x, d, grad))?;
        Ok((Some(gx), Some(gd)))
    }
}

// ----------------------------------------------------------- layer norm

/// Layer normalization over the last axis with affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, LayerNormOp { eps })
}

struct LayerNormOp {
    eps: f64,
}

/// Mean and reciprocal standard deviation of one row.
fn moments<T: Float>(row: &[T], eps: T) -> (T, T) {
    let n = T::from(row.len()).unwrap();
    let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    (mean, (var + eps).sqrt().recip())
}

fn ln_fwd<T: WithDType + Float>(
    eps: f64,
    (s1, l1): (&CpuStorage, &Layout),
    (s2, l2): (&CpuStorage, &Layout),
    (s3, l3): (&CpuStorage, &Layout),
) -> Result<CpuStorage> {
    let (x, g, b) = (slice::<T>(s1, l1)?, slice::<T>(s2, l2)?, slice::<T>(s3, l3)?);
    let eps = T::from(eps).unwrap();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(g.len()) {
        let (mean, rstd) = moments(row, eps);
        out.extend(row.iter().zip(g.iter().zip(b)).map(|(&v, (&gi, &bi))| (v - mean) * rstd * gi + bi));
    }
    Ok(T::to_cpu_storage_owned(out))
}

fn ln_bwd<T: WithDType + Float>(eps: f64, x: &Tensor, gamma: &Tensor, grad: &Tensor) -> Result<[Tensor; 3]> {
    let (xv, gv, dy) = (values::<T>(x)?, values::<T>(gamma)?, values::<T>(grad)?);
    let w = gv.len();
    let n = T::from(w).unwrap();
    let eps = T::from(eps).unwrap();
    let mut dx = Vec::with_capacity(xv.len());
    let mut dg = vec![T::zero(); w];
    let mut db = vec![T::zero(); w];
    let mut xhat = vec![T::zero(); w];
    for (row, gr) in xv.chunks_exact(w).zip(dy.chunks_exact(w)) {
        let (mean, rstd) = moments(row, eps);
        let (mut s1, mut s2) = (T::zero(), T::zero());
        for i in 0..w {
            xhat[i] = (row[i] - mean) * rstd;
            let d = gr[i] * gv[i];
            s1 = s1 + d;
            s2 = s2 + d * xhat[i];
            dg[i] = dg[i] + gr[i] * xhat[i];
            db[i] = db[i] + gr[i];
        }
        let (m1, m2) = (s1 / n, s2 / n);
        dx.extend((0..w).map(|i| rstd * (gr[i] * gv[i] - m1 - xhat[i] * m2)));
    }
    Ok([
        Tensor::from_vec(dx, x.shape(), x.device())?,
        Tensor::from_vec(dg, gamma.shape(), gamma.device())?,
        Tensor::from_vec(db, gamma.shape(), gamma.device())?,
    ])
}

impl CustomOp3 for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let w = last_dim(l1)?;
        if l2.shape().elem_count() != w || l3.shape().elem_count() != w {
            candle_core::bail!("layer-norm: affine parameters do not match {:?}", l1.shape());
        }
        let out = dispatch!(s1.dtype(), ln_fwd(self.eps, (s1, l1), (s2, l2), (s3, l3)))?;
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let [dx, dg, db] = dispatch!(x.dtype(), ln_bwd(self.eps, x, gamma, grad))?;
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var, D};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let v = crate::rng::normal_vec(&mut crate::rng::seeded(seed), shape.iter().product());
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    /// Forward value and gradients of `sum(f(x, p, q) * w)` for two paths.
    fn compare(
        fused: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor,
        plain: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor,
    ) {
        let x = Var::from_tensor(&rand(&[3, 4, 6], 1)).unwrap();
        let p = Var::from_tensor(&(rand(&[6], 2) + 1.0).unwrap()).unwrap();
        let q = Var::from_tensor(&rand(&[6], 3)).unwrap();
        let w = rand(&[3, 4, 6], 4);
        let run = |f: &dyn Fn(&Tensor, &Tensor, &Tensor) -> Tensor| {
            let y = f(x.as_tensor(), p.as_tensor(), q.as_tensor());
            let g = (&y * &w).unwrap().sum_all().unwrap().backward().unwrap();
            let grads: Vec<Option<Tensor>> = [&x, &p, &q].iter().map(|v| g.get(v.as_tensor()).cloned()).collect();
            (y, grads)
        };
        let (ya, ga) = run(&fused);
        let (yb, gb) = run(&plain);
        assert!(max_diff(&ya, &yb) < 1e-12);
        for (a, b) in ga.iter().zip(&gb) {
            match (a, b) {
                (Some(a), Some(b)) => assert!(max_diff(a, b) < 1e-10, "{}", max_diff(a, b)),
                (None, None) => {}
                _ => panic!("gradient presence differs"),
            }
        }
    }

    #[test]
    fn bias_add_matches_broadcast() {
        compare(|x, _, q| add_bias(x, q).unwrap(), |x, _, q| x.broadcast_add(q).unwrap());
    }

    #[test]
    fn scale_cols_matches_broadcast() {
        compare(|x, p, _| scale_cols(x, p).unwrap(), |x, p, _| x.broadcast_mul(p).unwrap());
    }

    #[test]
    fn layer_norm_matches_composition() {
        let eps = 1e-5;
        compare(
            |x, g, b| layer_norm(x, g, b, eps).unwrap(),
            |x, g, b| {
                let mean = x.mean_keepdim(D::Minus1).unwrap();
                let xc = x.broadcast_sub(&mean).unwrap();
                let var = xc.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
                let xn = xc.broadcast_div(&(var + eps).unwrap().sqrt().unwrap()).unwrap();
                xn.broadcast_mul(g).unwrap().broadcast_add(b).unwrap()
            },
        );
    }

    #[test]
    fn f32_path_runs() {
        let x = rand(&[2, 5], 7).to_dtype(DType::F32).unwrap();
        let g = Tensor::ones(5, DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros(5, DType::F32, &Device::Cpu).unwrap();
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        let m = y.mean(1).unwrap().to_vec1::<f32>().unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-5));
    }
}
