//! Focal loss over per-epoch logits.

use candle_core::{Result, Tensor, D};

use crate::model::layers::log_softmax_last;
use crate::NUM_CLASSES;

/// Probabilities below this are treated as this value inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean over all (sample, epoch) positions of `−(1 − p_t)^γ · log p_t`.
///
/// `logits`: `(B, E, K)`; `targets`: `(B, E)` class indices as u32.
pub fn focal_loss(logits: &Tensor, targets: &Tensor, gamma: f64) -> Result<Tensor> {
    let logp = log_softmax_last(logits)?;
    let logp_t = logp
        .gather(&targets.unsqueeze(D::Minus1)?.contiguous()?, D::Minus1)?
        .squeeze(D::Minus1)?
        .maximum(PROB_FLOOR.ln())?;
    let nll = logp_t.neg()?;
    let weighted = if gamma == 0.0 {
        nll
    } else {
        let rest = (1.0 - logp_t.exp()?)?;
        let w = if gamma == 2.0 {
            rest.sqr()?
        } else {
            rest.maximum(PROB_FLOOR)?.powf(gamma)?
        };
        (w * nll)?
    };
    weighted.mean_all()
}

/// The same quantity from probabilities, in plain f64.
pub fn focal_loss_reference(probs: &[[f64; NUM_CLASSES]], targets: &[usize], gamma: f64) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(targets)
        .map(|(p, &t)| {
            let pt = p[t];
            -(1.0 - pt).powf(gamma) * pt.max(PROB_FLOOR).ln()
        })
        .sum();
    total / probs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::softmax_last;
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    /// Logits whose softmax puts probability `p` on class 0 of 5.
    fn logits_for(p: f64) -> Tensor {
        let other = ((1.0 - p) / 4.0).ln();
        Tensor::new(&[[[p.ln(), other, other, other, other]]], &Device::Cpu).unwrap()
    }

    #[test]
    fn closed_form_single_position() {
        let t = Tensor::new(&[[0u32]], &Device::Cpu).unwrap();
        let got = scalar(&focal_loss(&logits_for(0.9), &t, 2.0).unwrap());
        let want = -(0.1f64).powi(2) * 0.9f64.ln();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 1.054e-3).abs() < 1e-6);
    }

    #[test]
    fn certain_prediction_costs_nothing() {
        let l = Tensor::new(&[[[60.0f64, 0.0, 0.0, 0.0, 0.0]]], &Device::Cpu).unwrap();
        let t = Tensor::new(&[[0u32]], &Device::Cpu).unwrap();
        assert!(scalar(&focal_loss(&l, &t, 2.0).unwrap()).abs() < 1e-20);
    }

    #[test]
    fn floor_keeps_loss_finite() {
        let l = Tensor::new(&[[[0.0f64, 1000.0, 0.0, 0.0, 0.0]]], &Device::Cpu).unwrap();
        let t = Tensor::new(&[[0u32]], &Device::Cpu).unwrap();
        let v = scalar(&focal_loss(&l, &t, 2.0).unwrap());
        assert!((v + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn gamma_zero_is_cross_entropy(vals in prop::collection::vec(-5.0f64..5.0, 30), t in prop::collection::vec(0u32..5, 6)) {
            let logits = Tensor::from_vec(vals, (2, 3, 5), &Device::Cpu).unwrap();
            let targets = Tensor::from_vec(t.clone(), (2, 3), &Device::Cpu).unwrap();
            let fl = scalar(&focal_loss(&logits, &targets, 0.0).unwrap());
            let p = softmax_last(&logits).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let ce: f64 = t.iter().enumerate().map(|(i, &c)| -p[i * 5 + c as usize].ln()).sum::<f64>() / 6.0;
            prop_assert!((fl - ce).abs() < 1e-7);
        }

        #[test]
        fn focal_below_cross_entropy(vals in prop::collection::vec(-4.0f64..4.0, 15), t in prop::collection::vec(0u32..5, 3), gamma in 0.1f64..4.0) {
            let logits = Tensor::from_vec(vals, (1, 3, 5), &Device::Cpu).unwrap();
            let targets = Tensor::from_vec(t.clone(), (1, 3), &Device::Cpu).unwrap();
            let fl = scalar(&focal_loss(&logits, &targets, gamma).unwrap());
            let ce = scalar(&focal_loss(&logits, &targets, 0.0).unwrap());
            prop_assert!(fl >= 0.0);
            prop_assert!(fl < ce);
            let p = softmax_last(&logits).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let rows: Vec<[f64; 5]> = p.chunks(5).map(|r| r.try_into().unwrap()).collect();
            let idx: Vec<usize> = t.iter().map(|&c| c as usize).collect();
            prop_assert!((fl - focal_loss_reference(&rows, &idx, gamma)).abs() < 1e-9);
        }
    }
}
