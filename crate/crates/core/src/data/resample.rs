//! Band-limited resampling.
//!
//! Each output sample is a windowed-sinc interpolation of the input at the
//! output instant. The low-pass cutoff sits at 0.9 × the lower of the two
//! Nyquist frequencies, the sinc is truncated after 16 zero crossings on
//! each side and tapered with a Blackman window. For rational rate ratios
//! the taps repeat with the polyphase period, so this is the direct form of
//! a polyphase FIR resampler.

use thiserror::Error;

const ZERO_CROSSINGS: f64 = 16.0;
const CUTOFF_FRACTION: f64 = 0.9;

#[derive(Debug, Error, PartialEq)]
pub enum ResampleError {
    #[error("cannot resample an empty signal")]
    EmptySignal,
    #[error("sample rates must be positive (got {src} -> {dst})")]
    InvalidRate { src: f64, dst: f64 },
}

/// Number of output samples for `len` inputs.
pub fn output_len(len: usize, src_rate: f64, dst_rate: f64) -> usize {
    (len as f64 * dst_rate / src_rate).round() as usize
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Blackman window on `[-1, 1]`.
fn blackman(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let t = std::f64::consts::PI * (u + 1.0);
    0.42 - 0.5 * t.cos() + 0.08 * (2.0 * t).cos()
}

pub fn resample(signal: &[f64], src_rate: f64, dst_rate: f64) -> Result<Vec<f64>, ResampleError> {
    if !(src_rate > 0.0 && dst_rate > 0.0) {
        return Err(ResampleError::InvalidRate {
            src: src_rate,
            dst: dst_rate,
        });
    }
    if signal.is_empty() {
        return Err(ResampleError::EmptySignal);
    }
    if src_rate == dst_rate {
        return Ok(signal.to_vec());
    }

    let cutoff = CUTOFF_FRACTION * src_rate.min(dst_rate) / 2.0;
    let half_width = ZERO_CROSSINGS / (2.0 * cutoff);
    let reach = (half_width * src_rate).ceil() as i64;
    let n_out = output_len(signal.len(), src_rate, dst_rate);
    let last = signal.len() as i64 - 1;

    let out = (0..n_out)
        .map(|k| {
            let t = k as f64 / dst_rate;
            let center = (t * src_rate).round() as i64;
            let (mut acc, mut norm) = (0.0, 0.0);
            for n in (center - reach).max(0)..=(center + reach).min(last) {
                let dt = t - n as f64 / src_rate;
                let w = sinc(2.0 * cutoff * dt) * blackman(dt / half_width);
                acc += w * signal[n as usize];
                norm += w;
            }
            // Unit DC gain at every output, including near the edges.
            if norm.abs() > 1e-12 {
                acc / norm
            } else {
                0.0
            }
        })
        .collect();
    Ok(out)
}
