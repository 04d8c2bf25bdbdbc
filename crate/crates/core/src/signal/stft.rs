//! Short-time Fourier transform of 30 s epochs.
//!
//! Per channel: 29 frames of 200 samples (2 s) with a 100-sample hop. Each
//! frame is multiplied by a periodic Hamming window, zero-padded to 256
//! samples, transformed, and the one-sided magnitude (bins 0..=128, no
//! halving of DC/Nyquist, no window-energy normalization) is mapped through
//! `ln(|X| + log_floor)`.

use std::sync::Arc;

use ndarray::{s, Array4};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{EpochTensor, SignalError};
use crate::data::SleepStage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub log_floor: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            window_length: 200,
            hop: 100,
            fft_size: 256,
            log_floor: 1e-10,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<(), SignalError> {
        if self.window_length == 0 || self.hop == 0 {
            return Err(SignalError::Malformed("window and hop must be positive".into()));
        }
        if self.window_length > self.fft_size {
            return Err(SignalError::Malformed("window longer than FFT".into()));
        }
        if self.hop > self.window_length {
            return Err(SignalError::Malformed("hop longer than window".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(SignalError::Malformed("log floor must be positive".into()));
        }
        Ok(())
    }

    pub fn num_frames(&self, samples: usize) -> usize {
        if samples < self.window_length {
            0
        } else {
            (samples - self.window_length) / self.hop + 1
        }
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Periodic Hamming window, `0.54 - 0.46 cos(2πn/N)`.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_length as f64;
        (0..self.window_length)
            .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / n).cos())
            .collect()
    }
}

/// Log-magnitude spectrograms, shape `(epochs, channels, 29, 129)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramTensor {
    pub recording_id: String,
    pub channels: Vec<String>,
    pub data: Array4<f32>,
    pub labels: Vec<SleepStage>,
    pub config: StftConfig,
}

/// Reusable transform state for one configuration.
pub struct Stft {
    config: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self, SignalError> {
        config.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(config.fft_size);
        Ok(Stft {
            window: config.window(),
            config,
            fft,
        })
    }

    /// Log-magnitude spectrum of the frame starting at `x[0]`.
    pub fn frame(&self, x: &[f64]) -> Vec<f64> {
        let mut buf = vec![Complex::new(0.0, 0.0); self.config.fft_size];
        for ((b, v), w) in buf.iter_mut().zip(x).zip(&self.window) {
            b.re = v * w;
        }
        self.fft.process(&mut buf);
        buf[..self.config.num_bins()]
            .iter()
            .map(|c| (c.norm() + self.config.log_floor).ln())
            .collect()
    }

    /// `(frames, bins)` image of one channel of one epoch, row-major.
    pub fn image(&self, x: &[f64]) -> Vec<f64> {
        let frames = self.config.num_frames(x.len());
        let mut out = Vec::with_capacity(frames * self.config.num_bins());
        for f in 0..frames {
            let start = f * self.config.hop;
            out.extend(self.frame(&x[start..start + self.config.window_length]));
        }
        out
    }
}

pub fn compute_spectrogram(x: &EpochTensor, cfg: &StftConfig) -> Result<SpectrogramTensor, SignalError> {
    let stft = Stft::new(*cfg)?;
    let (epochs, channels, samples) = x.data.dim();
    if x.labels.len() != epochs {
        return Err(SignalError::Malformed(format!(
            "{} labels for {epochs} epochs",
            x.labels.len()
        )));
    }
    let frames = cfg.num_frames(samples);
    let bins = cfg.num_bins();
    let mut data = Array4::<f32>::zeros((epochs, channels, frames, bins));
    for e in 0..epochs {
        for c in 0..channels {
            let signal: Vec<f64> = x.data.slice(s![e, c, ..]).iter().map(|&v| v as f64).collect();
            let image = stft.image(&signal);
            for (dst, v) in data.slice_mut(s![e, c, .., ..]).iter_mut().zip(&image) {
                *dst = *v as f32;
            }
        }
    }
    Ok(SpectrogramTensor {
        recording_id: x.recording_id.clone(),
        channels: x.channels.clone(),
        data,
        labels: x.labels.clone(),
        config: *cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use std::f64::consts::PI;

    fn epochs_from(signal: impl Fn(usize, usize, usize) -> f64, e: usize, c: usize) -> EpochTensor {
        EpochTensor {
            recording_id: "t".into(),
            channels: (0..c).map(|i| format!("C{i}")).collect(),
            data: Array3::from_shape_fn((e, c, 3000), |(a, b, i)| signal(a, b, i) as f32),
            labels: vec![SleepStage::N2; e],
            sample_rate: 100.0,
        }
    }

    #[test]
    fn shape_is_29_by_129() {
        for (e, c) in [(1, 1), (15, 3), (1, 5)] {
            let x = epochs_from(|_, _, i| (i as f64 * 0.1).sin(), e, c);
            let s = compute_spectrogram(&x, &StftConfig::default()).unwrap();
            assert_eq!(s.data.shape(), &[e, c, 29, 129]);
            assert_eq!(s.labels, x.labels);
        }
    }

    #[test]
    fn zero_signal_hits_floor() {
        let cfg = StftConfig::default();
        let s = compute_spectrogram(&epochs_from(|_, _, _| 0.0, 1, 1), &cfg).unwrap();
        let floor = (cfg.log_floor).ln() as f32;
        assert!(s.data.iter().all(|&v| v == floor));
    }

    #[test]
    fn ten_hertz_peaks_at_bin_26() {
        let x = epochs_from(|_, _, i| (2.0 * PI * 10.0 * i as f64 / 100.0).sin(), 1, 1);
        let s = compute_spectrogram(&x, &StftConfig::default()).unwrap();
        for f in 0..29 {
            let row = s.data.slice(s![0, 0, f, ..]);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, 26, "frame {f}");
        }
    }

    #[test]
    fn window_is_periodic_hamming() {
        let w = StftConfig::default().window();
        assert_eq!(w.len(), 200);
        assert!((w[0] - 0.08).abs() < 1e-12);
        assert!((w[100] - 1.0).abs() < 1e-12);
        assert!((w[50] - w[150]).abs() < 1e-12);
    }

    /// O(n²) one-sided DFT magnitude of a windowed, zero-padded frame.
    fn naive_log_spectrum(frame: &[f64], cfg: &StftConfig) -> Vec<f64> {
        let n = cfg.fft_size;
        let w = cfg.window();
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, (x, wt)) in frame.iter().zip(&w).enumerate() {
                    let ang = -2.0 * PI * (k * t % n) as f64 / n as f64;
                    re += x * wt * ang.cos();
                    im += x * wt * ang.sin();
                }
                (re.hypot(im) + cfg.log_floor).ln()
            })
            .collect()
    }

    #[test]
    fn frame_matches_naive_dft() {
        let cfg = StftConfig::default();
        let stft = Stft::new(cfg).unwrap();
        let mut rng = crate::rng::seeded(11);
        let x: Vec<f64> = crate::rng::normal_vec(&mut rng, 3000);
        for f in [0, 7, 28] {
            let frame = &x[f * 100..f * 100 + 200];
            let got = stft.frame(frame);
            let want = naive_log_spectrum(frame, &cfg);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-6 * w.abs().max(1e-12), "{g} vs {w}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn scaling_raises_log_magnitude(seed in 0u64..500, k in 1.5f64..20.0) {
            let cfg = StftConfig::default();
            let stft = Stft::new(cfg).unwrap();
            let mut rng = crate::rng::seeded(seed);
            let x: Vec<f64> = crate::rng::normal_vec(&mut rng, 200);
            let scaled: Vec<f64> = x.iter().map(|v| v * k).collect();
            let a = stft.frame(&x);
            let b = stft.frame(&scaled);
            for (lo, hi) in a.iter().zip(&b) {
                if lo.exp() - cfg.log_floor >= cfg.log_floor {
                    proptest::prop_assert!(hi > lo);
                }
            }
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = StftConfig {
            window_length: 300,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = StftConfig {
            hop: 201,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
