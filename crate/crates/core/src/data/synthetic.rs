//! Synthetic polysomnography with learnable stage structure.
//!
//! Stages follow a first-order Markov chain: with probability
//! `stay_probability` the previous stage repeats, otherwise the next stage is
//! drawn from `stage_priors` (which makes the priors the stationary
//! distribution). Each epoch carries a stage-specific oscillation plus white
//! noise:
//!
//! | stage | signature                                          |
//! |-------|----------------------------------------------------|
//! | W     | 8–12 Hz, amplitude 0.8–1.2                         |
//! | N1    | 4–7 Hz, amplitude 0.7–1.3                          |
//! | N2    | 4–7 Hz base (0.4–0.7) with 12–14 Hz spindle bursts |
//! | N3    | 0.5–2 Hz, amplitude 2–3                            |
//! | REM   | 4–7 Hz, amplitude 0.4–1.0                          |
//!
//! N1 and REM overlap in amplitude, so single epochs are ambiguous while
//! runs of consecutive epochs are not.
//!
//! Randomness: ChaCha8 seeded with the caller's seed (see [`crate::rng`]).

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::channels::SYNTHETIC_CHANNELS;
use super::{ChannelInfo, DataError, RawRecording, RawStageLabel, SleepStage};
use crate::rng::{self, Rng};
use crate::EPOCH_SECONDS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub recording_id: String,
    pub patient_id: String,
    pub num_channels: usize,
    pub num_epochs: usize,
    pub sample_rate: f64,
    /// Stationary stage distribution in class order W, N1, N2, N3, REM.
    pub stage_priors: [f64; 5],
    pub stay_probability: f64,
    pub noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            recording_id: "synth".into(),
            patient_id: "synth".into(),
            num_channels: 3,
            num_epochs: 100,
            sample_rate: 100.0,
            stage_priors: [0.2, 0.15, 0.3, 0.15, 0.2],
            stay_probability: 0.9,
            noise_std: 0.5,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if self.num_channels == 0 {
            return bad("num_channels must be positive");
        }
        if self.num_epochs == 0 {
            return bad("num_epochs must be positive");
        }
        if !(self.sample_rate > 0.0) || (self.sample_rate * EPOCH_SECONDS).fract() != 0.0 {
            return bad("sample_rate must give a whole number of samples per epoch");
        }
        if self.stage_priors.iter().any(|p| !(*p >= 0.0)) {
            return bad("stage priors must be non-negative");
        }
        if (self.stage_priors.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return bad("stage priors must sum to 1");
        }
        if !(0.7..1.0).contains(&self.stay_probability) {
            return bad("stay_probability must lie in [0.7, 1)");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative");
        }
        Ok(())
    }
}

fn draw_from(priors: &[f64; 5], rng: &mut Rng) -> SleepStage {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in priors.iter().enumerate() {
        acc += p;
        if u < acc {
            return SleepStage::ALL[i];
        }
    }
    SleepStage::Rem
}

/// Draw the ground-truth stage sequence.
pub fn sample_stages(config: &SyntheticConfig, rng: &mut Rng) -> Vec<SleepStage> {
    let mut stages = Vec::with_capacity(config.num_epochs);
    let mut current = draw_from(&config.stage_priors, rng);
    for _ in 0..config.num_epochs {
        stages.push(current);
        if rng.random::<f64>() >= config.stay_probability {
            current = draw_from(&config.stage_priors, rng);
        }
    }
    stages
}

struct Tone {
    freq: f64,
    amp: f64,
}

/// Stage-specific oscillations and spindle bursts for one epoch.
struct EpochPattern {
    tones: Vec<Tone>,
    // (center seconds, half-width seconds, frequency)
    spindles: Vec<(f64, f64, f64)>,
}

impl EpochPattern {
    fn draw(stage: SleepStage, rng: &mut Rng) -> Self {
        let tone = |rng: &mut Rng, f: (f64, f64), a: (f64, f64)| Tone {
            freq: rng.random_range(f.0..f.1),
            amp: rng.random_range(a.0..a.1),
        };
        let mut spindles = Vec::new();
        let tones = match stage {
            SleepStage::W => vec![tone(rng, (8.0, 12.0), (0.8, 1.2))],
            SleepStage::N1 => vec![tone(rng, (4.0, 7.0), (0.7, 1.3))],
            SleepStage::N2 => {
                for _ in 0..rng.random_range(2..=4) {
                    spindles.push((
                        rng.random_range(2.0..EPOCH_SECONDS - 2.0),
                        rng.random_range(0.5..1.0),
                        rng.random_range(12.0..14.0),
                    ));
                }
                vec![tone(rng, (4.0, 7.0), (0.4, 0.7))]
            }
            SleepStage::N3 => vec![tone(rng, (0.5, 2.0), (2.0, 3.0))],
            SleepStage::Rem => vec![tone(rng, (4.0, 7.0), (0.4, 1.0))],
        };
        EpochPattern { tones, spindles }
    }

    fn render(&self, gain: f64, rate: f64, noise_std: f64, rng: &mut Rng, out: &mut Vec<f64>) {
        let n = (rate * EPOCH_SECONDS).round() as usize;
        let phases: Vec<f64> = self.tones.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        for i in 0..n {
            let t = i as f64 / rate;
            let mut v = 0.0;
            for (tone, ph) in self.tones.iter().zip(&phases) {
                v += tone.amp * (2.0 * PI * tone.freq * t + ph).sin();
            }
            for &(center, width, freq) in &self.spindles {
                let z = (t - center) / width;
                if z.abs() < 4.0 {
                    v += 1.5 * (-0.5 * z * z).exp() * (2.0 * PI * freq * (t - center)).sin();
                }
            }
            let noise: f64 = StandardNormal.sample(rng);
            out.push(gain * v + noise_std * noise);
        }
    }
}

fn stage_to_raw(s: SleepStage) -> RawStageLabel {
    match s {
        SleepStage::W => RawStageLabel::W,
        SleepStage::N1 => RawStageLabel::N1,
        SleepStage::N2 => RawStageLabel::N2,
        SleepStage::N3 => RawStageLabel::N3,
        SleepStage::Rem => RawStageLabel::Rem,
    }
}

fn channel_name(i: usize) -> String {
    SYNTHETIC_CHANNELS
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("CH{}", i + 1))
}

pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<RawRecording, DataError> {
    config.validate()?;
    let mut rng = rng::seeded(seed);
    let stages = sample_stages(config, &mut rng);
    let per_epoch = (config.sample_rate * EPOCH_SECONDS).round() as usize;
    let gains: Vec<f64> = (0..config.num_channels)
        .map(|c| [1.0, 0.8, 0.6, 0.6, 0.4].get(c).copied().unwrap_or(0.5))
        .collect();

    let mut signals: Vec<Vec<f64>> = (0..config.num_channels)
        .map(|_| Vec::with_capacity(per_epoch * config.num_epochs))
        .collect();
    for &stage in &stages {
        let pattern = EpochPattern::draw(stage, &mut rng);
        for (c, out) in signals.iter_mut().enumerate() {
            pattern.render(gains[c], config.sample_rate, config.noise_std, &mut rng, out);
        }
    }

    let channels = (0..config.num_channels)
        .map(|c| ChannelInfo::new(channel_name(c), config.sample_rate, "uV"))
        .collect();
    RawRecording::new(
        config.recording_id.clone(),
        config.patient_id.clone(),
        channels,
        signals,
        stages.into_iter().map(stage_to_raw).collect(),
    )
}

/// A corpus of `n` recordings named `synth000`, `synth001`, ... each
/// generated from its own stream of `seed`.
pub fn generate_corpus(
    n: usize,
    template: &SyntheticConfig,
    seed: u64,
) -> Result<Vec<RawRecording>, DataError> {
    (0..n)
        .map(|i| {
            let cfg = SyntheticConfig {
                recording_id: format!("synth{i:03}"),
                patient_id: format!("P{i:03}"),
                ..template.clone()
            };
            generate_synthetic(&cfg, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{map_labels, CanonicalLabel};

    fn cfg(epochs: usize, channels: usize) -> SyntheticConfig {
        SyntheticConfig {
            num_epochs: epochs,
            num_channels: channels,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_recording() {
        let a = generate_synthetic(&cfg(5, 2), 9).unwrap();
        let b = generate_synthetic(&cfg(5, 2), 9).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&cfg(5, 2), 10).unwrap();
        assert_ne!(a.signals, c.signals);
    }

    #[test]
    fn shape_matches_config() {
        let r = generate_synthetic(&cfg(4, 3), 1).unwrap();
        assert_eq!(r.signals.len(), 3);
        assert_eq!(r.signals[0].len(), 4 * 3000);
        assert_eq!(r.hypnogram.len(), 4);
        assert_eq!(r.channels[2].name, "EOG1");
    }

    #[test]
    fn stage_frequencies_match_priors() {
        let config = cfg(20_000, 1);
        let stages = sample_stages(&config, &mut rng::seeded(3));
        for (k, prior) in config.stage_priors.iter().enumerate() {
            let freq = stages.iter().filter(|s| s.index() == k).count() as f64 / stages.len() as f64;
            assert!((freq - prior).abs() < 0.05, "class {k}: {freq} vs {prior}");
        }
        let stays = stages.windows(2).filter(|w| w[0] == w[1]).count() as f64;
        assert!(stays / (stages.len() - 1) as f64 >= 0.7);
    }

    fn band_power(x: &[f64], rate: f64, lo: f64, hi: f64) -> f64 {
        // direct periodogram over the requested band
        let n = x.len();
        let mut p = 0.0;
        let k_lo = (lo * n as f64 / rate).ceil() as usize;
        let k_hi = (hi * n as f64 / rate).floor() as usize;
        for k in k_lo..=k_hi {
            let w = 2.0 * PI * k as f64 / n as f64;
            let (mut re, mut im) = (0.0, 0.0);
            for (i, v) in x.iter().enumerate() {
                re += v * (w * i as f64).cos();
                im -= v * (w * i as f64).sin();
            }
            p += re * re + im * im;
        }
        p
    }

    #[test]
    fn deep_sleep_is_slow_wave_dominated() {
        let config = SyntheticConfig {
            stage_priors: [0.1, 0.1, 0.1, 0.6, 0.1],
            ..cfg(120, 1)
        };
        let r = generate_synthetic(&config, 5).unwrap();
        let (labels, _) = map_labels(&r.hypnogram);
        let mut n3 = 0;
        let mut ok = 0;
        for (e, l) in labels.iter().enumerate() {
            if *l != CanonicalLabel::Class(SleepStage::N3) {
                continue;
            }
            n3 += 1;
            let x = &r.signals[0][e * 3000..(e + 1) * 3000];
            if band_power(x, 100.0, 0.5, 2.0) > band_power(x, 100.0, 8.0, 12.0) {
                ok += 1;
            }
        }
        assert!(n3 > 30);
        assert!(ok as f64 >= 0.95 * n3 as f64, "{ok}/{n3}");
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = cfg(3, 1);
        c.stay_probability = 0.5;
        assert!(generate_synthetic(&c, 0).is_err());
        let mut c = cfg(3, 1);
        c.stage_priors = [0.5; 5];
        assert!(generate_synthetic(&c, 0).is_err());
        assert!(generate_synthetic(&cfg(0, 1), 0).is_err());
        assert!(generate_synthetic(&cfg(2, 0), 0).is_err());
    }
}
