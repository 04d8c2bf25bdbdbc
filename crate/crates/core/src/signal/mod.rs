//! Model input representations: 30 s raw epochs and log-magnitude spectrograms.

pub mod container;
pub mod features;
pub mod stft;

use ndarray::{s, Array3};
use thiserror::Error;

use crate::data::{map_labels, ChannelConfig, DataError, RawRecording, SleepStage};
use crate::{EPOCH_SAMPLES, TARGET_SAMPLE_RATE};

pub use features::{Modality, RecordingFeatures};
pub use stft::{compute_spectrogram, SpectrogramTensor, StftConfig};

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("missing channel {channel:?} in recording {recording}")]
    MissingChannel { channel: String, recording: String },
    #[error("channel {channel:?} sampled at {rate} Hz, expected {expected} Hz")]
    RateMismatch { channel: String, rate: f64, expected: f64 },
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("container: {0}")]
    Container(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<DataError> for SignalError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::MissingChannel { channel, recording } => {
                SignalError::MissingChannel { channel, recording }
            }
            other => SignalError::Malformed(other.to_string()),
        }
    }
}

/// Raw epochs, shape `(epochs, channels, 3000)` at 100 Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochTensor {
    pub recording_id: String,
    pub channels: Vec<String>,
    pub data: Array3<f32>,
    pub labels: Vec<SleepStage>,
    pub sample_rate: f64,
}

impl EpochTensor {
    pub fn num_epochs(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn num_channels(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Cut a 100 Hz recording into 30 s epochs, keeping the configured channels
/// in config order and dropping epochs whose label is excluded.
pub fn segment_epochs(rec: &RawRecording, cfg: &ChannelConfig) -> Result<EpochTensor, SignalError> {
    let idx = cfg.indices_in(rec)?;
    for &i in &idx {
        let ch = &rec.channels[i];
        if ch.sample_rate != TARGET_SAMPLE_RATE {
            return Err(SignalError::RateMismatch {
                channel: ch.name.clone(),
                rate: ch.sample_rate,
                expected: TARGET_SAMPLE_RATE,
            });
        }
    }
    let (labels, excluded) = map_labels(&rec.hypnogram);
    let kept: Vec<usize> = (0..labels.len()).filter(|&e| !excluded[e]).collect();

    let mut data = Array3::<f32>::zeros((kept.len(), idx.len(), EPOCH_SAMPLES));
    for (row, &e) in kept.iter().enumerate() {
        for (c, &ch) in idx.iter().enumerate() {
            let src = &rec.signals[ch][e * EPOCH_SAMPLES..(e + 1) * EPOCH_SAMPLES];
            for (dst, v) in data.slice_mut(s![row, c, ..]).iter_mut().zip(src) {
                *dst = *v as f32;
            }
        }
    }
    Ok(EpochTensor {
        recording_id: rec.recording_id.clone(),
        channels: cfg.selected_channels.clone(),
        data,
        labels: kept.iter().filter_map(|&e| labels[e].class()).collect(),
        sample_rate: TARGET_SAMPLE_RATE,
    })
}

/// Resample to 100 Hz if needed, cut into epochs and, for
/// [`Modality::Spec`], take the log spectrogram of every epoch.
pub fn featurize(
    rec: &RawRecording,
    channels: &ChannelConfig,
    modality: Modality,
    stft: &StftConfig,
) -> Result<RecordingFeatures, SignalError> {
    let resampled;
    let rec = if rec.channels.iter().all(|c| c.sample_rate == TARGET_SAMPLE_RATE) {
        rec
    } else {
        resampled = rec.clone().resampled(TARGET_SAMPLE_RATE)?;
        &resampled
    };
    let epochs = segment_epochs(rec, channels)?;
    Ok(match modality {
        Modality::Ts => epochs.into(),
        Modality::Spec => compute_spectrogram(&epochs, stft)?.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ChannelInfo, RawStageLabel};

    fn ramp_recording(epochs: usize, channels: usize) -> RawRecording {
        let n = epochs * EPOCH_SAMPLES;
        RawRecording::new(
            "ramp",
            "p",
            (0..channels)
                .map(|c| ChannelInfo::new(format!("C{c}"), 100.0, "uV"))
                .collect(),
            (0..channels)
                .map(|c| (0..n).map(|i| (i + c * 1_000_000) as f64).collect())
                .collect(),
            vec![RawStageLabel::N2; epochs],
        )
        .unwrap()
    }

    fn cfg(n: usize) -> ChannelConfig {
        let names: Vec<String> = (0..n).map(|c| format!("C{c}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        ChannelConfig::new("test", &refs)
    }

    #[test]
    fn shape_is_epochs_channels_3000() {
        let t = segment_epochs(&ramp_recording(10, 3), &cfg(3)).unwrap();
        assert_eq!(t.data.shape(), &[10, 3, 3000]);
        assert_eq!(t.labels.len(), 10);
    }

    #[test]
    fn excluded_epochs_are_dropped() {
        let mut rec = ramp_recording(10, 3);
        rec.hypnogram[2] = RawStageLabel::Movement;
        rec.hypnogram[7] = RawStageLabel::Unknown;
        let t = segment_epochs(&rec, &cfg(3)).unwrap();
        assert_eq!(t.data.shape(), &[8, 3, 3000]);
        // row 2 is original epoch 3
        assert_eq!(t.data[[2, 0, 0]], 9000.0);
    }

    #[test]
    fn first_epoch_of_ramp() {
        let t = segment_epochs(&ramp_recording(2, 1), &cfg(1)).unwrap();
        let e0: Vec<f32> = t.data.slice(s![0, 0, ..]).to_vec();
        assert_eq!(e0, (0..3000).map(|i| i as f32).collect::<Vec<_>>());
    }

    #[test]
    fn channel_order_follows_config() {
        let rec = ramp_recording(1, 3);
        let c = ChannelConfig::new("rev", &["C2", "C0"]);
        let t = segment_epochs(&rec, &c).unwrap();
        assert_eq!(t.data[[0, 0, 0]], 2_000_000.0);
        assert_eq!(t.data[[0, 1, 0]], 0.0);
    }

    #[test]
    fn errors() {
        let rec = ramp_recording(1, 1);
        assert!(matches!(
            segment_epochs(&rec, &ChannelConfig::new("x", &["EEG"])),
            Err(SignalError::MissingChannel { .. })
        ));
        let rec = RawRecording::new(
            "r",
            "p",
            vec![ChannelInfo::new("C0", 50.0, "uV")],
            vec![vec![0.0; 1500]],
            vec![RawStageLabel::W],
        )
        .unwrap();
        assert!(matches!(
            segment_epochs(&rec, &cfg(1)),
            Err(SignalError::RateMismatch { .. })
        ));
    }

    #[test]
    fn featurize_resamples_and_shapes() {
        use crate::data::synthetic::{generate_synthetic, SyntheticConfig};
        let cfg = SyntheticConfig {
            num_epochs: 4,
            sample_rate: 200.0,
            ..Default::default()
        };
        let rec = generate_synthetic(&cfg, 1).unwrap();
        let ch = ChannelConfig::profile("synth-3").unwrap();
        let ts = featurize(&rec, &ch, Modality::Ts, &StftConfig::default()).unwrap();
        assert_eq!(ts.epoch_shape, vec![3, EPOCH_SAMPLES]);
        assert_eq!(ts.num_epochs(), 4);
        let sp = featurize(&rec, &ch, Modality::Spec, &StftConfig::default()).unwrap();
        assert_eq!(sp.epoch_shape, vec![3, 29, 129]);
        assert_eq!(sp.labels, ts.labels);
    }
}
