//! Per-recording feature store shared by training and evaluation.
//!
//! A featurized recording lives on disk as `<id>.tensor` (epoch-major data,
//! see [`super::container`]) next to `<id>.json` (labels and metadata).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::container::{TensorData, TensorFile};
use super::stft::{SpectrogramTensor, StftConfig};
use super::{EpochTensor, SignalError};
use crate::data::SleepStage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// Raw time series, epoch shape `(C, 3000)`.
    Ts,
    /// Log-magnitude spectrogram, epoch shape `(C, 29, 129)`.
    Spec,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Ts => "ts",
            Modality::Spec => "spec",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = SignalError;

    fn from_str(s: &str) -> Result<Self, SignalError> {
        match s {
            "ts" => Ok(Modality::Ts),
            "spec" => Ok(Modality::Spec),
            other => Err(SignalError::Malformed(format!("unknown modality {other:?}"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    recording_id: String,
    modality: Modality,
    channels: Vec<String>,
    epoch_shape: Vec<usize>,
    labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stft: Option<StftConfig>,
}

/// Epoch-major features of one recording with one label per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordingFeatures {
    pub recording_id: String,
    pub modality: Modality,
    pub channels: Vec<String>,
    /// Shape of a single epoch: `[C, 3000]` or `[C, 29, 129]`.
    pub epoch_shape: Vec<usize>,
    pub data: Vec<f32>,
    pub labels: Vec<SleepStage>,
    pub stft: Option<StftConfig>,
}

impl From<EpochTensor> for RecordingFeatures {
    fn from(t: EpochTensor) -> Self {
        let (_, c, s) = t.data.dim();
        RecordingFeatures {
            recording_id: t.recording_id,
            modality: Modality::Ts,
            channels: t.channels,
            epoch_shape: vec![c, s],
            data: t.data.into_raw_vec_and_offset().0,
            labels: t.labels,
            stft: None,
        }
    }
}

impl From<SpectrogramTensor> for RecordingFeatures {
    fn from(t: SpectrogramTensor) -> Self {
        let (_, c, f, b) = t.data.dim();
        RecordingFeatures {
            recording_id: t.recording_id,
            modality: Modality::Spec,
            channels: t.channels,
            epoch_shape: vec![c, f, b],
            data: t.data.into_raw_vec_and_offset().0,
            labels: t.labels,
            stft: Some(t.config),
        }
    }
}

impl RecordingFeatures {
    pub fn num_epochs(&self) -> usize {
        self.labels.len()
    }

    pub fn num_channels(&self) -> usize {
        self.epoch_shape[0]
    }

    pub fn epoch_len(&self) -> usize {
        self.epoch_shape.iter().product()
    }

    pub fn epoch(&self, e: usize) -> &[f32] {
        let n = self.epoch_len();
        &self.data[e * n..(e + 1) * n]
    }

    /// Gather epochs into model layout: `(C, k·3000)` for time series or
    /// `(C, k·29, 129)` for spectrograms, flattened row-major. Indices may
    /// repeat, which is how short recordings are padded.
    pub fn gather(&self, epochs: &[usize], out: &mut Vec<f32>) {
        let c = self.num_channels();
        let per_channel = self.epoch_len() / c;
        out.reserve(epochs.len() * self.epoch_len());
        for ch in 0..c {
            for &e in epochs {
                let ep = self.epoch(e);
                out.extend_from_slice(&ep[ch * per_channel..(ch + 1) * per_channel]);
            }
        }
    }

    /// Shape of a gathered segment of `k` epochs, without the batch axis.
    pub fn segment_shape(&self, k: usize) -> Vec<usize> {
        let mut s = self.epoch_shape.clone();
        s[1] *= k;
        s
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index()).collect()
    }

    fn check(&self) -> Result<(), SignalError> {
        let want = self.num_epochs() * self.epoch_len();
        let rank_ok = match self.modality {
            Modality::Ts => self.epoch_shape.len() == 2,
            Modality::Spec => self.epoch_shape.len() == 3,
        };
        if !rank_ok || self.data.len() != want || self.epoch_shape[0] != self.channels.len() {
            return Err(SignalError::Malformed(format!(
                "{}: epoch shape {:?} inconsistent with {} values, {} labels, {} channels",
                self.recording_id,
                self.epoch_shape,
                self.data.len(),
                self.labels.len(),
                self.channels.len()
            )));
        }
        Ok(())
    }

    pub fn tensor_path(dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("{id}.tensor"))
    }

    pub fn save(&self, dir: &Path) -> Result<(), SignalError> {
        self.check()?;
        std::fs::create_dir_all(dir)?;
        let mut dims = vec![self.num_epochs()];
        dims.extend(&self.epoch_shape);
        TensorFile::f32(dims, self.data.clone())?.write(&Self::tensor_path(dir, &self.recording_id))?;
        let side = Sidecar {
            recording_id: self.recording_id.clone(),
            modality: self.modality,
            channels: self.channels.clone(),
            epoch_shape: self.epoch_shape.clone(),
            labels: self.label_indices(),
            stft: self.stft,
        };
        std::fs::write(
            dir.join(format!("{}.json", self.recording_id)),
            serde_json::to_string_pretty(&side)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, id: &str) -> Result<Self, SignalError> {
        let side: Sidecar =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{id}.json")))?)?;
        let file = TensorFile::read(&Self::tensor_path(dir, id))?;
        let data = match file.data {
            TensorData::F32(v) => v,
            TensorData::F64(_) => return Err(SignalError::Container("expected f32 features".into())),
        };
        let labels = side
            .labels
            .iter()
            .map(|&i| {
                SleepStage::from_index(i)
                    .ok_or_else(|| SignalError::Malformed(format!("label index {i} out of range")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if file.dims.get(1..) != Some(&side.epoch_shape[..]) || file.dims[0] != labels.len() {
            return Err(SignalError::Malformed(format!(
                "{id}: tensor dims {:?} disagree with sidecar",
                file.dims
            )));
        }
        let f = RecordingFeatures {
            recording_id: side.recording_id,
            modality: side.modality,
            channels: side.channels,
            epoch_shape: side.epoch_shape,
            data,
            labels,
            stft: side.stft,
        };
        f.check()?;
        Ok(f)
    }

    pub fn load_many(dir: &Path, ids: &[String]) -> Result<Vec<Self>, SignalError> {
        ids.iter().map(|id| Self::load(dir, id)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn ts(epochs: usize, channels: usize) -> RecordingFeatures {
        EpochTensor {
            recording_id: "r1".into(),
            channels: (0..channels).map(|c| format!("C{c}")).collect(),
            data: Array3::from_shape_fn((epochs, channels, 3000), |(e, c, i)| {
                (e * 100_000 + c * 10_000 + i) as f32
            }),
            labels: (0..epochs).map(|e| SleepStage::from_index(e % 5).unwrap()).collect(),
            sample_rate: 100.0,
        }
        .into()
    }

    #[test]
    fn gather_layout_is_channel_major() {
        let f = ts(3, 2);
        let mut out = Vec::new();
        f.gather(&[1, 2], &mut out);
        assert_eq!(out.len(), 2 * 6000);
        assert_eq!(f.segment_shape(2), vec![2, 6000]);
        assert_eq!(out[0], 100_000.0);
        assert_eq!(out[3000], 200_000.0);
        assert_eq!(out[6000], 110_000.0);
        assert_eq!(out[9000 + 5], 210_005.0);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = ts(4, 3);
        f.save(dir.path()).unwrap();
        assert_eq!(RecordingFeatures::load(dir.path(), "r1").unwrap(), f);
    }

    #[test]
    fn modality_parses() {
        assert_eq!("ts".parse::<Modality>().unwrap(), Modality::Ts);
        assert_eq!("spec".parse::<Modality>().unwrap(), Modality::Spec);
        assert!("x".parse::<Modality>().is_err());
    }
}
