//! Recording ingestion: EDF containers, hypnograms, label mapping,
//! resampling, dataset splits and a synthetic PSG generator.

pub mod channels;
pub mod edf;
pub mod resample;
pub mod splits;
pub mod synthetic;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::EPOCH_SECONDS;

pub use channels::ChannelConfig;
pub use edf::{parse_edf, write_edf, EdfError, EdfScaling};
pub use resample::resample;
pub use splits::{hold_out_validation, make_splits, DatasetSplit, SplitRatios};
pub use synthetic::{generate_synthetic, SyntheticConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid recording: {0}")]
    InvalidRecording(String),
    #[error("unknown hypnogram label {token:?} on line {line}")]
    UnknownLabel { token: String, line: usize },
    #[error("empty hypnogram")]
    EmptyHypnogram,
    #[error("missing channel {channel:?} in recording {recording}")]
    MissingChannel { channel: String, recording: String },
    #[error("unknown channel profile {0:?}")]
    UnknownProfile(String),
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("cannot move {requested} recordings to validation, training set has {available}")]
    InsufficientTrainRecordings { requested: usize, available: usize },
    #[error("validation set already populated ({0} recordings)")]
    ValidationAlreadyPopulated(usize),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Edf(#[from] EdfError),
    #[error(transparent)]
    Resample(#[from] resample::ResampleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Stage label as scored under R&K, including the non-sleep annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RawStageLabel {
    W,
    N1,
    N2,
    N3,
    N4,
    Rem,
    Movement,
    Unknown,
}

impl RawStageLabel {
    pub const ALL: [RawStageLabel; 8] = [
        RawStageLabel::W,
        RawStageLabel::N1,
        RawStageLabel::N2,
        RawStageLabel::N3,
        RawStageLabel::N4,
        RawStageLabel::Rem,
        RawStageLabel::Movement,
        RawStageLabel::Unknown,
    ];

    pub fn token(self) -> &'static str {
        match self {
            RawStageLabel::W => "W",
            RawStageLabel::N1 => "N1",
            RawStageLabel::N2 => "N2",
            RawStageLabel::N3 => "N3",
            RawStageLabel::N4 => "N4",
            RawStageLabel::Rem => "REM",
            RawStageLabel::Movement => "MOVEMENT",
            RawStageLabel::Unknown => "UNKNOWN",
        }
    }
}

impl fmt::Display for RawStageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for RawStageLabel {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        RawStageLabel::ALL
            .into_iter()
            .find(|l| l.token() == s)
            .ok_or(())
    }
}

/// One of the five canonical classes, `W=0, N1=1, N2=2, N3=3, REM=4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SleepStage {
    W = 0,
    N1 = 1,
    N2 = 2,
    N3 = 3,
    Rem = 4,
}

impl SleepStage {
    pub const ALL: [SleepStage; 5] = [
        SleepStage::W,
        SleepStage::N1,
        SleepStage::N2,
        SleepStage::N3,
        SleepStage::Rem,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<SleepStage> {
        SleepStage::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SleepStage::W => "W",
            SleepStage::N1 => "N1",
            SleepStage::N2 => "N2",
            SleepStage::N3 => "N3",
            SleepStage::Rem => "REM",
        }
    }
}

/// Result of mapping a raw label onto the 5-class scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CanonicalLabel {
    Class(SleepStage),
    Excluded,
}

impl CanonicalLabel {
    pub fn class(self) -> Option<SleepStage> {
        match self {
            CanonicalLabel::Class(s) => Some(s),
            CanonicalLabel::Excluded => None,
        }
    }
}

impl From<RawStageLabel> for CanonicalLabel {
    fn from(raw: RawStageLabel) -> Self {
        match raw {
            RawStageLabel::W => CanonicalLabel::Class(SleepStage::W),
            RawStageLabel::N1 => CanonicalLabel::Class(SleepStage::N1),
            RawStageLabel::N2 => CanonicalLabel::Class(SleepStage::N2),
            RawStageLabel::N3 | RawStageLabel::N4 => CanonicalLabel::Class(SleepStage::N3),
            RawStageLabel::Rem => CanonicalLabel::Class(SleepStage::Rem),
            RawStageLabel::Movement | RawStageLabel::Unknown => CanonicalLabel::Excluded,
        }
    }
}

/// Merge N4 into N3 and flag MOVEMENT/UNKNOWN. The mask is `true` for
/// excluded epochs.
pub fn map_labels(hypnogram: &[RawStageLabel]) -> (Vec<CanonicalLabel>, Vec<bool>) {
    hypnogram
        .iter()
        .map(|&raw| {
            let label = CanonicalLabel::from(raw);
            (label, label == CanonicalLabel::Excluded)
        })
        .unzip()
}

/// Parse a hypnogram sidecar: one label token per line, blank lines ignored.
pub fn parse_hypnogram(text: &str) -> Result<Vec<RawStageLabel>, DataError> {
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let token = line.trim();
        if token.is_empty() {
            continue;
        }
        let label = token.parse().map_err(|_| DataError::UnknownLabel {
            token: token.to_string(),
            line: i + 1,
        })?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(DataError::EmptyHypnogram);
    }
    Ok(labels)
}

pub fn format_hypnogram(labels: &[RawStageLabel]) -> String {
    let mut out = String::with_capacity(labels.len() * 3);
    for l in labels {
        out.push_str(l.token());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelInfo {
    pub name: String,
    pub sample_rate: f64,
    pub physical_unit: String,
    /// Digital/physical mapping the samples were read with, if any. Writing
    /// a recording back to EDF reuses it so digital values survive a round trip.
    pub scaling: Option<EdfScaling>,
}

impl ChannelInfo {
    pub fn new(name: impl Into<String>, sample_rate: f64, physical_unit: impl Into<String>) -> Self {
        ChannelInfo {
            name: name.into(),
            sample_rate,
            physical_unit: physical_unit.into(),
            scaling: None,
        }
    }
}

/// A multi-channel recording with one raw stage label per 30 s epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub recording_id: String,
    pub patient_id: String,
    pub channels: Vec<ChannelInfo>,
    /// Physical-unit samples, one vector per channel.
    pub signals: Vec<Vec<f64>>,
    pub hypnogram: Vec<RawStageLabel>,
}

impl RawRecording {
    /// Assemble a recording, checking that all channels cover the same
    /// duration and that the hypnogram covers exactly its whole epochs.
    pub fn new(
        recording_id: impl Into<String>,
        patient_id: impl Into<String>,
        channels: Vec<ChannelInfo>,
        signals: Vec<Vec<f64>>,
        hypnogram: Vec<RawStageLabel>,
    ) -> Result<Self, DataError> {
        let rec = RawRecording {
            recording_id: recording_id.into(),
            patient_id: patient_id.into(),
            channels,
            signals,
            hypnogram,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::InvalidRecording(format!("{}: {msg}", self.recording_id)));
        if self.channels.is_empty() {
            return bad("no channels".into());
        }
        if self.channels.len() != self.signals.len() {
            return bad(format!(
                "{} channel headers but {} signals",
                self.channels.len(),
                self.signals.len()
            ));
        }
        if let Some(c) = self.channels.iter().find(|c| !(c.sample_rate > 0.0)) {
            return bad(format!("channel {} has non-positive sample rate", c.name));
        }
        let duration = self.duration_seconds();
        for (c, s) in self.channels.iter().zip(&self.signals) {
            let expected = c.sample_rate * duration;
            if (s.len() as f64 - expected).abs() > 1e-6 {
                return bad(format!(
                    "channel {} has {} samples, expected {expected}",
                    c.name,
                    s.len()
                ));
            }
        }
        let epochs = (duration / EPOCH_SECONDS + 1e-9).floor() as usize;
        if self.hypnogram.len() != epochs {
            return bad(format!(
                "hypnogram has {} labels for {epochs} whole epochs",
                self.hypnogram.len()
            ));
        }
        Ok(())
    }

    pub fn duration_seconds(&self) -> f64 {
        match (self.channels.first(), self.signals.first()) {
            (Some(c), Some(s)) => s.len() as f64 / c.sample_rate,
            _ => 0.0,
        }
    }

    pub fn num_epochs(&self) -> usize {
        self.hypnogram.len()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }

    /// Attach a hypnogram to freshly parsed signals. The usable extent is the
    /// shorter of the hypnogram and the whole epochs in the signals; the
    /// remainder of both is truncated.
    pub fn with_hypnogram(mut self, hypnogram: Vec<RawStageLabel>) -> Result<Self, DataError> {
        let whole = (self.duration_seconds() / EPOCH_SECONDS + 1e-9).floor() as usize;
        let epochs = whole.min(hypnogram.len());
        for (c, s) in self.channels.iter().zip(self.signals.iter_mut()) {
            let per_epoch = c.sample_rate * EPOCH_SECONDS;
            if (per_epoch - per_epoch.round()).abs() > 1e-9 {
                return Err(DataError::InvalidRecording(format!(
                    "channel {} rate {} Hz does not give whole samples per epoch",
                    c.name, c.sample_rate
                )));
            }
            s.truncate(epochs * per_epoch.round() as usize);
        }
        self.hypnogram = hypnogram;
        self.hypnogram.truncate(epochs);
        self.validate()?;
        Ok(self)
    }

    /// Bring every channel to `rate` Hz.
    pub fn resampled(mut self, rate: f64) -> Result<Self, DataError> {
        for (c, s) in self.channels.iter_mut().zip(self.signals.iter_mut()) {
            if c.sample_rate != rate {
                *s = resample(s, c.sample_rate, rate)?;
                c.sample_rate = rate;
                c.scaling = None;
            }
        }
        self.validate()?;
        Ok(self)
    }
}

/// Load `<dir>/<id>.edf` together with its `<dir>/<id>.hyp` sidecar.
pub fn load_recording(dir: &Path, recording_id: &str) -> Result<RawRecording, DataError> {
    let bytes = std::fs::read(dir.join(format!("{recording_id}.edf")))?;
    let mut rec = parse_edf(&bytes)?;
    rec.recording_id = recording_id.to_string();
    let hyp = std::fs::read_to_string(dir.join(format!("{recording_id}.hyp")))?;
    rec.with_hypnogram(parse_hypnogram(&hyp)?)
}

/// Write a recording as `<dir>/<id>.edf` + `<dir>/<id>.hyp`.
pub fn save_recording(dir: &Path, rec: &RawRecording) -> Result<(), DataError> {
    std::fs::write(dir.join(format!("{}.edf", rec.recording_id)), write_edf(rec)?)?;
    std::fs::write(
        dir.join(format!("{}.hyp", rec.recording_id)),
        format_hypnogram(&rec.hypnogram),
    )?;
    Ok(())
}

/// Recording ids in a corpus directory: every `*.edf` with a `.hyp` sidecar.
pub fn list_corpus(dir: &Path) -> Result<Vec<String>, DataError> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("edf") {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if dir.join(format!("{stem}.hyp")).exists() {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n4_merges_into_n3() {
        let (labels, mask) = map_labels(&[RawStageLabel::N4]);
        assert_eq!(labels, vec![CanonicalLabel::Class(SleepStage::N3)]);
        assert_eq!(labels[0].class().unwrap().index(), 3);
        assert_eq!(mask, vec![false]);
    }

    #[test]
    fn movement_and_unknown_are_excluded() {
        let (labels, mask) = map_labels(&[
            RawStageLabel::Movement,
            RawStageLabel::W,
            RawStageLabel::Unknown,
        ]);
        assert_eq!(labels[0], CanonicalLabel::Excluded);
        assert_eq!(labels[1], CanonicalLabel::Class(SleepStage::W));
        assert_eq!(labels[1].class().unwrap().index(), 0);
        assert_eq!(mask, vec![true, false, true]);
    }

    #[test]
    fn every_raw_label_maps_into_range() {
        let (labels, mask) = map_labels(&RawStageLabel::ALL);
        assert_eq!(mask.len(), RawStageLabel::ALL.len());
        for l in labels {
            if let CanonicalLabel::Class(s) = l {
                assert!(s.index() < crate::NUM_CLASSES);
            }
        }
    }

    #[test]
    fn hypnogram_text_round_trips() {
        let labels = RawStageLabel::ALL.to_vec();
        let text = format_hypnogram(&labels);
        assert_eq!(parse_hypnogram(&text).unwrap(), labels);
        assert!(matches!(
            parse_hypnogram("W\nN5\n"),
            Err(DataError::UnknownLabel { line: 2, .. })
        ));
        assert!(matches!(parse_hypnogram("\n\n"), Err(DataError::EmptyHypnogram)));
    }

    #[test]
    fn hypnogram_attach_truncates_to_whole_epochs() {
        let ch = vec![ChannelInfo::new("EEG", 10.0, "uV")];
        // 95 s of signal: 3 whole epochs
        let rec = RawRecording {
            recording_id: "r".into(),
            patient_id: "p".into(),
            channels: ch,
            signals: vec![vec![0.0; 950]],
            hypnogram: vec![],
        };
        let rec = rec.with_hypnogram(vec![RawStageLabel::W; 5]).unwrap();
        assert_eq!(rec.num_epochs(), 3);
        assert_eq!(rec.signals[0].len(), 900);
        let rec2 = rec.clone().with_hypnogram(vec![RawStageLabel::N2; 2]).unwrap();
        assert_eq!(rec2.signals[0].len(), 600);
    }

    #[test]
    fn validation_rejects_inconsistent_lengths() {
        let err = RawRecording::new(
            "r",
            "p",
            vec![ChannelInfo::new("a", 100.0, "uV"), ChannelInfo::new("b", 50.0, "uV")],
            vec![vec![0.0; 3000], vec![0.0; 1000]],
            vec![RawStageLabel::W],
        );
        assert!(err.is_err());
        let err = RawRecording::new(
            "r",
            "p",
            vec![ChannelInfo::new("a", 0.0, "uV")],
            vec![vec![]],
            vec![],
        );
        assert!(err.is_err());
    }
}
