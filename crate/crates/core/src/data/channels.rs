//! Named channel selections.

use serde::{Deserialize, Serialize};

use super::{DataError, RawRecording};

/// Channel names used by the synthetic generator, in order.
pub const SYNTHETIC_CHANNELS: [&str; 5] = ["EEG1", "EEG2", "EOG1", "EOG2", "EMG"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub modality_name: String,
    pub selected_channels: Vec<String>,
}

impl ChannelConfig {
    pub fn new(name: impl Into<String>, channels: &[&str]) -> Self {
        ChannelConfig {
            modality_name: name.into(),
            selected_channels: channels.iter().map(|c| c.to_string()).collect(),
        }
    }

    /// Built-in profiles: `sedf-multi`, `sedf-single`, `shhs-multi`,
    /// `shhs-single`, `synth-1`, `synth-3`, `synth-5`.
    pub fn profile(name: &str) -> Result<Self, DataError> {
        let channels: &[&str] = match name {
            "sedf-multi" => &["EEG Fpz-Cz", "EEG Pz-Oz", "EOG horizontal"],
            "sedf-single" => &["EEG Fpz-Cz"],
            // SHHS: EEG is C4-A1, EEG(sec) is C3-A2
            "shhs-multi" => &["EEG", "EEG(sec)", "EOG(L)", "EOG(R)", "EMG"],
            "shhs-single" => &["EEG"],
            "synth-1" => &SYNTHETIC_CHANNELS[..1],
            "synth-3" => &SYNTHETIC_CHANNELS[..3],
            "synth-5" => &SYNTHETIC_CHANNELS[..5],
            other => return Err(DataError::UnknownProfile(other.to_string())),
        };
        Ok(ChannelConfig::new(name, channels))
    }

    pub const PROFILES: [&'static str; 7] = [
        "sedf-multi",
        "sedf-single",
        "shhs-multi",
        "shhs-single",
        "synth-1",
        "synth-3",
        "synth-5",
    ];

    pub fn num_channels(&self) -> usize {
        self.selected_channels.len()
    }

    /// Indices of the selected channels inside `rec`, in config order.
    pub fn indices_in(&self, rec: &RawRecording) -> Result<Vec<usize>, DataError> {
        self.selected_channels
            .iter()
            .map(|name| {
                rec.channel_index(name).ok_or_else(|| DataError::MissingChannel {
                    channel: name.clone(),
                    recording: rec.recording_id.clone(),
                })
            })
            .collect()
    }
}
