//! Architecture description and its flat `key = value` text form.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::signal::Modality;
use crate::{EPOCH_SAMPLES, NUM_CLASSES};

/// Frames and frequency bins of one spectrogram epoch.
pub const SPEC_FRAMES: usize = 29;
pub const SPEC_BINS: usize = 129;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EncoderKind {
    #[serde(rename = "CNN")]
    Cnn,
    #[serde(rename = "NONE")]
    None,
    #[serde(rename = "SCNN")]
    Scnn,
    /// Single-epoch CNN + S4 model used as an encoder.
    #[serde(rename = "EES4")]
    EeS4,
    /// Single-epoch NONE + S4 model used as an encoder.
    #[serde(rename = "EENS4")]
    EeNs4,
    #[serde(rename = "EELSTM")]
    EeLstm,
    #[serde(rename = "EETF")]
    EeTf,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 7] = [
        EncoderKind::Cnn,
        EncoderKind::None,
        EncoderKind::Scnn,
        EncoderKind::EeS4,
        EncoderKind::EeNs4,
        EncoderKind::EeLstm,
        EncoderKind::EeTf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Cnn => "CNN",
            EncoderKind::None => "NONE",
            EncoderKind::Scnn => "SCNN",
            EncoderKind::EeS4 => "EES4",
            EncoderKind::EeNs4 => "EENS4",
            EncoderKind::EeLstm => "EELSTM",
            EncoderKind::EeTf => "EETF",
        }
    }

    /// Inner (encoder, predictor) of an epoch encoder.
    pub fn inner(self) -> Option<(EncoderKind, PredictorKind)> {
        match self {
            EncoderKind::EeS4 => Some((EncoderKind::Cnn, PredictorKind::S4)),
            EncoderKind::EeNs4 => Some((EncoderKind::None, PredictorKind::S4)),
            EncoderKind::EeLstm => Some((EncoderKind::Cnn, PredictorKind::Lstm)),
            EncoderKind::EeTf => Some((EncoderKind::Cnn, PredictorKind::Tf)),
            _ => None,
        }
    }

    pub fn is_epoch_encoder(self) -> bool {
        self.inner().is_some()
    }

    pub fn supports(self, modality: Modality) -> bool {
        match self {
            EncoderKind::Cnn | EncoderKind::None => true,
            EncoderKind::Scnn | EncoderKind::EeS4 | EncoderKind::EeLstm | EncoderKind::EeTf => {
                modality == Modality::Ts
            }
            EncoderKind::EeNs4 => modality == Modality::Spec,
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderKind {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        EncoderKind::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| ModelError::Parse(format!("unknown encoder {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PredictorKind {
    S4,
    #[serde(rename = "TF")]
    Tf,
    #[serde(rename = "LSTM")]
    Lstm,
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 3] = [PredictorKind::S4, PredictorKind::Tf, PredictorKind::Lstm];

    pub fn name(self) -> &'static str {
        match self {
            PredictorKind::S4 => "S4",
            PredictorKind::Tf => "TF",
            PredictorKind::Lstm => "LSTM",
        }
    }
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PredictorKind {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        PredictorKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| ModelError::Parse(format!("unknown predictor {s:?}")))
    }
}

/// Layer widths and depths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub s4_dim: usize,
    /// Real state dimension; the layer keeps half as many complex modes.
    pub s4_state: usize,
    pub s4_layers: usize,
    pub s4_dropout: f64,
    pub tf_dim: usize,
    pub tf_heads: usize,
    pub tf_ff: usize,
    pub tf_layers: usize,
    pub tf_dropout: f64,
    /// Hidden units per direction.
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub cnn_features: usize,
    pub scnn_features: usize,
}

impl ModelDims {
    /// Full-size configuration.
    pub const fn full() -> Self {
        ModelDims {
            s4_dim: 512,
            s4_state: 64,
            s4_layers: 4,
            s4_dropout: 0.2,
            tf_dim: 256,
            tf_heads: 8,
            tf_ff: 1024,
            tf_layers: 4,
            tf_dropout: 0.1,
            lstm_hidden: 256,
            lstm_layers: 2,
            cnn_features: 128,
            scnn_features: 512,
        }
    }

    /// Every width set to 64 and stacks two layers deep, for CPU-scale
    /// experiments.
    pub const fn compact() -> Self {
        ModelDims {
            s4_dim: 64,
            s4_layers: 2,
            tf_dim: 64,
            tf_layers: 2,
            tf_ff: 256,
            lstm_hidden: 32,
            cnn_features: 64,
            scnn_features: 64,
            ..Self::full()
        }
    }

    /// All widths set to `w` and depths to `layers`; used for tiny test models.
    pub const fn uniform(w: usize, layers: usize, heads: usize) -> Self {
        ModelDims {
            s4_dim: w,
            s4_state: w,
            s4_layers: layers,
            s4_dropout: 0.0,
            tf_dim: w,
            tf_heads: heads,
            tf_ff: w,
            tf_layers: layers,
            tf_dropout: 0.0,
            lstm_hidden: w / 2,
            lstm_layers: layers,
            cnn_features: w,
            scnn_features: w,
        }
    }

    pub fn preset(name: &str) -> Result<Self, ModelError> {
        match name {
            "full" => Ok(Self::full()),
            "compact" => Ok(Self::compact()),
            other => Err(ModelError::Parse(format!("unknown dims preset {other:?}"))),
        }
    }
}

impl Default for ModelDims {
    fn default() -> Self {
        Self::full()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub modality: Modality,
    pub encoder: EncoderKind,
    pub predictor: PredictorKind,
    /// Tokens an epoch encoder emits per epoch.
    pub sub_epoch_fraction: usize,
    pub num_channels: usize,
    pub input_epochs: usize,
    pub num_classes: usize,
    pub dims: ModelDims,
}

impl ModelSpec {
    pub fn new(
        modality: Modality,
        encoder: EncoderKind,
        predictor: PredictorKind,
        sub_epoch_fraction: usize,
        num_channels: usize,
        input_epochs: usize,
    ) -> Self {
        ModelSpec {
            modality,
            encoder,
            predictor,
            sub_epoch_fraction,
            num_channels,
            input_epochs,
            num_classes: NUM_CLASSES,
            dims: ModelDims::full(),
        }
    }

    pub fn with_dims(mut self, dims: ModelDims) -> Self {
        self.dims = dims;
        self
    }

    /// Raw-signal model: 15 epochs, EES4 on fifth-epoch windows, S4 predictor.
    pub fn reference_ts(num_channels: usize) -> Self {
        Self::new(Modality::Ts, EncoderKind::EeS4, PredictorKind::S4, 5, num_channels, 15)
    }

    /// Spectrogram model: 15 epochs, EENS4 epoch encoder, transformer predictor.
    pub fn reference_spec(num_channels: usize) -> Self {
        Self::new(Modality::Spec, EncoderKind::EeNs4, PredictorKind::Tf, 1, num_channels, 15)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::IncompatibleSpec(m));
        if !self.encoder.supports(self.modality) {
            return bad(format!("encoder {} is not defined for modality {}", self.encoder, self.modality));
        }
        if self.sub_epoch_fraction == 0 {
            return bad("sub_epoch_fraction must be at least 1".into());
        }
        if self.sub_epoch_fraction > 1 {
            if !self.encoder.is_epoch_encoder() {
                return bad(format!("sub-epoch windows need an epoch encoder, got {}", self.encoder));
            }
            if self.modality == Modality::Spec {
                return bad("spectrogram epoch encoders only support whole epochs".into());
            }
            if EPOCH_SAMPLES % self.sub_epoch_fraction != 0 {
                return Err(ModelError::SubWindowIndivisible {
                    length: EPOCH_SAMPLES,
                    fraction: self.sub_epoch_fraction,
                });
            }
        }
        if self.num_channels == 0 || self.input_epochs == 0 || self.num_classes < 2 {
            return bad("channels and epochs must be positive, classes at least 2".into());
        }
        let d = &self.dims;
        if d.tf_heads == 0 || d.tf_dim % d.tf_heads != 0 {
            return bad(format!("tf_dim {} not divisible by {} heads", d.tf_dim, d.tf_heads));
        }
        let widths = [d.s4_dim, d.s4_state, d.tf_dim, d.tf_ff, d.lstm_hidden, d.cnn_features, d.scnn_features];
        if widths.contains(&0) || d.s4_layers == 0 || d.tf_layers == 0 || d.lstm_layers == 0 {
            return bad("all widths and depths must be positive".into());
        }
        Ok(())
    }

    /// Samples (ts) or frames (spec) per epoch.
    pub fn epoch_steps(&self) -> usize {
        match self.modality {
            Modality::Ts => EPOCH_SAMPLES,
            Modality::Spec => SPEC_FRAMES,
        }
    }

    /// Model input shape for a batch, channel-major.
    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        let steps = self.epoch_steps() * self.input_epochs;
        match self.modality {
            Modality::Ts => vec![batch, self.num_channels, steps],
            Modality::Spec => vec![batch, self.num_channels, steps, SPEC_BINS],
        }
    }

    /// Short identifier such as `ts-EES4-S4-n5-c1-e15`.
    pub fn label(&self) -> String {
        format!(
            "{}-{}-{}-n{}-c{}-e{}",
            self.modality, self.encoder, self.predictor, self.sub_epoch_fraction, self.num_channels, self.input_epochs
        )
    }

    pub fn to_text(&self) -> String {
        let d = &self.dims;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("modality", self.modality.to_string());
        kv("encoder", self.encoder.to_string());
        kv("predictor", self.predictor.to_string());
        kv("sub_epoch_fraction", self.sub_epoch_fraction.to_string());
        kv("num_channels", self.num_channels.to_string());
        kv("input_epochs", self.input_epochs.to_string());
        kv("num_classes", self.num_classes.to_string());
        kv("s4_dim", d.s4_dim.to_string());
        kv("s4_state", d.s4_state.to_string());
        kv("s4_layers", d.s4_layers.to_string());
        kv("s4_dropout", d.s4_dropout.to_string());
        kv("tf_dim", d.tf_dim.to_string());
        kv("tf_heads", d.tf_heads.to_string());
        kv("tf_ff", d.tf_ff.to_string());
        kv("tf_layers", d.tf_layers.to_string());
        kv("tf_dropout", d.tf_dropout.to_string());
        kv("lstm_hidden", d.lstm_hidden.to_string());
        kv("lstm_layers", d.lstm_layers.to_string());
        kv("cnn_features", d.cnn_features.to_string());
        kv("scnn_features", d.scnn_features.to_string());
        s
    }

    /// Parse the text form. Blank lines and `#` comments are ignored; a
    /// `dims = full|compact` line selects a preset that later keys override.
    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut modality = None;
        let mut encoder = None;
        let mut predictor = None;
        let mut fraction = 1;
        let mut channels = None;
        let mut epochs = None;
        let mut classes = NUM_CLASSES;
        let mut d = ModelDims::full();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Parse(format!("line {}: expected key = value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let int = || v.parse::<usize>().map_err(|e| ModelError::Parse(format!("{k}: {e}")));
            let real = || v.parse::<f64>().map_err(|e| ModelError::Parse(format!("{k}: {e}")));
            match k {
                "modality" => modality = Some(v.parse::<Modality>().map_err(|e| ModelError::Parse(e.to_string()))?),
                "encoder" => encoder = Some(v.parse()?),
                "predictor" => predictor = Some(v.parse()?),
                "sub_epoch_fraction" => fraction = int()?,
                "num_channels" => channels = Some(int()?),
                "input_epochs" => epochs = Some(int()?),
                "num_classes" => classes = int()?,
                "dims" => d = ModelDims::preset(v)?,
                "s4_dim" => d.s4_dim = int()?,
                "s4_state" => d.s4_state = int()?,
                "s4_layers" => d.s4_layers = int()?,
                "s4_dropout" => d.s4_dropout = real()?,
                "tf_dim" => d.tf_dim = int()?,
                "tf_heads" => d.tf_heads = int()?,
                "tf_ff" => d.tf_ff = int()?,
                "tf_layers" => d.tf_layers = int()?,
                "tf_dropout" => d.tf_dropout = real()?,
                "lstm_hidden" => d.lstm_hidden = int()?,
                "lstm_layers" => d.lstm_layers = int()?,
                "cnn_features" => d.cnn_features = int()?,
                "scnn_features" => d.scnn_features = int()?,
                other => return Err(ModelError::Parse(format!("unknown key {other:?}"))),
            }
        }
        let need = |name: &str| ModelError::Parse(format!("missing key {name:?}"));
        let spec = ModelSpec {
            modality: modality.ok_or_else(|| need("modality"))?,
            encoder: encoder.ok_or_else(|| need("encoder"))?,
            predictor: predictor.ok_or_else(|| need("predictor"))?,
            sub_epoch_fraction: fraction,
            num_channels: channels.ok_or_else(|| need("num_channels"))?,
            input_epochs: epochs.ok_or_else(|| need("input_epochs"))?,
            num_classes: classes,
            dims: d,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for s in [
            ModelSpec::reference_ts(1),
            ModelSpec::reference_spec(3).with_dims(ModelDims::compact()),
        ] {
            assert_eq!(ModelSpec::from_text(&s.to_text()).unwrap(), s);
        }
    }

    #[test]
    fn minimal_text_uses_defaults() {
        let s = ModelSpec::from_text(
            "# compact spectrogram model\nmodality = spec\nencoder = EENS4\npredictor = TF\nnum_channels = 3\ninput_epochs = 15\ndims = compact\ntf_layers = 2\n",
        )
        .unwrap();
        assert_eq!(s.sub_epoch_fraction, 1);
        assert_eq!(s.dims.tf_dim, 64);
        assert_eq!(s.dims.tf_layers, 2);
    }

    #[test]
    fn invariants() {
        let ok = ModelSpec::new(Modality::Ts, EncoderKind::Scnn, PredictorKind::S4, 1, 1, 15);
        assert!(ok.validate().is_ok());
        let mut s = ok.clone();
        s.modality = Modality::Spec;
        assert!(matches!(s.validate(), Err(ModelError::IncompatibleSpec(_))));
        let s = ModelSpec::new(Modality::Ts, EncoderKind::EeNs4, PredictorKind::S4, 1, 1, 15);
        assert!(s.validate().is_err());
        let s = ModelSpec::new(Modality::Ts, EncoderKind::Cnn, PredictorKind::S4, 5, 1, 15);
        assert!(s.validate().is_err());
        let s = ModelSpec::new(Modality::Spec, EncoderKind::EeNs4, PredictorKind::S4, 5, 1, 15);
        assert!(s.validate().is_err());
        let s = ModelSpec::new(Modality::Ts, EncoderKind::EeS4, PredictorKind::S4, 7, 1, 15);
        assert!(matches!(s.validate(), Err(ModelError::SubWindowIndivisible { .. })));
        for n in [1, 2, 5, 10] {
            assert!(ModelSpec::new(Modality::Ts, EncoderKind::EeS4, PredictorKind::S4, n, 1, 15).validate().is_ok());
        }
    }

    #[test]
    fn parse_errors() {
        assert!(ModelSpec::from_text("modality = ts\n").is_err());
        assert!(ModelSpec::from_text("encoder = XYZ\n").is_err());
        assert!(ModelSpec::from_text("bogus\n").is_err());
    }
}
