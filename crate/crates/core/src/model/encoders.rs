//! Encoders (local feature extraction) and predictors (sequence mixing).
//!
//! Encoders consume token-major input `(batch, steps, features)` where a
//! step is one sample (raw signal, features = channels) or one spectrogram
//! frame (features = channels × 129).

use candle_core::{Result, Tensor};

use super::layers::{gelu, Conv1d, Ctx, Linear};
use super::lstm::BiLstm;
use super::params::ParamBuilder;
use super::s4::S4Stack;
use super::spec::{EncoderKind, ModelDims, PredictorKind};
use super::transformer::TransformerStack;
use crate::signal::Modality;

#[derive(Debug, Clone)]
pub enum Predictor {
    S4(S4Stack),
    Tf(TransformerStack),
    Lstm(BiLstm),
}

impl Predictor {
    pub fn new(pb: &ParamBuilder, kind: PredictorKind, dims: &ModelDims) -> Result<Self> {
        Ok(match kind {
            PredictorKind::S4 => Predictor::S4(S4Stack::new(pb, dims.s4_dim, dims.s4_state, dims.s4_layers, dims.s4_dropout)?),
            PredictorKind::Tf => Predictor::Tf(TransformerStack::new(
                pb,
                dims.tf_dim,
                dims.tf_heads,
                dims.tf_ff,
                dims.tf_layers,
                dims.tf_dropout,
            )?),
            PredictorKind::Lstm => Predictor::Lstm(BiLstm::new(pb, 2 * dims.lstm_hidden, dims.lstm_hidden, dims.lstm_layers)?),
        })
    }

    /// Width expected at the input, equal to the output width.
    pub fn dim(kind: PredictorKind, dims: &ModelDims) -> usize {
        match kind {
            PredictorKind::S4 => dims.s4_dim,
            PredictorKind::Tf => dims.tf_dim,
            PredictorKind::Lstm => 2 * dims.lstm_hidden,
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        match self {
            Predictor::S4(s) => s.forward(x, ctx),
            Predictor::Tf(t) => t.forward(x, ctx),
            Predictor::Lstm(l) => l.forward(x),
        }
    }
}

/// Learned projection inserted when consecutive widths differ. The NONE
/// encoder always gets one: it is its only layer.
pub fn adapter(pb: &ParamBuilder, kind: EncoderKind, from: usize, to: usize) -> Result<Option<Linear>> {
    if from == to && kind != EncoderKind::None {
        Ok(None)
    } else {
        Ok(Some(Linear::new(pb, from, to)?))
    }
}

fn apply(adapter: &Option<Linear>, x: Tensor) -> Result<Tensor> {
    match adapter {
        Some(l) => l.forward(&x),
        None => Ok(x),
    }
}

#[derive(Debug, Clone)]
pub enum Encoder {
    /// Two stride-2 convolutions with a ReLU in between (×4 downsampling).
    CnnTs { conv1: Conv1d, conv2: Conv1d },
    /// Two stride-1 convolutions over spectrogram frames with a GELU in between.
    CnnSpec { conv1: Conv1d, conv2: Conv1d },
    /// Identity; the following adapter is the linear map to model width.
    None,
    /// Four convolutions, kernels 9-9-3-3, strides 5-5-2-2 (×100 downsampling).
    Scnn { convs: Vec<Conv1d> },
    Epoch(Box<EpochEncoder>),
}

impl Encoder {
    /// Width of the features entering the encoder.
    pub fn input_width(modality: Modality, channels: usize) -> usize {
        match modality {
            Modality::Ts => channels,
            Modality::Spec => channels * super::spec::SPEC_BINS,
        }
    }

    pub fn new(
        pb: &ParamBuilder,
        kind: EncoderKind,
        modality: Modality,
        in_width: usize,
        fraction: usize,
        dims: &ModelDims,
    ) -> Result<(Self, usize)> {
        let f = dims.cnn_features;
        Ok(match (kind, modality) {
            (EncoderKind::Cnn, Modality::Ts) => (
                Encoder::CnnTs {
                    conv1: Conv1d::new(&pb.sub("conv1"), in_width, f, 3, 2)?,
                    conv2: Conv1d::new(&pb.sub("conv2"), f, f, 3, 2)?,
                },
                f,
            ),
            (EncoderKind::Cnn, Modality::Spec) => (
                Encoder::CnnSpec {
                    conv1: Conv1d::new(&pb.sub("conv1"), in_width, f, 3, 1)?,
                    conv2: Conv1d::new(&pb.sub("conv2"), f, f, 3, 1)?,
                },
                f,
            ),
            (EncoderKind::None, _) => (Encoder::None, in_width),
            (EncoderKind::Scnn, _) => {
                let s = dims.scnn_features;
                let mut convs = Vec::new();
                let mut cin = in_width;
                for (i, (k, st)) in [(9, 5), (9, 5), (3, 2), (3, 2)].into_iter().enumerate() {
                    convs.push(Conv1d::new(&pb.sub(format!("conv{}", i + 1)), cin, s, k, st)?);
                    cin = s;
                }
                (Encoder::Scnn { convs }, s)
            }
            (ee, _) => {
                let e = EpochEncoder::new(pb, ee, modality, in_width, fraction, dims)?;
                let w = e.out_dim;
                (Encoder::Epoch(Box::new(e)), w)
            }
        })
    }

    /// Output length for an input of `len` steps.
    pub fn out_len(&self, len: usize) -> usize {
        match self {
            Encoder::CnnTs { conv1, conv2 } => conv2.out_len(conv1.out_len(len)),
            Encoder::CnnSpec { .. } | Encoder::None => len,
            Encoder::Scnn { convs } => convs.iter().fold(len, |l, c| c.out_len(l)),
            Encoder::Epoch(e) => len / e.window,
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        match self {
            Encoder::CnnTs { conv1, conv2 } => conv2.forward(&conv1.forward(x)?.relu()?),
            Encoder::CnnSpec { conv1, conv2 } => conv2.forward(&gelu(&conv1.forward(x)?)?),
            Encoder::None => Ok(x.clone()),
            Encoder::Scnn { convs } => {
                let mut h = x.clone();
                for (i, c) in convs.iter().enumerate() {
                    h = c.forward(&h)?;
                    if i + 1 < convs.len() {
                        h = h.relu()?;
                    }
                }
                Ok(h)
            }
            Encoder::Epoch(e) => e.forward(x, ctx),
        }
    }
}

/// A whole single-epoch model (encoder, adapter, predictor) applied with
/// shared weights to each (sub-)epoch window and mean-pooled to one token.
#[derive(Debug, Clone)]
pub struct EpochEncoder {
    pub encoder: Encoder,
    pub adapter: Option<Linear>,
    pub predictor: Predictor,
    /// Steps per window.
    pub window: usize,
    pub out_dim: usize,
}

impl EpochEncoder {
    pub fn new(
        pb: &ParamBuilder,
        kind: EncoderKind,
        modality: Modality,
        in_width: usize,
        fraction: usize,
        dims: &ModelDims,
    ) -> Result<Self> {
        let (inner_enc, inner_pred) = kind
            .inner()
            .ok_or_else(|| candle_core::Error::Msg(format!("{kind} is not an epoch encoder")))?;
        let steps = match modality {
            Modality::Ts => crate::EPOCH_SAMPLES,
            Modality::Spec => super::spec::SPEC_FRAMES,
        };
        let (encoder, width) = Encoder::new(&pb.sub("encoder"), inner_enc, modality, in_width, 1, dims)?;
        let pd = Predictor::dim(inner_pred, dims);
        Ok(EpochEncoder {
            encoder,
            adapter: adapter(&pb.sub("adapter"), inner_enc, width, pd)?,
            predictor: Predictor::new(&pb.sub("predictor"), inner_pred, dims)?,
            window: steps / fraction,
            out_dim: pd,
        })
    }

    /// `(B, k·window, F) -> (B, k, out_dim)`.
    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (b, len, f) = x.dims3()?;
        if len % self.window != 0 {
            candle_core::bail!("input length {len} is not a multiple of the window {}", self.window);
        }
        let k = len / self.window;
        let w = x.reshape((b * k, self.window, f))?;
        let h = apply(&self.adapter, self.encoder.forward(&w, ctx)?)?;
        let h = self.predictor.forward(&h, ctx)?;
        h.mean(1)?.reshape((b, k, self.out_dim))
    }
}
