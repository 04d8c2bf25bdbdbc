//! Encoder → predictor → head sleep-staging models.
//!
//! A [`ModelSpec`] names the modality, the encoder and predictor families,
//! the sub-epoch fraction and the input length in epochs; [`build_model`]
//! turns it into a [`Model`] whose forward pass maps the channel-major
//! input of [`ModelSpec::input_shape`] to logits `(batch, epochs, classes)`.

pub mod checkpoint;
pub mod encoders;
pub mod fused;
pub mod layers;
pub mod lstm;
pub mod params;
pub mod s4;
pub mod spec;
pub mod ssm;
pub mod transformer;

use candle_core::{DType, Tensor};
use thiserror::Error;

use crate::signal::Modality;
use encoders::{adapter, Encoder, Predictor};
use layers::{Ctx, Linear};
use params::{ParamBuilder, ParamStore};

pub use checkpoint::Checkpoint;
pub use spec::{EncoderKind, ModelDims, ModelSpec, PredictorKind, SPEC_BINS, SPEC_FRAMES};
pub use ssm::{SsmError, SsmParams};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("incompatible model spec: {0}")]
    IncompatibleSpec(String),
    #[error("epoch length {length} is not divisible by sub-epoch fraction {fraction}")]
    SubWindowIndivisible { length: usize, fraction: usize },
    #[error("{tokens} tokens cannot be split evenly over {epochs} epochs")]
    IndivisibleTokens { tokens: usize, epochs: usize },
    #[error("input shape {got:?}, expected {expected:?}")]
    InputShape { got: Vec<usize>, expected: Vec<usize> },
    #[error("spec parse error: {0}")]
    Parse(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-epoch pooling followed by a shared linear classifier.
#[derive(Debug, Clone)]
pub struct Head {
    pub linear: Linear,
}

impl Head {
    /// Average each epoch's group of tokens: `(B, T, D) -> (B, E, D)`.
    pub fn pool(tokens: &Tensor, epochs: usize) -> Result<Tensor, ModelError> {
        let (b, t, d) = tokens.dims3()?;
        if epochs == 0 || t % epochs != 0 || t == 0 {
            return Err(ModelError::IndivisibleTokens { tokens: t, epochs });
        }
        Ok(tokens.reshape((b, epochs, t / epochs, d))?.mean(2)?)
    }

    pub fn forward(&self, tokens: &Tensor, epochs: usize) -> Result<Tensor, ModelError> {
        Ok(self.linear.forward(&Self::pool(tokens, epochs)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub encoder: Encoder,
    pub adapter: Option<Linear>,
    pub predictor: Predictor,
    pub head: Head,
    pub params: ParamStore,
    pub dtype: DType,
}

/// Build `spec` in f32 with weights drawn from `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model, ModelError> {
    build_model_with(spec, seed, DType::F32)
}

pub fn build_model_with(spec: &ModelSpec, seed: u64, dtype: DType) -> Result<Model, ModelError> {
    spec.validate()?;
    let pb = ParamBuilder::new(seed, dtype);
    let d = &spec.dims;
    let in_width = Encoder::input_width(spec.modality, spec.num_channels);
    let (encoder, width) = Encoder::new(
        &pb.sub("encoder"),
        spec.encoder,
        spec.modality,
        in_width,
        spec.sub_epoch_fraction,
        d,
    )?;
    let pd = Predictor::dim(spec.predictor, d);
    let adapter = adapter(&pb.sub("adapter"), spec.encoder, width, pd)?;
    let predictor = Predictor::new(&pb.sub("predictor"), spec.predictor, d)?;
    let head = Head {
        linear: Linear::new(&pb.sub("head"), pd, spec.num_classes)?,
    };
    Ok(Model {
        spec: spec.clone(),
        encoder,
        adapter,
        predictor,
        head,
        params: pb.finish(),
        dtype,
    })
}

/// Total number of trainable scalars.
pub fn count_parameters(model: &Model) -> usize {
    model.params.num_scalars()
}

impl Model {
    fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        let expected = self.spec.input_shape(x.dim(0)?);
        if x.dims() != expected.as_slice() {
            return Err(ModelError::InputShape {
                got: x.dims().to_vec(),
                expected,
            });
        }
        Ok(())
    }

    /// Channel-major input to token-major `(B, steps, features)`.
    pub fn to_tokens(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let x = x.to_dtype(self.dtype)?;
        Ok(match self.spec.modality {
            Modality::Ts => x.transpose(1, 2)?.contiguous()?,
            Modality::Spec => {
                let (b, c, t, f) = x.dims4()?;
                x.permute((0, 2, 1, 3))?.contiguous()?.reshape((b, t, c * f))?
            }
        })
    }

    /// Encoder output before the adapter and predictor.
    pub fn encode(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor, ModelError> {
        self.check_input(x)?;
        Ok(self.encoder.forward(&self.to_tokens(x)?, ctx)?)
    }

    /// Logits `(batch, epochs, classes)`.
    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor, ModelError> {
        let h = self.encode(x, ctx)?;
        let h = match &self.adapter {
            Some(a) => a.forward(&h)?,
            None => h,
        };
        let h = self.predictor.forward(&h, ctx)?;
        self.head.forward(&h, self.spec.input_epochs)
    }

    /// Softmax probabilities `(batch, epochs, classes)` without dropout.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let logits = self.forward(x, &Ctx::eval())?.detach();
        Ok(layers::softmax_last(&logits)?)
    }

    pub fn num_parameters(&self) -> usize {
        count_parameters(self)
    }
}
