//! Architecture grids and their enumeration into model specs.

use serde::{Deserialize, Serialize};

use crate::data::ChannelConfig;
use crate::model::{EncoderKind, ModelDims, ModelSpec, PredictorKind};
use crate::signal::Modality;

use super::ExperimentError;

/// Which split a grid is scored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Val,
    Test,
}

impl EvalSplit {
    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Val => "val",
            EvalSplit::Test => "test",
        }
    }
}

/// An (encoder, predictor) pair left out on purpose.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub encoder: EncoderKind,
    pub predictor: PredictorKind,
    pub reason: String,
}

/// Cartesian product of axes for one input modality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridBlock {
    pub modality: Modality,
    pub encoders: Vec<EncoderKind>,
    pub predictors: Vec<PredictorKind>,
    #[serde(default = "one")]
    pub fractions: Vec<usize>,
    #[serde(default)]
    pub exclude: Vec<Exclusion>,
}

fn one() -> Vec<usize> {
    vec![1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub name: String,
    /// Channel profile names, see [`ChannelConfig::profile`].
    pub channels: Vec<String>,
    pub input_epochs: usize,
    pub runs_per_cell: usize,
    pub split: EvalSplit,
    #[serde(default)]
    pub dims: ModelDims,
    pub blocks: Vec<GridBlock>,
}

/// One trainable configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub channels: String,
    pub spec: ModelSpec,
}

impl GridCell {
    /// Unique within a grid; doubles as the run directory name.
    pub fn key(&self) -> String {
        format!("{}_{}", self.channels, self.spec.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub channels: String,
    pub modality: Modality,
    pub encoder: EncoderKind,
    pub predictor: PredictorKind,
    pub fraction: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Enumeration {
    pub cells: Vec<GridCell>,
    pub skipped: Vec<SkippedCell>,
}

impl ExperimentGrid {
    /// Size of the full cartesian product, before exclusions.
    pub fn product_size(&self) -> usize {
        let per_channel: usize = self
            .blocks
            .iter()
            .map(|b| b.encoders.len() * b.predictors.len() * b.fractions.len())
            .sum();
        per_channel * self.channels.len()
    }

    /// Every cell of the product, in axis order. Excluded or invalid
    /// combinations land in `skipped` with the reason, and each skip is logged.
    pub fn enumerate(&self) -> Result<Enumeration, ExperimentError> {
        let mut cells = Vec::new();
        let mut skipped = Vec::new();
        for profile in &self.channels {
            let num_channels = ChannelConfig::profile(profile)
                .map_err(|e| ExperimentError::InvalidGrid(e.to_string()))?
                .num_channels();
            for block in &self.blocks {
                for &encoder in &block.encoders {
                    for &predictor in &block.predictors {
                        for &fraction in &block.fractions {
                            let excluded = block
                                .exclude
                                .iter()
                                .find(|x| x.encoder == encoder && x.predictor == predictor);
                            let spec = ModelSpec::new(
                                block.modality,
                                encoder,
                                predictor,
                                fraction,
                                num_channels,
                                self.input_epochs,
                            )
                            .with_dims(self.dims);
                            let reason = match (excluded, spec.validate()) {
                                (Some(x), _) => Some(x.reason.clone()),
                                (None, Err(e)) => Some(e.to_string()),
                                (None, Ok(())) => None,
                            };
                            match reason {
                                None => cells.push(GridCell {
                                    channels: profile.clone(),
                                    spec,
                                }),
                                Some(reason) => {
                                    log::info!("{}: skipping {}: {reason}", self.name, spec.label());
                                    skipped.push(SkippedCell {
                                        channels: profile.clone(),
                                        modality: block.modality,
                                        encoder,
                                        predictor,
                                        fraction,
                                        reason,
                                    })
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Enumeration { cells, skipped })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("grid serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let g: ExperimentGrid = toml::from_str(text).map_err(|e| ExperimentError::InvalidGrid(e.to_string()))?;
        if g.runs_per_cell == 0 || g.input_epochs == 0 {
            return Err(ExperimentError::InvalidGrid("runs_per_cell and input_epochs must be positive".into()));
        }
        Ok(g)
    }

    pub fn with_channels(mut self, channels: &[&str]) -> Self {
        self.channels = channels.iter().map(|c| c.to_string()).collect();
        self
    }

    pub fn with_dims(mut self, dims: ModelDims) -> Self {
        self.dims = dims;
        self
    }

    /// Look up a shipped grid by its CLI name.
    pub fn named(name: &str) -> Result<Self, ExperimentError> {
        match name {
            "single-epoch" => Ok(grid_single_epoch()),
            "multi-epoch" => Ok(grid_multi_epoch()),
            "sub-epoch" => Ok(grid_sub_epoch()),
            "final" => Ok(grid_final()),
            other => Err(ExperimentError::InvalidGrid(format!("unknown grid {other:?}"))),
        }
    }
}

const DEFAULT_CHANNELS: [&str; 2] = ["sedf-single", "sedf-multi"];

fn block(modality: Modality, encoders: &[EncoderKind], predictors: &[PredictorKind]) -> GridBlock {
    GridBlock {
        modality,
        encoders: encoders.to_vec(),
        predictors: predictors.to_vec(),
        fractions: vec![1],
        exclude: Vec::new(),
    }
}

fn grid(name: &str, input_epochs: usize, blocks: Vec<GridBlock>) -> ExperimentGrid {
    ExperimentGrid {
        name: name.into(),
        channels: DEFAULT_CHANNELS.iter().map(|c| c.to_string()).collect(),
        input_epochs,
        runs_per_cell: 1,
        split: EvalSplit::Val,
        dims: ModelDims::full(),
        blocks,
    }
}

use EncoderKind as Enc;
use PredictorKind as Pred;

/// Single-epoch models: {CNN, NONE} × {S4, TF, LSTM}. On raw signals the
/// transformer over 3000 unencoded samples is left out.
pub fn grid_single_epoch() -> ExperimentGrid {
    let mut ts = block(Modality::Ts, &[Enc::Cnn, Enc::None], &Pred::ALL);
    ts.exclude.push(Exclusion {
        encoder: Enc::None,
        predictor: Pred::Tf,
        reason: "attention over 3000 raw samples per epoch is not part of the study".into(),
    });
    let spec = block(Modality::Spec, &[Enc::Cnn, Enc::None], &Pred::ALL);
    grid("single-epoch", 1, vec![ts, spec])
}

/// 15-epoch models built on epoch encoders.
pub fn grid_multi_epoch() -> ExperimentGrid {
    let ts = block(Modality::Ts, &[Enc::EeS4, Enc::Scnn], &Pred::ALL);
    let spec = block(Modality::Spec, &[Enc::EeNs4, Enc::Cnn, Enc::None], &Pred::ALL);
    grid("multi-epoch", 15, vec![ts, spec])
}

/// Sub-epoch windows for the two reference architectures. Spectrogram
/// fractions above 1 are listed and skipped.
pub fn grid_sub_epoch() -> ExperimentGrid {
    let fractions = vec![1, 2, 5, 10];
    let mut ts = block(Modality::Ts, &[Enc::EeS4], &[Pred::S4]);
    ts.fractions = fractions.clone();
    let mut spec = block(Modality::Spec, &[Enc::EeNs4], &[Pred::Tf]);
    spec.fractions = fractions;
    grid("sub-epoch", 15, vec![ts, spec])
}

/// The two reference models, three runs each, scored on the test split.
pub fn grid_final() -> ExperimentGrid {
    let mut ts = block(Modality::Ts, &[Enc::EeS4], &[Pred::S4]);
    ts.fractions = vec![5];
    let spec = block(Modality::Spec, &[Enc::EeNs4], &[Pred::Tf]);
    ExperimentGrid {
        runs_per_cell: crate::eval::bootstrap::FINAL_RUNS,
        split: EvalSplit::Test,
        ..grid("final", 15, vec![ts, spec])
    }
}
