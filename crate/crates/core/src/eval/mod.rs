//! Test-time inference, metrics and statistical comparison of models.

pub mod bootstrap;
pub mod inference;
pub mod metrics;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bootstrap::{
    bootstrap_ci, bootstrap_diff, pairwise_significance, report_uncertainty, BootstrapResult, Metric, PairOutcome,
    PairwiseSignificance, Uncertainty, Verdict, PAIRWISE_THRESHOLD,
};
pub use inference::{
    consecutive_predict, coverage_counts, sliding_window_predict, ProbabilityMatrix, SegmentPredictor, SlidingOutput,
};
pub use metrics::{accuracy, argmax_labels, f1_scores, macro_auroc, Confusion, F1Scores};

use crate::data::SleepStage;
use crate::model::ModelError;
use crate::signal::container::{TensorData, TensorFile};
use crate::signal::SignalError;
use crate::NUM_CLASSES;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no epochs to evaluate")]
    EmptyInput,
    #[error("{0} predictions for {1} labels")]
    LengthMismatch(usize, usize),
    #[error("class index {0} out of range")]
    ClassOutOfRange(usize),
    #[error("every label is the same class; AUROC is undefined")]
    NoDiscriminableClass,
    #[error("evaluation sets differ: {0}")]
    MismatchedEvaluationSets(String),
    #[error("bootstrap needs at least one iteration")]
    NoIterations,
    #[error("expected exactly 3 runs, got {0}")]
    RunCount(usize),
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("model: {0}")]
    Model(String),
    #[error("prediction dump: {0}")]
    Dump(String),
}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e.to_string())
    }
}

impl From<candle_core::Error> for EvalError {
    fn from(e: candle_core::Error) -> Self {
        EvalError::Model(e.to_string())
    }
}

impl From<SignalError> for EvalError {
    fn from(e: SignalError) -> Self {
        EvalError::Dump(e.to_string())
    }
}

impl From<std::io::Error> for EvalError {
    fn from(e: std::io::Error) -> Self {
        EvalError::Dump(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub macro_f1: f64,
    pub per_class_f1: [f64; NUM_CLASSES],
    pub accuracy: f64,
    pub macro_auroc: f64,
}

/// Metrics over all epochs of all recordings, pooled.
pub fn evaluate(matrices: &[ProbabilityMatrix]) -> Result<MetricReport, EvalError> {
    let (preds, labels) = bootstrap::pool(matrices);
    let probs: Vec<[f64; NUM_CLASSES]> = matrices.iter().flat_map(|m| m.probs.iter().copied()).collect();
    let f1 = f1_scores(&preds, &labels)?;
    Ok(MetricReport {
        macro_f1: f1.macro_f1,
        per_class_f1: f1.per_class,
        accuracy: accuracy(&preds, &labels)?,
        macro_auroc: macro_auroc(&probs, &labels)?,
    })
}

// ------------------------------------------------------- prediction dumps

/// Dump file of one recording: an f64 container of shape `(L, 6)`, five
/// probabilities followed by the label index.
pub fn dump_path(dir: &Path, recording_id: &str) -> PathBuf {
    dir.join(format!("{recording_id}.preds"))
}

pub fn save_predictions(dir: &Path, m: &ProbabilityMatrix) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;
    let mut data = Vec::with_capacity(m.len() * (NUM_CLASSES + 1));
    for (row, label) in m.probs.iter().zip(&m.labels) {
        data.extend_from_slice(row);
        data.push(label.index() as f64);
    }
    TensorFile::f64(vec![m.len(), NUM_CLASSES + 1], data)?.write(&dump_path(dir, &m.recording_id))?;
    Ok(())
}

pub fn load_predictions(dir: &Path, recording_id: &str) -> Result<ProbabilityMatrix, EvalError> {
    let file = TensorFile::read(&dump_path(dir, recording_id))?;
    let bad = |m: &str| EvalError::Dump(format!("{recording_id}: {m}"));
    if file.dims.len() != 2 || file.dims[1] != NUM_CLASSES + 1 {
        return Err(bad(&format!("unexpected shape {:?}", file.dims)));
    }
    let TensorData::F64(data) = file.data else {
        return Err(bad("expected f64 data"));
    };
    let mut probs = Vec::with_capacity(file.dims[0]);
    let mut labels = Vec::with_capacity(file.dims[0]);
    for row in data.chunks_exact(NUM_CLASSES + 1) {
        probs.push(row[..NUM_CLASSES].try_into().unwrap());
        let l = row[NUM_CLASSES];
        labels.push(SleepStage::from_index(l as usize).filter(|_| l.fract() == 0.0).ok_or_else(|| bad("bad label"))?);
    }
    Ok(ProbabilityMatrix {
        recording_id: recording_id.to_string(),
        probs,
        labels,
    })
}

/// Every dump in `dir`, sorted by recording id.
pub fn load_prediction_dir(dir: &Path) -> Result<Vec<ProbabilityMatrix>, EvalError> {
    let mut ids: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension()? == "preds").then(|| p.file_stem()?.to_str().map(String::from))?
        })
        .collect();
    ids.sort();
    ids.iter().map(|id| load_predictions(dir, id)).collect()
}

pub const REPORT_HEADER: &str = "name,macro_f1,f1_w,f1_n1,f1_n2,f1_n3,f1_rem,accuracy,macro_auroc";

pub fn report_row(name: &str, r: &MetricReport) -> String {
    let f = &r.per_class_f1;
    format!(
        "{name},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
        r.macro_f1, f[0], f[1], f[2], f[3], f[4], r.accuracy, r.macro_auroc
    )
}

pub fn write_report_csv(path: &Path, rows: &[(String, MetricReport)]) -> Result<(), EvalError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{REPORT_HEADER}")?;
    for (name, r) in rows {
        writeln!(f, "{}", report_row(name, r))?;
    }
    Ok(())
}
