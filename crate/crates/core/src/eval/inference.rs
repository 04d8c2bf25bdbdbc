//! Per-recording inference: stride-1 sliding windows for testing and
//! consecutive segments for validation.

use candle_core::{Device, Tensor};

use super::EvalError;
use crate::data::SleepStage;
use crate::model::Model;
use crate::signal::RecordingFeatures;
use crate::NUM_CLASSES;

/// Per-epoch class probabilities of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    pub recording_id: String,
    pub probs: Vec<[f64; NUM_CLASSES]>,
    pub labels: Vec<SleepStage>,
}

impl ProbabilityMatrix {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index()).collect()
    }

    /// Largest deviation of a row sum from 1.
    pub fn max_row_error(&self) -> f64 {
        self.probs
            .iter()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Anything that maps windows of consecutive epochs to per-epoch
/// probabilities.
pub trait SegmentPredictor {
    fn input_epochs(&self) -> usize;

    /// One `(E, 5)` probability block per window; each window lists `E`
    /// epoch indices of `rec`.
    fn predict_windows(
        &self,
        rec: &RecordingFeatures,
        windows: &[Vec<usize>],
    ) -> Result<Vec<Vec<[f64; NUM_CLASSES]>>, EvalError>;
}

/// Windows are pushed through the model in groups of this many.
pub const INFERENCE_BATCH: usize = 8;

impl SegmentPredictor for Model {
    fn input_epochs(&self) -> usize {
        self.spec.input_epochs
    }

    fn predict_windows(
        &self,
        rec: &RecordingFeatures,
        windows: &[Vec<usize>],
    ) -> Result<Vec<Vec<[f64; NUM_CLASSES]>>, EvalError> {
        let e = self.spec.input_epochs;
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(INFERENCE_BATCH) {
            let x = batch_tensor(rec, chunk)?;
            let p = self
                .predict_proba(&x)?
                .to_dtype(candle_core::DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?;
            for w in p.chunks_exact(e * NUM_CLASSES) {
                out.push(
                    w.chunks_exact(NUM_CLASSES)
                        .map(|r| r.try_into().expect("row of NUM_CLASSES"))
                        .collect(),
                );
            }
        }
        Ok(out)
    }
}

/// Stack windows of `rec` into one model input `(n, ...)`.
pub fn batch_tensor(rec: &RecordingFeatures, windows: &[Vec<usize>]) -> candle_core::Result<Tensor> {
    let mut data = Vec::new();
    for w in windows {
        rec.gather(w, &mut data);
    }
    let k = windows.first().map_or(1, |w| w.len());
    let mut shape = vec![windows.len()];
    shape.extend(rec.segment_shape(k));
    Tensor::from_vec(data, shape, &Device::Cpu)
}

/// Number of stride-1 windows of length `e` covering each epoch of a
/// recording with `len >= e` epochs.
pub fn coverage_counts(len: usize, e: usize) -> Vec<usize> {
    let mut counts = vec![0; len];
    for start in 0..=len.saturating_sub(e) {
        for c in &mut counts[start..(start + e).min(len)] {
            *c += 1;
        }
    }
    counts
}

/// Epoch indices of the window starting at `start`, repeating the last
/// epoch when the recording is shorter than `e`.
fn window(len: usize, start: usize, e: usize) -> Vec<usize> {
    (start..start + e).map(|i| i.min(len - 1)).collect()
}

/// Averaged probabilities and per-epoch cover counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidingOutput {
    pub matrix: ProbabilityMatrix,
    pub counts: Vec<usize>,
}

/// Stride-1 inference: every window of `E` consecutive epochs is scored and
/// each epoch's probabilities are averaged over the windows covering it,
/// then renormalized. Recordings shorter than `E` are padded by repeating
/// their final epoch; padded positions are dropped.
pub fn sliding_window_predict<P: SegmentPredictor + ?Sized>(
    predictor: &P,
    rec: &RecordingFeatures,
) -> Result<SlidingOutput, EvalError> {
    let len = rec.num_epochs();
    let e = predictor.input_epochs();
    if len == 0 {
        return Err(EvalError::EmptyInput);
    }
    let starts = 0..=len.saturating_sub(e);
    let windows: Vec<Vec<usize>> = starts.clone().map(|s| window(len, s, e)).collect();
    let blocks = predictor.predict_windows(rec, &windows)?;
    let mut sums = vec![[0.0; NUM_CLASSES]; len];
    let mut counts = vec![0usize; len];
    for (start, block) in starts.zip(&blocks) {
        for (j, row) in block.iter().enumerate() {
            let i = start + j;
            if i >= len {
                break;
            }
            counts[i] += 1;
            for c in 0..NUM_CLASSES {
                sums[i][c] += row[c];
            }
        }
    }
    let probs = sums
        .into_iter()
        .map(|mut r| {
            let total: f64 = r.iter().sum();
            r.iter_mut().for_each(|v| *v /= total);
            r
        })
        .collect();
    Ok(SlidingOutput {
        matrix: ProbabilityMatrix {
            recording_id: rec.recording_id.clone(),
            probs,
            labels: rec.labels.clone(),
        },
        counts,
    })
}

/// Non-overlapping windows at `0, E, 2E, ...`; the trailing remainder is
/// not scored. Recordings shorter than `E` get one padded window.
pub fn consecutive_predict<P: SegmentPredictor + ?Sized>(
    predictor: &P,
    rec: &RecordingFeatures,
) -> Result<ProbabilityMatrix, EvalError> {
    let len = rec.num_epochs();
    let e = predictor.input_epochs();
    if len == 0 {
        return Err(EvalError::EmptyInput);
    }
    let windows: Vec<Vec<usize>> = if len < e {
        vec![window(len, 0, e)]
    } else {
        (0..len / e).map(|s| window(len, s * e, e)).collect()
    };
    let blocks = predictor.predict_windows(rec, &windows)?;
    let covered = (windows.len() * e).min(len);
    Ok(ProbabilityMatrix {
        recording_id: rec.recording_id.clone(),
        probs: blocks.into_iter().flatten().take(covered).collect(),
        labels: rec.labels[..covered].to_vec(),
    })
}
