//! Architecture grids: enumerate cells, train and score every cell, and
//! assemble the result table.
//!
//! A grid run writes one directory per cell and run:
//!
//! ```text
//! <out>/cells/<channels>_<spec label>/run<k>/
//!     config.snapshot  metrics.csv  best.ckpt  last.ckpt  seed.txt
//!     preds/<recording>.preds      result.json
//! <out>/results.{json,csv,txt}
//! ```
//!
//! A run whose `result.json` exists is loaded instead of retrained, so an
//! interrupted or partly failed grid resumes where it stopped.

pub mod grid;
pub mod table;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use thiserror::Error;

pub use grid::{
    grid_final, grid_multi_epoch, grid_single_epoch, grid_sub_epoch, Enumeration, EvalSplit, Exclusion,
    ExperimentGrid, GridBlock, GridCell, SkippedCell,
};
pub use table::{median_report, Comparison, ResultRow, ResultsTable, RowKey, RunResult};

use crate::data::{self, ChannelConfig, DataError, DatasetSplit, RawRecording};
use crate::eval::{self, EvalError, Metric, ProbabilityMatrix, PAIRWISE_THRESHOLD};
use crate::model::{build_model, ModelError};
use crate::signal::{featurize, Modality, RecordingFeatures, SignalError, StftConfig};
use crate::train::{self, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("cell {cell} failed: {message}")]
    CellFailed { cell: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------- corpus

enum Source {
    Memory(Vec<RawRecording>),
    Dir(PathBuf),
}

/// Features of the three splits for one channel profile and modality.
#[derive(Debug, Default)]
pub struct SplitFeatures {
    pub train: Vec<RecordingFeatures>,
    pub val: Vec<RecordingFeatures>,
    pub test: Vec<RecordingFeatures>,
}

impl SplitFeatures {
    pub fn part(&self, split: EvalSplit) -> &[RecordingFeatures] {
        match split {
            EvalSplit::Val => &self.val,
            EvalSplit::Test => &self.test,
        }
    }
}

type FeatureKey = (String, Modality);

/// Recordings plus their split; features are computed on first use and
/// cached per (channel profile, modality).
pub struct Corpus {
    source: Source,
    pub split: DatasetSplit,
    pub stft: StftConfig,
    cache: Mutex<HashMap<FeatureKey, Arc<SplitFeatures>>>,
}

impl Corpus {
    pub fn in_memory(recordings: Vec<RawRecording>, split: DatasetSplit) -> Self {
        Self::new(Source::Memory(recordings), split)
    }

    /// A directory of `<id>.edf` + `<id>.hyp` with `train.txt`, `val.txt`
    /// and `test.txt` manifests.
    pub fn from_dir(dir: &Path) -> Result<Self, ExperimentError> {
        let split = DatasetSplit::read_manifests(dir)?;
        if split.train_ids.is_empty() {
            return Err(ExperimentError::InvalidGrid(format!(
                "{} has no train.txt manifest; run prepare first",
                dir.display()
            )));
        }
        Ok(Self::new(Source::Dir(dir.to_path_buf()), split))
    }

    fn new(source: Source, split: DatasetSplit) -> Self {
        Corpus {
            source,
            split,
            stft: StftConfig::default(),
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn featurize_ids(&self, ids: &[String], ch: &ChannelConfig, m: Modality) -> Result<Vec<RecordingFeatures>, ExperimentError> {
        ids.iter()
            .map(|id| {
                let f = match &self.source {
                    Source::Memory(recs) => {
                        let rec = recs
                            .iter()
                            .find(|r| &r.recording_id == id)
                            .ok_or_else(|| ExperimentError::InvalidGrid(format!("recording {id} not in corpus")))?;
                        featurize(rec, ch, m, &self.stft)?
                    }
                    Source::Dir(dir) => featurize(&data::load_recording(dir, id)?, ch, m, &self.stft)?,
                };
                Ok(f)
            })
            .collect()
    }

    pub fn features(&self, channels: &str, modality: Modality) -> Result<Arc<SplitFeatures>, ExperimentError> {
        let key = (channels.to_string(), modality);
        let mut cache = self.cache.lock().expect("feature cache poisoned");
        if let Some(f) = cache.get(&key) {
            return Ok(f.clone());
        }
        let ch = ChannelConfig::profile(channels)?;
        let f = Arc::new(SplitFeatures {
            train: self.featurize_ids(&self.split.train_ids, &ch, modality)?,
            val: self.featurize_ids(&self.split.val_ids, &ch, modality)?,
            test: self.featurize_ids(&self.split.test_ids, &ch, modality)?,
        });
        cache.insert(key, f.clone());
        Ok(f)
    }
}

// ---------------------------------------------------------------- runner

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    /// Cells trained at the same time.
    pub parallelism: usize,
    pub bootstrap_iterations: usize,
    pub seed: u64,
    /// Reuse runs that already have a `result.json`.
    pub resume: bool,
}

impl RunConfig {
    pub fn new(train: TrainConfig, out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            train,
            out_dir: out_dir.into(),
            parallelism: 1,
            bootstrap_iterations: 1000,
            seed: 0,
            resume: true,
        }
    }
}

pub const RESULT_FILE: &str = "result.json";

/// Model seed of run `k`.
pub fn run_seed(base: u64, k: usize) -> u64 {
    base.wrapping_add(k as u64)
}

/// Sliding-window predictions of `model` over `recs`.
pub fn predict_all(
    model: &crate::model::Model,
    recs: &[RecordingFeatures],
) -> Result<Vec<ProbabilityMatrix>, EvalError> {
    recs.iter()
        .map(|r| Ok(eval::sliding_window_predict(model, r)?.matrix))
        .collect()
}

fn run_once(
    cell: &GridCell,
    k: usize,
    feats: &SplitFeatures,
    split: EvalSplit,
    cfg: &RunConfig,
) -> Result<RunResult, ExperimentError> {
    let run_dir = cfg.out_dir.join("cells").join(cell.key()).join(format!("run{k}"));
    let result_path = run_dir.join(RESULT_FILE);
    if cfg.resume && result_path.exists() {
        log::info!("{}: reusing run {k}", cell.key());
        return Ok(serde_json::from_str(&std::fs::read_to_string(result_path)?)?);
    }
    let seed = run_seed(cfg.seed, k);
    log::info!("{}: training run {k} (seed {seed})", cell.key());
    let model = build_model(&cell.spec, seed)?;
    let tcfg = TrainConfig { seed, ..cfg.train.clone() };
    let outcome = train::train(&model, &feats.train, &feats.val, &tcfg, Some(&run_dir))?;

    let matrices = predict_all(&model, feats.part(split))?;
    let preds = run_dir.join("preds");
    if preds.exists() {
        std::fs::remove_dir_all(&preds)?;
    }
    for m in &matrices {
        eval::save_predictions(&preds, m)?;
    }
    let report = eval::evaluate(&matrices)?;
    let (lo, hi) = eval::bootstrap_ci(&matrices, Metric::MacroF1, cfg.bootstrap_iterations, seed)?;
    let result = RunResult {
        run: k,
        seed,
        run_dir: run_dir.clone(),
        predictions: preds,
        best_epoch: outcome.best.epoch_index,
        val_macro_f1: outcome.best.val_macro_f1,
        report,
        ci_half_width: (hi - lo) / 2.0,
    };
    std::fs::write(result_path, serde_json::to_string_pretty(&result)?)?;
    Ok(result)
}

fn run_cell(
    cell: &GridCell,
    grid: &ExperimentGrid,
    corpus: &Corpus,
    cfg: &RunConfig,
) -> Result<Vec<RunResult>, ExperimentError> {
    let feats = corpus.features(&cell.channels, cell.spec.modality)?;
    (0..grid.runs_per_cell)
        .map(|k| run_once(cell, k, &feats, grid.split, cfg))
        .collect()
}

fn row_for(cell: &GridCell, outcome: Result<Vec<RunResult>, ExperimentError>) -> ResultRow {
    let key = RowKey {
        channels: cell.channels.clone(),
        modality: cell.spec.modality,
        encoder: cell.spec.encoder,
        predictor: cell.spec.predictor,
        fraction: cell.spec.sub_epoch_fraction,
    };
    let (runs, error) = match outcome {
        Ok(runs) => (runs, None),
        Err(e) => {
            let failed = ExperimentError::CellFailed {
                cell: cell.key(),
                message: e.to_string(),
            };
            log::warn!("{failed}");
            (Vec::new(), Some(failed.to_string()))
        }
    };
    let reports: Vec<_> = runs.iter().map(|r| r.report).collect();
    let uncertainty = if runs.len() == eval::bootstrap::FINAL_RUNS {
        let scores: Vec<f64> = runs.iter().map(|r| r.report.macro_f1).collect();
        let widths: Vec<f64> = runs.iter().map(|r| r.ci_half_width).collect();
        eval::report_uncertainty(&scores, &widths).ok()
    } else {
        None
    };
    ResultRow {
        key,
        cell: cell.key(),
        summary: median_report(&reports),
        runs,
        uncertainty,
        best_in_block: false,
        comparisons: Vec::new(),
        error,
    }
}

fn load_runs(row: &ResultRow) -> Result<Vec<Vec<ProbabilityMatrix>>, ExperimentError> {
    row.runs
        .iter()
        .map(|r| Ok(eval::load_prediction_dir(&r.predictions)?))
        .collect()
}

/// Best row of each block against every other scored row of the block.
fn compare_in_blocks(table: &mut ResultsTable, cfg: &RunConfig) -> Result<(), ExperimentError> {
    let best: Vec<usize> = (0..table.rows.len()).filter(|&i| table.rows[i].best_in_block).collect();
    for b in best {
        let runs_best = load_runs(&table.rows[b])?;
        let block = table.rows[b].key.block();
        let mut comparisons = Vec::new();
        for (i, other) in table.rows.iter().enumerate() {
            if i == b || other.key.block() != block || other.runs.is_empty() {
                continue;
            }
            let p = eval::pairwise_significance(
                &runs_best,
                &load_runs(other)?,
                Metric::MacroF1,
                cfg.bootstrap_iterations,
                cfg.seed,
                PAIRWISE_THRESHOLD,
            )?;
            comparisons.push(Comparison {
                against: other.key.name(),
                verdict: p.verdict,
                fraction_significant: p.fraction_significant(),
            });
        }
        table.rows[b].comparisons = comparisons;
    }
    Ok(())
}

/// Train and score every cell of `grid`. A failing cell becomes a row with
/// an error and the grid carries on.
pub fn run_grid(grid: &ExperimentGrid, corpus: &Corpus, cfg: &RunConfig) -> Result<ResultsTable, ExperimentError> {
    cfg.train.validate()?;
    let Enumeration { cells, skipped } = grid.enumerate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism.max(1))
        .stack_size(crate::train::TRAIN_STACK)
        .build()
        .map_err(|e| ExperimentError::InvalidGrid(e.to_string()))?;
    let outcomes: Vec<_> = pool.install(|| {
        cells
            .par_iter()
            .map(|c| run_cell(c, grid, corpus, cfg))
            .collect()
    });
    let mut table = ResultsTable {
        grid: grid.name.clone(),
        split: grid.split.name().into(),
        rows: cells.iter().zip(outcomes).map(|(c, o)| row_for(c, o)).collect(),
        skipped,
    };
    table.mark_best();
    compare_in_blocks(&mut table, cfg)?;
    table.save(&cfg.out_dir)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_corpus, SyntheticConfig};
    use crate::data::{make_splits, SplitRatios};
    use crate::model::{EncoderKind, ModelDims, PredictorKind};
    use crate::train::LrMode;

    fn toy_corpus() -> Corpus {
        let template = SyntheticConfig {
            num_epochs: 12,
            num_channels: 1,
            ..Default::default()
        };
        let recs = generate_corpus(5, &template, 3).unwrap();
        let ids: Vec<String> = recs.iter().map(|r| r.recording_id.clone()).collect();
        let split = make_splits(&ids, SplitRatios::new(0.6, 0.2, 0.2), 1).unwrap();
        Corpus::in_memory(recs, split)
    }

    fn toy_grid() -> ExperimentGrid {
        ExperimentGrid {
            name: "toy".into(),
            channels: vec!["synth-1".into()],
            input_epochs: 2,
            runs_per_cell: 1,
            split: EvalSplit::Test,
            dims: ModelDims::uniform(8, 1, 2),
            blocks: vec![GridBlock {
                modality: Modality::Spec,
                encoders: vec![EncoderKind::Cnn, EncoderKind::Scnn],
                predictors: vec![PredictorKind::Lstm, PredictorKind::S4],
                fractions: vec![1],
                exclude: vec![Exclusion {
                    encoder: EncoderKind::Cnn,
                    predictor: PredictorKind::S4,
                    reason: "kept small".into(),
                }],
            }],
        }
    }

    fn toy_cfg(dir: &Path) -> RunConfig {
        let train = TrainConfig {
            effective_batch: 4,
            micro_batch: 2,
            accumulation_steps: 2,
            lr: LrMode::Fixed { value: 1e-3 },
            max_epochs: 2,
            ..TrainConfig::default()
        };
        RunConfig {
            bootstrap_iterations: 50,
            ..RunConfig::new(train, dir)
        }
    }

    #[test]
    fn toy_grid_end_to_end() {
        let corpus = toy_corpus();
        let grid = toy_grid();
        let a = tempfile::tempdir().unwrap();
        let t1 = run_grid(&grid, &corpus, &toy_cfg(a.path())).unwrap();
        // CNN+S4 excluded, SCNN is not defined on spectrograms
        assert_eq!(t1.rows.len(), 1);
        assert_eq!(t1.skipped.len(), 3);
        assert!(t1.rows[0].error.is_none(), "{:?}", t1.rows[0].error);
        assert!(t1.rows[0].best_in_block);
        assert!(t1.max_provenance_error().unwrap() < 1e-6);
        assert_eq!(ResultsTable::load(a.path()).unwrap(), t1);
        for f in ["results.csv", "results.txt"] {
            assert!(a.path().join(f).exists());
        }

        // identical seeds into a fresh directory give the same numbers
        let b = tempfile::tempdir().unwrap();
        let t2 = run_grid(&grid, &corpus, &toy_cfg(b.path())).unwrap();
        assert_eq!(t1.rows[0].summary, t2.rows[0].summary);
        assert_eq!(t1.to_text(), t2.to_text());

        // resume reuses the stored run
        let t3 = run_grid(&grid, &corpus, &toy_cfg(a.path())).unwrap();
        assert_eq!(t3, t1);
    }

    #[test]
    fn failed_cell_is_recorded() {
        let corpus = toy_corpus();
        let mut grid = toy_grid();
        // segments longer than any recording leave nothing to train on
        grid.blocks[0].exclude.clear();
        grid.blocks[0].encoders = vec![EncoderKind::Cnn];
        grid.blocks[0].predictors = vec![PredictorKind::Lstm];
        grid.input_epochs = 50;
        let dir = tempfile::tempdir().unwrap();
        let t = run_grid(&grid, &corpus, &toy_cfg(dir.path())).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert!(t.rows[0].error.as_deref().unwrap().contains("failed"));
        assert!(t.rows[0].summary.is_none());
    }
}
