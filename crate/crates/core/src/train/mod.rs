//! Training: non-overlapping crops, focal loss, AdamW with gradient
//! accumulation, per-epoch validation and best-checkpoint selection.

pub mod loss;
pub mod lr_finder;
pub mod optim;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use loss::{focal_loss, focal_loss_reference};
pub use lr_finder::{LrProbe, LrScan, LrTrace};
pub use optim::{AdamW, AdamWConfig, Gradients};

use crate::eval::{consecutive_predict, f1_scores, EvalError};
use crate::model::layers::Ctx;
use crate::model::{build_model_with, Checkpoint, Model, ModelError, ModelSpec};
use crate::rng;
use crate::signal::RecordingFeatures;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("loss is {loss} at epoch {epoch}, step {step}; last finite checkpoint: {last_checkpoint:?}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        loss: f64,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("loss is {loss} at the smallest learning rate {lr}")]
    DivergedImmediately { lr: f64, loss: f64 },
    #[error("recording {0} does not match the model input")]
    IncompatibleData(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LrMode {
    Finder(LrScan),
    Fixed { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub effective_batch: usize,
    pub micro_batch: usize,
    pub accumulation_steps: usize,
    pub lr: LrMode,
    pub max_epochs: usize,
    pub weight_decay: f64,
    pub focal_gamma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::small_corpus()
    }
}

impl TrainConfig {
    /// 50 epochs, the profile for corpora of about a hundred recordings.
    pub fn small_corpus() -> Self {
        TrainConfig {
            effective_batch: 64,
            micro_batch: 8,
            accumulation_steps: 8,
            lr: LrMode::Finder(LrScan::default()),
            max_epochs: 50,
            weight_decay: 0.01,
            focal_gamma: 2.0,
            seed: 0,
        }
    }

    /// 30 epochs; a large corpus already gives many steps per epoch.
    pub fn large_corpus() -> Self {
        TrainConfig {
            max_epochs: 30,
            ..Self::small_corpus()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.micro_batch == 0 || self.accumulation_steps == 0 {
            return bad("micro_batch and accumulation_steps must be positive".into());
        }
        if self.micro_batch * self.accumulation_steps != self.effective_batch {
            return bad(format!(
                "micro_batch {} × accumulation_steps {} != effective_batch {}",
                self.micro_batch, self.accumulation_steps, self.effective_batch
            ));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.focal_gamma >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("focal_gamma and weight_decay must be non-negative".into());
        }
        if let LrMode::Fixed { value } = self.lr {
            if !(value > 0.0 && value.is_finite()) {
                return bad(format!("learning rate {value} must be positive"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

// --------------------------------------------------------------- crops

/// `E` consecutive epochs of one recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Segment {
    pub recording: usize,
    pub start: usize,
}

/// Non-overlapping segments at `0, E, 2E, ...` of every recording; the
/// trailing `L mod E` epochs are dropped.
pub fn crop_dataset(recordings: &[RecordingFeatures], e: usize) -> Vec<Segment> {
    assert!(e >= 1, "input_epochs must be at least 1");
    recordings
        .iter()
        .enumerate()
        .flat_map(|(r, rec)| (0..rec.num_epochs() / e).map(move |k| Segment { recording: r, start: k * e }))
        .collect()
}

/// Model input and `(n, E)` u32 targets for a list of segments.
pub fn segment_batch(
    recordings: &[RecordingFeatures],
    segments: &[Segment],
    e: usize,
) -> candle_core::Result<(Tensor, Tensor)> {
    let mut data = Vec::new();
    let mut targets = Vec::with_capacity(segments.len() * e);
    let mut window = Vec::with_capacity(e);
    for s in segments {
        let rec = &recordings[s.recording];
        window.clear();
        window.extend(s.start..s.start + e);
        rec.gather(&window, &mut data);
        targets.extend(rec.labels[s.start..s.start + e].iter().map(|l| l.index() as u32));
    }
    let mut shape = vec![segments.len()];
    shape.extend(recordings[segments[0].recording].segment_shape(e));
    Ok((
        Tensor::from_vec(data, shape, &Device::Cpu)?,
        Tensor::from_vec(targets, (segments.len(), e), &Device::Cpu)?,
    ))
}

fn check_data(spec: &ModelSpec, recs: &[RecordingFeatures]) -> Result<(), TrainError> {
    let want = spec.input_shape(1);
    for r in recs {
        let got = r.segment_shape(spec.input_epochs);
        if r.modality != spec.modality || got[..] != want[1..] {
            return Err(TrainError::IncompatibleData(r.recording_id.clone()));
        }
    }
    Ok(())
}

// -------------------------------------------------------------- stepping

/// Focal-loss gradients over `segments`, split into micro-batches of
/// `micro` and averaged with weights proportional to micro-batch size.
/// Returns the gradients and the mean loss.
pub fn accumulate_gradients(
    model: &Model,
    recordings: &[RecordingFeatures],
    segments: &[Segment],
    micro: usize,
    gamma: f64,
    ctx: &Ctx,
) -> Result<(Gradients, f64), TrainError> {
    let params = model.params.params();
    let mut grads = Gradients::zeros(params.len());
    let total = segments.len() as f64;
    let mut loss_sum = 0.0;
    for chunk in segments.chunks(micro) {
        let (x, y) = segment_batch(recordings, chunk, model.spec.input_epochs)?;
        let logits = model.forward(&x, ctx)?;
        let loss = focal_loss(&logits, &y, gamma)?;
        let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Ok((grads, value));
        }
        let weight = chunk.len() as f64 / total;
        loss_sum += value * weight;
        grads.add(params, &(loss * weight)?.backward()?)?;
    }
    Ok((grads, loss_sum))
}

/// Macro-F1 over validation recordings with consecutive segments.
pub fn validation_macro_f1(model: &Model, val: &[RecordingFeatures]) -> Result<f64, TrainError> {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for rec in val {
        let m = consecutive_predict(model, rec)?;
        preds.extend(crate::eval::argmax_labels(&m.probs));
        labels.extend(m.label_indices());
    }
    Ok(f1_scores(&preds, &labels)?.macro_f1)
}

/// Dropout seed for a given optimizer step.
fn step_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    rng::stream(seed, ((epoch as u64) << 32) | step as u64).random()
}

// ------------------------------------------------------------ LR finder

/// Range test on a private copy of the model.
pub struct ModelProbe<'a> {
    model: Model,
    opt: AdamW,
    recordings: &'a [RecordingFeatures],
    segments: Vec<Segment>,
    next: usize,
    batch: usize,
    gamma: f64,
    seed: u64,
}

impl<'a> ModelProbe<'a> {
    pub fn new(model: &Model, recordings: &'a [RecordingFeatures], cfg: &TrainConfig) -> Result<Self, TrainError> {
        let copy = build_model_with(&model.spec, 0, model.dtype)?;
        copy.params.restore(&model.params.snapshot()?)?;
        let mut segments = crop_dataset(recordings, model.spec.input_epochs);
        segments.shuffle(&mut rng::stream(cfg.seed, u64::MAX));
        if segments.is_empty() {
            return Err(TrainError::EmptySplit("train"));
        }
        Ok(ModelProbe {
            opt: AdamW::new(copy.params.params(), cfg.adamw()),
            model: copy,
            recordings,
            segments,
            next: 0,
            batch: cfg.micro_batch,
            gamma: cfg.focal_gamma,
            seed: cfg.seed,
        })
    }
}

impl LrProbe for ModelProbe<'_> {
    fn step(&mut self, lr: f64) -> Result<f64, TrainError> {
        let n = self.segments.len();
        let batch: Vec<Segment> = (0..self.batch.min(n)).map(|k| self.segments[(self.next + k) % n]).collect();
        self.next = (self.next + batch.len()) % n;
        let ctx = Ctx::train(step_seed(self.seed ^ 0x5eed, 0, self.opt.steps_taken() as usize));
        let (grads, loss) = accumulate_gradients(&self.model, self.recordings, &batch, self.batch, self.gamma, &ctx)?;
        if loss.is_finite() {
            self.opt.step(&grads, lr)?;
        }
        Ok(loss)
    }
}

// -------------------------------------------------------------- training

/// Best epoch of a training run.
#[derive(Debug, Clone)]
pub struct CheckpointRecord {
    pub epoch_index: usize,
    pub val_macro_f1: f64,
    pub checkpoint: Checkpoint,
    /// Location on disk when the run has a directory.
    pub path: Option<PathBuf>,
    pub model_spec: ModelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: CheckpointRecord,
    pub history: Vec<EpochLog>,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_macro_f1,lr";

/// Train `model` in place. On return the model holds the weights of the
/// epoch with the highest validation macro-F1 (earliest on ties).
///
/// With `run_dir`, the directory receives `config.snapshot`, `seed.txt`,
/// `metrics.csv`, `best.ckpt` and `last.ckpt`.
pub fn train(
    model: &Model,
    train_set: &[RecordingFeatures],
    val_set: &[RecordingFeatures],
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    // Backward passes recurse once per graph node, which outgrows the
    // default stack of spawned threads on deeper models.
    std::thread::scope(|s| {
        std::thread::Builder::new()
            .name("train".into())
            .stack_size(TRAIN_STACK)
            .spawn_scoped(s, || train_inner(model, train_set, val_set, cfg, run_dir))
            .expect("spawn training thread")
            .join()
            .unwrap_or_else(|e| std::panic::resume_unwind(e))
    })
}

pub const TRAIN_STACK: usize = 256 << 20;

fn train_inner(
    model: &Model,
    train_set: &[RecordingFeatures],
    val_set: &[RecordingFeatures],
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    check_data(&model.spec, train_set)?;
    check_data(&model.spec, val_set)?;
    let e = model.spec.input_epochs;
    let mut segments = crop_dataset(train_set, e);
    if segments.is_empty() {
        return Err(TrainError::EmptySplit("train (no recording holds a full segment)"));
    }

    let mut metrics = None;
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        let snapshot = format!("{}\n# model\n{}", cfg.to_toml(), model.spec.to_text());
        std::fs::write(dir.join("config.snapshot"), snapshot)?;
        std::fs::write(dir.join("seed.txt"), format!("{}\n", cfg.seed))?;
        let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
        writeln!(f, "{METRICS_HEADER}")?;
        metrics = Some(f);
    }

    let lr = match cfg.lr {
        LrMode::Fixed { value } => value,
        LrMode::Finder(scan) => {
            let mut probe = ModelProbe::new(model, train_set, cfg)?;
            let lr = scan.run(&mut probe)?.chosen;
            log::info!("learning rate finder chose {lr:.3e}");
            lr
        }
    };

    let mut opt = AdamW::new(model.params.params(), cfg.adamw());
    let mut history = Vec::new();
    let mut best: Option<CheckpointRecord> = None;
    let mut last_path = None;
    for epoch in 0..cfg.max_epochs {
        segments.shuffle(&mut rng::stream(cfg.seed, epoch as u64));
        let mut loss_sum = 0.0;
        for (step, group) in segments.chunks(cfg.effective_batch).enumerate() {
            let ctx = Ctx::train(step_seed(cfg.seed, epoch, step));
            let (grads, loss) = accumulate_gradients(model, train_set, group, cfg.micro_batch, cfg.focal_gamma, &ctx)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step,
                    loss,
                    last_checkpoint: last_path,
                });
            }
            loss_sum += loss * group.len() as f64;
            opt.step(&grads, lr)?;
        }
        let train_loss = loss_sum / segments.len() as f64;
        let val_f1 = validation_macro_f1(model, val_set)?;
        log::info!("epoch {epoch}: train loss {train_loss:.4}, validation macro-F1 {val_f1:.4}");
        let entry = EpochLog {
            epoch,
            train_loss,
            val_macro_f1: val_f1,
            lr,
        };
        if let Some(f) = metrics.as_mut() {
            writeln!(f, "{},{},{},{}", entry.epoch, entry.train_loss, entry.val_macro_f1, entry.lr)?;
        }
        history.push(entry);

        let improved = best.as_ref().is_none_or(|b| val_f1 > b.val_macro_f1);
        let meta = serde_json::json!({ "epoch_index": epoch, "val_macro_f1": val_f1 });
        if improved || run_dir.is_some() {
            let ck = Checkpoint::from_model(model, meta)?;
            if let Some(dir) = run_dir {
                let p = dir.join("last.ckpt");
                ck.save(&p)?;
                last_path = Some(p);
            }
            if improved {
                let path = match run_dir {
                    Some(dir) => {
                        let p = dir.join("best.ckpt");
                        ck.save(&p)?;
                        Some(p)
                    }
                    None => None,
                };
                best = Some(CheckpointRecord {
                    epoch_index: epoch,
                    val_macro_f1: val_f1,
                    checkpoint: ck,
                    path,
                    model_spec: model.spec.clone(),
                });
            }
        }
    }
    let best = best.expect("max_epochs >= 1");
    best.checkpoint.restore(model)?;
    Ok(TrainOutcome { best, history, lr })
}

/// Rows of a `metrics.csv` file.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochLog>, TrainError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| -> Result<f64, TrainError> {
                f.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| TrainError::Config(format!("bad metrics line {l:?}")))
            };
            Ok(EpochLog {
                epoch: num(0)? as usize,
                train_loss: num(1)?,
                val_macro_f1: num(2)?,
                lr: num(3)?,
            })
        })
        .collect()
}
