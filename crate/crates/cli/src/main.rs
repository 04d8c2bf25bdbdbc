//! `hypnos`: prepare corpora, train and evaluate sleep-staging models, and
//! run architecture grids.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hypnos::data::synthetic::{generate_corpus, SyntheticConfig};
use hypnos::data::{self, hold_out_validation, make_splits, ChannelConfig, DatasetSplit, SplitRatios};
use hypnos::eval::{self, Metric, ProbabilityMatrix, PAIRWISE_THRESHOLD};
use hypnos::experiment::{self, Corpus, ExperimentGrid, ResultsTable, RunConfig};
use hypnos::model::{build_model, Checkpoint, ModelDims, ModelSpec};
use hypnos::signal::{featurize, Modality, RecordingFeatures, StftConfig};
use hypnos::train::{self, LrMode, TrainConfig};

#[derive(Parser)]
#[command(name = "hypnos", version, about = "Sleep staging with encoder-predictor models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus of EDF + hypnogram files.
    Synth(SynthArgs),
    /// Resample a corpus to 100 Hz and split it into train/val/test.
    Prepare(PrepareArgs),
    /// Compute model inputs for one channel profile and modality.
    Featurize(FeaturizeArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Predict with a checkpoint and score the predictions.
    Evaluate(EvaluateArgs),
    /// Bootstrap comparison of two sets of prediction dumps.
    Compare(CompareArgs),
    /// Train and score every cell of an architecture grid.
    Grid(GridArgs),
    /// Print a stored grid result table and write it as CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    recordings: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 100.0)]
    sample_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PrepareArgs {
    /// Directory of `<id>.edf` + `<id>.hyp` pairs.
    #[arg(long)]
    raw: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// train,val,test fractions.
    #[arg(long, default_value = "0.7,0.1,0.2")]
    ratios: String,
    /// Take the validation set as the last N training recordings instead
    /// (the val ratio must then be 0).
    #[arg(long)]
    holdout: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FeaturizeArgs {
    /// Prepared corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "synth-3")]
    channels: String,
    #[arg(long, value_enum, default_value_t = ModalityArg::Ts)]
    modality: ModalityArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Ts,
    Spec,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Ts => Modality::Ts,
            ModalityArg::Spec => Modality::Spec,
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Model description in `key = value` form.
    #[arg(long, alias = "spec", conflicts_with = "preset")]
    model: Option<PathBuf>,
    /// `reference_ts` or `reference_spec`; channels follow the features.
    #[arg(long)]
    preset: Option<String>,
    /// Override the widths of a preset: `full` or `compact`.
    #[arg(long)]
    dims: Option<String>,
    /// Input epochs, overriding the preset or file.
    #[arg(long)]
    input_epochs: Option<usize>,
}

impl ModelArgs {
    fn spec(&self, num_channels: usize) -> Result<ModelSpec> {
        let mut spec = match (&self.model, self.preset.as_deref()) {
            (Some(path), _) => ModelSpec::from_text(&std::fs::read_to_string(path)?)?,
            (None, Some("reference_ts")) => ModelSpec::reference_ts(num_channels),
            (None, Some("reference_spec")) => ModelSpec::reference_spec(num_channels),
            (None, Some(other)) => bail!("unknown preset {other:?}"),
            (None, None) => bail!("give --model or --preset"),
        };
        if let Some(d) = &self.dims {
            spec.dims = ModelDims::preset(d)?;
        }
        if let Some(e) = self.input_epochs {
            spec.input_epochs = e;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args)]
struct TrainOverrides {
    /// Training config in TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fixed learning rate instead of the range test.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Effective batch as micro-batch × accumulation steps, e.g. `8x8`.
    #[arg(long)]
    batch: Option<String>,
}

impl TrainOverrides {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_toml(&std::fs::read_to_string(p)?)?,
            None => TrainConfig::default(),
        };
        if let Some(lr) = self.lr {
            cfg.lr = LrMode::Fixed { value: lr };
        }
        if let Some(e) = self.max_epochs {
            cfg.max_epochs = e;
        }
        if let Some(b) = &self.batch {
            let (m, a) = b.split_once('x').context("--batch expects MICROxSTEPS")?;
            cfg.micro_batch = m.trim().parse()?;
            cfg.accumulation_steps = a.trim().parse()?;
            cfg.effective_batch = cfg.micro_batch * cfg.accumulation_steps;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Featurized directory (with split manifests).
    #[arg(long)]
    features: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainOverrides,
    #[arg(long, alias = "out")]
    run_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, required_unless_present = "run")]
    checkpoint: Option<PathBuf>,
    /// Run directory; uses its `best.ckpt`.
    #[arg(long, conflicts_with = "checkpoint")]
    run: Option<PathBuf>,
    #[arg(long)]
    features: PathBuf,
    #[arg(long, alias = "split", default_value = "test")]
    part: String,
    /// Where prediction dumps and `report.csv` go.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Prediction directories of model A (one per run).
    #[arg(long, alias = "runs-a", num_args = 1.., required = true)]
    a: Vec<PathBuf>,
    /// Prediction directories of model B.
    #[arg(long, alias = "runs-b", num_args = 1.., required = true)]
    b: Vec<PathBuf>,
    #[arg(long, default_value = "macro_f1")]
    metric: String,
    #[arg(long, alias = "n", default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GridArgs {
    /// single-epoch, multi-epoch, sub-epoch or final.
    stage: String,
    /// Prepared corpus directory.
    #[arg(long, required_unless_present = "dump")]
    corpus: Option<PathBuf>,
    #[arg(long, required_unless_present = "dump")]
    out: Option<PathBuf>,
    /// Grid definition in TOML, replacing the shipped one.
    #[arg(long)]
    grid_config: Option<PathBuf>,
    /// Comma-separated channel profiles.
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    dims: Option<String>,
    #[arg(long)]
    runs: Option<usize>,
    #[command(flatten)]
    train: TrainOverrides,
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Retrain runs that already have results.
    #[arg(long)]
    no_resume: bool,
    /// Print the grid as TOML and exit.
    #[arg(long)]
    dump: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory of a grid run.
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Prepare(a) => prepare(a),
        Command::Featurize(a) => featurize_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Compare(a) => compare(a),
        Command::Grid(a) => grid(a),
        Command::Report(a) => report(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let template = SyntheticConfig {
        num_channels: a.channels,
        num_epochs: a.epochs,
        sample_rate: a.sample_rate,
        ..Default::default()
    };
    std::fs::create_dir_all(&a.out)?;
    for rec in generate_corpus(a.recordings, &template, a.seed)? {
        data::save_recording(&a.out, &rec)?;
    }
    println!("wrote {} recordings to {}", a.recordings, a.out.display());
    Ok(())
}

fn parse_ratios(s: &str) -> Result<SplitRatios> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse()).collect::<Result<_, _>>()?;
    let [train, val, test] = v[..] else {
        bail!("--ratios needs three numbers");
    };
    Ok(SplitRatios::new(train, val, test))
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let ids = data::list_corpus(&a.raw)?;
    if ids.is_empty() {
        bail!("no <id>.edf + <id>.hyp pairs in {}", a.raw.display());
    }
    std::fs::create_dir_all(&a.out)?;
    for id in &ids {
        let rec = data::load_recording(&a.raw, id)
            .and_then(|r| r.resampled(hypnos::TARGET_SAMPLE_RATE))
            .with_context(|| format!("recording {id}"))?;
        data::save_recording(&a.out, &rec)?;
    }
    let mut split = make_splits(&ids, parse_ratios(&a.ratios)?, a.seed)?;
    if let Some(n) = a.holdout {
        split = hold_out_validation(&split, n)?;
    }
    split.write_manifests(&a.out)?;
    let (tr, va, te) = split.sizes();
    println!("prepared {} recordings: {tr} train, {va} val, {te} test", ids.len());
    Ok(())
}

fn featurize_cmd(a: FeaturizeArgs) -> Result<()> {
    let split = DatasetSplit::read_manifests(&a.corpus)?;
    let ch = ChannelConfig::profile(&a.channels)?;
    std::fs::create_dir_all(&a.out)?;
    let ids: Vec<&String> = split.train_ids.iter().chain(&split.val_ids).chain(&split.test_ids).collect();
    for id in &ids {
        let rec = data::load_recording(&a.corpus, id)?;
        featurize(&rec, &ch, a.modality.into(), &StftConfig::default())?.save(&a.out)?;
    }
    split.write_manifests(&a.out)?;
    println!("featurized {} recordings into {}", ids.len(), a.out.display());
    Ok(())
}

fn load_part(dir: &Path, part: &str) -> Result<Vec<RecordingFeatures>> {
    let split = DatasetSplit::read_manifests(dir)?;
    let ids = split.part(part).with_context(|| format!("unknown split {part:?}"))?;
    Ok(RecordingFeatures::load_many(dir, ids)?)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let train_set = load_part(&a.features, "train")?;
    let val_set = load_part(&a.features, "val")?;
    let first = train_set.first().context("empty training split")?;
    let spec = a.model.spec(first.num_channels())?;
    let cfg = TrainConfig {
        seed: a.seed,
        ..a.train.config()?
    };
    let model = build_model(&spec, a.seed)?;
    println!("{}: {} parameters", spec.label(), model.num_parameters());
    let out = train::train(&model, &train_set, &val_set, &cfg, Some(&a.run_dir))?;
    println!(
        "best epoch {} with validation macro-F1 {:.4}; checkpoint {}",
        out.best.epoch_index,
        out.best.val_macro_f1,
        a.run_dir.join("best.ckpt").display()
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let ckpt = match (&a.checkpoint, &a.run) {
        (Some(c), _) => c.clone(),
        (None, Some(run)) => run.join("best.ckpt"),
        (None, None) => bail!("give --checkpoint or --run"),
    };
    let model = Checkpoint::load(&ckpt)?.to_model()?;
    let recs = load_part(&a.features, &a.part)?;
    let matrices = experiment::predict_all(&model, &recs)?;
    for m in &matrices {
        eval::save_predictions(&a.out, m)?;
    }
    let r = eval::evaluate(&matrices)?;
    eval::write_report_csv(&a.out.join("report.csv"), &[(model.spec.label(), r)])?;
    println!("{}", eval::REPORT_HEADER);
    println!("{}", eval::report_row(&model.spec.label(), &r));
    Ok(())
}

fn load_runs(dirs: &[PathBuf]) -> Result<Vec<Vec<ProbabilityMatrix>>> {
    dirs.iter()
        .map(|d| eval::load_prediction_dir(d).with_context(|| format!("predictions in {}", d.display())))
        .collect()
}

fn compare(a: CompareArgs) -> Result<()> {
    let metric: Metric = a.metric.parse()?;
    let (ra, rb) = (load_runs(&a.a)?, load_runs(&a.b)?);
    if ra.len() == 1 && rb.len() == 1 {
        let r = eval::bootstrap_diff(&ra[0], &rb[0], metric, a.iterations, a.seed)?;
        println!(
            "A - B = {:+.4}, 95% CI [{:+.4}, {:+.4}] over {} resamples: {}",
            r.point_diff,
            r.ci_low,
            r.ci_high,
            r.n_iterations,
            if r.significant { "significant" } else { "not significant" }
        );
    } else {
        let p = eval::pairwise_significance(&ra, &rb, metric, a.iterations, a.seed, PAIRWISE_THRESHOLD)?;
        for o in &p.outcomes {
            let r = &o.result;
            println!(
                "A{} vs B{}: {:+.4} [{:+.4}, {:+.4}]{}",
                o.run_a,
                o.run_b,
                r.point_diff,
                r.ci_low,
                r.ci_high,
                if r.significant { " *" } else { "" }
            );
        }
        println!(
            "A better in {:.0}% of pairs, B better in {:.0}%: {}",
            100.0 * p.fraction_a,
            100.0 * p.fraction_b,
            p.verdict
        );
    }
    Ok(())
}

fn grid(a: GridArgs) -> Result<()> {
    let mut g = match &a.grid_config {
        Some(p) => ExperimentGrid::from_toml(&std::fs::read_to_string(p)?)?,
        None => ExperimentGrid::named(&a.stage)?,
    };
    if let Some(c) = &a.channels {
        g = g.with_channels(&c.split(',').map(str::trim).collect::<Vec<_>>());
    }
    if let Some(d) = &a.dims {
        g = g.with_dims(ModelDims::preset(d)?);
    }
    if let Some(r) = a.runs {
        g.runs_per_cell = r;
    }
    if a.dump {
        print!("{}", g.to_toml());
        return Ok(());
    }
    let (Some(corpus_dir), Some(out)) = (&a.corpus, &a.out) else {
        bail!("--corpus and --out are required unless --dump is given");
    };
    let corpus = Corpus::from_dir(corpus_dir)?;
    let cfg = RunConfig {
        parallelism: a.parallel,
        bootstrap_iterations: a.bootstrap,
        seed: a.seed,
        resume: !a.no_resume,
        ..RunConfig::new(a.train.config()?, out)
    };
    let table = experiment::run_grid(&g, &corpus, &cfg)?;
    print!("{}", table.to_text());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let table = ResultsTable::load(&a.results)?;
    let csv = a.csv.unwrap_or_else(|| a.results.join("results.csv"));
    std::fs::write(&csv, table.to_csv())?;
    print!("{}", table.to_text());
    eprintln!("csv written to {}", csv.display());
    Ok(())
}
