//! Result tables: one row per grid cell, CSV and plain-text output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eval::{self, MetricReport, Uncertainty, Verdict};
use crate::model::{EncoderKind, PredictorKind};
use crate::signal::Modality;

use super::ExperimentError;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub channels: String,
    pub modality: Modality,
    pub encoder: EncoderKind,
    pub predictor: PredictorKind,
    pub fraction: usize,
}

impl RowKey {
    /// Rows sharing channels and modality are compared with each other.
    pub fn block(&self) -> (String, Modality) {
        (self.channels.clone(), self.modality)
    }

    pub fn name(&self) -> String {
        let frac = if self.fraction == 1 {
            String::new()
        } else {
            format!("1/{} ", self.fraction)
        };
        format!("{frac}{}+{}", self.encoder, self.predictor)
    }
}

/// One trained and evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub predictions: PathBuf,
    pub best_epoch: usize,
    pub val_macro_f1: f64,
    pub report: MetricReport,
    /// Half-width of the 95% bootstrap interval of the macro-F1.
    pub ci_half_width: f64,
}

/// Best row of a block against another row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub against: String,
    pub verdict: Verdict,
    pub fraction_significant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub key: RowKey,
    pub cell: String,
    pub runs: Vec<RunResult>,
    /// Column-wise median over runs.
    pub summary: Option<MetricReport>,
    pub uncertainty: Option<Uncertainty>,
    pub best_in_block: bool,
    /// Filled on the best row of each block.
    pub comparisons: Vec<Comparison>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub grid: String,
    pub split: String,
    pub rows: Vec<ResultRow>,
    pub skipped: Vec<super::SkippedCell>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    eval::bootstrap::percentile(&v, 50.0)
}

/// Column-wise median of several reports.
pub fn median_report(reports: &[MetricReport]) -> Option<MetricReport> {
    if reports.is_empty() {
        return None;
    }
    let col = |f: &dyn Fn(&MetricReport) -> f64| median(reports.iter().map(f).collect());
    let mut per_class = [0.0; crate::NUM_CLASSES];
    for (k, v) in per_class.iter_mut().enumerate() {
        *v = col(&|r| r.per_class_f1[k]);
    }
    Some(MetricReport {
        macro_f1: col(&|r| r.macro_f1),
        per_class_f1: per_class,
        accuracy: col(&|r| r.accuracy),
        macro_auroc: col(&|r| r.macro_auroc),
    })
}

pub const TABLE_HEADER: &str =
    "channels,modality,encoder,predictor,fraction,runs,macro_f1,f1_w,f1_n1,f1_n2,f1_n3,f1_rem,accuracy,macro_auroc,systematic,statistical,best,run_dirs,error";

impl ResultsTable {
    /// Mark the highest median macro-F1 of every block; the earliest row
    /// wins a tie.
    pub fn mark_best(&mut self) {
        for r in &mut self.rows {
            r.best_in_block = false;
        }
        let mut blocks: Vec<(String, Modality)> = self.rows.iter().map(|r| r.key.block()).collect();
        blocks.dedup();
        for b in blocks {
            let best = self
                .rows
                .iter()
                .enumerate()
                .filter(|(_, r)| r.key.block() == b)
                .filter_map(|(i, r)| r.summary.map(|s| (i, s.macro_f1)))
                .fold(None, |acc: Option<(usize, f64)>, (i, f)| match acc {
                    Some((_, g)) if g >= f => acc,
                    _ => Some((i, f)),
                });
            if let Some((i, _)) = best {
                self.rows[i].best_in_block = true;
            }
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{TABLE_HEADER}\n");
        for r in &self.rows {
            let k = &r.key;
            let _ = write!(s, "{},{},{},{},{},{}", k.channels, k.modality, k.encoder, k.predictor, k.fraction, r.runs.len());
            match &r.summary {
                Some(m) => {
                    let f = &m.per_class_f1;
                    let _ = write!(
                        s,
                        ",{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                        m.macro_f1, f[0], f[1], f[2], f[3], f[4], m.accuracy, m.macro_auroc
                    );
                }
                None => s.push_str(",,,,,,,,"),
            }
            match &r.uncertainty {
                Some(u) => {
                    let _ = write!(s, ",{:.6},{:.6}", u.systematic, u.statistical);
                }
                None => s.push_str(",,"),
            }
            let dirs: Vec<String> = r.runs.iter().map(|x| x.run_dir.display().to_string()).collect();
            let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            let _ = writeln!(s, ",{},{},{}", r.best_in_block as u8, dirs.join(";"), err);
        }
        s
    }

    /// Aligned text table grouped by block; `*` marks the block maximum.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} ({} split)\n", self.grid, self.split);
        let mut current = None;
        for r in &self.rows {
            let block = r.key.block();
            if current.as_ref() != Some(&block) {
                let _ = writeln!(s, "\n[{} / {}]", block.0, block.1);
                let _ = writeln!(
                    s,
                    "{:<22} {:>7} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
                    "model", "macroF1", "W", "N1", "N2", "N3", "REM", "acc", "AUROC"
                );
                current = Some(block);
            }
            let mark = if r.best_in_block { "*" } else { " " };
            let name = format!("{mark}{}", r.key.name());
            match (&r.summary, &r.error) {
                (Some(m), _) => {
                    let f = &m.per_class_f1;
                    let _ = write!(
                        s,
                        "{name:<22} {:>7.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3}",
                        m.macro_f1, f[0], f[1], f[2], f[3], f[4], m.accuracy, m.macro_auroc
                    );
                    if let Some(u) = &r.uncertainty {
                        let _ = write!(s, "  macro-F1 {u}");
                    }
                    s.push('\n');
                }
                (None, err) => {
                    let _ = writeln!(s, "{name:<22} failed: {}", err.as_deref().unwrap_or("no runs"));
                }
            }
            for c in &r.comparisons {
                let _ = writeln!(
                    s,
                    "{:<22}   vs {}: {} ({:.0}% of pairs significant)",
                    "",
                    c.against,
                    c.verdict,
                    100.0 * c.fraction_significant
                );
            }
        }
        if !self.skipped.is_empty() {
            let _ = writeln!(s, "\nskipped:");
            for k in &self.skipped {
                let _ = writeln!(
                    s,
                    "  {} {} {}+{} n={}: {}",
                    k.channels, k.modality, k.encoder, k.predictor, k.fraction, k.reason
                );
            }
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<(), ExperimentError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RESULTS_JSON), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join("results.csv"), self.to_csv())?;
        std::fs::write(dir.join("results.txt"), self.to_text())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(dir.join(RESULTS_JSON))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Recompute every run's metrics from its prediction dumps and return
    /// the largest deviation from the stored values.
    pub fn max_provenance_error(&self) -> Result<f64, ExperimentError> {
        let mut worst = 0.0f64;
        for run in self.rows.iter().flat_map(|r| &r.runs) {
            let m = eval::evaluate(&eval::load_prediction_dir(&run.predictions)?)?;
            let stored = &run.report;
            worst = worst
                .max((m.macro_f1 - stored.macro_f1).abs())
                .max((m.accuracy - stored.accuracy).abs())
                .max((m.macro_auroc - stored.macro_auroc).abs());
            for k in 0..crate::NUM_CLASSES {
                worst = worst.max((m.per_class_f1[k] - stored.per_class_f1[k]).abs());
            }
        }
        Ok(worst)
    }
}

pub const RESULTS_JSON: &str = "results.json";
