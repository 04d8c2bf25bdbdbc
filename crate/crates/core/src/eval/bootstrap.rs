//! Empirical bootstrap over test epochs and the run-pair significance
//! protocol built on it.

use std::fmt;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::inference::ProbabilityMatrix;
use super::metrics::{argmax_labels, Confusion};
use super::EvalError;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    MacroF1,
    Accuracy,
}

impl Metric {
    fn of(self, c: &Confusion) -> f64 {
        match self {
            Metric::MacroF1 => c.macro_f1(),
            Metric::Accuracy => c.accuracy(),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s {
            "macro_f1" => Ok(Metric::MacroF1),
            "accuracy" => Ok(Metric::Accuracy),
            other => Err(EvalError::UnknownMetric(other.to_string())),
        }
    }
}

/// Argmax predictions and labels of several recordings, concatenated.
pub fn pool(matrices: &[ProbabilityMatrix]) -> (Vec<usize>, Vec<usize>) {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for m in matrices {
        preds.extend(argmax_labels(&m.probs));
        labels.extend(m.label_indices());
    }
    (preds, labels)
}

fn resample_indices(n: usize, seed: u64, iteration: u64) -> Vec<usize> {
    let mut r = rng::stream(seed, iteration);
    (0..n).map(|_| r.random_range(0..n)).collect()
}

/// Percentile `q ∈ [0, 100]` of sorted data with linear interpolation
/// between closest ranks.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub point_diff: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_iterations: usize,
    pub significant: bool,
}

fn check_same_set(a: &[ProbabilityMatrix], b: &[ProbabilityMatrix]) -> Result<(), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::MismatchedEvaluationSets(format!(
            "{} recordings against {}",
            a.len(),
            b.len()
        )));
    }
    for (x, y) in a.iter().zip(b) {
        if x.recording_id != y.recording_id || x.labels != y.labels || x.len() != y.len() {
            return Err(EvalError::MismatchedEvaluationSets(format!(
                "{} and {} differ in epochs or labels",
                x.recording_id, y.recording_id
            )));
        }
    }
    if a.iter().all(|m| m.is_empty()) {
        return Err(EvalError::EmptyInput);
    }
    Ok(())
}

/// 95% interval of `metric(A) − metric(B)` from `n` resamples of the test
/// epochs, the same indices applied to both. Iteration `i` draws from
/// stream `i` of `seed`, so the result does not depend on thread count.
pub fn bootstrap_diff(
    a: &[ProbabilityMatrix],
    b: &[ProbabilityMatrix],
    metric: Metric,
    n: usize,
    seed: u64,
) -> Result<BootstrapResult, EvalError> {
    check_same_set(a, b)?;
    if n == 0 {
        return Err(EvalError::NoIterations);
    }
    let (pa, labels) = pool(a);
    let (pb, _) = pool(b);
    let point = metric.of(&Confusion::from_pairs(&pa, &labels)) - metric.of(&Confusion::from_pairs(&pb, &labels));
    let mut diffs: Vec<f64> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let idx = resample_indices(labels.len(), seed, i);
            let (mut ca, mut cb) = (Confusion::default(), Confusion::default());
            for &k in &idx {
                ca.0[labels[k]][pa[k]] += 1;
                cb.0[labels[k]][pb[k]] += 1;
            }
            metric.of(&ca) - metric.of(&cb)
        })
        .collect();
    diffs.sort_by(f64::total_cmp);
    let (lo, hi) = (percentile(&diffs, 2.5), percentile(&diffs, 97.5));
    Ok(BootstrapResult {
        point_diff: point,
        ci_low: lo,
        ci_high: hi,
        n_iterations: n,
        significant: lo > 0.0 || hi < 0.0,
    })
}

/// 95% bootstrap interval of a single run's score.
pub fn bootstrap_ci(a: &[ProbabilityMatrix], metric: Metric, n: usize, seed: u64) -> Result<(f64, f64), EvalError> {
    if a.iter().all(|m| m.is_empty()) {
        return Err(EvalError::EmptyInput);
    }
    if n == 0 {
        return Err(EvalError::NoIterations);
    }
    let (p, labels) = pool(a);
    let mut scores: Vec<f64> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut c = Confusion::default();
            for k in resample_indices(labels.len(), seed, i) {
                c.0[labels[k]][p[k]] += 1;
            }
            metric.of(&c)
        })
        .collect();
    scores.sort_by(f64::total_cmp);
    Ok((percentile(&scores, 2.5), percentile(&scores, 97.5)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    ASuperior,
    BSuperior,
    Undecided,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::ASuperior => "A superior",
            Verdict::BSuperior => "B superior",
            Verdict::Undecided => "undecided",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub run_a: usize,
    pub run_b: usize,
    pub result: BootstrapResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseSignificance {
    pub outcomes: Vec<PairOutcome>,
    /// Pairs significant with A ahead, over all pairs.
    pub fraction_a: f64,
    /// Pairs significant with B ahead, over all pairs.
    pub fraction_b: f64,
    pub threshold: f64,
    pub verdict: Verdict,
}

impl PairwiseSignificance {
    /// Fraction of pairs significant in the verdict's direction (the larger
    /// side when undecided).
    pub fn fraction_significant(&self) -> f64 {
        match self.verdict {
            Verdict::ASuperior => self.fraction_a,
            Verdict::BSuperior => self.fraction_b,
            Verdict::Undecided => self.fraction_a.max(self.fraction_b),
        }
    }
}

pub const PAIRWISE_THRESHOLD: f64 = 0.6;

/// Bootstrap every (A run, B run) pair; A is declared superior when more
/// than `threshold` of all pairs are significant with A ahead, and
/// symmetrically for B.
pub fn pairwise_significance(
    runs_a: &[Vec<ProbabilityMatrix>],
    runs_b: &[Vec<ProbabilityMatrix>],
    metric: Metric,
    n: usize,
    seed: u64,
    threshold: f64,
) -> Result<PairwiseSignificance, EvalError> {
    if runs_a.is_empty() || runs_b.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut outcomes = Vec::new();
    for (i, a) in runs_a.iter().enumerate() {
        for (j, b) in runs_b.iter().enumerate() {
            let pair_seed = seed.wrapping_add(1_000_003 * (i * runs_b.len() + j) as u64);
            outcomes.push(PairOutcome {
                run_a: i,
                run_b: j,
                result: bootstrap_diff(a, b, metric, n, pair_seed)?,
            });
        }
    }
    let total = outcomes.len() as f64;
    let count = |f: fn(&BootstrapResult) -> bool| outcomes.iter().filter(|o| f(&o.result)).count() as f64 / total;
    let fraction_a = count(|r| r.significant && r.ci_low > 0.0);
    let fraction_b = count(|r| r.significant && r.ci_high < 0.0);
    let verdict = if fraction_a > threshold {
        Verdict::ASuperior
    } else if fraction_b > threshold {
        Verdict::BSuperior
    } else {
        Verdict::Undecided
    };
    Ok(PairwiseSignificance {
        outcomes,
        fraction_a,
        fraction_b,
        threshold,
        verdict,
    })
}

/// `median ± systematic ± statistical` over training runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Uncertainty {
    pub median: f64,
    /// Interquartile range of the run scores.
    pub systematic: f64,
    /// Median bootstrap half-width of the runs.
    pub statistical: f64,
}

impl fmt::Display for Uncertainty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = f.precision().unwrap_or(3);
        write!(f, "{:.p$}±{:.p$}±{:.p$}", self.median, self.systematic, self.statistical)
    }
}

pub const FINAL_RUNS: usize = 3;

pub fn report_uncertainty(scores: &[f64], half_widths: &[f64]) -> Result<Uncertainty, EvalError> {
    if scores.len() != FINAL_RUNS || half_widths.len() != FINAL_RUNS {
        return Err(EvalError::RunCount(scores.len()));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let mut h = half_widths.to_vec();
    h.sort_by(f64::total_cmp);
    Ok(Uncertainty {
        median: percentile(&s, 50.0),
        systematic: percentile(&s, 75.0) - percentile(&s, 25.0),
        statistical: percentile(&h, 50.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SleepStage;
    use crate::NUM_CLASSES;

    fn matrix(id: &str, labels: &[usize], preds: &[usize]) -> ProbabilityMatrix {
        ProbabilityMatrix {
            recording_id: id.into(),
            probs: preds
                .iter()
                .map(|&p| {
                    let mut r = [0.0; NUM_CLASSES];
                    r[p] = 1.0;
                    r
                })
                .collect(),
            labels: labels.iter().map(|&l| SleepStage::ALL[l]).collect(),
        }
    }

    fn labels(n: usize) -> Vec<usize> {
        (0..n).map(|i| (i * 7 + i / 3) % 5).collect()
    }

    /// Correct except at every `k`-th epoch, where the next class is named.
    fn with_errors(l: &[usize], k: usize) -> Vec<usize> {
        l.iter().enumerate().map(|(i, &c)| if i % k == 0 { (c + 1) % 5 } else { c }).collect()
    }

    #[test]
    fn percentile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&s, 0.0), 1.0);
        assert_eq!(percentile(&s, 100.0), 4.0);
        assert_eq!(percentile(&s, 50.0), 2.5);
        assert!((percentile(&s, 2.5) - 1.075).abs() < 1e-12);
    }

    #[test]
    fn identical_predictions_zero_width() {
        let l = labels(200);
        let a = vec![matrix("r", &l, &with_errors(&l, 3))];
        let r = bootstrap_diff(&a, &a, Metric::MacroF1, 300, 1).unwrap();
        assert_eq!((r.point_diff, r.ci_low, r.ci_high), (0.0, 0.0, 0.0));
        assert!(!r.significant);
    }

    #[test]
    fn dominance_is_significant_and_seeded() {
        let l = labels(500);
        let a = vec![matrix("r", &l, &l)];
        let b = vec![matrix("r", &l, &with_errors(&l, 2))];
        let r = bootstrap_diff(&a, &b, Metric::MacroF1, 1000, 5).unwrap();
        assert!(r.significant && r.ci_low > 0.0);
        assert_eq!(r, bootstrap_diff(&a, &b, Metric::MacroF1, 1000, 5).unwrap());
    }

    #[test]
    fn mismatched_sets_rejected() {
        let l = labels(10);
        let a = vec![matrix("r", &l, &l)];
        let b = vec![matrix("s", &l, &l)];
        assert!(matches!(
            bootstrap_diff(&a, &b, Metric::MacroF1, 10, 0),
            Err(EvalError::MismatchedEvaluationSets(_))
        ));
        let c = vec![matrix("r", &l[..9], &l[..9])];
        assert!(bootstrap_diff(&a, &c, Metric::Accuracy, 10, 0).is_err());
    }

    #[test]
    fn pairwise_identity_and_full() {
        let l = labels(300);
        let good = vec![matrix("r", &l, &l)];
        let bad = vec![matrix("r", &l, &with_errors(&l, 2))];
        let same = pairwise_significance(
            &vec![good.clone(); 3],
            &vec![good.clone(); 3],
            Metric::MacroF1,
            200,
            0,
            PAIRWISE_THRESHOLD,
        )
        .unwrap();
        assert_eq!(same.verdict, Verdict::Undecided);
        assert_eq!(same.fraction_significant(), 0.0);
        let all = pairwise_significance(&vec![good; 3], &vec![bad; 3], Metric::MacroF1, 200, 0, PAIRWISE_THRESHOLD)
            .unwrap();
        assert_eq!(all.verdict, Verdict::ASuperior);
        assert_eq!(all.fraction_a, 1.0);
        assert_eq!(all.outcomes.len(), 9);
    }

    #[test]
    fn uncertainty_summary() {
        let u = report_uncertainty(&[0.82, 0.80, 0.81], &[0.01, 0.03, 0.02]).unwrap();
        assert!((u.median - 0.81).abs() < 1e-12);
        assert!((u.systematic - 0.01).abs() < 1e-12);
        assert!((u.statistical - 0.02).abs() < 1e-12);
        assert_eq!(u.to_string(), "0.810±0.010±0.020");
        assert_eq!(format!("{u:.4}"), "0.8100±0.0100±0.0200");
        let same = report_uncertainty(&[0.7; 3], &[0.0; 3]).unwrap();
        assert_eq!(same.systematic, 0.0);
        assert!(report_uncertainty(&[0.1, 0.2], &[0.0, 0.0]).is_err());
    }
}
