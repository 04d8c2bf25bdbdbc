//! Per-epoch classification metrics over pooled test epochs.

use super::EvalError;
use crate::NUM_CLASSES;

/// Confusion counts, `m[label][pred]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion(pub [[u64; NUM_CLASSES]; NUM_CLASSES]);

impl Confusion {
    pub fn from_pairs(preds: &[usize], labels: &[usize]) -> Self {
        let mut m = [[0; NUM_CLASSES]; NUM_CLASSES];
        for (&p, &l) in preds.iter().zip(labels) {
            m[l][p] += 1;
        }
        Confusion(m)
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    /// One-vs-rest F1 per class; 0 when the class never occurs in either.
    pub fn per_class_f1(&self) -> [f64; NUM_CLASSES] {
        let mut out = [0.0; NUM_CLASSES];
        for (c, f) in out.iter_mut().enumerate() {
            let tp = self.0[c][c];
            let fn_: u64 = self.0[c].iter().sum::<u64>() - tp;
            let fp: u64 = (0..NUM_CLASSES).map(|l| self.0[l][c]).sum::<u64>() - tp;
            let denom = 2 * tp + fp + fn_;
            *f = if denom == 0 { 0.0 } else { (2 * tp) as f64 / denom as f64 };
        }
        out
    }

    pub fn macro_f1(&self) -> f64 {
        self.per_class_f1().iter().sum::<f64>() / NUM_CLASSES as f64
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..NUM_CLASSES).map(|c| self.0[c][c]).sum();
        correct as f64 / self.total() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Scores {
    pub per_class: [f64; NUM_CLASSES],
    pub macro_f1: f64,
}

fn check_pairs(preds: &[usize], labels: &[usize]) -> Result<(), EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch(preds.len(), labels.len()));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= NUM_CLASSES) {
        return Err(EvalError::ClassOutOfRange(bad));
    }
    Ok(())
}

pub fn f1_scores(preds: &[usize], labels: &[usize]) -> Result<F1Scores, EvalError> {
    check_pairs(preds, labels)?;
    let per_class = Confusion::from_pairs(preds, labels).per_class_f1();
    Ok(F1Scores {
        per_class,
        macro_f1: per_class.iter().sum::<f64>() / NUM_CLASSES as f64,
    })
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64, EvalError> {
    check_pairs(preds, labels)?;
    Ok(Confusion::from_pairs(preds, labels).accuracy())
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_labels(probs: &[[f64; NUM_CLASSES]]) -> Vec<usize> {
    probs
        .iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Ranks starting at 1 with ties given their average rank.
pub fn mid_ranks(scores: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve of `scores` for binary `positive` flags via
/// the rank-sum statistic. `None` without both classes.
pub fn binary_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = mid_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// One-vs-rest AUROC per class, `None` for classes without positives or
/// without negatives.
pub fn per_class_auroc(probs: &[[f64; NUM_CLASSES]], labels: &[usize]) -> [Option<f64>; NUM_CLASSES] {
    let mut out = [None; NUM_CLASSES];
    for (c, slot) in out.iter_mut().enumerate() {
        let scores: Vec<f64> = probs.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        *slot = binary_auroc(&scores, &pos);
    }
    out
}

/// Mean one-vs-rest AUROC over the classes that can be scored. Classes
/// absent from the labels are skipped with a warning.
pub fn macro_auroc(probs: &[[f64; NUM_CLASSES]], labels: &[usize]) -> Result<f64, EvalError> {
    if probs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if probs.len() != labels.len() {
        return Err(EvalError::LengthMismatch(probs.len(), labels.len()));
    }
    let per = per_class_auroc(probs, labels);
    let scored: Vec<f64> = per.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(EvalError::NoDiscriminableClass);
    }
    for (c, v) in per.iter().enumerate() {
        if v.is_none() {
            log::warn!("class {c} has no positive or no negative epochs; left out of macro AUROC");
        }
    }
    Ok(scored.iter().sum::<f64>() / scored.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Straight counting, one class at a time.
    fn f1_oracle(preds: &[usize], labels: &[usize]) -> [f64; NUM_CLASSES] {
        let mut out = [0.0; NUM_CLASSES];
        for (c, f) in out.iter_mut().enumerate() {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (&p, &l) in preds.iter().zip(labels) {
                match (p == c, l == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            *f = if tp + fp + fn_ == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        }
        out
    }

    fn pair_oracle(scores: &[f64], pos: &[bool]) -> f64 {
        let (mut good, mut total) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if pos[i] && !pos[j] {
                    total += 1.0;
                    if scores[i] > scores[j] {
                        good += 1.0;
                    } else if scores[i] == scores[j] {
                        good += 0.5;
                    }
                }
            }
        }
        good / total
    }

    #[test]
    fn hand_counted_confusion() {
        // 20 epochs with a known confusion pattern
        let labels = [0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 2, 2, 2, 3, 3, 3, 4, 4, 4, 4];
        let preds = [0, 0, 0, 1, 1, 4, 4, 2, 2, 2, 2, 2, 1, 3, 3, 2, 4, 4, 4, 1];
        // W: tp3 fp0 fn1; N1: tp1 fp3 fn2; N2: tp5 fp1 fn1; N3: tp2 fp0 fn1; REM: tp3 fp2 fn1
        let want = [6.0 / 7.0, 2.0 / 7.0, 10.0 / 12.0, 4.0 / 5.0, 6.0 / 9.0];
        let got = f1_scores(&preds, &labels).unwrap();
        for c in 0..5 {
            assert!((got.per_class[c] - want[c]).abs() < 1e-15);
        }
        assert!((accuracy(&preds, &labels).unwrap() - 14.0 / 20.0).abs() < 1e-15);
    }

    #[test]
    fn trivial_cases() {
        let l = [0, 1, 2, 3, 4, 2];
        let f = f1_scores(&l, &l).unwrap();
        assert_eq!(f.macro_f1, 1.0);
        assert_eq!(accuracy(&[1, 1], &[0, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 0.75);
        assert_eq!(f1_scores(&[], &[]), Err(EvalError::EmptyInput));
        assert_eq!(accuracy(&[], &[]), Err(EvalError::EmptyInput));
    }

    #[test]
    fn argmax_tie_rule() {
        let rows = [[0.1, 0.6, 0.1, 0.1, 0.1], [0.2; 5], [0.0, 0.0, 0.0, 1.0, 0.0]];
        assert_eq!(argmax_labels(&rows), vec![1, 0, 3]);
    }

    #[test]
    fn auroc_cases() {
        let labels = [0, 1, 2, 3, 4, 0, 2];
        let onehot: Vec<[f64; 5]> = labels
            .iter()
            .map(|&l| {
                let mut r = [0.0; 5];
                r[l] = 1.0;
                r
            })
            .collect();
        assert_eq!(macro_auroc(&onehot, &labels).unwrap(), 1.0);
        let flat = vec![[0.2; 5]; labels.len()];
        assert_eq!(macro_auroc(&flat, &labels).unwrap(), 0.5);
        assert_eq!(macro_auroc(&flat[..2], &[3, 3]), Err(EvalError::NoDiscriminableClass));
    }

    #[test]
    fn auroc_eight_samples() {
        let scores = [0.9, 0.8, 0.8, 0.4, 0.35, 0.35, 0.1, 0.8];
        let pos = [true, true, false, true, false, true, false, false];
        // pairs (pos, neg): 4 × 4 = 16; by hand 4 + 3 + 2 + 1.5 = 10.5 ordered
        assert_eq!(binary_auroc(&scores, &pos).unwrap(), 10.5 / 16.0);
        assert_eq!(pair_oracle(&scores, &pos), 10.5 / 16.0);
    }

    proptest! {
        #[test]
        fn f1_matches_counting(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..50)) {
            let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let got = f1_scores(&p, &l).unwrap();
            let want = f1_oracle(&p, &l);
            prop_assert_eq!(got.per_class, want);
            prop_assert_eq!(got.macro_f1, want.iter().sum::<f64>() / 5.0);
        }

        #[test]
        fn macro_f1_permutation_invariant(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..40), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut crate::rng::seeded(seed));
            let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let (ps, ls): (Vec<usize>, Vec<usize>) = shuffled.into_iter().unzip();
            let a = f1_scores(&p, &l).unwrap().macro_f1;
            let b = f1_scores(&ps, &ls).unwrap().macro_f1;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn auroc_matches_pair_counting(
            data in prop::collection::vec((0u8..6, any::<bool>()), 2..64)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 5.0).collect();
            let pos: Vec<bool> = data.iter().map(|d| d.1).collect();
            match binary_auroc(&scores, &pos) {
                Some(v) => prop_assert!((v - pair_oracle(&scores, &pos)).abs() < 1e-12),
                None => prop_assert!(pos.iter().all(|&p| p) || pos.iter().all(|&p| !p)),
            }
        }

        #[test]
        fn auroc_monotone_invariant(
            data in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            let pos: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assert_eq!(binary_auroc(&scores, &pos), binary_auroc(&warped, &pos));
        }
    }
}
