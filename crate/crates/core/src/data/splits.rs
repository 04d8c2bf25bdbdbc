//! Recording-level train/validation/test splits and their manifest files.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const fn new(train: f64, val: f64, test: f64) -> Self {
        SplitRatios { train, val, test }
    }

    fn validate(&self) -> Result<(), DataError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(DataError::InvalidRatios(format!("{self:?} has a negative entry")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(DataError::InvalidRatios(format!("{self:?} sums to {sum}")));
        }
        Ok(())
    }
}

impl std::str::FromStr for SplitRatios {
    type Err = DataError;

    /// Parses `"0.8,0.1,0.1"`.
    fn from_str(s: &str) -> Result<Self, DataError> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| DataError::InvalidRatios(format!("{s:?}: {e}")))?;
        match parts[..] {
            [train, val, test] => {
                let r = SplitRatios { train, val, test };
                r.validate()?;
                Ok(r)
            }
            _ => Err(DataError::InvalidRatios(format!("{s:?}: expected three values"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train_ids.len(), self.val_ids.len(), self.test_ids.len())
    }

    pub fn part(&self, name: &str) -> Option<&[String]> {
        match name {
            "train" => Some(&self.train_ids),
            "val" => Some(&self.val_ids),
            "test" => Some(&self.test_ids),
            _ => None,
        }
    }

    /// Write `train.txt`, `val.txt`, `test.txt` (one id per line).
    pub fn write_manifests(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, ids) in [
            ("train", &self.train_ids),
            ("val", &self.val_ids),
            ("test", &self.test_ids),
        ] {
            let mut text = ids.join("\n");
            if !text.is_empty() {
                text.push('\n');
            }
            std::fs::write(dir.join(format!("{name}.txt")), text)?;
        }
        Ok(())
    }

    pub fn read_manifests(dir: &Path) -> std::io::Result<Self> {
        let read = |name: &str| -> std::io::Result<Vec<String>> {
            let path = dir.join(format!("{name}.txt"));
            if !path.exists() {
                return Ok(Vec::new());
            }
            Ok(read_manifest(&path)?)
        };
        Ok(DatasetSplit {
            train_ids: read("train")?,
            val_ids: read("val")?,
            test_ids: read("test")?,
        })
    }
}

pub fn read_manifest(path: &Path) -> std::io::Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Shuffle the ids with `seed` and cut them by `ratios`. Validation and
/// test sizes are floored; the remainder goes to training. The input order
/// does not matter: ids are sorted before shuffling.
pub fn make_splits(
    recording_ids: &[String],
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    ratios.validate()?;
    if recording_ids.is_empty() {
        return Err(DataError::InvalidRatios("no recordings to split".into()));
    }
    let mut ids = recording_ids.to_vec();
    ids.sort();
    ids.dedup();
    ids.shuffle(&mut rng::seeded(seed));

    let n = ids.len() as f64;
    let n_val = (n * ratios.val + 1e-9).floor() as usize;
    let n_test = (n * ratios.test + 1e-9).floor() as usize;
    let test_ids = ids.split_off(ids.len() - n_test);
    let val_ids = ids.split_off(ids.len() - n_val);
    Ok(DatasetSplit {
        train_ids: ids,
        val_ids,
        test_ids,
    })
}

/// Move the last `n` training recordings into an empty validation set.
pub fn hold_out_validation(split: &DatasetSplit, n: usize) -> Result<DatasetSplit, DataError> {
    if !split.val_ids.is_empty() {
        return Err(DataError::ValidationAlreadyPopulated(split.val_ids.len()));
    }
    if n > split.train_ids.len() {
        return Err(DataError::InsufficientTrainRecordings {
            requested: n,
            available: split.train_ids.len(),
        });
    }
    let mut out = split.clone();
    out.val_ids = out.train_ids.split_off(out.train_ids.len() - n);
    Ok(out)
}

/// Validation hold-out used for the large-corpus profile.
pub const LARGE_CORPUS_HOLDOUT: usize = 100;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("rec{i:03}")).collect()
    }

    #[test]
    fn eighty_ten_ten() {
        let s = make_splits(&ids(10), SplitRatios::new(0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!(s.sizes(), (8, 1, 1));
    }

    #[test]
    fn seventy_thirty() {
        let s = make_splits(&ids(10), SplitRatios::new(0.7, 0.0, 0.3), 1).unwrap();
        assert_eq!(s.sizes(), (7, 0, 3));
    }

    #[test]
    fn remainder_goes_to_train() {
        let s = make_splits(&ids(7), SplitRatios::new(0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!(s.sizes(), (7, 0, 0));
        let s = make_splits(&ids(39), SplitRatios::new(0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!(s.sizes(), (33, 3, 3));
    }

    #[test]
    fn deterministic_and_order_independent() {
        let a = make_splits(&ids(50), SplitRatios::new(0.8, 0.1, 0.1), 42).unwrap();
        let b = make_splits(&ids(50), SplitRatios::new(0.8, 0.1, 0.1), 42).unwrap();
        assert_eq!(a, b);
        let mut rev = ids(50);
        rev.reverse();
        assert_eq!(make_splits(&rev, SplitRatios::new(0.8, 0.1, 0.1), 42).unwrap(), a);
        let c = make_splits(&ids(50), SplitRatios::new(0.8, 0.1, 0.1), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_ratios() {
        assert!(make_splits(&ids(3), SplitRatios::new(0.5, 0.1, 0.1), 0).is_err());
        assert!(make_splits(&ids(3), SplitRatios::new(1.2, -0.1, -0.1), 0).is_err());
        assert!(make_splits(&[], SplitRatios::new(0.8, 0.1, 0.1), 0).is_err());
        assert!("0.8,0.1".parse::<SplitRatios>().is_err());
        assert_eq!(
            "0.8, 0.1,0.1".parse::<SplitRatios>().unwrap(),
            SplitRatios::new(0.8, 0.1, 0.1)
        );
    }

    #[test]
    fn holdout_moves_from_train() {
        let s = make_splits(&ids(10), SplitRatios::new(0.7, 0.0, 0.3), 3).unwrap();
        let h = hold_out_validation(&s, 2).unwrap();
        assert_eq!(h.sizes(), (5, 2, 3));
        assert_eq!(h.test_ids, s.test_ids);
        assert_eq!(hold_out_validation(&s, 0).unwrap(), s);
        assert!(matches!(
            hold_out_validation(&s, 8),
            Err(DataError::InsufficientTrainRecordings { requested: 8, available: 7 })
        ));
        assert!(hold_out_validation(&h, 1).is_err());
        assert_eq!(LARGE_CORPUS_HOLDOUT, 100);
    }

    #[test]
    fn manifests_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = make_splits(&ids(10), SplitRatios::new(0.8, 0.1, 0.1), 5).unwrap();
        s.write_manifests(dir.path()).unwrap();
        assert_eq!(DatasetSplit::read_manifests(dir.path()).unwrap(), s);
    }

    proptest! {
        #[test]
        fn partitions_input(n in 1usize..80, seed in 0u64..1000, a in 0u32..=10, b in 0u32..=10) {
            let (val, test) = (a.min(10) as f64 / 20.0, b.min(10) as f64 / 20.0);
            let r = SplitRatios::new(1.0 - val - test, val, test);
            let all = ids(n);
            let s = make_splits(&all, r, seed).unwrap();
            let tr: HashSet<_> = s.train_ids.iter().collect();
            let va: HashSet<_> = s.val_ids.iter().collect();
            let te: HashSet<_> = s.test_ids.iter().collect();
            prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            prop_assert_eq!(tr.len() + va.len() + te.len(), n);
            prop_assert_eq!(s.val_ids.len(), (n as f64 * val + 1e-9).floor() as usize);
        }
    }
}
