use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{largest_remainder, read_rows, write_rows};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

/// One CSV row; `fold` is −1 for test subjects.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRow {
    pub subject_id: String,
    pub split: Partition,
    pub fold: i32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    /// Sorted by subject id.
    pub rows: Vec<SplitRow>,
    pub folds: usize,
}

impl SplitPlan {
    pub fn test(&self) -> Vec<&str> {
        self.select(|r| r.split == Partition::Test)
    }

    pub fn train(&self) -> Vec<&str> {
        self.select(|r| r.split == Partition::Train)
    }

    pub fn fold(&self, k: usize) -> Vec<&str> {
        self.select(|r| r.fold == k as i32)
    }

    /// Training subjects outside fold `k`.
    pub fn fold_train(&self, k: usize) -> Vec<&str> {
        self.select(|r| r.split == Partition::Train && r.fold != k as i32)
    }

    fn select(&self, f: impl Fn(&SplitRow) -> bool) -> Vec<&str> {
        self.rows.iter().filter(|r| f(r)).map(|r| r.subject_id.as_str()).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.rows)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let rows: Vec<SplitRow> = read_rows(path)?;
        let folds = rows.iter().map(|r| r.fold + 1).max().unwrap_or(0).max(0) as usize;
        Ok(SplitPlan { rows, folds })
    }
}

/// Stratified hold-out plus `folds`-way partition of the remainder.
///
/// Input order is irrelevant: subjects are sorted by id before the seeded
/// per-class shuffle. Test quotas per class come from a largest-remainder
/// split of `round(test_fraction · n)`. Within a class, training subjects
/// are dealt round-robin over folds, continuing where the previous class
/// stopped, so fold sizes also differ by at most one.
pub fn split(
    subjects: &[(String, usize)],
    num_classes: usize,
    test_fraction: f64,
    folds: usize,
    seed: u64,
) -> Result<SplitPlan> {
    if folds < 2 || !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Split(format!(
            "need ≥ 2 folds and test fraction in [0, 1), got {folds} and {test_fraction}"
        )));
    }
    let ids: BTreeSet<&str> = subjects.iter().map(|(s, _)| s.as_str()).collect();
    if ids.len() != subjects.len() {
        return Err(Error::Split("duplicate subject id".into()));
    }
    let mut by_class: Vec<Vec<&str>> = vec![Vec::new(); num_classes];
    for (id, label) in subjects {
        let bucket = by_class
            .get_mut(*label)
            .ok_or_else(|| Error::Split(format!("label {label} of `{id}` ≥ {num_classes} classes")))?;
        bucket.push(id);
    }
    let n = subjects.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    let sizes: Vec<f64> = by_class.iter().map(|b| b.len() as f64).collect();
    let quotas = largest_remainder(n_test, &sizes);

    let mut rows = Vec::with_capacity(n);
    let mut dealt = 0usize;
    for (c, bucket) in by_class.iter_mut().enumerate() {
        if bucket.len().saturating_sub(quotas[c]) < folds {
            return Err(Error::Split(format!(
                "class {c} has {} subjects, fewer than {folds} left for training",
                bucket.len()
            )));
        }
        bucket.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64 + 1);
        bucket.shuffle(&mut rng);
        for (j, id) in bucket.iter().enumerate() {
            let (split, fold) = if j < quotas[c] {
                (Partition::Test, -1)
            } else {
                dealt += 1;
                (Partition::Train, ((dealt - 1) % folds) as i32)
            };
            rows.push(SplitRow {
                subject_id: id.to_string(),
                split,
                fold,
            });
        }
    }
    rows.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    Ok(SplitPlan { rows, folds })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(n: usize, k: usize) -> Vec<(String, usize)> {
        (0..n).map(|i| (format!("S{i:04}"), i % k)).collect()
    }

    #[test]
    fn hundred_subjects() {
        let p = split(&balanced(100, 3), 3, 0.2, 5, 0).unwrap();
        assert_eq!(p.test().len(), 20);
        assert_eq!(p.train().len(), 80);
        for k in 0..5 {
            assert_eq!(p.fold(k).len(), 16);
            assert_eq!(p.fold_train(k).len(), 64);
        }
    }

    #[test]
    fn order_independent() {
        let mut s = balanced(57, 3);
        let a = split(&s, 3, 0.2, 5, 4).unwrap();
        s.reverse();
        s.swap(3, 40);
        assert_eq!(a, split(&s, 3, 0.2, 5, 4).unwrap());
        assert_ne!(a, split(&s, 3, 0.2, 5, 5).unwrap());
    }

    #[test]
    fn small_class_rejected() {
        let mut s = balanced(60, 2);
        s.push(("X".into(), 2));
        assert!(matches!(split(&s, 3, 0.2, 5, 0), Err(Error::Split(_))));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = split(&balanced(40, 2), 2, 0.2, 4, 1).unwrap();
        let path = dir.path().join("split.csv");
        p.write_csv(&path).unwrap();
        assert_eq!(SplitPlan::read_csv(&path).unwrap(), p);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("subject_id,split,fold\n"));
    }
}
