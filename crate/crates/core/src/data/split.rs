use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disjoint train/validation/test row indices, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Every row in the training split; used for pretraining tables.
    pub fn all_train(n_rows: usize) -> Self {
        Self { train: (0..n_rows).collect(), val: Vec::new(), test: Vec::new() }
    }
}

/// `(train, val, test)` sizes: test = round(n / 10), val = round(rest / 8).
pub fn split_counts(n_rows: usize) -> (usize, usize, usize) {
    let test = (0.10 * n_rows as f64).round() as usize;
    let rest = n_rows - test;
    let val = (rest as f64 / 8.0).round() as usize;
    (rest - val, val, test)
}

/// Seeded random partition into train/val/test.
pub fn split_dataset(n_rows: usize, trial_seed: u64) -> Result<Split> {
    if n_rows < 10 {
        return Err(Error::Dataset(format!("need at least 10 rows to split, got {n_rows}")));
    }
    let (_, val, test) = split_counts(n_rows);
    let mut perm: Vec<usize> = (0..n_rows).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(trial_seed));
    let mut test_idx = perm[..test].to_vec();
    let mut val_idx = perm[test..test + val].to_vec();
    let mut train_idx = perm[test + val..].to_vec();
    test_idx.sort_unstable();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok(Split { train: train_idx, val: val_idx, test: test_idx })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sizes_follow_fractions() {
        assert_eq!(split_counts(800), (630, 90, 80));
        assert_eq!(split_counts(1000), (787, 113, 100));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = split_dataset(200, 5).unwrap();
        assert_eq!(a, split_dataset(200, 5).unwrap());
        assert_ne!(a.test, split_dataset(200, 6).unwrap().test);
        assert!(split_dataset(9, 0).is_err());
    }

    proptest! {
        #[test]
        fn partition_covers_all_rows(n in 10usize..3000, seed in any::<u64>()) {
            let s = split_dataset(n, seed).unwrap();
            prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
