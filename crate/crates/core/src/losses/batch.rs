use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchStrategy {
    /// `classes` distinct classes with `per_class` samples each.
    Balanced { classes: usize, per_class: usize },
    /// Uniform without replacement.
    Random { size: usize },
}

impl BatchStrategy {
    pub fn size(&self) -> usize {
        match *self {
            BatchStrategy::Balanced { classes, per_class } => classes * per_class,
            BatchStrategy::Random { size } => size,
        }
    }
}

/// Draws one batch of dataset indices. Classes with fewer than `per_class`
/// samples are sampled with replacement.
pub fn build_batch<R: Rng + ?Sized>(
    labels: &[u32],
    strategy: BatchStrategy,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("cannot batch an empty dataset".into()));
    }
    match strategy {
        BatchStrategy::Random { size } => {
            if size == 0 || size > labels.len() {
                return Err(Error::InvalidArgument(format!(
                    "random batch of {size} from {} samples",
                    labels.len()
                )));
            }
            Ok(sample(rng, labels.len(), size).into_vec())
        }
        BatchStrategy::Balanced { classes, per_class } => {
            let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for (i, &l) in labels.iter().enumerate() {
                by_class.entry(l).or_default().push(i);
            }
            let pools: Vec<Vec<usize>> = by_class.into_values().collect();
            if classes == 0 || per_class == 0 || classes > pools.len() {
                return Err(Error::InvalidArgument(format!(
                    "balanced batch of {classes} classes x {per_class} from {} classes",
                    pools.len()
                )));
            }
            let mut out = Vec::with_capacity(classes * per_class);
            for c in sample(rng, pools.len(), classes) {
                let pool = &pools[c];
                if pool.len() >= per_class {
                    out.extend(sample(rng, pool.len(), per_class).into_iter().map(|i| pool[i]));
                } else {
                    out.extend((0..per_class).map(|_| pool[rng.random_range(0..pool.len())]));
                }
            }
            Ok(out)
        }
    }
}

/// [`build_batch`] with a fresh generator seeded from `seed`.
pub fn build_batch_seeded(labels: &[u32], strategy: BatchStrategy, seed: u64) -> Result<Vec<usize>> {
    build_batch(labels, strategy, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_twenty_by_four() {
        let labels: Vec<u32> = (0..100).flat_map(|c| std::iter::repeat_n(c, 6)).collect();
        let strategy = BatchStrategy::Balanced { classes: 20, per_class: 4 };
        let batch = build_batch_seeded(&labels, strategy, 5).unwrap();
        assert_eq!(batch.len(), 80);
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &i in &batch {
            *counts.entry(labels[i]).or_default() += 1;
        }
        assert_eq!(counts.len(), 20);
        assert!(counts.values().all(|&c| c == 4));
        let mut unique = batch.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), 80);
    }

    #[test]
    fn random_covers_small_dataset() {
        let mut batch = build_batch_seeded(&[0, 1, 2, 3], BatchStrategy::Random { size: 4 }, 9).unwrap();
        batch.sort_unstable();
        assert_eq!(batch, vec![0, 1, 2, 3]);
    }

    #[test]
    fn same_seed_same_batch() {
        let labels: Vec<u32> = (0..40).map(|i| i % 7).collect();
        let s = BatchStrategy::Balanced { classes: 3, per_class: 4 };
        assert_eq!(build_batch_seeded(&labels, s, 1).unwrap(), build_batch_seeded(&labels, s, 1).unwrap());
    }

    #[test]
    fn small_class_sampled_with_replacement() {
        let labels = [0, 1, 1, 1];
        let s = BatchStrategy::Balanced { classes: 2, per_class: 3 };
        let batch = build_batch_seeded(&labels, s, 2).unwrap();
        assert_eq!(batch.iter().filter(|&&i| i == 0).count(), 3);
    }

    #[test]
    fn errors() {
        assert!(build_batch_seeded(&[], BatchStrategy::Random { size: 1 }, 0).is_err());
        assert!(build_batch_seeded(&[0, 1], BatchStrategy::Random { size: 3 }, 0).is_err());
        let s = BatchStrategy::Balanced { classes: 3, per_class: 1 };
        assert!(build_batch_seeded(&[0, 1], s, 0).is_err());
    }
}
