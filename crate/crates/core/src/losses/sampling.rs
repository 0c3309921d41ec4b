//! Tuple mining over a batch.
//!
//! Every miner walks anchor-positive pairs in index order (anchor, then
//! positive) and picks at most one negative per pair, so a fixed random
//! source always yields the same tuples.

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::{Triplet, TupleBatch};
use crate::metrics::pairwise_distances;
use crate::tensor::{l2_norm, Tensor};

/// Ordered `(anchor, positive)` pairs with equal labels, `anchor != positive`.
pub fn positive_pairs(labels: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (a, la) in labels.iter().enumerate() {
        for (p, lp) in labels.iter().enumerate() {
            if a != p && la == lp {
                out.push((a, p));
            }
        }
    }
    out
}

fn negatives_of(labels: &[usize], a: usize) -> Vec<usize> {
    (0..labels.len()).filter(|&n| labels[n] != labels[a]).collect()
}

/// Semi-hard mining.
///
/// For each pair the negative is drawn uniformly from the band
/// `d_ap < d_an < d_ap + margin`. When the band is empty the negative with
/// the largest `d_an <= d_ap` is used instead (lowest index on ties); when
/// that set is empty too, the pair is skipped.
pub fn semi_hard_sample<R: Rng + ?Sized>(
    dist: &Tensor,
    labels: &[usize],
    margin: f64,
    rng: &mut R,
) -> TupleBatch {
    let mut triplets = Vec::new();
    for (a, p) in positive_pairs(labels) {
        let d_ap = dist.get(a, p);
        let negatives = negatives_of(labels, a);
        let band: Vec<usize> = negatives
            .iter()
            .copied()
            .filter(|&n| {
                let d = dist.get(a, n);
                d_ap < d && d < d_ap + margin
            })
            .collect();
        let chosen = if !band.is_empty() {
            Some(band[rng.random_range(0..band.len())])
        } else {
            negatives
                .iter()
                .copied()
                .filter(|&n| dist.get(a, n) <= d_ap)
                .fold(None, |best: Option<usize>, n| match best {
                    Some(b) if dist.get(a, b) >= dist.get(a, n) => Some(b),
                    _ => Some(n),
                })
        };
        if let Some(negative) = chosen {
            triplets.push(Triplet {
                anchor: a,
                positive: p,
                negative,
            });
        }
    }
    TupleBatch::from(triplets)
}

/// Log of the inverse density of pairwise distances between points drawn
/// uniformly on the unit sphere in `dim` dimensions, up to a constant:
/// `-(n - 2) ln d - (n - 3)/2 ln(1 - d^2 / 4)`.
pub fn inverse_density_log(d: f64, dim: usize) -> f64 {
    let n = dim as f64;
    -(n - 2.0) * d.ln() - (n - 3.0) / 2.0 * (1.0 - 0.25 * d * d).ln()
}

/// Selection probabilities for negatives at distances `dists`.
///
/// Distances are clipped below at `min_distance`; negatives at or beyond
/// `cutoff` get zero weight unless every negative is that far, in which case
/// selection is uniform.
pub fn distance_weights(dists: &[f64], dim: usize, min_distance: f64, cutoff: f64) -> Vec<f64> {
    let logs: Vec<Option<f64>> = dists
        .iter()
        .map(|&d| (d < cutoff).then(|| inverse_density_log(d.max(min_distance), dim)))
        .collect();
    let Some(max) = logs.iter().flatten().copied().reduce(f64::max) else {
        return vec![1.0 / dists.len() as f64; dists.len()];
    };
    let raw: Vec<f64> = logs
        .iter()
        .map(|l| l.map_or(0.0, |l| (l - max).exp()))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left `u` past the last boundary
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Distance-weighted mining: the negative for each pair is drawn with
/// probability given by [`distance_weights`] over the anchor's negatives.
/// Rows of `emb` must have unit norm.
pub fn distance_weighted_sample<R: Rng + ?Sized>(
    emb: &Tensor,
    labels: &[usize],
    min_distance: f64,
    cutoff: f64,
    rng: &mut R,
) -> Result<TupleBatch> {
    for r in 0..emb.rows() {
        let n = l2_norm(emb.row(r));
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "distance-weighted sampling needs unit rows; row {r} has norm {n}"
            )));
        }
    }
    let dist = pairwise_distances(emb);
    let dim = emb.cols();
    let mut triplets = Vec::new();
    for (a, p) in positive_pairs(labels) {
        let negatives = negatives_of(labels, a);
        if negatives.is_empty() {
            continue;
        }
        let d: Vec<f64> = negatives.iter().map(|&n| dist.get(a, n)).collect();
        let probs = distance_weights(&d, dim, min_distance, cutoff);
        triplets.push(Triplet {
            anchor: a,
            positive: p,
            negative: negatives[draw(&probs, rng)],
        });
    }
    Ok(TupleBatch::from(triplets))
}

/// Uniformly random negative for each pair.
pub fn random_negative_sample<R: Rng + ?Sized>(labels: &[usize], rng: &mut R) -> TupleBatch {
    let mut triplets = Vec::new();
    for (a, p) in positive_pairs(labels) {
        let negatives = negatives_of(labels, a);
        if negatives.is_empty() {
            continue;
        }
        triplets.push(Triplet {
            anchor: a,
            positive: p,
            negative: negatives[rng.random_range(0..negatives.len())],
        });
    }
    TupleBatch::from(triplets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Sample 0 is the anchor, 1 its positive at `d_ap`, the rest negatives.
    fn star(d_ap: f64, negatives: &[f64]) -> (Tensor, Vec<usize>) {
        let n = negatives.len() + 2;
        let mut dist = Tensor::filled(&[n, n], 10.0);
        for i in 0..n {
            dist.set(i, i, 0.0);
        }
        dist.set(0, 1, d_ap);
        dist.set(1, 0, d_ap);
        for (k, &d) in negatives.iter().enumerate() {
            dist.set(0, k + 2, d);
            dist.set(k + 2, 0, d);
        }
        let mut labels = vec![0, 0];
        labels.extend((0..negatives.len()).map(|k| k + 1));
        (dist, labels)
    }

    fn first_anchor_negative(batch: &TupleBatch) -> Option<usize> {
        batch
            .triplets
            .iter()
            .find(|t| t.anchor == 0 && t.positive == 1)
            .map(|t| t.negative)
    }

    #[test]
    fn semi_hard_picks_band_member() {
        let (dist, labels) = star(0.5, &[0.4, 0.6, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = semi_hard_sample(&dist, &labels, 0.2, &mut rng);
        assert_eq!(first_anchor_negative(&batch), Some(3));
    }

    #[test]
    fn semi_hard_falls_back_to_hardest_easy_side() {
        let (dist, labels) = star(0.5, &[0.3, 0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = semi_hard_sample(&dist, &labels, 0.2, &mut rng);
        assert_eq!(first_anchor_negative(&batch), Some(3));
    }

    #[test]
    fn semi_hard_skips_when_all_negatives_are_easy() {
        let (dist, labels) = star(0.5, &[0.9, 1.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = semi_hard_sample(&dist, &labels, 0.2, &mut rng);
        assert_eq!(first_anchor_negative(&batch), None);
    }

    #[test]
    fn single_class_batch_is_empty() {
        let dist = Tensor::zeros(&[3, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(semi_hard_sample(&dist, &[2, 2, 2], 0.2, &mut rng).is_empty());
        assert!(random_negative_sample(&[2, 2, 2], &mut rng).is_empty());
    }

    #[test]
    fn equidistant_negatives_are_uniform() {
        let p = distance_weights(&[0.9; 4], 16, 0.5, 1.4);
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn clipped_distances_share_weight() {
        let p = distance_weights(&[0.1, 0.3, 0.5], 8, 0.5, 1.4);
        assert!((p[0] - p[1]).abs() < 1e-15 && (p[1] - p[2]).abs() < 1e-15);
    }

    #[test]
    fn cutoff_excludes_far_negatives() {
        let p = distance_weights(&[0.6, 1.4], 8, 0.5, 1.4);
        assert_eq!(p, vec![1.0, 0.0]);
        let p = distance_weights(&[1.5, 1.6], 8, 0.5, 1.4);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let emb = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(distance_weighted_sample(&emb, &[0, 1], 0.5, 1.4, &mut rng).is_err());
    }
}
