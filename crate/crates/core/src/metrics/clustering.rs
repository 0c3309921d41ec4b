use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignment: Vec<usize>,
    pub centroids: Tensor,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Tensor) -> (usize, f64) {
    (0..centroids.rows())
        .map(|c| (c, sq_dist(point, centroids.row(c))))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn plus_plus_seed(data: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = data.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if u < acc && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // every point coincides with a chosen centroid
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(data.row(i), data.row(next)));
        }
    }
    data.gather_rows(&chosen)
}

/// Lloyd's algorithm from k-means++ seeds. Stops after
/// [`KMEANS_MAX_ITER`] iterations or once the relative change in inertia
/// drops below [`KMEANS_TOL`]. An emptied cluster is re-seeded at the point
/// farthest from its current centroid.
pub fn kmeans(data: &Tensor, n_clusters: usize, seed: u64) -> Result<KMeans> {
    let n = data.rows();
    if n_clusters == 0 || n_clusters > n {
        return Err(Error::InvalidArgument(format!(
            "cannot form {n_clusters} clusters from {n} points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seed(data, n_clusters, &mut rng);
    let dim = data.cols();
    let mut assignment = vec![0; n];
    let mut inertia = f64::INFINITY;
    let mut iterations = 0;

    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest(data.row(i), &centroids);
            assignment[i] = c;
            dists[i] = d;
        }

        let mut counts = vec![0usize; n_clusters];
        for &c in &assignment {
            counts[c] += 1;
        }
        let mut taken = vec![false; n];
        for c in 0..n_clusters {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| !taken[i] && counts[assignment[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                taken[i] = true;
                counts[assignment[i]] -= 1;
                assignment[i] = c;
                counts[c] = 1;
                dists[i] = 0.0;
            }
        }

        let mut sums = Tensor::zeros(&[n_clusters, dim]);
        for (i, &c) in assignment.iter().enumerate() {
            for (s, &x) in sums.row_mut(c).iter_mut().zip(data.row(i)) {
                *s += x;
            }
        }
        for c in 0..n_clusters {
            let count = counts[c].max(1) as f64;
            for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s / count;
            }
        }

        let next: f64 = (0..n)
            .map(|i| sq_dist(data.row(i), centroids.row(assignment[i])))
            .sum();
        let converged = next == 0.0
            || (inertia.is_finite() && (inertia - next).abs() <= KMEANS_TOL * inertia.max(f64::MIN_POSITIVE));
        inertia = next;
        if converged {
            break;
        }
    }

    Ok(KMeans {
        assignment,
        centroids,
        inertia,
        iterations,
    })
}

fn contingency<A: Ord + Copy, B: Ord + Copy>(
    a: &[A],
    b: &[B],
) -> Result<(BTreeMap<A, usize>, BTreeMap<B, usize>, BTreeMap<(A, B), usize>)> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "partitions of {} and {} samples",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("empty partitions".into()));
    }
    let mut ca = BTreeMap::new();
    let mut cb = BTreeMap::new();
    let mut joint = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_insert(0) += 1;
        *cb.entry(y).or_insert(0) += 1;
        *joint.entry((x, y)).or_insert(0) += 1;
    }
    Ok((ca, cb, joint))
}

fn entropy<K>(counts: &BTreeMap<K, usize>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `2 I(clusters; classes) / (H(clusters) + H(classes))` with natural logs;
/// 1 when both entropies vanish.
pub fn nmi<A: Ord + Copy, B: Ord + Copy>(clusters: &[A], classes: &[B]) -> Result<f64> {
    let (ca, cb, joint) = contingency(clusters, classes)?;
    let n = clusters.len() as f64;
    let (ha, hb) = (entropy(&ca, n), entropy(&cb, n));
    if ha + hb == 0.0 {
        return Ok(1.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let c = c as f64;
            c / n * (n * c / (ca[&x] as f64 * cb[&y] as f64)).ln()
        })
        .sum();
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

fn pairs(c: usize) -> f64 {
    (c * c.saturating_sub(1) / 2) as f64
}

/// Pairwise clustering F1 over unordered sample pairs; 0 without true
/// positives.
pub fn f1_pairwise<A: Ord + Copy, B: Ord + Copy>(clusters: &[A], classes: &[B]) -> Result<f64> {
    let (ca, cb, joint) = contingency(clusters, classes)?;
    let tp: f64 = joint.values().map(|&c| pairs(c)).sum();
    if tp == 0.0 {
        return Ok(0.0);
    }
    let same_cluster: f64 = ca.values().map(|&c| pairs(c)).sum();
    let same_class: f64 = cb.values().map(|&c| pairs(c)).sum();
    let precision = tp / same_cluster;
    let recall = tp / same_class;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_blobs_split_at_gap() {
        let data = Tensor::column_vector(&[0.0, 0.1, 0.2, 5.0, 5.1, 5.3]);
        let km = kmeans(&data, 2, 4).unwrap();
        let a = &km.assignment;
        assert!(a[0] == a[1] && a[1] == a[2]);
        assert!(a[3] == a[4] && a[4] == a[5]);
        assert_ne!(a[0], a[3]);
    }

    #[test]
    fn one_cluster_per_point() {
        let data = Tensor::column_vector(&[0.0, 1.0, 3.0, 7.0]);
        let km = kmeans(&data, 4, 0).unwrap();
        assert_eq!(km.inertia, 0.0);
        let mut a = km.assignment.clone();
        a.sort_unstable();
        a.dedup();
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn deterministic_per_seed() {
        let data = Tensor::new(vec![20, 2], (0..40).map(|i| ((i * 37) % 11) as f64).collect()).unwrap();
        assert_eq!(kmeans(&data, 3, 8).unwrap(), kmeans(&data, 3, 8).unwrap());
        assert!(kmeans(&data, 21, 8).is_err());
    }

    #[test]
    fn nmi_examples() {
        assert!((nmi(&[0, 0, 1, 1], &[5, 5, 7, 7]).unwrap() - 1.0).abs() < 1e-12);
        assert!(nmi(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap().abs() < 1e-12);
        assert_eq!(nmi(&[3, 3], &[1, 1]).unwrap(), 1.0);
        assert!(nmi(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_pairwise(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(f1_pairwise(&[0, 1, 2, 3], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert!(f1_pairwise(&[0], &[0, 1]).is_err());
    }
}
