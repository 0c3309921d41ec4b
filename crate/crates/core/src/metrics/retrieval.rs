use log::warn;

use crate::tensor::{euclidean, Tensor};

/// Full Euclidean distance matrix between rows; symmetric with an exact
/// zero diagonal.
pub fn pairwise_distances(emb: &Tensor) -> Tensor {
    let n = emb.rows();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(emb.row(i), emb.row(j));
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    out
}

/// Other samples ordered by distance from `query`, ties by index.
pub fn ranked_neighbors(dist: &Tensor, query: usize) -> Vec<usize> {
    let row = dist.row(query);
    let mut order: Vec<usize> = (0..row.len()).filter(|&j| j != query).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    order
}

/// Fraction of queries with at least one same-label sample among their `k`
/// nearest neighbors (self excluded).
pub fn recall_at_k<L: PartialEq>(dist: &Tensor, labels: &[L], k: usize) -> f64 {
    let n = labels.len();
    if n < 2 {
        return 0.0;
    }
    let hits = (0..n)
        .filter(|&q| {
            ranked_neighbors(dist, q)
                .iter()
                .take(k)
                .any(|&j| labels[j] == labels[q])
        })
        .count();
    hits as f64 / n as f64
}

/// R-precision and MAP@R of one query, from the relevance of its ranked
/// neighbors: `rp = hits in top R / R`, `map = 1/R sum_{i<=R} P(i) rel(i)`.
pub fn rp_and_ap_at_r(relevant: &[bool], r: usize) -> (f64, f64) {
    let mut correct = 0usize;
    let mut ap = 0.0;
    for (rank, _) in relevant.iter().take(r).enumerate().filter(|(_, &rel)| rel) {
        correct += 1;
        ap += correct as f64 / (rank + 1) as f64;
    }
    (correct as f64 / r as f64, ap / r as f64)
}

/// Precision@1, R-precision and MAP@R, averaged over queries whose class
/// has at least one other member. Queries from singleton classes are
/// skipped with a warning. Returns zeros when no query qualifies.
pub fn precision_rp_map<L: PartialEq>(dist: &Tensor, labels: &[L]) -> (f64, f64, f64) {
    let n = labels.len();
    let (mut p1, mut rp, mut map) = (0.0, 0.0, 0.0);
    let mut queries = 0usize;
    let mut skipped = 0usize;
    for q in 0..n {
        let r = labels.iter().filter(|&l| *l == labels[q]).count() - 1;
        if r == 0 {
            skipped += 1;
            continue;
        }
        let relevant: Vec<bool> = ranked_neighbors(dist, q)
            .iter()
            .map(|&j| labels[j] == labels[q])
            .collect();
        let (rp_q, ap_q) = rp_and_ap_at_r(&relevant, r);
        p1 += f64::from(u8::from(relevant[0]));
        rp += rp_q;
        map += ap_q;
        queries += 1;
    }
    if skipped > 0 {
        warn!("skipped {skipped} queries from single-sample classes");
    }
    if queries == 0 {
        return (0.0, 0.0, 0.0);
    }
    let q = queries as f64;
    (p1 / q, rp / q, map / q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(xs: &[f64]) -> Tensor {
        Tensor::column_vector(xs)
    }

    #[test]
    fn distances_1d() {
        let d = pairwise_distances(&points(&[0.0, 3.0, 4.0]));
        assert_eq!(d.data(), &[0.0, 3.0, 4.0, 3.0, 0.0, 1.0, 4.0, 1.0, 0.0]);
        let dup = pairwise_distances(&points(&[2.0, 2.0]));
        assert_eq!(dup.get(0, 1), 0.0);
    }

    #[test]
    fn recall_examples() {
        let d = pairwise_distances(&points(&[0.0, 0.1, 1.0, 1.1]));
        assert_eq!(recall_at_k(&d, &['A', 'A', 'B', 'B'], 1), 1.0);
        let d = pairwise_distances(&points(&[0.0, 1.0, 1.6]));
        assert_eq!(recall_at_k(&d, &['A', 'B', 'A'], 1), 0.0);
    }

    #[test]
    fn ties_break_by_index() {
        let d = pairwise_distances(&points(&[0.0, -1.0, 1.0]));
        assert_eq!(ranked_neighbors(&d, 0), vec![1, 2]);
    }

    #[test]
    fn rp_and_map_by_enumeration() {
        assert_eq!(rp_and_ap_at_r(&[true, false], 2), (0.5, 0.5));
        assert_eq!(rp_and_ap_at_r(&[false, true], 2), (0.5, 0.25));
        assert_eq!(rp_and_ap_at_r(&[true, true, false], 2), (1.0, 1.0));
    }

    #[test]
    fn perfect_ranking() {
        let d = pairwise_distances(&points(&[0.0, 0.1, 0.2, 5.0, 5.1, 5.2]));
        let (p1, rp, map) = precision_rp_map(&d, &[0, 0, 0, 1, 1, 1]);
        assert_eq!((p1, rp, map), (1.0, 1.0, 1.0));
    }
}
