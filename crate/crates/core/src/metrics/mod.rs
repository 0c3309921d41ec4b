//! Retrieval and clustering metrics over a set of labelled embeddings.

mod clustering;
mod retrieval;

use std::collections::BTreeSet;
use std::fmt::Write as _;

pub use clustering::{f1_pairwise, kmeans, nmi, KMeans, KMEANS_MAX_ITER, KMEANS_TOL};
pub use retrieval::{pairwise_distances, precision_rp_map, ranked_neighbors, recall_at_k, rp_and_ap_at_r};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_RECALL_KS: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub recall: Vec<(usize, f64)>,
    pub nmi: f64,
    pub f1: f64,
    pub p_at_1: f64,
    pub rp: f64,
    pub map_at_r: f64,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }

    fn rows(&self) -> Vec<(String, f64)> {
        let mut rows: Vec<(String, f64)> = self
            .recall
            .iter()
            .map(|(k, r)| (format!("recall@{k}"), *r))
            .collect();
        rows.extend([
            ("nmi".to_string(), self.nmi),
            ("f1".to_string(), self.f1),
            ("p@1".to_string(), self.p_at_1),
            ("rp".to_string(), self.rp),
            ("map@r".to_string(), self.map_at_r),
        ]);
        rows
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("metric      value\n");
        for (name, value) in self.rows() {
            let _ = writeln!(out, "{name:<10}  {:>6.2}", 100.0 * value);
        }
        out
    }

    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (name, value) in self.rows() {
            let _ = writeln!(out, "{name}={value:.6}");
        }
        out
    }
}

/// Evaluates embeddings against their labels. Clustering uses one k-means
/// cluster per distinct label.
pub fn evaluate(emb: &Tensor, labels: &[u32], ks: &[usize], seed: u64) -> Result<EvalReport> {
    let n = emb.rows();
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} embeddings", labels.len())));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("evaluation needs at least two samples".into()));
    }
    if let Some(r) = (0..n).find(|&r| emb.row(r).iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite(format!("embedding row {r}")));
    }
    let dist = pairwise_distances(emb);
    let recall = ks.iter().map(|&k| (k, recall_at_k(&dist, labels, k))).collect();
    let classes = labels.iter().collect::<BTreeSet<_>>().len();
    let clusters = kmeans(emb, classes, seed)?.assignment;
    let (p_at_1, rp, map_at_r) = precision_rp_map(&dist, labels);
    Ok(EvalReport {
        recall,
        nmi: nmi(&clusters, labels)?,
        f1: f1_pairwise(&clusters, labels)?,
        p_at_1,
        rp,
        map_at_r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_blobs_score_perfectly() {
        let emb = Tensor::column_vector(&[0.0, 0.1, 0.2, 5.0, 5.1, 5.2]);
        let report = evaluate(&emb, &[3, 3, 3, 9, 9, 9], &DEFAULT_RECALL_KS, 0).unwrap();
        assert!(report.recall.iter().all(|&(_, r)| r == 1.0));
        assert!((report.nmi - 1.0).abs() < 1e-12);
        assert_eq!((report.f1, report.p_at_1, report.rp, report.map_at_r), (1.0, 1.0, 1.0, 1.0));
        assert!(report.to_key_values().starts_with("recall@1=1.000000\n"));
        assert!(report.to_table().contains("map@r"));
    }

    #[test]
    fn rejects_bad_input() {
        let emb = Tensor::column_vector(&[0.0, f64::NAN]);
        assert!(evaluate(&emb, &[0, 1], &[1], 0).is_err());
        assert!(evaluate(&Tensor::column_vector(&[0.0]), &[0], &[1], 0).is_err());
        assert!(evaluate(&Tensor::column_vector(&[0.0, 1.0]), &[0], &[1], 0).is_err());
    }
}
