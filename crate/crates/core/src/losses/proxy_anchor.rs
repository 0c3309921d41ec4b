use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Proxy-anchor loss.
///
/// `emb` holds unit rows; `proxies` is `[classes, dim]` and is normalized
/// here. With cosine similarity `s(x, p)`:
///
/// ```text
/// L = 1/|P+| sum_{p in P+} ln(1 + sum_{x in X+_p} exp(-alpha (s(x,p) - delta)))
///   + 1/|P|  sum_{p in P}  ln(1 + sum_{x in X-_p} exp( alpha (s(x,p) + delta)))
/// ```
///
/// where `P+` are the proxies with at least one positive in the batch.
pub fn proxy_anchor_graph(
    g: &mut Graph,
    emb: Var,
    labels: &[usize],
    proxies: Var,
    alpha: f64,
    delta: f64,
) -> Result<Var> {
    let [rows, _] = g.shape(emb);
    let [classes, _] = g.shape(proxies);
    if labels.is_empty() || rows == 0 {
        return Err(Error::InvalidArgument("proxy-anchor loss on an empty batch".into()));
    }
    if labels.len() != rows {
        return Err(Error::Dimension(format!(
            "{} labels for {rows} embeddings",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} has no proxy ({classes} classes)"
        )));
    }

    let unit = g.l2_normalize(proxies)?;
    let unit_t = g.transpose(unit)?;
    let sim = g.matmul(emb, unit_t)?;

    let mut pos_mask = vec![false; rows * classes];
    for (r, &l) in labels.iter().enumerate() {
        pos_mask[r * classes + l] = true;
    }
    let neg_mask: Vec<bool> = pos_mask.iter().map(|&m| !m).collect();
    let with_positive = {
        let mut seen = vec![false; classes];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };

    let pos_logits = g.add_scalar(sim, -delta)?;
    let pos_logits = g.scale(pos_logits, -alpha)?;
    let pos_terms = g.log1p_sum_exp(pos_logits, &pos_mask)?;
    // proxies without positives contribute ln(1 + 0) = 0
    let pos_sum = g.sum(pos_terms)?;
    let pos = g.scale(pos_sum, 1.0 / with_positive as f64)?;

    let neg_logits = g.add_scalar(sim, delta)?;
    let neg_logits = g.scale(neg_logits, alpha)?;
    let neg_terms = g.log1p_sum_exp(neg_logits, &neg_mask)?;
    let neg_sum = g.sum(neg_terms)?;
    let neg = g.scale(neg_sum, 1.0 / classes as f64)?;

    g.add(pos, neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn normalize(rows: &mut [Vec<f64>]) {
        for r in rows {
            let n = crate::tensor::l2_norm(r);
            r.iter_mut().for_each(|x| *x /= n);
        }
    }

    /// Direct double sum over proxies and samples.
    fn oracle(emb: &[Vec<f64>], labels: &[usize], proxies: &[Vec<f64>], alpha: f64, delta: f64) -> f64 {
        let mut pos_total = 0.0;
        let mut pos_count = 0;
        let mut neg_total = 0.0;
        for (c, p) in proxies.iter().enumerate() {
            let norm = crate::tensor::l2_norm(p);
            let sim = |x: &Vec<f64>| x.iter().zip(p).map(|(a, b)| a * b / norm).sum::<f64>();
            let mut pos = 0.0;
            let mut neg = 0.0;
            let mut any = false;
            for (x, &l) in emb.iter().zip(labels) {
                if l == c {
                    any = true;
                    pos += (-alpha * (sim(x) - delta)).exp();
                } else {
                    neg += (alpha * (sim(x) + delta)).exp();
                }
            }
            if any {
                pos_count += 1;
                pos_total += (1.0 + pos).ln();
            }
            neg_total += (1.0 + neg).ln();
        }
        pos_total / pos_count as f64 + neg_total / proxies.len() as f64
    }

    #[test]
    fn sample_on_its_proxy_has_no_loss() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::row_vector(&[0.6, 0.8])).unwrap();
        let p = g.param("emb.proxy", Tensor::row_vector(&[0.6, 0.8])).unwrap();
        let l = proxy_anchor_graph(&mut g, e, &[0], p, 32.0, 0.1).unwrap();
        assert!(g.scalar(l) <= 1e-12);
    }

    #[test]
    fn orthogonal_sample() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::row_vector(&[1.0, 0.0])).unwrap();
        let p = g.param("emb.proxy", Tensor::row_vector(&[0.0, 1.0])).unwrap();
        let l = proxy_anchor_graph(&mut g, e, &[0], p, 32.0, 0.1).unwrap();
        let expected = (1.0 + 3.2_f64.exp()).ln();
        assert!((g.scalar(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (n, classes, dim) = (7, 3, 4);
            let mut emb: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            normalize(&mut emb);
            let proxies: Vec<Vec<f64>> = (0..classes)
                .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes - 1)).collect();

            let mut g = Graph::new();
            let e = g.constant(Tensor::from_rows(&emb).unwrap()).unwrap();
            let p = g.param("emb.proxy", Tensor::from_rows(&proxies).unwrap()).unwrap();
            let l = proxy_anchor_graph(&mut g, e, &labels, p, 32.0, 0.1).unwrap();
            let want = oracle(&emb, &labels, &proxies, 32.0, 0.1);
            assert!((g.scalar(l) - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {want}", g.scalar(l));
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::row_vector(&[1.0, 0.0])).unwrap();
        let p = g.param("emb.proxy", Tensor::row_vector(&[0.0, 1.0])).unwrap();
        assert!(proxy_anchor_graph(&mut g, e, &[], p, 32.0, 0.1).is_err());
    }
}
