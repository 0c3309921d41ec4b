use drml::metrics::{evaluate, f1_pairwise, nmi, pairwise_distances, precision_rp_map, recall_at_k, DEFAULT_RECALL_KS};
use drml::Tensor;
use proptest::prelude::*;

fn instance(max_n: usize, dim: usize) -> impl Strategy<Value = (Tensor, Vec<u32>)> {
    (4..=max_n).prop_flat_map(move |n| {
        (
            prop::collection::vec(-3.0..3.0f64, n * dim).prop_map(move |d| Tensor::new(vec![n, dim], d).unwrap()),
            prop::collection::vec(0u32..4, n),
        )
    })
}

/// Rotation in the (p, q) plane applied to every row.
fn givens(t: &Tensor, p: usize, q: usize, angle: f64) -> Tensor {
    let (s, c) = angle.sin_cos();
    let mut out = t.clone();
    for r in 0..t.rows() {
        let (x, y) = (t.get(r, p), t.get(r, q));
        out.set(r, p, c * x - s * y);
        out.set(r, q, s * x + c * y);
    }
    out
}

fn pairs_oracle(clusters: &[usize], labels: &[u32]) -> f64 {
    let (mut tp, mut same_cluster, mut same_class) = (0.0, 0.0, 0.0);
    for i in 0..labels.len() {
        for j in (i + 1)..labels.len() {
            let c = clusters[i] == clusters[j];
            let l = labels[i] == labels[j];
            tp += f64::from(u8::from(c && l));
            same_cluster += f64::from(u8::from(c));
            same_class += f64::from(u8::from(l));
        }
    }
    if tp == 0.0 {
        return 0.0;
    }
    let (p, r) = (tp / same_cluster, tp / same_class);
    2.0 * p * r / (p + r)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distances_match_per_pair_norms((emb, _) in instance(10, 3)) {
        let d = pairwise_distances(&emb);
        for i in 0..emb.rows() {
            prop_assert_eq!(d.get(i, i), 0.0);
            for j in 0..emb.rows() {
                let direct = emb.row(i).iter().zip(emb.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                prop_assert!((d.get(i, j) - direct).abs() <= 1e-12);
                prop_assert_eq!(d.get(i, j).to_bits(), d.get(j, i).to_bits());
            }
        }
    }

    #[test]
    fn recall_is_monotone_and_map_bounded_by_rp((emb, labels) in instance(32, 2)) {
        let d = pairwise_distances(&emb);
        let mut prev = 0.0;
        for k in 1..emb.rows() {
            let r = recall_at_k(&d, &labels, k);
            prop_assert!(r >= prev);
            prev = r;
        }
        let (p1, rp, map) = precision_rp_map(&d, &labels);
        prop_assert!(map <= rp + 1e-15);
        prop_assert!((0.0..=1.0).contains(&p1));
    }

    #[test]
    fn recall_matches_exhaustive_scan((emb, labels) in instance(32, 2)) {
        let d = pairwise_distances(&emb);
        let n = emb.rows();
        for k in [1, 2, 4, 8] {
            let mut hits = 0;
            for q in 0..n {
                // a same-label sample is among the k nearest iff fewer than k
                // others precede the nearest one in (distance, index) order
                let best = (0..n).filter(|&j| j != q && labels[j] == labels[q])
                    .min_by(|&a, &b| d.get(q, a).total_cmp(&d.get(q, b)).then(a.cmp(&b)));
                if let Some(b) = best {
                    let ahead = (0..n).filter(|&j| j != q && (d.get(q, j), j) < (d.get(q, b), b)).count();
                    hits += usize::from(ahead < k);
                }
            }
            prop_assert_eq!(recall_at_k(&d, &labels, k), hits as f64 / n as f64);
        }
    }

    #[test]
    fn clustering_scores_match_oracles(
        pair in (2usize..20).prop_flat_map(|n| (prop::collection::vec(0usize..4, n), prop::collection::vec(0u32..3, n))),
    ) {
        let (clusters, labels) = pair;
        let f1 = f1_pairwise(&clusters, &labels).unwrap();
        prop_assert!((f1 - pairs_oracle(&clusters, &labels)).abs() <= 1e-12);
        let score = nmi(&clusters, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&score));
        prop_assert!((score - nmi(&labels, &clusters).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn scores_survive_rotation_and_relabeling(
        (emb, labels) in instance(16, 3),
        angle in 0.0..std::f64::consts::TAU,
        shift in 1u32..50,
    ) {
        let base = evaluate(&emb, &labels, &DEFAULT_RECALL_KS, 3).unwrap();
        let rotated = givens(&givens(&emb, 0, 2, angle), 1, 2, 0.7 * angle);
        let relabeled: Vec<u32> = labels.iter().map(|&l| 7 * l + shift).collect();
        for (e, l) in [(&rotated, &labels), (&emb, &relabeled)] {
            let other = evaluate(e, l, &DEFAULT_RECALL_KS, 3).unwrap();
            prop_assert_eq!(&base.recall, &other.recall);
            prop_assert_eq!((base.p_at_1, base.rp, base.map_at_r), (other.p_at_1, other.rp, other.map_at_r));
        }
        let other = evaluate(&emb, &relabeled, &DEFAULT_RECALL_KS, 3).unwrap();
        prop_assert_eq!((base.nmi, base.f1), (other.nmi, other.f1));
    }
}
