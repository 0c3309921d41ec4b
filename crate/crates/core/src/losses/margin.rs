use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::losses::triplet::tuple_distances;
use crate::losses::TupleBatch;

/// Margin loss on one pair with class boundary `beta`.
pub fn margin_loss(d: f64, positive: bool, alpha: f64, beta: f64) -> f64 {
    if positive {
        (alpha + d - beta).max(0.0)
    } else {
        (alpha - d + beta).max(0.0)
    }
}

/// Sum of positive-pair and negative-pair hinges over `tuples`, divided by
/// the number of pairs with nonzero loss (at least one). The boundary of
/// each tuple is `beta[class of its anchor]`; `beta` is `[classes, 1]`.
pub fn margin_graph(
    g: &mut Graph,
    emb: Var,
    labels: &[usize],
    tuples: &TupleBatch,
    beta: Var,
    alpha: f64,
) -> Result<Var> {
    let (d_ap, d_an) = tuple_distances(g, emb, tuples)?;
    let anchor_classes: Vec<usize> = tuples.anchors().iter().map(|&a| labels[a]).collect();
    let b = g.gather_rows(beta, &anchor_classes)?;

    let pos = g.sub(d_ap, b)?;
    let pos = g.add_scalar(pos, alpha)?;
    let pos = g.max_with_zero(pos)?;
    let neg = g.sub(b, d_an)?;
    let neg = g.add_scalar(neg, alpha)?;
    let neg = g.max_with_zero(neg)?;

    let active = g
        .value(pos)
        .data()
        .iter()
        .chain(g.value(neg).data())
        .filter(|&&v| v > 0.0)
        .count()
        .max(1);
    let both = g.concat(&[pos, neg])?;
    let total = g.sum(both)?;
    g.scale(total, 1.0 / active as f64)
}
