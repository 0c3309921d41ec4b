use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::losses::TupleBatch;

/// Hinge on one triplet: `max(0, d_ap - d_an + margin)`.
pub fn triplet_loss(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

/// Anchor-positive and anchor-negative distances for every tuple, each `[T, 1]`.
pub(crate) fn tuple_distances(g: &mut Graph, emb: Var, tuples: &TupleBatch) -> Result<(Var, Var)> {
    let a = g.gather_rows(emb, &tuples.anchors())?;
    let p = g.gather_rows(emb, &tuples.positives())?;
    let n = g.gather_rows(emb, &tuples.negatives())?;
    let ap = g.sub(a, p)?;
    let an = g.sub(a, n)?;
    Ok((g.row_norm(ap)?, g.row_norm(an)?))
}

/// Mean triplet hinge over `tuples`, which must be nonempty.
pub fn triplet_graph(g: &mut Graph, emb: Var, tuples: &TupleBatch, margin: f64) -> Result<Var> {
    let (d_ap, d_an) = tuple_distances(g, emb, tuples)?;
    let diff = g.sub(d_ap, d_an)?;
    let shifted = g.add_scalar(diff, margin)?;
    let hinge = g.max_with_zero(shifted)?;
    g.mean(hinge)
}
