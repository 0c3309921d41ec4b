//! Discriminative metric losses and the tuple miners that feed them.
//!
//! All losses work on unsquared Euclidean distances between unit-norm rows.

mod batch;
mod margin;
mod proxy_anchor;
pub mod sampling;
mod triplet;

use rand::Rng;

pub use batch::{build_batch, build_batch_seeded, BatchStrategy};
pub use margin::{margin_graph, margin_loss};
pub use proxy_anchor::proxy_anchor_graph;
pub use triplet::{triplet_graph, triplet_loss};

use crate::autodiff::{Graph, Var};
use crate::config::{LossConfig, LossKind, SamplerKind};
use crate::error::{Error, Result};
use crate::metrics::pairwise_distances;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Mined tuples, as indices into the batch.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TupleBatch {
    pub triplets: Vec<Triplet>,
}

impl From<Vec<Triplet>> for TupleBatch {
    fn from(triplets: Vec<Triplet>) -> Self {
        Self { triplets }
    }
}

impl TupleBatch {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn anchors(&self) -> Vec<usize> {
        self.triplets.iter().map(|t| t.anchor).collect()
    }

    pub fn positives(&self) -> Vec<usize> {
        self.triplets.iter().map(|t| t.positive).collect()
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.triplets.iter().map(|t| t.negative).collect()
    }
}

/// Mines tuples from the current values of `emb` (unit rows).
pub fn mine<R: Rng + ?Sized>(
    g: &Graph,
    emb: Var,
    labels: &[usize],
    sampler: SamplerKind,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<TupleBatch> {
    let values = g.value(emb);
    match sampler {
        SamplerKind::SemiHard => Ok(sampling::semi_hard_sample(
            &pairwise_distances(values),
            labels,
            cfg.triplet_margin,
            rng,
        )),
        SamplerKind::DistanceWeighted => sampling::distance_weighted_sample(
            values,
            labels,
            cfg.dw_min_distance,
            cfg.dw_cutoff,
            rng,
        ),
        SamplerKind::Random => Ok(sampling::random_negative_sample(labels, rng)),
    }
}

/// One discriminative loss over a batch of unit-norm embeddings.
///
/// `class_params` holds the proxies (`[classes, dim]`) for proxy-anchor or
/// the boundaries (`[classes, 1]`) for the margin loss; labels index its
/// rows. Returns `None` when the batch admits no valid tuple, meaning the
/// term contributes exactly zero.
pub fn metric_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    emb: Var,
    labels: &[usize],
    kind: LossKind,
    sampler: SamplerKind,
    cfg: &LossConfig,
    class_params: Option<Var>,
    rng: &mut R,
) -> Result<Option<Var>> {
    if labels.len() != g.shape(emb)[0] {
        return Err(Error::Dimension(format!(
            "{} labels for {} embeddings",
            labels.len(),
            g.shape(emb)[0]
        )));
    }
    let class_params = || {
        class_params.ok_or_else(|| Error::InvalidArgument(format!("{kind} loss needs class parameters")))
    };
    match kind {
        LossKind::Triplet => {
            let tuples = mine(g, emb, labels, sampler, cfg, rng)?;
            if tuples.is_empty() {
                return Ok(None);
            }
            triplet_graph(g, emb, &tuples, cfg.triplet_margin).map(Some)
        }
        LossKind::Margin => {
            let beta = class_params()?;
            let tuples = mine(g, emb, labels, sampler, cfg, rng)?;
            if tuples.is_empty() {
                return Ok(None);
            }
            margin_graph(g, emb, labels, &tuples, beta, cfg.margin_alpha).map(Some)
        }
        LossKind::ProxyAnchor => {
            if labels.is_empty() {
                return Ok(None);
            }
            let proxies = class_params()?;
            proxy_anchor_graph(g, emb, labels, proxies, cfg.proxy_alpha, cfg.proxy_delta).map(Some)
        }
    }
}
