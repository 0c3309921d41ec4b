use crate::autodiff::{Graph, Var};
use crate::config::{ModelConfig, RelationNormalization};
use crate::error::{Error, Result};
use crate::model::Bound;
use crate::tensor::{euclidean, Tensor};

/// Literal normalization offset.
pub const LITERAL_EPS: f64 = 1e-8;

pub struct MetaFeatures {
    pub a: Vec<Var>,
    pub b: Vec<Var>,
}

/// The two sets of meta-relational features, computed from a
/// stop-gradient copy of `y`.
pub fn meta_features(g: &mut Graph, y: Var, cfg: &ModelConfig, p: &Bound) -> Result<MetaFeatures> {
    let [_, c] = g.shape(y);
    if c != cfg.feature_dim {
        return Err(Error::Dimension(format!("global feature has {c} columns, expected {}", cfg.feature_dim)));
    }
    let y = g.stop_gradient(y)?;
    let mut heads = |prefix: &str| -> Result<Vec<Var>> {
        (0..cfg.k)
            .map(|k| {
                g.affine(y, p.get(&format!("{prefix}.{k}.weight"))?, p.get(&format!("{prefix}.{k}.bias"))?)
            })
            .collect()
    };
    let a = heads("meta_a")?;
    let b = heads("meta_b")?;
    Ok(MetaFeatures { a, b })
}

/// `r[i][j] = a_i - b_j`.
pub fn relation_matrix(g: &mut Graph, meta: &MetaFeatures) -> Result<Vec<Vec<Var>>> {
    meta.a
        .iter()
        .map(|&a| meta.b.iter().map(|&b| g.sub(a, b)).collect())
        .collect()
}

/// Normalized relational weights. Entry `i` of the result is a
/// `[batch, K]` matrix whose column `j` weighs source `j` in the message to
/// target `i`; the score of that edge is `w . relu(a_j - b_i)`.
pub fn relation_weights(
    g: &mut Graph,
    relations: &[Vec<Var>],
    cfg: &ModelConfig,
    p: &Bound,
) -> Result<Vec<Var>> {
    let k = relations.len();
    let w = p.get("score.weight")?;
    let bias = match cfg.relation_normalization {
        RelationNormalization::Literal => Some(p.get("score.bias")?),
        RelationNormalization::Softmax => None,
    };
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let scores = (0..k)
            .map(|j| {
                let r = g.relu(relations[j][i])?;
                let s = g.matmul(r, w)?;
                match bias {
                    Some(b) => g.add(s, b),
                    None => Ok(s),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let scores = g.concat(&scores)?;
        out.push(match cfg.relation_normalization {
            RelationNormalization::Softmax => g.softmax_rows(scores)?,
            RelationNormalization::Literal => literal_normalize(g, scores, i)?,
        });
    }
    Ok(out)
}

fn literal_normalize(g: &mut Graph, scores: Var, target: usize) -> Result<Var> {
    let [_, k] = g.shape(scores);
    let ones = g.constant(Tensor::filled(&[k, 1], 1.0))?;
    let total = g.matmul(scores, ones)?;
    let sums = g.value(total);
    if let Some(row) = (0..sums.rows()).find(|&r| sums.get(r, 0).abs() < LITERAL_EPS) {
        return Err(Error::InvalidArgument(format!(
            "relational scores into branch {target} sum to {:e} for sample {row}; \
             literal normalization needs |sum| >= {LITERAL_EPS:e}",
            sums.get(row, 0)
        )));
    }
    let denom = g.add_scalar(total, LITERAL_EPS)?;
    g.div(scores, denom)
}

/// `M_i = sum_j r[i][:, j] * g_j` over stop-gradient copies of the features.
pub fn messages(g: &mut Graph, features: &[Var], weights: &[Var]) -> Result<Vec<Var>> {
    let frozen = features
        .iter()
        .map(|&f| g.stop_gradient(f))
        .collect::<Result<Vec<_>>>()?;
    weights
        .iter()
        .map(|&r| {
            let mut acc: Option<Var> = None;
            for (j, &f) in frozen.iter().enumerate() {
                let rj = g.slice_cols(r, j, 1)?;
                let term = g.mul(rj, f)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, term)?,
                    None => term,
                });
            }
            acc.ok_or_else(|| Error::InvalidArgument("no features to pass messages between".into()))
        })
        .collect()
}

/// `g^u_i = U [g_i ; M_i]` with one updater shared by every branch.
pub fn update_features(g: &mut Graph, features: &[Var], messages: &[Var], p: &Bound) -> Result<Vec<Var>> {
    if features.len() != messages.len() {
        return Err(Error::Dimension(format!("{} features, {} messages", features.len(), messages.len())));
    }
    let (w, b) = (p.get("updater.weight")?, p.get("updater.bias")?);
    features
        .iter()
        .zip(messages)
        .map(|(&f, &m)| {
            let f = g.stop_gradient(f)?;
            let joined = g.concat(&[f, m])?;
            g.affine(joined, w, b)
        })
        .collect()
}

/// Concatenation of the updated features in branch order, optionally scaled
/// to unit rows.
pub fn relation_aware_embedding(g: &mut Graph, updated: &[Var], normalize: bool) -> Result<Var> {
    let z = g.concat(updated)?;
    if !normalize {
        return Ok(z);
    }
    let values = g.value(z);
    if let Some(r) = (0..values.rows()).find(|&r| values.row(r).iter().all(|&x| x == 0.0)) {
        return Err(Error::InvalidArgument(format!("embedding of sample {r} is zero and cannot be normalized")));
    }
    g.l2_normalize(z)
}

/// Euclidean distance between two embeddings.
pub fn distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("embeddings of {} and {} dims", a.len(), b.len())));
    }
    Ok(euclidean(a, b))
}
