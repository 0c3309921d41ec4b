//! The ensemble encoder and the relational module, assembled as one
//! computation graph per batch.

pub mod encoder;
pub mod relational;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{Config, LossKind, ModelConfig, RelationNormalization, TrunkKind};
use crate::error::{Error, Result};
use crate::losses::metric_loss;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub use encoder::{assign_branch, decode, ensemble_loss, heads_forward, reconstruction_errors, reconstruction_loss, trunk_forward};
pub use relational::{
    distance, messages, meta_features, relation_aware_embedding, relation_matrix, relation_weights, update_features,
    MetaFeatures,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Proxy,
    Beta,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 2],
    pub kind: ParamKind,
}

/// Name of the per-class loss state for `kind`, if it has any. `branch`
/// selects a per-branch bank.
pub fn class_param_name(prefix: &str, kind: LossKind, branch: Option<usize>) -> Option<String> {
    let stem = match kind {
        LossKind::Triplet => return None,
        LossKind::Margin => "beta",
        LossKind::ProxyAnchor => "proxy",
    };
    Some(match branch {
        Some(k) => format!("{prefix}.{stem}.{k}"),
        None => format!("{prefix}.{stem}"),
    })
}

/// Every trainable tensor for `cfg` with `n_classes` training classes.
pub fn layout(cfg: &Config, n_classes: usize) -> Vec<ParamSpec> {
    let m = &cfg.model;
    let mut out = Vec::new();
    let mut affine = |prefix: String, rows: usize, cols: usize| {
        out.push(ParamSpec {
            name: format!("{prefix}.weight"),
            shape: [rows, cols],
            kind: ParamKind::Weight,
        });
        out.push(ParamSpec {
            name: format!("{prefix}.bias"),
            shape: [1, cols],
            kind: ParamKind::Bias,
        });
    };
    if m.trunk == TrunkKind::Mlp {
        let mut dims = vec![m.input_dim];
        dims.extend(&m.hidden);
        dims.push(m.feature_dim);
        for (l, w) in dims.windows(2).enumerate() {
            affine(format!("trunk.{l}"), w[0], w[1]);
        }
    }
    for k in 0..m.k {
        affine(format!("head.{k}"), m.feature_dim, m.d);
        affine(format!("decoder.{k}"), m.d, m.feature_dim);
        affine(format!("meta_a.{k}"), m.feature_dim, m.d);
        affine(format!("meta_b.{k}"), m.feature_dim, m.d);
    }
    affine("updater".into(), 2 * m.d, m.d_u);
    out.push(ParamSpec {
        name: "score.weight".into(),
        shape: [m.d, 1],
        kind: ParamKind::Weight,
    });
    if m.relation_normalization == RelationNormalization::Literal {
        out.push(ParamSpec {
            name: "score.bias".into(),
            shape: [1, 1],
            kind: ParamKind::Bias,
        });
    }

    let class_spec = |name: String, kind: LossKind, dim: usize| ParamSpec {
        name,
        shape: if kind == LossKind::Margin { [n_classes, 1] } else { [n_classes, dim] },
        kind: if kind == LossKind::Margin { ParamKind::Beta } else { ParamKind::Proxy },
    };
    let (ind, _) = cfg.loss.ensemble_loss();
    for k in 0..m.k {
        if let Some(name) = class_param_name("ind", ind, Some(k)) {
            out.push(class_spec(name, ind, m.d));
        }
    }
    let (emb, _) = cfg.loss.embedding_loss();
    if let Some(name) = class_param_name("emb", emb, None) {
        out.push(class_spec(name, emb, m.embedding_dim()));
    }
    out.sort_by(|a, b| a.name.cmp(&b.name));
    out
}

/// Parameter leaves of one graph, by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("parameter `{name}` is not bound")))
    }
}

/// Adds every stored parameter to `g` as a leaf.
pub fn bind(g: &mut Graph, store: &ParameterStore) -> Result<Bound> {
    let mut vars = BTreeMap::new();
    for (name, t) in store.iter() {
        vars.insert(name.to_string(), g.param(name, t.clone())?);
    }
    Ok(Bound { vars })
}

/// One batch pushed through the encoder and the relational module.
pub struct Forward {
    pub graph: Graph,
    pub params: Bound,
    pub x: Var,
    pub y: Var,
    pub features: Vec<Var>,
    pub reconstructions: Vec<Var>,
    pub recon_errors: Var,
    pub assignment: Vec<usize>,
    pub meta: MetaFeatures,
    /// Per target branch, `[batch, K]` weights over source branches.
    pub relation_weights: Vec<Var>,
    pub updated: Vec<Var>,
    pub z: Var,
}

pub fn forward(cfg: &ModelConfig, store: &ParameterStore, x: &Tensor) -> Result<Forward> {
    let mut g = Graph::new();
    let params = bind(&mut g, store)?;
    let x = g.input("x", x.clone())?;
    let y = trunk_forward(&mut g, x, cfg, &params)?;
    let features = heads_forward(&mut g, y, cfg, &params)?;
    let reconstructions = decode(&mut g, &features, cfg, &params)?;
    let recon_errors = reconstruction_errors(&mut g, y, &reconstructions)?;
    let assignment = assign_branch(g.value(recon_errors))?;
    let meta = meta_features(&mut g, y, cfg, &params)?;
    let relations = relation_matrix(&mut g, &meta)?;
    let relation_weights = relation_weights(&mut g, &relations, cfg, &params)?;
    let msgs = messages(&mut g, &features, &relation_weights)?;
    let updated = update_features(&mut g, &features, &msgs, &params)?;
    let z = relation_aware_embedding(&mut g, &updated, cfg.normalize_embedding)?;
    Ok(Forward {
        graph: g,
        params,
        x,
        y,
        features,
        reconstructions,
        recon_errors,
        assignment,
        meta,
        relation_weights,
        updated,
        z,
    })
}

/// The three loss terms and their weighted sum. Terms with zero weight are
/// left out of `total`; a term without valid tuples is `None`.
#[derive(Clone, Debug)]
pub struct Objective {
    pub ensem: Option<Var>,
    pub branch_terms: Vec<Option<Var>>,
    pub recon: Var,
    pub emb: Option<Var>,
    pub total: Var,
}

impl Objective {
    /// `(J, J_ensem, J_recon, J_emb)`, with missing terms read as zero.
    pub fn values(&self, g: &Graph) -> (f64, f64, f64, f64) {
        let read = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v));
        (g.scalar(self.total), read(self.ensem), g.scalar(self.recon), read(self.emb))
    }
}

/// Builds the training objective on top of `fwd`. `labels` are class
/// indices into the per-class parameters. Branch mining is seeded by
/// `ensemble_seed`; embedding mining draws from `emb_rng`.
pub fn objective<R: Rng + ?Sized>(
    fwd: &mut Forward,
    labels: &[usize],
    cfg: &Config,
    ensemble_seed: u64,
    emb_rng: &mut R,
) -> Result<Objective> {
    let g = &mut fwd.graph;
    let (ensem, branch_terms) = ensemble_loss(
        g,
        &fwd.features,
        &fwd.assignment,
        labels,
        &cfg.loss,
        &fwd.params,
        ensemble_seed,
    )?;
    let recon = reconstruction_loss(g, fwd.recon_errors)?;

    let (kind, sampler) = cfg.loss.embedding_loss();
    let z = if cfg.model.normalize_embedding { fwd.z } else { g.l2_normalize(fwd.z)? };
    let class_params = class_param_name("emb", kind, None)
        .map(|name| fwd.params.get(&name))
        .transpose()?;
    let emb = metric_loss(g, z, labels, kind, sampler, &cfg.loss, class_params, emb_rng)?;

    let t = &cfg.train;
    let mut total: Option<Var> = None;
    for (term, weight) in [(ensem, t.ensemble_weight), (Some(recon), t.lambda1), (emb, t.lambda2)] {
        let Some(term) = term.filter(|_| weight != 0.0) else {
            continue;
        };
        let scaled = if weight == 1.0 { term } else { g.scale(term, weight)? };
        total = Some(match total {
            Some(acc) => g.add(acc, scaled)?,
            None => scaled,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0))?,
    };
    Ok(Objective {
        ensem,
        branch_terms,
        recon,
        emb,
        total,
    })
}

/// Which representation to read out at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingKind {
    /// The relation-aware embedding `z`.
    Relational,
    /// Unit-normalized individual features, concatenated.
    Concat,
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingKind::Relational => "relational",
            EmbeddingKind::Concat => "concat",
        })
    }
}

impl FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relational" => Ok(EmbeddingKind::Relational),
            "concat" => Ok(EmbeddingKind::Concat),
            _ => Err(Error::InvalidArgument(format!(
                "unknown embedding kind `{s}` (expected relational or concat)"
            ))),
        }
    }
}

const EMBED_CHUNK: usize = 256;

/// Embeds every row of `x`, a chunk at a time.
pub fn embed(cfg: &ModelConfig, store: &ParameterStore, x: &Tensor, kind: EmbeddingKind) -> Result<Tensor> {
    let n = x.rows();
    let mut rows = Vec::new();
    let mut cols = 0;
    for start in (0..n).step_by(EMBED_CHUNK) {
        let idx: Vec<usize> = (start..(start + EMBED_CHUNK).min(n)).collect();
        let mut fwd = forward(cfg, store, &x.gather_rows(&idx))?;
        let out = match kind {
            EmbeddingKind::Relational => fwd.z,
            EmbeddingKind::Concat => {
                let g = &mut fwd.graph;
                let parts = fwd
                    .features
                    .iter()
                    .map(|&f| g.l2_normalize(f))
                    .collect::<Result<Vec<_>>>()?;
                g.concat(&parts)?
            }
        };
        let value = fwd.graph.value(out);
        cols = value.cols();
        rows.extend_from_slice(value.data());
    }
    Tensor::new(vec![n, cols], rows)
}
