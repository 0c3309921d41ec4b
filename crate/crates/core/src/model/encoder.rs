use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{LossConfig, ModelConfig, TrunkKind};
use crate::error::{Error, Result};
use crate::losses::metric_loss;
use crate::model::{class_param_name, Bound};
use crate::tensor::Tensor;

fn check_cols(g: &Graph, v: Var, cols: usize, what: &str) -> Result<()> {
    let [_, c] = g.shape(v);
    if c != cols {
        return Err(Error::Dimension(format!("{what} has {c} columns, expected {cols}")));
    }
    Ok(())
}

/// Global feature `y`. Affine layers with relu between them; the last layer
/// is linear. The identity trunk returns `x` itself.
pub fn trunk_forward(g: &mut Graph, x: Var, cfg: &ModelConfig, p: &Bound) -> Result<Var> {
    check_cols(g, x, cfg.input_dim, "trunk input")?;
    if cfg.trunk == TrunkKind::Identity {
        return Ok(x);
    }
    let layers = cfg.hidden.len() + 1;
    let mut h = x;
    for l in 0..layers {
        h = g.affine(h, p.get(&format!("trunk.{l}.weight"))?, p.get(&format!("trunk.{l}.bias"))?)?;
        if l + 1 < layers {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// Individual features `g_k(y)`, one affine map per branch.
pub fn heads_forward(g: &mut Graph, y: Var, cfg: &ModelConfig, p: &Bound) -> Result<Vec<Var>> {
    check_cols(g, y, cfg.feature_dim, "global feature")?;
    (0..cfg.k)
        .map(|k| g.affine(y, p.get(&format!("head.{k}.weight"))?, p.get(&format!("head.{k}.bias"))?))
        .collect()
}

/// Reconstructions of `y` from each branch. Features enter behind a
/// stop-gradient, so only the decoders learn from reconstruction.
pub fn decode(g: &mut Graph, features: &[Var], cfg: &ModelConfig, p: &Bound) -> Result<Vec<Var>> {
    if features.len() != cfg.k {
        return Err(Error::Dimension(format!("{} features for {} branches", features.len(), cfg.k)));
    }
    features
        .iter()
        .enumerate()
        .map(|(k, &f)| {
            check_cols(g, f, cfg.d, "individual feature")?;
            let f = g.stop_gradient(f)?;
            g.affine(f, p.get(&format!("decoder.{k}.weight"))?, p.get(&format!("decoder.{k}.bias"))?)
        })
        .collect()
}

/// `[batch, K]` reconstruction costs `||y_hat_k - y||`, with `y` held
/// constant.
pub fn reconstruction_errors(g: &mut Graph, y: Var, reconstructions: &[Var]) -> Result<Var> {
    let target = g.stop_gradient(y)?;
    let errors = reconstructions
        .iter()
        .map(|&r| {
            let diff = g.sub(r, target)?;
            g.row_norm(diff)
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat(&errors)
}

/// Mean over samples and branches of the reconstruction costs.
pub fn reconstruction_loss(g: &mut Graph, errors: Var) -> Result<Var> {
    g.mean(errors)
}

/// Branch with the lowest reconstruction cost per row; ties go to the
/// lower index.
pub fn assign_branch(errors: &Tensor) -> Result<Vec<usize>> {
    (0..errors.rows())
        .map(|i| {
            let row = errors.row(i);
            if let Some(k) = row.iter().position(|e| !e.is_finite()) {
                return Err(Error::NonFinite(format!("reconstruction cost of sample {i}, branch {k}")));
            }
            Ok(row
                .iter()
                .enumerate()
                .fold(0, |best, (k, &e)| if e < row[best] { k } else { best }))
        })
        .collect()
}

/// Per-branch discriminative losses over the samples each branch owns.
///
/// Branch features are unit-normalized before the loss. Each branch mines
/// with its own generator, seeded from `seed` and keyed by the first batch
/// index it owns, so the result does not depend on branch order. Returns
/// the sum and the per-branch terms; a branch without valid tuples
/// contributes `None`.
pub fn ensemble_loss(
    g: &mut Graph,
    features: &[Var],
    assignment: &[usize],
    labels: &[usize],
    loss: &LossConfig,
    p: &Bound,
    seed: u64,
) -> Result<(Option<Var>, Vec<Option<Var>>)> {
    let (kind, sampler) = loss.ensemble_loss();
    let mut terms = Vec::with_capacity(features.len());
    for (k, &f) in features.iter().enumerate() {
        let owned: Vec<usize> = (0..assignment.len()).filter(|&i| assignment[i] == k).collect();
        if owned.is_empty() {
            terms.push(None);
            continue;
        }
        let sub = g.gather_rows(f, &owned)?;
        let sub = g.l2_normalize(sub)?;
        let sub_labels: Vec<usize> = owned.iter().map(|&i| labels[i]).collect();
        let class_params = class_param_name("ind", kind, Some(k))
            .map(|name| p.get(&name))
            .transpose()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(owned[0] as u64);
        terms.push(metric_loss(g, sub, &sub_labels, kind, sampler, loss, class_params, &mut rng)?);
    }
    let mut total: Option<Var> = None;
    for t in terms.iter().flatten() {
        total = Some(match total {
            Some(acc) => g.add(acc, *t)?,
            None => *t,
        });
    }
    Ok((total, terms))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmin_with_ties() {
        let e = Tensor::from_rows(&[vec![0.5, 0.2, 0.9, 0.4], vec![0.3, 0.3, 1.0, 2.0]]).unwrap();
        assert_eq!(assign_branch(&e).unwrap(), vec![1, 0]);
        assert_eq!(assign_branch(&Tensor::column_vector(&[3.0, 0.0])).unwrap(), vec![0, 0]);
        let bad = Tensor::row_vector(&[0.1, f64::NAN]);
        assert!(assign_branch(&bad).unwrap_err().to_string().contains("branch 1"));
    }
}
