//! Central finite-difference validation of analytic gradients.

use std::collections::BTreeMap;

use crate::autodiff::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Worst element-wise relative error per parameter.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_error: BTreeMap<String, f64>,
    /// Number of loss evaluations spent probing.
    pub evaluations: usize,
}

impl GradReport {
    pub fn max(&self) -> f64 {
        self.max_rel_error.values().copied().fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.max_rel_error
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }

    pub fn merge(&mut self, other: GradReport) {
        self.evaluations += other.evaluations;
        for (k, v) in other.max_rel_error {
            let e = self.max_rel_error.entry(k).or_insert(0.0);
            *e = e.max(v);
        }
    }
}

/// Denominator floor of [`relative_error`]. Central differences with a
/// step near `1e-5` carry roundoff around `1e-10`, so smaller components
/// are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

/// `|a - f| / max(|a|, |f|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares `analytic` against `(f(p + h) - f(p - h)) / 2h` for every element
/// of every parameter named in `analytic`.
pub fn check_gradients<F>(
    params: &BTreeMap<String, Tensor>,
    analytic: &BTreeMap<String, Tensor>,
    step: f64,
    mut loss: F,
) -> Result<GradReport>
where
    F: FnMut(&BTreeMap<String, Tensor>) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let mut probe = params.clone();
    let mut report = GradReport::default();
    for (name, grad) in analytic {
        let base = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter `{name}`")))?;
        if base.shape() != grad.shape() {
            return Err(Error::Dimension(format!(
                "gradient of `{name}` has shape {:?}, parameter {:?}",
                grad.shape(),
                base.shape()
            )));
        }
        let mut worst = 0.0_f64;
        for i in 0..base.len() {
            let mut eval = |delta: f64| -> Result<f64> {
                let t = probe.get_mut(name).expect("present");
                t.data_mut()[i] = base.data()[i] + delta;
                let v = loss(&probe)?;
                report.evaluations += 1;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("loss while probing `{name}`[{i}]")));
                }
                Ok(v)
            };
            let plus = eval(step)?;
            let minus = eval(-step)?;
            probe.get_mut(name).expect("present").data_mut()[i] = base.data()[i];
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
        report.max_rel_error.insert(name.clone(), worst);
    }
    Ok(report)
}

/// Gradient check of one loss node of a graph, over the parameters selected
/// by `include`. The graph structure (gathers, masks, frozen selections) is
/// reused for every probe and its values are restored afterwards.
pub fn check_graph(
    graph: &mut Graph,
    loss: Var,
    step: f64,
    include: impl Fn(&str) -> bool,
) -> Result<GradReport> {
    let grads = graph.backward(loss)?;
    let params: BTreeMap<String, Tensor> = graph
        .parameters()
        .filter(|(name, _)| include(name))
        .map(|(name, v)| (name.to_owned(), graph.value(v).clone()))
        .collect();
    let analytic: BTreeMap<String, Tensor> = grads
        .into_params()
        .into_iter()
        .filter(|(name, _)| params.contains_key(name))
        .collect();
    let report = check_gradients(&params, &analytic, step, |probe| {
        graph.forward(probe)?;
        Ok(graph.scalar(loss))
    });
    graph.forward(&params)?;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_at_two() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::scalar(2.0)).unwrap();
        let w2 = g.mul(w, w).unwrap();
        let w3 = g.mul(w2, w).unwrap();
        let loss = g.sum(w3).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!((grads.get("w").unwrap().item() - 12.0).abs() < 1e-12);
        let report = check_graph(&mut g, loss, 1e-5, |_| true).unwrap();
        assert!(report.max() < 1e-7, "{report:?}");
        assert_eq!(report.evaluations, 2);
        // values restored
        assert_eq!(g.scalar(loss), 8.0);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let p = BTreeMap::new();
        assert!(check_gradients(&p, &p, 0.0, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn non_finite_probe_names_parameter() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::scalar(1e-6)).unwrap();
        let l = g.log(w).unwrap();
        let loss = g.sum(l).unwrap();
        let err = check_graph(&mut g, loss, 1e-5, |_| true).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-4).abs() < 1e-16);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-16);
    }
}
