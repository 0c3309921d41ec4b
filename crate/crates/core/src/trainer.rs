//! Parameter initialization, the Adam optimizer and the training loop.

use std::collections::BTreeMap;

use log::{debug, error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{check_gradients, GradReport};
use crate::config::{Config, SamplerKind, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{build_batch, BatchStrategy};
use crate::model::{self, layout, Forward, Objective, ParamKind};
use crate::params::{Group, ParameterStore};
use crate::tensor::{l2_norm, Tensor};

const INIT_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 1;
const ENSEMBLE_STREAM: u64 = 2;
const EMBEDDING_STREAM: u64 = 3;

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fresh parameters: affine weights uniform in `+-sqrt(1/fan_in)`, zero
/// biases, unit-norm gaussian proxies and boundaries at their initial value.
pub fn init_params(cfg: &Config, n_classes: usize, seed: u64) -> Result<ParameterStore> {
    let mut rng = stream(seed, INIT_STREAM);
    let mut store = ParameterStore::new();
    for spec in layout(cfg, n_classes) {
        let [rows, cols] = spec.shape;
        let t = match spec.kind {
            ParamKind::Weight => {
                let bound = (1.0 / rows as f64).sqrt();
                let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(vec![rows, cols], data)?
            }
            ParamKind::Bias => Tensor::zeros(&[rows, cols]),
            ParamKind::Beta => Tensor::filled(&[rows, cols], cfg.loss.margin_beta_init),
            ParamKind::Proxy => {
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let row: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
                    let n = l2_norm(&row);
                    data.extend(row.into_iter().map(|x| x / n));
                }
                Tensor::new(vec![rows, cols], data)?
            }
        };
        store.insert(spec.name, t)?;
    }
    Ok(store)
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: i32,
}

/// Adam with bias correction and a step counter per parameter. A parameter
/// whose gradient is exactly zero is left untouched, moments included.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            state: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) {
        if grad.data().iter().all(|&g| g == 0.0) {
            return;
        }
        let s = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: Tensor::zeros(grad.shape()),
            v: Tensor::zeros(grad.shape()),
            t: 0,
        });
        s.t += 1;
        let c1 = 1.0 - self.beta1.powi(s.t);
        let c2 = 1.0 - self.beta2.powi(s.t);
        let (m, v) = (s.m.data_mut(), s.v.data_mut());
        for (i, (&g, p)) in grad.data().iter().zip(param.data_mut()).enumerate() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Fraction of samples assigned to each of `k` branches.
pub fn branch_usage(assignment: &[usize], k: usize) -> Result<Vec<f64>> {
    if assignment.is_empty() {
        return Err(Error::InvalidArgument("no assignments recorded".into()));
    }
    let mut counts = vec![0usize; k];
    for &a in assignment {
        let slot = counts
            .get_mut(a)
            .ok_or_else(|| Error::InvalidArgument(format!("assignment {a} outside {k} branches")))?;
        *slot += 1;
    }
    Ok(counts.iter().map(|&c| c as f64 / assignment.len() as f64).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub j: f64,
    pub j_ensem: f64,
    pub j_recon: f64,
    pub j_emb: f64,
    pub usage: Vec<f64>,
}

/// Batch sampling matched to the ensemble loss's sampler: random sampling
/// draws uniform batches, the miners get class-balanced ones.
pub fn batch_strategy(cfg: &Config, n_samples: usize, n_classes: usize) -> BatchStrategy {
    let t = &cfg.train;
    let (_, sampler) = cfg.loss.ensemble_loss();
    if sampler == SamplerKind::Random {
        BatchStrategy::Random {
            size: t.batch_size.min(n_samples),
        }
    } else {
        BatchStrategy::Balanced {
            classes: (t.batch_size / t.samples_per_class).clamp(1, n_classes),
            per_class: t.samples_per_class,
        }
    }
}

/// Training state: parameters, optimizer and the random streams.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: Config,
    pub params: ParameterStore,
    adam: Adam,
    classes: Vec<u32>,
    batch_rng: ChaCha8Rng,
    ensemble_rng: ChaCha8Rng,
    embedding_rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    /// Fresh parameters for the classes of `classes` (sorted, distinct).
    pub fn new(cfg: Config, classes: Vec<u32>) -> Result<Self> {
        cfg.validate()?;
        if classes.is_empty() || classes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("training classes must be distinct and sorted".into()));
        }
        let seed = cfg.train.seed;
        let params = init_params(&cfg, classes.len(), seed)?;
        Ok(Self {
            adam: Adam::from_config(&cfg.train),
            params,
            classes,
            batch_rng: stream(seed, BATCH_STREAM),
            ensemble_rng: stream(seed, ENSEMBLE_STREAM),
            embedding_rng: stream(seed, EMBEDDING_STREAM),
            step: 0,
            cfg,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    /// Maps dataset labels to rows of the per-class parameters.
    pub fn class_indices(&self, labels: &[u32]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| {
                self.classes
                    .binary_search(l)
                    .map_err(|_| Error::InvalidArgument(format!("label {l} is not a training class")))
            })
            .collect()
    }

    /// Builds the graph and objective for one batch without touching the
    /// parameters. Consumes one draw from each mining stream.
    pub fn objective(&mut self, x: &Tensor, labels: &[usize]) -> Result<(Forward, Objective)> {
        let mut fwd = model::forward(&self.cfg.model, &self.params, x)?;
        let seed: u64 = self.ensemble_rng.random();
        let obj = model::objective(&mut fwd, labels, &self.cfg, seed, &mut self.embedding_rng)?;
        Ok((fwd, obj))
    }

    /// One optimization step on a fresh batch from `data`.
    pub fn step(&mut self, data: &Dataset) -> Result<StepReport> {
        let saved = (self.batch_rng.clone(), self.ensemble_rng.clone(), self.embedding_rng.clone());
        let result = (|| {
            let strategy = batch_strategy(&self.cfg, data.len(), self.classes.len());
            let idx = build_batch(&data.labels, strategy, &mut self.batch_rng)?;
            let x = data.features.gather_rows(&idx);
            let labels: Vec<u32> = idx.iter().map(|&i| data.labels[i]).collect();
            let labels = self.class_indices(&labels)?;
            self.step_on(&x, &labels)
        })();
        if result.is_err() {
            (self.batch_rng, self.ensemble_rng, self.embedding_rng) = saved;
        }
        result
    }

    /// One optimization step on the given batch. On failure nothing changes
    /// except the mining streams, which the caller may restore.
    pub fn step_on(&mut self, x: &Tensor, labels: &[usize]) -> Result<StepReport> {
        let (fwd, obj) = self.objective(x, labels)?;
        let g = &fwd.graph;
        let (j, j_ensem, j_recon, j_emb) = obj.values(g);
        if ![j, j_ensem, j_recon, j_emb].iter().all(|v| v.is_finite()) {
            let msg = format!(
                "loss at step {}: J={j} J_ensem={j_ensem} J_recon={j_recon} J_emb={j_emb}",
                self.step
            );
            error!("aborting step: non-finite {msg}");
            return Err(Error::NonFinite(msg));
        }
        let grads = g.backward(obj.total)?.into_params();
        if let Some((name, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
            let msg = format!("gradient of `{name}` at step {}", self.step);
            error!("aborting step: non-finite {msg}");
            return Err(Error::NonFinite(msg));
        }

        let t = &self.cfg.train;
        for (name, grad) in &grads {
            let lr = if name.starts_with("trunk.") { t.lr_trunk } else { t.lr_heads };
            let param = self.params.get_mut(name).expect("graph parameters come from the store");
            self.adam.update(name, param, grad, lr);
            if name.contains(".beta") {
                let floor = self.cfg.loss.margin_beta_floor;
                for b in param.data_mut() {
                    *b = b.max(floor);
                }
            }
        }

        let report = StepReport {
            step: self.step,
            j,
            j_ensem,
            j_recon,
            j_emb,
            usage: branch_usage(&fwd.assignment, self.cfg.model.k)?,
        };
        debug!("step {} J={j:.6}", self.step);
        self.step += 1;
        Ok(report)
    }
}

/// Runs `cfg.train.steps` steps on `data`, calling `on_step` after each.
pub fn train(cfg: &Config, data: &Dataset, mut on_step: impl FnMut(&StepReport)) -> Result<Trainer> {
    let mut trainer = Trainer::new(cfg.clone(), data.classes())?;
    for _ in 0..cfg.train.steps {
        let report = trainer.step(data)?;
        on_step(&report);
    }
    Ok(trainer)
}

/// Finite-difference check of the full-objective gradient on one batch.
///
/// The analytic gradient comes from the weighted total. Each parameter is
/// probed against the weighted term of its own group, with branch
/// assignment and mined tuples frozen. Groups whose term is inactive are
/// skipped.
pub fn check_objective_gradients(trainer: &mut Trainer, x: &Tensor, labels: &[usize], step: f64) -> Result<GradReport> {
    let (mut fwd, obj) = trainer.objective(x, labels)?;
    let analytic = fwd.graph.backward(obj.total)?.into_params();
    let t = &trainer.cfg.train;
    let owners = [
        (Group::Ensemble, obj.ensem, t.ensemble_weight),
        (Group::Decoder, Some(obj.recon), t.lambda1),
        (Group::Relational, obj.emb, t.lambda2),
    ];
    let mut report = GradReport::default();
    for (group, term, weight) in owners {
        let Some(term) = term.filter(|_| weight != 0.0) else {
            continue;
        };
        let params: BTreeMap<String, Tensor> = trainer
            .params
            .group(group)
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let grads: BTreeMap<String, Tensor> = analytic
            .iter()
            .filter(|(n, _)| params.contains_key(*n))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        let g = &mut fwd.graph;
        let r = check_gradients(&params, &grads, step, |probe| {
            g.forward(probe)?;
            Ok(weight * g.scalar(term))
        });
        g.forward(&params)?;
        report.merge(r?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_ratios() {
        assert_eq!(branch_usage(&[0, 0, 0], 4).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        let mut a = vec![0; 10];
        a.extend([1; 30]);
        a.extend([2; 40]);
        a.extend([3; 20]);
        assert_eq!(branch_usage(&a, 4).unwrap(), vec![0.1, 0.3, 0.4, 0.2]);
        assert!(branch_usage(&[], 2).is_err());
        assert!(branch_usage(&[2], 2).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        let mut p = Tensor::row_vector(&[1.0, 2.0]);
        adam.update("w", &mut p, &Tensor::row_vector(&[0.5, -3.0]), 0.1);
        assert!((p.data()[0] - 0.9).abs() < 1e-7 && (p.data()[1] - 2.1).abs() < 1e-7);
        let before = p.clone();
        adam.update("w", &mut p, &Tensor::row_vector(&[0.0, 0.0]), 0.1);
        assert_eq!(p, before);
    }

    #[test]
    fn init_rules() {
        let cfg = Config::default();
        let a = init_params(&cfg, 3, 5).unwrap();
        assert!(a.bits_equal(&init_params(&cfg, 3, 5).unwrap()));
        for (name, t) in a.iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&x| x == 0.0), "{name}");
            } else if name.ends_with(".weight") {
                let bound = (1.0 / t.rows() as f64).sqrt();
                assert!(t.data().iter().all(|x| x.abs() <= bound), "{name}");
            }
        }
    }
}
