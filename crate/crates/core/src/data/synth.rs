use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::SynthConfig;
use crate::data::Dataset;
use crate::tensor::{l2_norm, Tensor};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Synthetic labelled data: a per-class mean, plus one nuisance component
/// per latent factor, plus isotropic noise.
///
/// Factor `f` owns the coordinate block `[f * w, (f + 1) * w)` with
/// `w = input_dim / n_factors` and moves each sample along a fixed unit
/// direction inside that block by a gaussian amount shared by no other
/// sample. Samples are ordered by class; labels are `0..n_classes`.
pub fn gen_synthetic(cfg: &SynthConfig) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.input_dim;
    let block = dim / cfg.n_factors.max(1);

    let means: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| (0..dim).map(|_| cfg.class_scale * normal(&mut rng)).collect())
        .collect();
    let directions: Vec<Vec<f64>> = (0..cfg.n_factors)
        .map(|_| {
            let v: Vec<f64> = (0..block).map(|_| normal(&mut rng)).collect();
            let n = l2_norm(&v);
            if n > 0.0 {
                v.into_iter().map(|x| x / n).collect()
            } else {
                v
            }
        })
        .collect();

    let n = cfg.n_classes * cfg.samples_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..cfg.samples_per_class {
            let mut x = mean.clone();
            for (f, dir) in directions.iter().enumerate() {
                let coef = cfg.factor_scale * normal(&mut rng);
                for (slot, u) in x[f * block..(f + 1) * block].iter_mut().zip(dir) {
                    *slot += coef * u;
                }
            }
            for slot in x.iter_mut() {
                *slot += cfg.noise_scale * normal(&mut rng);
            }
            data.extend(x);
            labels.push(c as u32);
        }
    }
    let features = Tensor::new(vec![n, dim], data).expect("synthetic sizes validated");
    Dataset { features, labels }
}
