use std::collections::BTreeSet;

use drml::checkpoint::{load_checkpoint, save_checkpoint};
use drml::config::{Config, LossKind, SynthConfig, TrunkKind};
use drml::data::{gen_synthetic, load_features, load_matrix, save_features, save_matrix, zero_shot_split, Dataset};
use drml::params::ParameterStore;
use drml::trainer::{init_params, train};
use drml::Tensor;
use proptest::prelude::*;

fn small_config() -> Config {
    let mut cfg = Config::default();
    cfg.model.input_dim = 8;
    cfg.model.trunk = TrunkKind::Mlp;
    cfg.model.feature_dim = 6;
    cfg.model.k = 2;
    cfg.model.d = 4;
    cfg.model.d_u = 3;
    cfg.loss.kind = LossKind::Margin;
    cfg.train.batch_size = 8;
    cfg.train.samples_per_class = 2;
    cfg.train.steps = 3;
    cfg.synth = SynthConfig {
        n_classes: 6,
        samples_per_class: 5,
        input_dim: 8,
        n_factors: 2,
        ..Default::default()
    };
    cfg
}

fn without(store: &ParameterStore, skip: &str) -> ParameterStore {
    let mut out = ParameterStore::new();
    for (name, t) in store.iter().filter(|(n, _)| *n != skip) {
        out.insert(name, t.clone()).unwrap();
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fmat_round_trips_single_precision_values(
        (rows, cols, values) in (1usize..8, 1usize..6).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), r * c))),
        labelled in any::<bool>(),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fmat");
        let m = Tensor::new(vec![rows, cols], values.iter().map(|&v| f64::from(v)).collect()).unwrap();
        let labels: Vec<u32> = (0..rows as u32).map(|i| i * 3).collect();
        save_matrix(&path, &m, labelled.then_some(&labels[..])).unwrap();
        let (back, got) = load_matrix(&path).unwrap();
        prop_assert_eq!(back.shape(), m.shape());
        prop_assert!(back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(got, labelled.then_some(labels));
    }

    #[test]
    fn split_partitions_by_class(labels in prop::collection::vec(0u32..20, 2..40)) {
        let n = labels.len();
        let data = Dataset::new(Tensor::zeros(&[n, 1]), labels.clone()).unwrap();
        let classes = data.classes();
        match zero_shot_split(&data) {
            Err(_) => prop_assert!(classes.len() < 2),
            Ok((train, test)) => {
                let a: BTreeSet<u32> = train.labels.iter().copied().collect();
                let b: BTreeSet<u32> = test.labels.iter().copied().collect();
                prop_assert!(a.is_disjoint(&b));
                prop_assert_eq!(train.len() + test.len(), n);
                prop_assert_eq!(a.len(), classes.len().div_ceil(2));
                prop_assert!(a.iter().max() < b.iter().min());
            }
        }
    }

    #[test]
    fn config_survives_toml(seed in any::<u64>(), k in 1usize..9, lambda in 0.0..20.0f64) {
        let mut cfg = Config::default();
        cfg.train.seed = seed;
        cfg.model.k = k;
        cfg.train.lambda2 = lambda;
        let back = Config::parse(&cfg.to_toml()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.digest(), cfg.digest());
    }
}

#[test]
fn synthetic_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.fmat");
    let data = gen_synthetic(&small_config().synth);
    save_features(&path, &data).unwrap();
    let back = load_features(&path).unwrap();
    assert_eq!(back.labels, data.labels);
    let again = load_features(&path).unwrap();
    assert_eq!(back.features, again.features);
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.train.steps = 0;
    let data = gen_synthetic(&cfg.synth);
    let trainer = train(&cfg, &data, |_| panic!("no steps expected")).unwrap();
    let path = dir.path().join("init.ckpt");
    save_checkpoint(&path, &cfg, &trainer.params).unwrap();
    let loaded = load_checkpoint(&path, &cfg).unwrap();
    assert!(loaded.bits_equal(&init_params(&cfg, data.classes().len(), cfg.train.seed).unwrap()));
}

#[test]
fn trained_checkpoint_round_trips_and_validates_entries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let data = gen_synthetic(&cfg.synth);
    let trainer = train(&cfg, &data, |_| {}).unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &cfg, &trainer.params).unwrap();
    assert!(load_checkpoint(&path, &cfg).unwrap().bits_equal(&trainer.params));

    let missing = without(&trainer.params, "updater.bias");
    save_checkpoint(&path, &cfg, &missing).unwrap();
    let err = load_checkpoint(&path, &cfg).unwrap_err().to_string();
    assert!(err.contains("updater.bias"), "{err}");

    let mut extra = trainer.params.clone();
    extra.insert("head.9.weight", Tensor::zeros(&[6, 4])).unwrap();
    save_checkpoint(&path, &cfg, &extra).unwrap();
    let err = load_checkpoint(&path, &cfg).unwrap_err().to_string();
    assert!(err.contains("head.9.weight"), "{err}");

    let mut misshapen = without(&trainer.params, "head.0.bias");
    misshapen.insert("head.0.bias", Tensor::zeros(&[1, 5])).unwrap();
    save_checkpoint(&path, &cfg, &misshapen).unwrap();
    let err = load_checkpoint(&path, &cfg).unwrap_err().to_string();
    assert!(err.contains("head.0.bias"), "{err}");
}

#[test]
fn config_digest_mismatch_still_loads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let store = init_params(&cfg, 3, 0).unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &cfg, &store).unwrap();
    let mut other = cfg.clone();
    other.train.lambda1 = 0.5;
    assert!(load_checkpoint(&path, &other).unwrap().bits_equal(&store));
}
