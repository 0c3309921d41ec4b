//! Run configuration.
//!
//! Files are TOML with four optional sections, `[model]`, `[loss]`,
//! `[train]` and `[synth]`. Every key has a default; unknown keys are
//! rejected by name.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

macro_rules! keyword_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}` (expected one of: {})",
                        stringify!($name),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

keyword_enum!(
    /// Discriminative loss used for the per-branch and embedding terms.
    LossKind {
        Triplet => "triplet",
        Margin => "margin",
        ProxyAnchor => "proxy-anchor",
    }
);

keyword_enum!(
    /// Batch construction and tuple mining strategy.
    SamplerKind {
        SemiHard => "semi-hard",
        DistanceWeighted => "distance-weighted",
        Random => "random",
    }
);

keyword_enum!(
    TrunkKind {
        Identity => "identity",
        Mlp => "mlp",
    }
);

keyword_enum!(
    /// How relational scores become message weights.
    RelationNormalization {
        Softmax => "softmax",
        Literal => "literal",
    }
);

impl LossKind {
    /// Sampler conventionally paired with each loss.
    pub fn default_sampler(self) -> SamplerKind {
        match self {
            LossKind::Triplet => SamplerKind::SemiHard,
            LossKind::Margin => SamplerKind::DistanceWeighted,
            LossKind::ProxyAnchor => SamplerKind::Random,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub trunk: TrunkKind,
    /// Hidden layer widths of an `mlp` trunk; empty means one affine layer.
    pub hidden: Vec<usize>,
    /// Global feature width d′.
    pub feature_dim: usize,
    /// Number of individual features.
    pub k: usize,
    /// Individual (and meta-relational) feature width.
    pub d: usize,
    /// Updater output width; the embedding has `k * d_u` columns.
    pub d_u: usize,
    pub normalize_embedding: bool,
    pub relation_normalization: RelationNormalization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            trunk: TrunkKind::Mlp,
            hidden: Vec::new(),
            feature_dim: 256,
            k: 4,
            d: 128,
            d_u: 128,
            normalize_embedding: true,
            relation_normalization: RelationNormalization::Softmax,
        }
    }
}

impl ModelConfig {
    pub fn embedding_dim(&self) -> usize {
        self.k * self.d_u
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Defaults to the sampler paired with `kind`.
    pub sampler: Option<SamplerKind>,
    /// Overrides for the embedding loss; default to `kind` / `sampler`.
    pub emb_kind: Option<LossKind>,
    pub emb_sampler: Option<SamplerKind>,
    pub triplet_margin: f64,
    pub margin_alpha: f64,
    pub margin_beta_init: f64,
    pub margin_beta_floor: f64,
    pub proxy_alpha: f64,
    pub proxy_delta: f64,
    /// Distances below this are clipped before distance weighting.
    pub dw_min_distance: f64,
    /// Negatives at or beyond this distance are not drawn.
    pub dw_cutoff: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Triplet,
            sampler: None,
            emb_kind: None,
            emb_sampler: None,
            triplet_margin: 0.2,
            margin_alpha: 0.2,
            margin_beta_init: 1.2,
            margin_beta_floor: 1e-3,
            proxy_alpha: 32.0,
            proxy_delta: 0.1,
            dw_min_distance: 0.5,
            dw_cutoff: 1.4,
        }
    }
}

impl LossConfig {
    pub fn ensemble_loss(&self) -> (LossKind, SamplerKind) {
        (self.kind, self.sampler.unwrap_or(self.kind.default_sampler()))
    }

    pub fn embedding_loss(&self) -> (LossKind, SamplerKind) {
        let kind = self.emb_kind.unwrap_or(self.kind);
        let sampler = self
            .emb_sampler
            .or(if self.emb_kind.is_none() { self.sampler } else { None })
            .unwrap_or(kind.default_sampler());
        (kind, sampler)
    }

    /// Whether per-class parameters (proxies or margin boundaries) exist.
    pub fn needs_class_params(&self) -> bool {
        let (a, _) = self.ensemble_loss();
        let (b, _) = self.embedding_loss();
        a != LossKind::Triplet || b != LossKind::Triplet
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Weight on the ensemble term; 1 in normal training.
    pub ensemble_weight: f64,
    pub lr_trunk: f64,
    pub lr_heads: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Q in balanced batches of P classes times Q samples.
    pub samples_per_class: usize,
    pub steps: usize,
    pub seed: u64,
    /// Train on the first half of the classes and evaluate on the rest.
    pub zero_shot_split: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 10.0,
            ensemble_weight: 1.0,
            lr_trunk: 1e-5,
            lr_heads: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 80,
            samples_per_class: 4,
            steps: 1000,
            seed: 0,
            zero_shot_split: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    /// Latent nuisance aspects, each confined to its own coordinate block.
    pub n_factors: usize,
    pub class_scale: f64,
    pub factor_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            samples_per_class: 64,
            input_dim: 32,
            n_factors: 4,
            class_scale: 1.0,
            factor_scale: 8.0,
            noise_scale: 0.5,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization of the model and loss sections,
    /// which together determine the parameter layout.
    pub fn digest(&self) -> [u8; 32] {
        #[derive(Serialize)]
        struct Layout<'a> {
            model: &'a ModelConfig,
            loss: &'a LossConfig,
        }
        let text = toml::to_string(&Layout {
            model: &self.model,
            loss: &self.loss,
        })
        .expect("config serializes");
        Sha256::digest(text.as_bytes()).into()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let m = &self.model;
        for (key, v) in [
            ("model.input_dim", m.input_dim),
            ("model.feature_dim", m.feature_dim),
            ("model.k", m.k),
            ("model.d", m.d),
            ("model.d_u", m.d_u),
        ] {
            if v == 0 {
                return bad(format!("{key} must be at least 1"));
            }
        }
        if m.hidden.contains(&0) {
            return bad("model.hidden sizes must be at least 1".into());
        }
        if m.trunk == TrunkKind::Identity {
            if m.input_dim != m.feature_dim {
                return bad(format!(
                    "identity trunk needs model.input_dim ({}) == model.feature_dim ({})",
                    m.input_dim, m.feature_dim
                ));
            }
            if !m.hidden.is_empty() {
                return bad("identity trunk takes no model.hidden layers".into());
            }
        }

        let l = &self.loss;
        for (key, v) in [
            ("loss.triplet_margin", l.triplet_margin),
            ("loss.margin_alpha", l.margin_alpha),
            ("loss.proxy_alpha", l.proxy_alpha),
            ("loss.dw_min_distance", l.dw_min_distance),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{key} must be a finite nonnegative number"));
            }
        }
        if !(l.margin_beta_floor > 0.0) || !(l.margin_beta_init >= l.margin_beta_floor) {
            return bad("loss.margin_beta_init must be >= loss.margin_beta_floor > 0".into());
        }
        if !(l.dw_cutoff > l.dw_min_distance && l.dw_cutoff <= 2.0) {
            return bad("loss.dw_cutoff must lie in (loss.dw_min_distance, 2]".into());
        }
        if !l.proxy_delta.is_finite() {
            return bad("loss.proxy_delta must be finite".into());
        }

        let t = &self.train;
        for (key, v) in [
            ("train.lambda1", t.lambda1),
            ("train.lambda2", t.lambda2),
            ("train.ensemble_weight", t.ensemble_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{key} must be a finite nonnegative number"));
            }
        }
        for (key, v) in [("train.lr_trunk", t.lr_trunk), ("train.lr_heads", t.lr_heads)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{key} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&t.adam_beta1) || !(0.0..1.0).contains(&t.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(t.adam_eps > 0.0) {
            return bad("train.adam_eps must be positive".into());
        }
        if t.batch_size < 2 {
            return bad("train.batch_size must be at least 2".into());
        }
        if t.samples_per_class == 0 || t.samples_per_class > t.batch_size {
            return bad("train.samples_per_class must lie in 1..=train.batch_size".into());
        }

        let s = &self.synth;
        if s.n_classes == 0 || s.samples_per_class == 0 || s.input_dim == 0 {
            return bad("synth sizes must be at least 1".into());
        }
        if s.n_factors < 2 || s.n_factors > s.input_dim {
            return bad("synth.n_factors must lie in 2..=synth.input_dim".into());
        }
        for (key, v) in [
            ("synth.class_scale", s.class_scale),
            ("synth.factor_scale", s.factor_scale),
            ("synth.noise_scale", s.noise_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{key} must be a finite nonnegative number"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reported_settings() {
        let c = Config::default();
        assert_eq!(c.model.k, 4);
        assert_eq!(c.model.d, 128);
        assert_eq!(c.model.d_u, 128);
        assert_eq!(c.model.embedding_dim(), 512);
        assert_eq!(c.train.batch_size, 80);
        assert_eq!(c.train.lambda1, 0.1);
        assert_eq!(c.train.lambda2, 10.0);
        assert_eq!(c.train.lr_trunk, 1e-5);
        assert_eq!(c.train.lr_heads, 1e-4);
        c.validate().unwrap();
    }

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let c = Config::parse(
            "[model]\nk = 3\ntrunk = \"identity\"\ninput_dim = 8\nfeature_dim = 8\n\
             [loss]\nkind = \"proxy-anchor\"\n[train]\nsteps = 5\n",
        )
        .unwrap();
        assert_eq!(c.model.k, 3);
        assert_eq!(c.loss.ensemble_loss(), (LossKind::ProxyAnchor, SamplerKind::Random));
        assert_eq!(c.train.steps, 5);

        let err = Config::parse("[train]\nlearning_rate = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = Config::parse("[loss]\nkind = \"contrastive\"\n").unwrap_err();
        assert!(err.to_string().contains("contrastive"), "{err}");
    }

    #[test]
    fn validation_rejects_bad_values() {
        assert!(Config::parse("[model]\nk = 0\n").is_err());
        assert!(Config::parse("[train]\nlr_heads = 0.0\n").is_err());
        assert!(Config::parse("[train]\nlambda1 = -1.0\n").is_err());
        assert!(Config::parse("[model]\ntrunk = \"identity\"\n").is_err());
    }

    #[test]
    fn roundtrip_and_digest() {
        let c = Config::default();
        let back = Config::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        let mut other = c.clone();
        other.model.k = 2;
        assert_ne!(other.digest(), c.digest());
        // training knobs do not affect the layout digest
        let mut steps = c.clone();
        steps.train.steps = 7;
        assert_eq!(steps.digest(), c.digest());
    }

    #[test]
    fn embedding_loss_overrides() {
        let mut l = LossConfig::default();
        assert_eq!(l.embedding_loss(), (LossKind::Triplet, SamplerKind::SemiHard));
        l.emb_kind = Some(LossKind::Margin);
        assert_eq!(l.embedding_loss(), (LossKind::Margin, SamplerKind::DistanceWeighted));
        l.sampler = Some(SamplerKind::Random);
        assert_eq!(l.ensemble_loss(), (LossKind::Triplet, SamplerKind::Random));
        assert_eq!(l.embedding_loss(), (LossKind::Margin, SamplerKind::DistanceWeighted));
        assert!(l.needs_class_params());
    }
}
