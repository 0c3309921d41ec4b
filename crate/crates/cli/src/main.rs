use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use drml::checkpoint::{load_checkpoint, save_checkpoint};
use drml::config::{Config, LossKind, SamplerKind, TrunkKind};
use drml::data::{gen_synthetic, load_features, load_matrix, save_features, save_matrix, zero_shot_split, Dataset};
use drml::metrics::{evaluate, DEFAULT_RECALL_KS};
use drml::model::{embed, EmbeddingKind};
use drml::trainer::{check_objective_gradients, train, Trainer};
use drml::Tensor;
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const GRADCHECK_STEP: f64 = 1e-5;
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "drml", version, about = "Relational metric learning over feature ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset.
    GenSynth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Report retrieval and clustering metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "embeddings")]
        dataset: Option<PathBuf>,
        #[arg(long, required_unless_present = "embeddings")]
        checkpoint: Option<PathBuf>,
        /// Evaluate a labelled embedding dump instead of a model.
        #[arg(long, conflicts_with_all = ["dataset", "checkpoint"])]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value = "relational")]
        embedding: EmbeddingKind,
    },
    /// Write embeddings of every sample in a dataset.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "relational")]
        embedding: EmbeddingKind,
    },
    /// Compare analytic gradients against finite differences on a fixture.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    sampler: Option<SamplerKind>,
}

impl Common {
    fn config(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.synth.seed = seed;
        }
        if let Some(steps) = self.steps {
            cfg.train.steps = steps;
        }
        if let Some(k) = self.k {
            cfg.model.k = k;
        }
        if let Some(loss) = self.loss {
            cfg.loss.kind = loss;
        }
        if let Some(sampler) = self.sampler {
            cfg.loss.sampler = Some(sampler);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_dataset(path: &Path, cfg: &Config) -> Result<Dataset> {
    let data = load_features(path)?;
    if data.dim() != cfg.model.input_dim {
        bail!(
            "{} has {} features per sample, model.input_dim is {}",
            path.display(),
            data.dim(),
            cfg.model.input_dim
        );
    }
    Ok(data)
}

fn train_cmd(cfg: &Config, dataset: &Path, out: &Path, log: Option<&Path>) -> Result<()> {
    let data = load_dataset(dataset, cfg)?;
    let data = if cfg.train.zero_shot_split { zero_shot_split(&data)?.0 } else { data };
    let mut csv = String::from("step,J,J_ensem,J_recon,J_emb");
    for k in 0..cfg.model.k {
        let _ = write!(csv, ",usage_{k}");
    }
    csv.push('\n');
    let trainer = train(cfg, &data, |r| {
        let _ = write!(csv, "{},{},{},{},{}", r.step, r.j, r.j_ensem, r.j_recon, r.j_emb);
        for u in &r.usage {
            let _ = write!(csv, ",{u}");
        }
        csv.push('\n');
    })?;
    save_checkpoint(out, cfg, &trainer.params)?;
    if let Some(log) = log {
        std::fs::write(log, csv).with_context(|| format!("writing {}", log.display()))?;
    }
    info!("{} steps on {} samples", trainer.steps_taken(), data.len());
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn eval_cmd(
    cfg: &Config,
    dataset: Option<&Path>,
    checkpoint: Option<&Path>,
    embeddings: Option<&Path>,
    kind: EmbeddingKind,
) -> Result<()> {
    let (emb, labels) = match (embeddings, dataset, checkpoint) {
        (Some(path), _, _) => match load_matrix(path)? {
            (emb, Some(labels)) => (emb, labels),
            (_, None) => bail!("{} carries no labels to evaluate against", path.display()),
        },
        (None, Some(dataset), Some(checkpoint)) => {
            let data = load_dataset(dataset, cfg)?;
            let data = if cfg.train.zero_shot_split { zero_shot_split(&data)?.1 } else { data };
            let params = load_checkpoint(checkpoint, cfg)?;
            (embed(&cfg.model, &params, &data.features, kind)?, data.labels)
        }
        _ => bail!("eval needs --dataset and --checkpoint, or --embeddings"),
    };
    let report = evaluate(&emb, &labels, &DEFAULT_RECALL_KS, cfg.train.seed)?;
    print!("{}\n{}", report.to_table(), report.to_key_values());
    Ok(())
}

fn embed_cmd(cfg: &Config, dataset: &Path, checkpoint: &Path, out: &Path, kind: EmbeddingKind) -> Result<()> {
    let data = load_dataset(dataset, cfg)?;
    let params = load_checkpoint(checkpoint, cfg)?;
    let emb = embed(&cfg.model, &params, &data.features, kind)?;
    save_matrix(out, &emb, Some(&data.labels))?;
    println!("{} embeddings of dim {} written to {}", emb.rows(), emb.cols(), out.display());
    Ok(())
}

/// Minimum distance of any relu input from its kink on a gradient-check
/// fixture, so that probing never crosses one.
const GRADCHECK_KINK_MARGIN: f64 = 2e-4;
const GRADCHECK_ATTEMPTS: u64 = 64;

fn gradcheck_config(kind: LossKind, sampler: Option<SamplerKind>, seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.model.input_dim = 16;
    cfg.model.trunk = TrunkKind::Mlp;
    cfg.model.hidden = vec![];
    cfg.model.feature_dim = 16;
    cfg.model.k = 3;
    cfg.model.d = 8;
    cfg.model.d_u = 8;
    cfg.loss.kind = kind;
    cfg.loss.sampler = sampler;
    cfg.train.batch_size = 12;
    cfg.train.samples_per_class = 4;
    cfg.train.seed = seed;
    cfg
}

/// A three-class batch of twelve gaussian samples, redrawn until it keeps
/// clear of relu kinks. Returns the trainer state to probe from, the batch
/// and the kink margin.
fn gradcheck_fixture(cfg: Config) -> Result<(Trainer, Tensor, Vec<usize>, f64)> {
    let labels: Vec<usize> = (0..12).map(|i| i / 4).collect();
    for attempt in 0..GRADCHECK_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(attempt);
        let x = (0..12 * 16).map(|_| rng.sample(StandardNormal)).collect();
        let x = Tensor::new(vec![12, 16], x)?;
        let trainer = Trainer::new(cfg.clone(), vec![0, 1, 2])?;
        let (fwd, _) = trainer.clone().objective(&x, &labels)?;
        let margin = fwd.graph.kink_margin().unwrap_or(f64::INFINITY);
        if margin >= GRADCHECK_KINK_MARGIN {
            return Ok((trainer, x, labels, margin));
        }
    }
    bail!("no fixture within {GRADCHECK_ATTEMPTS} draws keeps {GRADCHECK_KINK_MARGIN:e} clear of relu kinks")
}

fn gradcheck_cmd(common: &Common) -> Result<bool> {
    let seed = common.seed.unwrap_or(0);
    let kinds: Vec<LossKind> = match common.loss {
        Some(kind) => vec![kind],
        None => LossKind::ALL.to_vec(),
    };
    let mut ok = true;
    for kind in kinds {
        let (mut trainer, x, labels, margin) = gradcheck_fixture(gradcheck_config(kind, common.sampler, seed))?;
        let report = check_objective_gradients(&mut trainer, &x, &labels, GRADCHECK_STEP)?;
        let (name, err) = report.worst().unwrap_or(("-", 0.0));
        let pass = err <= GRADCHECK_TOLERANCE;
        ok &= pass;
        println!(
            "{kind:<13} max rel err {err:.3e} ({name}), kink margin {margin:.1e}, {} evaluations: {}",
            report.evaluations,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenSynth { common, out } => {
            let cfg = common.config()?;
            let data = gen_synthetic(&cfg.synth);
            save_features(&out, &data)?;
            println!("{} samples of dim {} written to {}", data.len(), data.dim(), out.display());
        }
        Command::Train {
            common,
            dataset,
            out,
            log,
        } => train_cmd(&common.config()?, &dataset, &out, log.as_deref())?,
        Command::Eval {
            common,
            dataset,
            checkpoint,
            embeddings,
            embedding,
        } => eval_cmd(
            &common.config()?,
            dataset.as_deref(),
            checkpoint.as_deref(),
            embeddings.as_deref(),
            embedding,
        )?,
        Command::Embed {
            common,
            dataset,
            checkpoint,
            out,
            embedding,
        } => embed_cmd(&common.config()?, &dataset, &checkpoint, &out, embedding)?,
        Command::Gradcheck { common } => return gradcheck_cmd(&common),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
