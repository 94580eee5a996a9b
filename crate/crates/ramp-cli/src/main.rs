//! Command-line workflow for the retrieval-augmented score predictor:
//! synthetic data generation, two-stage training, datastore construction,
//! prediction (full and non-parametric), and evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use ramp_core::dataio::{self, DomainShift, SyntheticConfig};
use ramp_core::decoder::{train_stage1, BinScheme, Decoder, Stage1Config};
use ramp_core::fusion::{
    predict, predict_np, read_predictions, train_stage2, write_predictions, FusingNets,
    Stage2Config,
};
use ramp_core::metrics::{evaluate, PredictedScore};
use ramp_core::Datastore;

#[derive(Parser)]
#[command(
    name = "ramp",
    version,
    about = "Retrieval-augmented MOS score prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic embedding/score dataset.
    GenSynthetic(GenSyntheticArgs),
    /// Run both training stages and write decoder, fusing, and datastore artifacts.
    Train(TrainArgs),
    /// Build a datastore from a sample file.
    BuildDatastore(BuildDatastoreArgs),
    /// Predict scores for a sample file using trained artifacts.
    Predict(PredictArgs),
    /// Compare predictions against labeled truth and report the eight metrics.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct GenSyntheticArgs {
    /// Number of synthetic systems.
    #[arg(long)]
    systems: usize,
    /// Utterances generated per system.
    #[arg(long)]
    per_system: usize,
    /// Embedding dimension.
    #[arg(long)]
    dim: usize,
    /// Embedding noise standard deviation.
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f64,
    /// Constant added to every embedding coordinate (domain shift).
    #[arg(long)]
    shift_emb: Option<f64>,
    /// Constant added to every score, clamped back into range (domain shift).
    #[arg(long)]
    shift_score: Option<f64>,
    /// Also split into train/dev/test files with these comma-separated ratios.
    #[arg(long, value_name = "TRAIN,DEV,TEST")]
    split: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output NDJSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training sample file.
    #[arg(long)]
    train: PathBuf,
    /// Development sample file for early stopping.
    #[arg(long)]
    dev: PathBuf,
    /// Where to write the decoder checkpoint (JSON).
    #[arg(long)]
    decoder: PathBuf,
    /// Where to write the fusing checkpoint (JSON).
    #[arg(long)]
    fusing: PathBuf,
    /// Where to write the datastore built from the training embeddings.
    #[arg(long)]
    datastore: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct BuildDatastoreArgs {
    /// Sample file providing the datastore contents.
    #[arg(long)]
    train: PathBuf,
    /// Output datastore path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Input sample file; `mos` is optional here.
    #[arg(long)]
    test: PathBuf,
    /// Decoder checkpoint. Optional with --np-only.
    #[arg(long)]
    decoder: Option<PathBuf>,
    /// Fusing checkpoint.
    #[arg(long)]
    fusing: PathBuf,
    /// Datastore to retrieve from; swapping it adapts to a new domain.
    #[arg(long)]
    datastore: PathBuf,
    /// Skip the parametric path and score by retrieval alone.
    #[arg(long)]
    np_only: bool,
    /// Output predictions (NDJSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predictions NDJSON file.
    #[arg(long)]
    pred: PathBuf,
    /// Labeled truth sample file.
    #[arg(long)]
    truth: PathBuf,
    /// Optional path for the JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Knobs shared by training; flags beat the config file, which beats
/// defaults.
#[derive(Args)]
struct ConfigOverrides {
    /// Upper bound K on the retrieval scope.
    #[arg(long)]
    k: Option<usize>,
    /// Weight of the classification loss term.
    #[arg(long)]
    alpha: Option<f64>,
    /// Width of one score bin.
    #[arg(long)]
    bin_width: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file with the remaining hyperparameters.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    k: usize,
    alpha: f64,
    bin_width: f64,
    score_min: f64,
    score_max: f64,
    seed: u64,
    hidden_dim: usize,
    fusing_hidden_dim: usize,
    learning_rate: f64,
    max_epochs: usize,
    patience: usize,
    batch_size: usize,
    grad_accum: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s1 = Stage1Config::default();
        let s2 = Stage2Config::default();
        RunConfig {
            k: s2.k,
            alpha: s1.alpha,
            bin_width: 0.25,
            score_min: 1.0,
            score_max: 5.0,
            seed: 0,
            hidden_dim: s1.hidden_dim,
            fusing_hidden_dim: s2.hidden_dim,
            learning_rate: s1.learning_rate,
            max_epochs: s1.max_epochs,
            patience: s1.patience,
            batch_size: s1.batch_size,
            grad_accum: s1.grad_accum,
        }
    }
}

impl RunConfig {
    fn resolve(overrides: &ConfigOverrides) -> Result<Self> {
        let mut cfg = match &overrides.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(k) = overrides.k {
            cfg.k = k;
        }
        if let Some(alpha) = overrides.alpha {
            cfg.alpha = alpha;
        }
        if let Some(bin_width) = overrides.bin_width {
            cfg.bin_width = bin_width;
        }
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn stage1(&self) -> Stage1Config {
        Stage1Config {
            alpha: self.alpha,
            hidden_dim: self.hidden_dim,
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            grad_accum: self.grad_accum,
            seed: self.seed,
        }
    }

    fn stage2(&self) -> Stage2Config {
        Stage2Config {
            hidden_dim: self.fusing_hidden_dim,
            ..Stage2Config::from_stage1(self.k, &self.stage1())
        }
    }

    fn bins(&self) -> Result<BinScheme> {
        Ok(BinScheme::new(
            self.score_min,
            self.score_max,
            self.bin_width,
        )?)
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynthetic(args) => cmd_gen_synthetic(args),
        Command::Train(args) => cmd_train(args),
        Command::BuildDatastore(args) => cmd_build_datastore(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn load_samples(path: &Path) -> Result<ramp_core::SampleSet> {
    dataio::parse_samples(path).with_context(|| format!("reading samples from {}", path.display()))
}

fn cmd_gen_synthetic(args: GenSyntheticArgs) -> Result<()> {
    let domain_shift = match (args.shift_emb, args.shift_score) {
        (None, None) => None,
        (emb, score) => Some(DomainShift {
            embedding_offset: vec![emb.unwrap_or(0.0); args.dim],
            score_offset: score.unwrap_or(0.0),
        }),
    };
    let cfg = SyntheticConfig {
        dim: args.dim,
        n_systems: args.systems,
        utterances_per_system: args.per_system,
        noise_sigma: args.noise_sigma,
        domain_shift,
        seed: args.seed,
    };
    let set = dataio::gen_synthetic(&cfg)?;
    dataio::write_samples(&args.out, &set)
        .with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!(
        "wrote {} samples ({} systems x {} utterances, dim {}) to {}",
        set.len(),
        args.systems,
        args.per_system,
        args.dim,
        args.out.display()
    );

    if let Some(spec) = &args.split {
        let ratios = parse_ratios(spec)?;
        let (train, dev, test) = dataio::split(&set, ratios, cfg.seed)?;
        for (part, name) in [(&train, "train"), (&dev, "dev"), (&test, "test")] {
            let path = with_suffix(&args.out, name);
            dataio::write_samples(&path, part)
                .with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {} samples to {}", part.len(), path.display());
        }
    }
    Ok(())
}

fn parse_ratios(spec: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = spec
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("parsing split ratios {spec:?}"))?;
    if parts.len() != 3 {
        bail!("--split needs exactly three comma-separated ratios, got {spec:?}");
    }
    Ok((parts[0], parts[1], parts[2]))
}

/// `d.ndjson` with suffix `train` becomes `d.train.ndjson`.
fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let ext = path
        .extension()
        .and_then(|s| s.to_str())
        .unwrap_or("ndjson");
    path.with_file_name(format!("{stem}.{suffix}.{ext}"))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = RunConfig::resolve(&args.overrides)?;
    let train = load_samples(&args.train)?;
    let dev = load_samples(&args.dev)?;
    let bins = cfg.bins()?;

    let (decoder, report1) = train_stage1(&train, &dev, bins, &cfg.stage1())?;
    eprintln!(
        "stage 1: {} epochs, best dev loss {:.6} at epoch {}",
        report1.epochs_run, report1.best_dev_loss, report1.best_epoch
    );

    let store = Datastore::build(&train)?;
    store
        .save(&args.datastore)
        .with_context(|| format!("writing {}", args.datastore.display()))?;

    let (nets, report2) = train_stage2(&train, &dev, &decoder, &store, &cfg.stage2())?;
    eprintln!(
        "stage 2: {} epochs, best dev mse {:.6} at epoch {}",
        report2.epochs_run, report2.best_dev_loss, report2.best_epoch
    );

    fs::write(&args.decoder, decoder.to_json())
        .with_context(|| format!("writing {}", args.decoder.display()))?;
    fs::write(&args.fusing, nets.to_json())
        .with_context(|| format!("writing {}", args.fusing.display()))?;
    eprintln!(
        "wrote decoder to {}, fusing nets to {}, datastore ({} entries) to {}",
        args.decoder.display(),
        args.fusing.display(),
        store.len(),
        args.datastore.display()
    );
    Ok(())
}

fn cmd_build_datastore(args: BuildDatastoreArgs) -> Result<()> {
    let samples = load_samples(&args.train)?;
    let store = Datastore::build(&samples)?;
    store
        .save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!(
        "wrote datastore with {} entries (dim {}) to {}",
        store.len(),
        store.dim(),
        args.out.display()
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let store = Datastore::load(&args.datastore)
        .with_context(|| format!("reading datastore {}", args.datastore.display()))?;
    let fusing_json = fs::read_to_string(&args.fusing)
        .with_context(|| format!("reading fusing checkpoint {}", args.fusing.display()))?;
    let nets = FusingNets::from_json(&fusing_json)?;
    let queries = dataio::parse_queries(&args.test)
        .with_context(|| format!("reading samples from {}", args.test.display()))?;
    let query_dim = queries[0].embedding.len();
    if store.dim() != query_dim {
        bail!(
            "datastore dimension {} does not match input dimension {query_dim}",
            store.dim()
        );
    }

    let predictions = if args.np_only {
        queries
            .iter()
            .map(|q| predict_np(&nets, &store, &q.id, &q.system_id, &q.embedding))
            .collect::<ramp_core::Result<Vec<_>>>()?
    } else {
        let decoder_path = args
            .decoder
            .as_ref()
            .context("--decoder is required unless --np-only is set")?;
        let decoder_json = fs::read_to_string(decoder_path)
            .with_context(|| format!("reading decoder checkpoint {}", decoder_path.display()))?;
        let decoder = Decoder::from_json(&decoder_json)?;
        if decoder.input_dim() != store.dim() {
            bail!(
                "decoder input dimension {} does not match datastore dimension {}",
                decoder.input_dim(),
                store.dim()
            );
        }
        queries
            .iter()
            .map(|q| predict(&decoder, &nets, &store, &q.id, &q.system_id, &q.embedding))
            .collect::<ramp_core::Result<Vec<_>>>()?
    };

    let file =
        fs::File::create(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    let mut writer = std::io::BufWriter::new(file);
    write_predictions(&mut writer, &predictions)?;
    writer.flush()?;
    eprintln!(
        "wrote {} predictions to {}",
        predictions.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let file = fs::File::open(&args.pred)
        .with_context(|| format!("reading predictions {}", args.pred.display()))?;
    let records = read_predictions(std::io::BufReader::new(file))?;
    let truths = load_samples(&args.truth)?;

    let missing: Vec<&str> = records
        .iter()
        .filter(|r| truths.find(&r.id).is_none())
        .map(|r| r.id.as_str())
        .collect();
    if !missing.is_empty() {
        bail!(
            "{} prediction ids missing from the truth set: {}",
            missing.len(),
            missing.join(", ")
        );
    }

    let preds: Vec<PredictedScore> = records
        .iter()
        .map(|r| PredictedScore {
            id: r.id.clone(),
            score: r.score,
        })
        .collect();
    let report = evaluate(&preds, &truths)?;
    println!("{}", report.table());
    for warning in &report.warnings {
        eprintln!("warning: {warning}");
    }
    if let Some(out) = &args.out {
        fs::write(out, report.to_json()).with_context(|| format!("writing {}", out.display()))?;
        eprintln!("wrote report to {}", out.display());
    }
    Ok(())
}
