//! Single-binary pipeline: ingest raw check-ins, generate synthetic regions,
//! train origin models, transfer-train target models, evaluate, predict and
//! gradient-check.
//!
//! Every run logs its effective configuration, seed and build version to
//! stderr. Output files depend only on inputs, flags and seeds — never on
//! thread count, paths or wall-clock time — so reruns are byte-identical.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use flowtpp::clusters;
use flowtpp::eval::{self, EvalOptions};
use flowtpp::flows::PointMode;
use flowtpp::grad;
use flowtpp::mtpp::{Dims, ModelParams};
use flowtpp::seqdata::{ingest_csv, ColumnMap, IngestConfig, RegionDataset};
use flowtpp::synth::{self, SynthSpec};
use flowtpp::train::{train_region, Checkpoint, TrainConfig};

#[derive(Parser)]
#[command(name = "flowtpp", version, about = "Check-in sequence modeling with log-normal flow heads and cross-region transfer")]
struct Cli {
    /// Worker threads (0 = one per core). Results are identical for any value.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a delimiter-separated check-in file into a dataset file.
    Ingest(IngestArgs),
    /// Generate a synthetic dataset with known gap distributions.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Fine-tune on a target dataset with flow anchors from an origin checkpoint.
    Transfer(TransferArgs),
    /// Evaluate a checkpoint: MPA/MAE plus an optional per-event report.
    Eval(EvalArgs),
    /// Predict the next event for one user.
    Predict(PredictArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Raw input file, one check-in per line.
    #[arg(long)]
    input: PathBuf,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    /// Field delimiter.
    #[arg(long, default_value = ",")]
    delimiter: char,
    /// Skip the first line.
    #[arg(long)]
    has_header: bool,
    #[arg(long, default_value_t = 0)]
    col_user: usize,
    #[arg(long, default_value_t = 1)]
    col_category: usize,
    #[arg(long, default_value_t = 2)]
    col_time: usize,
    #[arg(long, default_value_t = 3)]
    col_lat: usize,
    #[arg(long, default_value_t = 4)]
    col_lon: usize,
    /// Drop sequences shorter than this.
    #[arg(long, default_value_t = 2)]
    min_len: usize,
    /// Ignore coordinates (product-style data without a spatial component).
    #[arg(long)]
    non_spatial: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    sequences: usize,
    #[arg(long, default_value_t = 10)]
    categories: usize,
    #[arg(long, default_value_t = 8)]
    len_min: usize,
    #[arg(long, default_value_t = 16)]
    len_max: usize,
    /// Self-transition probability of the category chain.
    #[arg(long, default_value_t = 0.9)]
    self_weight: f64,
    /// Shift every log-gap mean by this amount (related-region variant).
    #[arg(long, default_value_t = 0.0)]
    shift_mu: f64,
    /// Generate without a spatial component.
    #[arg(long)]
    non_spatial: bool,
}

/// Optimization flags shared by `train` and `transfer`. Precedence:
/// explicit flags > `--config` file > built-in defaults.
#[derive(Args, Clone)]
struct TrainFlags {
    /// TOML file with `TrainConfig` fields (all optional).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding and hidden width (D = H).
    #[arg(long)]
    dims: Option<usize>,
    /// Number of median-time clusters (M).
    #[arg(long)]
    clusters: Option<usize>,
    /// Initial transfer attention scalar φ.
    #[arg(long)]
    phi_init: Option<f64>,
    /// Keep φ fixed at its initial value.
    #[arg(long)]
    freeze_phi: bool,
    /// Copy the origin trunk instead of fresh-initializing it (transfer only).
    #[arg(long)]
    warm_start: bool,
    /// Per-cluster flow projection weights instead of shared ones.
    #[arg(long)]
    per_cluster_weights: bool,
}

impl TrainFlags {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config file {}", path.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("parsing config file {}", path.display()))?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.lr {
            config.learning_rate = v;
        }
        if let Some(v) = self.batch {
            config.batch_size = v;
        }
        if let Some(v) = self.epochs {
            config.max_epochs = v;
        }
        if let Some(v) = self.patience {
            config.patience = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.dims {
            config.dim_embed = v;
            config.dim_hidden = v;
        }
        if let Some(v) = self.clusters {
            config.num_clusters = v;
        }
        if let Some(v) = self.phi_init {
            config.phi_init = v;
        }
        config.freeze_phi |= self.freeze_phi;
        config.warm_start_trunk |= self.warm_start;
        config.per_cluster_weights |= self.per_cluster_weights;
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file to train on.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint file.
    #[arg(long)]
    out: PathBuf,
    /// Directory for the training-curve CSV.
    #[arg(long)]
    report_dir: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct TransferArgs {
    /// Origin checkpoint supplying the flow anchors.
    #[arg(long)]
    origin_ckpt: PathBuf,
    /// Target dataset file.
    #[arg(long)]
    target: PathBuf,
    /// Output checkpoint file.
    #[arg(long)]
    out: PathBuf,
    /// Directory for the training-curve CSV.
    #[arg(long)]
    report_dir: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictModeArg {
    Mean,
    Median,
    Sample,
}

impl From<PredictModeArg> for PointMode {
    fn from(m: PredictModeArg) -> PointMode {
        match m {
            PredictModeArg::Mean => PointMode::Mean,
            PredictModeArg::Median => PointMode::Median,
            PredictModeArg::Sample => PointMode::Sample,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory for the per-event CSV.
    #[arg(long)]
    report_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PredictModeArg::Mean)]
    predict_mode: PredictModeArg,
    /// Seed for `--predict-mode sample`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// User id to predict for; defaults to the first sequence.
    #[arg(long)]
    user: Option<String>,
    #[arg(long, value_enum, default_value_t = PredictModeArg::Mean)]
    predict_mode: PredictModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step size.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 5)]
    categories: usize,
    #[arg(long, default_value_t = 8)]
    dims: usize,
    #[arg(long, default_value_t = 2)]
    clusters: usize,
    /// Synthetic sequences in the check batch.
    #[arg(long, default_value_t = 4)]
    sequences: usize,
    /// Fail (nonzero exit) if the max relative error exceeds this.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    info!("flowtpp {}", env!("CARGO_PKG_VERSION"));
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("building thread pool")?;
        info!("threads: {}", cli.threads);
    }
    match cli.command {
        Command::Ingest(args) => cmd_ingest(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Transfer(args) => cmd_transfer(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn cmd_ingest(args: IngestArgs) -> anyhow::Result<()> {
    let config = IngestConfig {
        delimiter: u8::try_from(args.delimiter).context("delimiter must be a single byte")?,
        has_header: args.has_header,
        columns: ColumnMap {
            user: args.col_user,
            category: args.col_category,
            time: args.col_time,
            lat: args.col_lat,
            lon: args.col_lon,
        },
        min_sequence_len: args.min_len,
        spatial: !args.non_spatial,
    };
    info!("ingest config: {config:?}");
    let (dataset, report) = ingest_csv(&args.input, &config)
        .with_context(|| format!("ingesting {}", args.input.display()))?;
    dataset.save(&args.out)?;
    info!("ingest report: {report:?}");
    println!(
        "sequences={} categories={} rejected={} dropped_short={}",
        report.sequences, report.num_categories, report.records_rejected,
        report.sequences_dropped_short
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    if args.categories == 0 {
        bail!("need at least one category");
    }
    let mut spec = SynthSpec {
        num_sequences: args.sequences,
        len_min: args.len_min,
        len_max: args.len_max,
        transition: synth::peaked_transition(args.categories, args.self_weight),
        seed: args.seed,
        spatial: !args.non_spatial,
        ..SynthSpec::example(args.categories)
    };
    if args.shift_mu != 0.0 {
        spec = synth::shift(&spec, args.shift_mu);
    }
    info!("synth spec: {} sequences, {} categories, seed {}", spec.num_sequences, spec.num_categories, spec.seed);
    let dataset = synth::generate(&spec)?;
    dataset.save(&args.out)?;
    println!(
        "sequences={} categories={}",
        dataset.sequences.len(),
        dataset.num_categories
    );
    Ok(())
}

fn write_train_outputs(
    out: &Path,
    report_dir: Option<&Path>,
    ckpt: &Checkpoint,
    curve: &[flowtpp::train::CurvePoint],
) -> anyhow::Result<()> {
    ckpt.save(out)?;
    if let Some(dir) = report_dir {
        std::fs::create_dir_all(dir)?;
        eval::write_curve_csv(dir.join("training_curve.csv"), curve)?;
    }
    println!(
        "epochs={} best_epoch={} best_val_nll={} stop={}",
        ckpt.provenance.epochs_run,
        ckpt.provenance.best_epoch,
        ckpt.provenance.best_val_nll,
        ckpt.provenance.stop_reason
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let config = args.flags.resolve()?;
    info!("train config: {config:?}");
    let dataset = RegionDataset::load(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let (ckpt, curve) = train_region(&dataset, &config, None)?;
    write_train_outputs(&args.out, args.report_dir.as_deref(), &ckpt, &curve)
}

fn cmd_transfer(args: TransferArgs) -> anyhow::Result<()> {
    let config = args.flags.resolve()?;
    info!("transfer config: {config:?}");
    let origin = Checkpoint::load(&args.origin_ckpt)
        .with_context(|| format!("loading origin checkpoint {}", args.origin_ckpt.display()))?;
    let dataset = RegionDataset::load(&args.target)
        .with_context(|| format!("loading target dataset {}", args.target.display()))?;
    let (ckpt, curve) = train_region(&dataset, &config, Some(&origin))?;
    write_train_outputs(&args.out, args.report_dir.as_deref(), &ckpt, &curve)
}

fn load_model_and_data(ckpt: &Path, data: &Path) -> anyhow::Result<(Checkpoint, RegionDataset)> {
    let ckpt = Checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let mut dataset =
        RegionDataset::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    // Route sequences through the checkpoint's cluster conventions.
    clusters::assign_all(&mut dataset, &ckpt.clusters)?;
    Ok((ckpt, dataset))
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let (ckpt, dataset) = load_model_and_data(&args.ckpt, &args.data)?;
    let opts = EvalOptions {
        mode: args.predict_mode.into(),
        seed: args.seed,
    };
    let report = eval::evaluate(&ckpt.params, &dataset, &opts)?;
    if let Some(dir) = &args.report_dir {
        std::fs::create_dir_all(dir)?;
        eval::write_events_csv(dir.join("per_event.csv"), &report.rows)?;
    }
    info!("evaluated {} test events", report.num_events);
    println!("MPA={} MAE={}", report.mpa, report.mae);
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> anyhow::Result<()> {
    let (ckpt, dataset) = load_model_and_data(&args.ckpt, &args.data)?;
    let seq = match &args.user {
        Some(user) => dataset
            .sequences
            .iter()
            .find(|s| &s.user_id == user)
            .with_context(|| format!("no sequence for user '{user}'"))?,
        None => &dataset.sequences[0],
    };
    let opts = EvalOptions {
        mode: args.predict_mode.into(),
        seed: args.seed,
    };
    let pred = eval::predict_next(&ckpt.params, seq, seq.len(), &opts)?;
    let distance = pred
        .distance
        .map_or_else(|| "-".to_string(), |d| d.to_string());
    println!(
        "user={} category={} time={} distance={}",
        seq.user_id, pred.category, pred.time, distance
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let spec = SynthSpec {
        num_sequences: args.sequences.max(1),
        len_min: 3,
        len_max: 6,
        seed: args.seed,
        ..SynthSpec::example(args.categories)
    };
    let mut dataset = synth::generate(&spec)?;
    clusters::fit_and_assign(&mut dataset, args.clusters)?;
    let dims = Dims {
        embed: args.dims,
        hidden: args.dims,
        num_categories: dataset.num_categories,
        num_clusters: args.clusters,
    };
    let params = ModelParams::init(dims, dataset.spatial_mode, false, args.seed);
    let batch: Vec<&flowtpp::seqdata::Sequence> = dataset.sequences.iter().collect();
    let report = grad::finite_diff_check(&params, &batch, args.seed, args.step)?;
    println!("{report}");
    let max = report.max_rel_err();
    println!("max_rel_err={max}");
    if max > args.tolerance {
        bail!("gradient check failed: {max} > tolerance {}", args.tolerance);
    }
    Ok(())
}
