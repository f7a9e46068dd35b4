//! `asl`: the copy-detection pipeline as one binary.
//!
//! Settings resolve in three layers: module defaults, then the JSON file given
//! by `--config`, then flags typed on the command line. Exit codes: 0 success,
//! 1 other failure, 2 config, 3 IO, 4 divergence, 5 checkpoint, 6 parse.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use asl_core::matcher::{MatchConfig, Metric};
use asl_core::objectives::LossConfig;
use asl_core::synth::SynthConfig;
use asl_core::trainer::{TrainConfig, TrainMode};
use asl_core::Error;
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "asl",
    version,
    about = "Asymmetric-similarity copy detection on synthetic images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: images, manifest, gt.csv, train_pairs.csv.
    GenData(GenDataArgs),
    /// Train an encoder and write its checkpoint and per-epoch log.
    Train(TrainArgs),
    /// Embed the reference and query splits into refs.asld and queries.asld.
    Embed(EmbedArgs),
    /// Match queries against references and write a predictions CSV.
    Match(MatchArgs),
    /// Score a predictions CSV against ground truth.
    Eval(EvalArgs),
    /// µAP as hard-negative queries are added, from unfiltered predictions.
    Sweep(SweepArgs),
    /// Side-by-side table of two reports.
    Compare(CompareArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// JSON file with any of the sections seed, synth, train, matching, eval_n.
    /// Flags given on the command line override it.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SeedArg {
    /// Seed for every random stream. Required here or in the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    seed: SeedArg,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().image_size)]
    image_size: usize,
    #[arg(long, default_value_t = SynthConfig::default().refs)]
    refs: usize,
    #[arg(long, default_value_t = SynthConfig::default().pos_queries)]
    pos_queries: usize,
    #[arg(long, default_value_t = SynthConfig::default().easy_neg)]
    easy_neg: usize,
    #[arg(long, default_value_t = SynthConfig::default().hard_neg)]
    hard_neg: usize,
    #[arg(long, default_value_t = SynthConfig::default().train_images)]
    train_images: usize,
    /// Directed hard-negative pairs added to the training split.
    #[arg(long, default_value_t = SynthConfig::default().train_hard_neg)]
    train_hard_neg: usize,
    /// Share of hard negatives built as similar scenes instead of super-scenes.
    #[arg(long, default_value_t = SynthConfig::default().similar_fraction)]
    similar_fraction: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    seed: SeedArg,
    /// Dataset directory written by gen-data.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Training-log CSV [default: the checkpoint path with extension log.csv]
    #[arg(long, value_name = "PATH")]
    log: Option<PathBuf>,
    /// One of baseline, asl-crop, asl-negative, asl-positive, triplet, asl-full.
    #[arg(long, default_value_t = TrainConfig::default().mode.name().to_string(), value_parser = parse_mode)]
    mode: String,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().momentum)]
    momentum: f64,
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    weight_decay: f64,
    /// Share of each batch drawn from directed hard-negative pairs.
    #[arg(long, default_value_t = TrainConfig::default().hard_negative_fraction)]
    hard_negative_fraction: f64,
    /// Share of the remaining samples that are crop pairs.
    #[arg(long, default_value_t = TrainConfig::default().crop_fraction)]
    crop_fraction: f64,
    #[arg(long, default_value_t = TrainConfig::default().hidden)]
    hidden: usize,
    /// Descriptor dimension.
    #[arg(long, default_value_t = TrainConfig::default().dim)]
    dim: usize,
    /// Held-out crop pairs probed after every epoch.
    #[arg(long, default_value_t = TrainConfig::default().heldout_pairs)]
    heldout_pairs: usize,
    /// Global gradient-norm clip.
    #[arg(long, default_value_t = TrainConfig::default().max_grad_norm.unwrap_or(f64::INFINITY))]
    max_grad_norm: f64,
    /// Turn gradient clipping off.
    #[arg(long)]
    no_clip: bool,
    /// Weight of the metric term next to the ratio term.
    #[arg(long, default_value_t = LossConfig::default().lambda)]
    lambda: f64,
    #[arg(long, default_value_t = LossConfig::default().cosface_scale)]
    cosface_scale: f64,
    #[arg(long, default_value_t = LossConfig::default().cosface_margin)]
    cosface_margin: f64,
    #[arg(long, default_value_t = LossConfig::default().triplet_margin)]
    triplet_margin: f64,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Directory for refs.asld and queries.asld.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    Cosine,
    L2,
}

impl From<Metric> for MetricArg {
    fn from(m: Metric) -> Self {
        match m {
            Metric::Cosine => MetricArg::Cosine,
            Metric::L2 => MetricArg::L2,
        }
    }
}

impl std::fmt::Display for MetricArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

impl std::fmt::Display for Switch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(if *self == Switch::On { "on" } else { "off" })
    }
}

#[derive(Args)]
struct MatchArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Directory holding refs.asld and queries.asld.
    #[arg(long, value_name = "DIR")]
    embeddings: PathBuf,
    /// Predictions CSV.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Ratio filter.
    #[arg(long, default_value_t = if MatchConfig::default().filter_enabled { Switch::On } else { Switch::Off })]
    filter: Switch,
    /// Ratio threshold.
    #[arg(long, default_value_t = MatchConfig::default().ratio_threshold)]
    tau: f64,
    /// Ratio tolerance added to tau.
    #[arg(long, default_value_t = MatchConfig::default().ratio_tolerance)]
    delta: f64,
    /// Candidates per query.
    #[arg(long, default_value_t = MatchConfig::default().k)]
    k: usize,
    /// Minimum score kept.
    #[arg(long, default_value_t = MatchConfig::default().distance_threshold, allow_negative_numbers = true)]
    eps: f64,
    #[arg(long, default_value_t = MatchConfig::default().metric.into())]
    metric: MetricArg,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_name = "PATH")]
    predictions: PathBuf,
    /// Ground-truth CSV with columns query_id,ref_id.
    #[arg(long, value_name = "PATH")]
    gt: PathBuf,
    /// List length for precision [default: queries with a true match]
    #[arg(long)]
    n: Option<usize>,
    /// Report JSON.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Predictions made with the filter off.
    #[arg(long, value_name = "PATH")]
    predictions: PathBuf,
    /// Dataset directory; supplies ground truth and the hard-negative queries.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Ascending fractions of the hard-negative pool to include.
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    fractions: Vec<f64>,
    /// Sweep CSV.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Optional SVG line plot.
    #[arg(long, value_name = "PATH")]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, value_name = "PATH")]
    a: PathBuf,
    #[arg(long, value_name = "PATH")]
    b: PathBuf,
    /// Optional CSV of the same table.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<String, String> {
    s.parse::<TrainMode>()
        .map(|m| m.name().to_string())
        .map_err(|e| e.to_string())
}

/// Everything a config file may set. Sections left out keep their defaults.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub matching: MatchConfig,
    pub eval_n: Option<usize>,
}

/// An error plus the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match &error {
            Error::ConfigInvalid { .. } | Error::GtMismatch(_) => 2,
            Error::Io { .. } => 3,
            Error::DivergenceDetected { .. } => 4,
            Error::UnknownFlatten { .. } => 5,
            Error::Parse { .. }
            | Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::DimensionMismatch { .. }
            | Error::TruncatedFile { .. }
            | Error::DuplicateId(_)
            | Error::DuplicatePrediction { .. }
            | Error::NonFiniteComponent { .. } => 6,
            _ => 1,
        };
        Failure { code, error }
    }
}

impl Failure {
    /// Format and shape errors from a checkpoint, or from applying one to
    /// data it does not fit, exit with the checkpoint code.
    pub fn checkpoint(error: Error) -> Self {
        let mut f = Failure::from(error);
        if !matches!(f.error, Error::Io { .. }) {
            f.code = 5;
        }
        f
    }

    pub fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::ConfigInvalid {
            field: field.into(),
            reason: reason.into(),
        }
        .into()
    }
}

fn load_config(arg: &ConfigArg) -> Result<PipelineConfig, Failure> {
    let Some(path) = &arg.config else {
        return Ok(PipelineConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Failure::config("config", format!("{}: {e}", path.display())))
}

/// True when the flag was typed, as opposed to filled from its default.
fn given(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

macro_rules! overlay {
    ($m:expr; $($id:literal => $dst:expr, $val:expr;)*) => {
        $(if given($m, $id) { $dst = $val; })*
    };
}

fn resolve_seed(flag: Option<u64>, cfg: &PipelineConfig) -> Result<u64, Failure> {
    flag.or(cfg.seed)
        .ok_or_else(|| Failure::config("seed", "a seed is required: pass --seed or set \"seed\" in the config"))
}

fn synth_config(a: &GenDataArgs, m: &ArgMatches) -> Result<SynthConfig, Failure> {
    let file = load_config(&a.config)?;
    let mut c = file.synth.clone();
    c.seed = resolve_seed(a.seed.seed, &file)?;
    overlay!(m;
        "image_size" => c.image_size, a.image_size;
        "refs" => c.refs, a.refs;
        "pos_queries" => c.pos_queries, a.pos_queries;
        "easy_neg" => c.easy_neg, a.easy_neg;
        "hard_neg" => c.hard_neg, a.hard_neg;
        "train_images" => c.train_images, a.train_images;
        "train_hard_neg" => c.train_hard_neg, a.train_hard_neg;
        "similar_fraction" => c.similar_fraction, a.similar_fraction;
    );
    Ok(c)
}

fn train_config(a: &TrainArgs, m: &ArgMatches) -> Result<TrainConfig, Failure> {
    let file = load_config(&a.config)?;
    let mut c = file.train.clone();
    c.seed = resolve_seed(a.seed.seed, &file)?;
    let mode = a.mode.parse::<TrainMode>()?;
    overlay!(m;
        "mode" => c.mode, mode;
        "epochs" => c.epochs, a.epochs;
        "batch_size" => c.batch_size, a.batch_size;
        "lr" => c.lr, a.lr;
        "momentum" => c.momentum, a.momentum;
        "weight_decay" => c.weight_decay, a.weight_decay;
        "hard_negative_fraction" => c.hard_negative_fraction, a.hard_negative_fraction;
        "crop_fraction" => c.crop_fraction, a.crop_fraction;
        "hidden" => c.hidden, a.hidden;
        "dim" => c.dim, a.dim;
        "heldout_pairs" => c.heldout_pairs, a.heldout_pairs;
        "max_grad_norm" => c.max_grad_norm, Some(a.max_grad_norm);
        "lambda" => c.loss.lambda, a.lambda;
        "cosface_scale" => c.loss.cosface_scale, a.cosface_scale;
        "cosface_margin" => c.loss.cosface_margin, a.cosface_margin;
        "triplet_margin" => c.loss.triplet_margin, a.triplet_margin;
    );
    if a.no_clip {
        c.max_grad_norm = None;
    }
    Ok(c)
}

fn match_config(a: &MatchArgs, m: &ArgMatches) -> Result<MatchConfig, Failure> {
    let mut c = load_config(&a.config)?.matching;
    let metric = match a.metric {
        MetricArg::Cosine => Metric::Cosine,
        MetricArg::L2 => Metric::L2,
    };
    overlay!(m;
        "filter" => c.filter_enabled, a.filter == Switch::On;
        "tau" => c.ratio_threshold, a.tau;
        "delta" => c.ratio_tolerance, a.delta;
        "k" => c.k, a.k;
        "eps" => c.distance_threshold, a.eps;
        "metric" => c.metric, metric;
    );
    Ok(c)
}

fn run() -> Result<(), Failure> {
    let matches = Cli::command().get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    match &cli.command {
        Command::GenData(a) => commands::gen_data(&synth_config(a, sub)?, &a.out),
        Command::Train(a) => {
            let log = a.log.clone().unwrap_or_else(|| a.out.with_extension("log.csv"));
            commands::train(&train_config(a, sub)?, &a.data, &a.out, &log)
        }
        Command::Embed(a) => commands::embed(&a.checkpoint, &a.data, &a.out),
        Command::Match(a) => commands::match_queries(&match_config(a, sub)?, &a.embeddings, &a.out),
        Command::Eval(a) => {
            let n = if given(sub, "n") {
                a.n
            } else {
                load_config(&a.config)?.eval_n
            };
            commands::eval(&a.predictions, &a.gt, n, &a.out)
        }
        Command::Sweep(a) => commands::sweep(&a.predictions, &a.data, &a.fractions, &a.out, a.svg.as_deref()),
        Command::Compare(a) => commands::compare(&a.a, &a.b, a.out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
