//! Command-line front end: `decode`, `analyze`, `eval` and `trace`.
//!
//! Every command writes one JSON document to stdout or `--out`. Wall-clock
//! measurements live under a top-level `"timing"` key; everything else is a
//! pure function of the inputs and seeds.

mod analyze;
pub mod config;
mod eval;
mod run;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::deco::Modulation;
use crate::error::{Error, Result};
use crate::model::ModelDims;

pub use config::{ModelSource, RunConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "deco", version, about = "Layer-corrected decoding, layer analyses and hallucination metrics")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Report path; stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for toy weights, sampling, prompts and POPE sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log more (repeat for debug and trace output)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode prompts and report the generated tokens.
    Decode(ModelArgs),
    /// Layer analyses over recorded traces
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Caption metrics, polling questions and latency
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Record and inspect per-layer logit traces
    #[command(subcommand)]
    Trace(TraceCmd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Toy,
    Trace,
    WeightDump,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModulationArg {
    MaxProb,
    None,
}

/// Model, prompt and decoding overrides on top of `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Trace file or weight-dump directory.
    #[arg(long)]
    pub model_path: Option<PathBuf>,
    /// JSON-lines prompts `{prompt_tokens, visual_prefix_len}`.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub num_prompts: Option<usize>,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub sampling_top_p: Option<f64>,
    #[arg(long)]
    pub repetition_penalty: Option<f64>,
    #[arg(long)]
    pub stop_token: Option<u32>,
    #[arg(long, value_enum)]
    pub deco: Option<Switch>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub layer_lo: Option<usize>,
    #[arg(long)]
    pub layer_hi: Option<usize>,
    /// Candidate nucleus mass for the correction.
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long, value_enum)]
    pub modulation: Option<ModulationArg>,
}

#[derive(Debug, Clone, Args)]
pub struct TraceInput {
    #[arg(long)]
    pub trace: PathBuf,
    /// Labels sidecar (JSON lines, one record per labelled step).
    #[arg(long)]
    pub labels: PathBuf,
}

/// Inclusive layer interval written `lo:hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval(pub usize, pub usize);

fn parse_interval(s: &str) -> std::result::Result<Interval, String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected lo:hi, got {s:?}"))?;
    let lo = a.trim().parse().map_err(|e| format!("bad lower bound: {e}"))?;
    let hi = b.trim().parse().map_err(|e| format!("bad upper bound: {e}"))?;
    Ok(Interval(lo, hi))
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCmd {
    /// Earliest layer where a ground-truth candidate overtakes the final top token.
    Activation {
        #[command(flatten)]
        input: TraceInput,
        #[arg(long, default_value_t = crate::analysis::DEFAULT_ACTIVATION_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = crate::analysis::CANDIDATE_TOP_P)]
        top_p: f64,
    },
    /// Anchor hit rate for one or more layer intervals.
    Hitrate {
        #[command(flatten)]
        input: TraceInput,
        /// `lo:hi`, repeatable; defaults to the depth-scaled interval.
        #[arg(long = "interval", value_parser = parse_interval)]
        intervals: Vec<Interval>,
        #[arg(long, default_value_t = crate::analysis::CANDIDATE_TOP_P)]
        top_p: f64,
    },
    /// Share of with-visual top tokens inside the paired no-visual candidate set.
    Overlap {
        #[command(flatten)]
        input: TraceInput,
        #[arg(long, default_value_t = crate::analysis::CANDIDATE_TOP_P)]
        top_p: f64,
    },
    /// Hit rate with randomly shifted anchor layers.
    Perturb {
        #[command(flatten)]
        input: TraceInput,
        #[arg(long, value_parser = parse_interval)]
        interval: Option<Interval>,
        #[arg(long, default_value_t = crate::analysis::CANDIDATE_TOP_P)]
        top_p: f64,
        #[arg(long, default_value_t = 5)]
        magnitude: usize,
        #[arg(long, default_value_t = 500)]
        trials: usize,
    },
    /// Train per-layer existence probes on hidden states.
    ProbeTrain {
        #[command(flatten)]
        input: TraceInput,
        /// Layers to probe (1-based); all layers when absent.
        #[arg(long = "layer")]
        layers: Vec<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        l2: Option<f64>,
        /// Where to save the trained probes.
        #[arg(long)]
        probes_out: Option<PathBuf>,
    },
    /// Accuracy of saved probes on one split.
    ProbeEval {
        #[command(flatten)]
        input: TraceInput,
        #[arg(long)]
        probes: PathBuf,
        #[arg(long, default_value = "in_dist")]
        split: String,
    },
}

#[derive(Debug, Clone, Args)]
pub struct CaptionArgs {
    /// JSON lines `{image_id, mentioned | raw_caption, ground_truth, potential_hallucinations?}`.
    #[arg(long)]
    pub captions: PathBuf,
    /// JSON array of object names, needed to extract objects from raw captions.
    #[arg(long)]
    pub universe: Option<PathBuf>,
    /// JSON object mapping surface forms to canonical names.
    #[arg(long)]
    pub synonyms: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Instance- and sentence-level hallucination rates of captions
    Chair(CaptionArgs),
    /// Hallucination, coverage and cognition rates of captions
    Amber(CaptionArgs),
    /// Generate polling questions as JSON lines.
    PopeGen {
        /// JSON lines `{image_id, objects}`.
        #[arg(long)]
        annotations: PathBuf,
        /// JSON array of object names; the union of annotated objects when absent.
        #[arg(long)]
        universe: Option<PathBuf>,
        /// random, popular or adversarial; repeatable, all three when absent.
        #[arg(long = "split")]
        splits: Vec<String>,
        /// Questions per image.
        #[arg(long, default_value_t = 6)]
        k: usize,
    },
    /// Precision, recall and F1 of answered polling questions.
    PopeScore {
        #[arg(long)]
        items: PathBuf,
    },
    /// Per-token latency with the correction on versus off.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        /// Compare the baseline against itself.
        #[arg(long)]
        self_compare: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum TraceCmd {
    /// Decode prompts and write every step's per-layer logits to a trace.
    Record {
        /// Trace file to write.
        path: PathBuf,
        #[command(flatten)]
        model: Box<ModelArgs>,
        /// Store per-layer hidden states as well.
        #[arg(long)]
        hidden: bool,
        /// Also append one no-visual step per prompt and write a labels
        /// sidecar pairing it with the prompt's first step.
        #[arg(long)]
        labels_out: Option<PathBuf>,
    },
    /// Validate a trace and summarise its header and steps.
    Inspect { path: PathBuf },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(cli.verbose);
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .is_test(cfg!(test))
        .try_init();
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Decode(m) => run::decode(cli, m),
        Command::Trace(TraceCmd::Record {
            path,
            model,
            hidden,
            labels_out,
        }) => run::record(cli, model, path, *hidden, labels_out.as_deref()),
        Command::Trace(TraceCmd::Inspect { path }) => run::inspect(cli, path),
        Command::Analyze(cmd) => analyze::run(cli, cmd),
        Command::Eval(EvalCmd::Bench {
            model,
            runs,
            warmup,
            self_compare,
        }) => run::bench(cli, model, *runs, *warmup, *self_compare),
        Command::Eval(cmd) => eval::run(cli, cmd),
    }
}

/// Config file (or defaults) with command-line overrides applied; the
/// correction section is filled in once the model depth is known.
pub fn resolve_config(cli: &Cli, m: &ModelArgs) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    match (m.model, &m.model_path) {
        (Some(ModelKind::Toy), _) => {
            if !matches!(cfg.model, ModelSource::Toy(_)) {
                cfg.model = ModelSource::default();
            }
        }
        (Some(kind), None) => {
            return Err(Error::Config(format!("--model {kind:?} needs --model-path")));
        }
        (Some(ModelKind::Trace), Some(p)) => cfg.model = ModelSource::Trace(p.clone()),
        (Some(ModelKind::WeightDump), Some(p)) => cfg.model = ModelSource::WeightDump(p.clone()),
        (None, Some(_)) => return Err(Error::Config("--model-path needs --model".into())),
        (None, None) => {}
    }
    if let Some(seed) = cli.seed {
        cfg.decode.seed = seed;
        if let ModelSource::Toy(t) = &mut cfg.model {
            t.seed = seed;
        }
    }
    let d = &mut cfg.decode;
    if let Some(s) = &m.strategy {
        d.strategy = s.clone();
    }
    set(&mut d.max_new_tokens, m.max_new_tokens);
    set(&mut d.beam_width, m.beam_width);
    set(&mut d.sampling_top_p, m.sampling_top_p);
    set(&mut d.repetition_penalty, m.repetition_penalty);
    if m.stop_token.is_some() {
        d.stop_token = m.stop_token;
    }
    if m.prompts.is_some() {
        cfg.prompts = m.prompts.clone();
    }
    set(&mut cfg.num_prompts, m.num_prompts);
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    cfg.verbosity = cfg.verbosity.max(cli.verbose);
    cfg.validate()?;
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Materialises the correction settings for a model of `dims` and applies
/// the command-line overrides.
pub fn resolve_deco(cfg: &mut RunConfig, m: &ModelArgs, dims: ModelDims) -> Result<()> {
    let mut deco = cfg.deco.unwrap_or_else(|| crate::deco::DecoConfig::for_depth(dims.num_layers));
    if let Some(s) = m.deco {
        deco.enabled = s == Switch::On;
    }
    set(&mut deco.alpha, m.alpha);
    set(&mut deco.layer_lo, m.layer_lo);
    set(&mut deco.layer_hi, m.layer_hi);
    set(&mut deco.top_p, m.top_p);
    if let Some(md) = m.modulation {
        deco.modulation = match md {
            ModulationArg::MaxProb => Modulation::MaxProb,
            ModulationArg::None => Modulation::None,
        };
    }
    cfg.deco = Some(deco);
    cfg.deco_for(dims.num_layers)?;
    Ok(())
}

/// Worker count from `DECO_NUM_WORKERS`, defaulting to every core.
pub fn num_workers() -> Result<usize> {
    match std::env::var("DECO_NUM_WORKERS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("DECO_NUM_WORKERS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub(crate) fn emit<T: Serialize>(report: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    write_text(&text, out)
}

pub(crate) fn write_text(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}
