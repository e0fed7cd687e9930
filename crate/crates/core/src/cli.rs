//! Command-line surface.
//!
//! Settings resolve in three layers: built-in defaults, then the
//! `--config` file, then command-line flags. A flag always wins.
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::ConfigFile;
use crate::data::{read_jsonl, write_jsonl, PreferenceRecord, SummaryRecord};
use crate::decode::{acceptance_rate, summarize, Strategy};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalExample, GsbRecord, GsbReport};
use crate::model::engine::ForwardWeights;
use crate::model::{checkpoint, ModelConfig, ParameterSet};
use crate::pipeline::{run_pipeline, PipelineConfig};
use crate::preference::{
    build_preference_dataset, default_strategy_grid, generate_candidates, simulate_impressions,
    ClickBehavior, ClickModel, Impression, PairFilterConfig, ShownPair,
};
use crate::quant::{store, KvScaling, Model, QuantMode};
use crate::serve::{
    bench_sweep, run_bench, serve_loop, sweep_strategies, BenchLimit, BenchTable, Request,
    ServeConfig,
};
use crate::synthetic::{generate_task, TaskConfig};
use crate::tokenizer::{build_prompt, encode_prompt, train_vocab, PromptInput, Vocabulary};
use crate::train::{
    curate_sft_dataset, generate_distillation_set, train_dpo, train_sft, CurationRules,
    PreferencePair, Schedule, SftExample, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "qdsum", version, about = "Query-driven summarization: train, decode, serve")]
pub struct Cli {
    /// Flat key = value configuration file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a byte-level BPE vocabulary from summary records.
    VocabTrain(VocabTrainArgs),
    /// Label inputs with a teacher model's greedy summaries.
    DistillGen(DistillGenArgs),
    /// Filter and truncate supervised records.
    Curate(CurateArgs),
    /// Supervised fine-tuning.
    TrainSft(TrainSftArgs),
    /// Preference optimization against a frozen SFT checkpoint.
    TrainDpo(TrainDpoArgs),
    /// Build preference pairs from candidates and a click log.
    Prefbuild(PrefbuildArgs),
    /// Convert a checkpoint to int8, fp8 or bf16.
    Quantize(QuantizeArgs),
    /// Summarize one input or a file of inputs.
    Decode(DecodeArgs),
    /// ROUGE and exact match on a reference set.
    Eval(EvalArgs),
    /// Good/Same/Bad side-by-side score with a sign test.
    Gsb(GsbArgs),
    /// Throughput, acceptance rate and latency.
    Bench(BenchArgs),
    /// Line-delimited request/response serving on stdin/stdout.
    Serve(ServeArgs),
    /// Write synthetic extractive-task data.
    Synth(SynthArgs),
    /// The four-stage training run on the synthetic task.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// Model checkpoint (f32 or quantized).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Vocabulary file.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DecodeFlags {
    /// `greedy`, `w,n,v` or `lookahead(w,n,v)`.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Shorthand for `--strategy w,n,v`.
    #[arg(long, value_name = "W,N,V", conflicts_with = "strategy")]
    pub lookahead: Option<String>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Summary budget in tokens.
    #[arg(long)]
    pub budget: Option<usize>,
    /// f32, bf16, int8 or fp8.
    #[arg(long)]
    pub quant: Option<String>,
    /// token or head (fp8 KV cache scale granularity).
    #[arg(long)]
    pub kv_scaling: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// constant or linear.
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub train_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct VocabTrainArgs {
    /// Summary records; prompts and summaries both feed the merges.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DistillGenArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Inputs as `{query, title, content}` lines.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub budget: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainSftArgs {
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Curated summary records.
    #[arg(long)]
    pub data: PathBuf,
    /// Start from this checkpoint instead of a fresh init.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct TrainDpoArgs {
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Preference records `{query, title, content, chosen, rejected}`.
    #[arg(long)]
    pub pairs: PathBuf,
    /// SFT checkpoint: the starting policy and the frozen reference.
    #[arg(long)]
    pub sft: PathBuf,
    /// Supervised records for interleaved refresh steps.
    #[arg(long)]
    pub refresh: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub beta: Option<f64>,
    /// DPO steps and SFT steps per refresh cycle, e.g. `2,1`.
    #[arg(long, value_name = "D,S")]
    pub interleave: Option<String>,
    #[arg(long)]
    pub length_normalize: bool,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct PrefbuildArgs {
    /// Candidate sets, one query per line.
    #[arg(long)]
    pub candidates: PathBuf,
    /// Impression log; simulated from the candidates' attractiveness when absent.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Where to write the simulated log.
    #[arg(long)]
    pub log_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Policy used to fill candidate sets that have none.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub impressions: Option<usize>,
    /// examine, bt, or position:<p_top>.
    #[arg(long)]
    pub click_model: Option<String>,
    #[arg(long)]
    pub min_impressions: Option<usize>,
    #[arg(long)]
    pub min_ctr_gap: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub kv_scaling: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, required_unless_present = "input")]
    pub query: Option<String>,
    #[arg(long, default_value = "")]
    pub title: String,
    #[arg(long, required_unless_present = "input")]
    pub content: Option<String>,
    /// Inputs as `{query, title, content}` lines.
    #[arg(long, conflicts_with_all = ["query", "content"])]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// `{query, title, content, references}` lines.
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the full report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

#[derive(Debug, Args)]
pub struct GsbArgs {
    /// `{query_id, label}` lines with label good, same or bad.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Requests, optionally with `references`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Number of requests (cycling through the data).
    #[arg(long, conflicts_with = "duration")]
    pub requests: Option<usize>,
    /// Run for this many seconds instead of a fixed count.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Run {greedy, (4,6,4), (5,5,5), (6,6,6)} × {f32, int8, fp8}.
    #[arg(long)]
    pub sweep: bool,
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub max_batch: Option<usize>,
    /// Read requests from a file instead of stdin.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Write responses to a file instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write `{query, title, content, references}` lines instead of summary records.
    #[arg(long)]
    pub eval: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the stage table as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Save vocabulary and final checkpoints here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// A usage problem (exit 2) as opposed to a runtime failure (exit 1).
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Every key a configuration file may contain.
pub fn known_keys() -> Vec<&'static str> {
    let mut k: Vec<&'static str> = ServeConfig::KEYS.to_vec();
    k.extend(TRAIN_KEYS);
    k.extend([
        "vocab.size",
        "model.layers",
        "model.heads",
        "model.hidden",
        "model.max_seq_len",
        "pref.min_impressions",
        "pref.min_ctr_gap",
        "pref.impressions",
        "pref.candidates",
        "pref.click_model",
        "curate.min_len",
        "curate.budget",
        "curate.min_points",
        "curate.max_points",
        "curate.max_point_len",
    ]);
    k
}

const TRAIN_KEYS: [&str; 13] = [
    "train.learning_rate",
    "train.batch_size",
    "train.epochs",
    "train.weight_decay",
    "train.schedule",
    "train.checkpoint_every",
    "train.seed",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.dpo_beta",
    "train.interleave_dpo_steps",
    "train.interleave_sft_steps",
];

fn parse_flag<T: std::str::FromStr>(name: &str, v: &str) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| Failure::Usage(format!("--{name} {v}: {e}")))
}

/// Serve settings from defaults, the file and the decode flags.
pub fn resolve_serve(file: &ConfigFile, flags: &DecodeFlags, model: &ModelArgs) -> Result<ServeConfig> {
    let mut c = ServeConfig::default();
    c.apply_file(file)?;
    let usage = |f: Failure| match f {
        Failure::Usage(m) => Error::Config(m),
        Failure::Runtime(e) => e,
    };
    if let Some(s) = flags.lookahead.as_deref().or(flags.strategy.as_deref()) {
        c.decode.strategy = parse_flag::<Strategy>("strategy", s).map_err(usage)?;
    }
    if let Some(v) = flags.max_new_tokens {
        c.decode.max_new_tokens = v;
    }
    if let Some(v) = flags.budget {
        c.budget = v;
    }
    if let Some(v) = &flags.quant {
        c.quant = parse_flag("quant", v).map_err(usage)?;
    }
    if let Some(v) = &flags.kv_scaling {
        c.kv_scaling = parse_flag("kv-scaling", v).map_err(usage)?;
    }
    if let Some(v) = flags.seed {
        c.decode.seed = v;
    }
    if let Some(p) = &model.checkpoint {
        c.checkpoint = Some(p.clone());
    }
    if let Some(p) = &model.vocab {
        c.vocab = Some(p.clone());
    }
    c.validate()?;
    Ok(c)
}

/// Training settings from `base`, the file and the flags.
pub fn resolve_train(file: &ConfigFile, flags: &TrainFlags, base: TrainConfig) -> Result<TrainConfig> {
    let mut c = base;
    macro_rules! take {
        ($key:literal, $field:ident) => {
            if let Some(v) = file.get($key)? {
                c.$field = v;
            }
        };
    }
    take!("train.learning_rate", learning_rate);
    take!("train.batch_size", batch_size);
    take!("train.epochs", epochs);
    take!("train.weight_decay", weight_decay);
    take!("train.schedule", schedule);
    take!("train.checkpoint_every", checkpoint_every);
    take!("train.seed", seed);
    take!("train.beta1", beta1);
    take!("train.beta2", beta2);
    take!("train.eps", eps);
    take!("train.dpo_beta", dpo_beta);
    take!("train.interleave_dpo_steps", interleave_dpo_steps);
    take!("train.interleave_sft_steps", interleave_sft_steps);
    if let Some(v) = flags.lr {
        c.learning_rate = v;
    }
    if let Some(v) = flags.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = flags.epochs {
        c.epochs = v;
    }
    if let Some(v) = flags.weight_decay {
        c.weight_decay = v;
    }
    if let Some(v) = &flags.schedule {
        c.schedule = v.parse::<Schedule>()?;
    }
    if let Some(v) = flags.checkpoint_every {
        c.checkpoint_every = v;
    }
    if let Some(v) = flags.train_seed {
        c.seed = v;
    }
    c.validate()?;
    Ok(c)
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> CliResult<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Failure::Usage(format!("missing {what} (flag or config file)")))
}

fn file_or<'a>(flag: &'a Option<PathBuf>, file: &'a ConfigFile, key: &str) -> Option<PathBuf> {
    flag.clone().or_else(|| file.raw(key).map(PathBuf::from))
}

fn load_vocab(path: Option<PathBuf>) -> CliResult<Vocabulary> {
    let p = path.ok_or_else(|| Failure::Usage("missing --vocab (or model.vocab)".into()))?;
    Ok(Vocabulary::load(p)?)
}

/// Loads the configured checkpoint in the configured numeric mode.
fn load_model(cfg: &ServeConfig) -> CliResult<Model> {
    let path = required(&cfg.checkpoint, "--checkpoint (or model.checkpoint)")?;
    let m = Model::load(path)?;
    if m.mode() == cfg.quant {
        return Ok(m);
    }
    Ok(m.to_mode(cfg.quant, cfg.kv_scaling)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// A query's candidate summaries, with optional ground-truth
/// attractiveness for click simulation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateSet {
    pub query_id: String,
    pub query: String,
    #[serde(default)]
    pub title: String,
    pub content: String,
    #[serde(default)]
    pub candidates: Vec<String>,
    #[serde(default)]
    pub attractiveness: Vec<f64>,
}

fn parse_click_model(s: &str) -> CliResult<ClickBehavior> {
    match s {
        "examine" => Ok(ClickBehavior::Examine),
        "bt" | "bradley-terry" => Ok(ClickBehavior::BradleyTerry),
        _ => match s.strip_prefix("position:") {
            Some(p) => {
                let top: f64 = parse_flag("click-model", p)?;
                if !(0.0..=1.0).contains(&top) {
                    return Err(Failure::Usage("position bias must lie in [0, 1]".into()));
                }
                Ok(ClickBehavior::PositionBias { top })
            }
            None => Err(Failure::Usage(format!("unknown click model '{s}'"))),
        },
    }
}

fn model_shape(args: &TrainSftArgs, file: &ConfigFile, vocab: usize) -> Result<ModelConfig> {
    let d = ModelConfig::desk();
    let layers = args.layers.or(file.get("model.layers")?).unwrap_or(d.n_layers);
    let heads = args.heads.or(file.get("model.heads")?).unwrap_or(d.n_heads);
    let hidden = args.hidden.or(file.get("model.hidden")?).unwrap_or(d.hidden_size);
    let seq = args
        .max_seq_len
        .or(file.get("model.max_seq_len")?)
        .unwrap_or(d.max_seq_len);
    let c = ModelConfig::new(layers, heads, hidden, vocab, seq);
    c.validate()?;
    Ok(c)
}

fn execute(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(p) => {
            let f = ConfigFile::load(p).map_err(|e| match e {
                Error::Io(io) => Failure::Usage(format!("{}: {io}", p.display())),
                other => other.into(),
            })?;
            f.check_keys(&known_keys())?;
            f
        }
        None => ConfigFile::default(),
    };
    let stdout = io::stdout();
    match cli.command {
        Command::VocabTrain(a) => {
            let recs: Vec<SummaryRecord> = read_jsonl(&a.input)?;
            let size = a.size.or(file.get("vocab.size")?).unwrap_or(512);
            let texts: Vec<String> = recs
                .iter()
                .flat_map(|r| [build_prompt(&r.input()), r.summary.clone()])
                .collect();
            let v = train_vocab(texts.iter().map(String::as_str), size)?;
            v.save(&a.out)?;
            println!("vocabulary of {} tokens written to {}", v.size(), a.out.display());
        }
        Command::DistillGen(a) => {
            let cfg = resolve_serve(&file, &a.decode, &a.model)?;
            let vocab = load_vocab(cfg.vocab.clone())?;
            let teacher = load_model(&cfg)?;
            let inputs: Vec<PromptInput> = read_jsonl(&a.input)?;
            let set = generate_distillation_set(&teacher, &vocab, &inputs, &cfg.decode, cfg.budget)?;
            write_jsonl(&a.out, &set)?;
            println!("{} of {} inputs labelled", set.len(), inputs.len());
        }
        Command::Curate(a) => {
            let vocab = load_vocab(file_or(&a.vocab, &file, "model.vocab"))?;
            let d = CurationRules::default();
            let rules = CurationRules {
                min_len: a.min_len.or(file.get("curate.min_len")?).unwrap_or(d.min_len),
                budget: a.budget.or(file.get("curate.budget")?).unwrap_or(d.budget),
                min_points: file.get("curate.min_points")?.unwrap_or(d.min_points),
                max_points: file.get("curate.max_points")?.unwrap_or(d.max_points),
                max_point_len: file.get("curate.max_point_len")?.unwrap_or(d.max_point_len),
            };
            let text = std::fs::read_to_string(&a.input)?;
            let parsed = crate::data::parse_jsonl::<SummaryRecord>(&text);
            let (kept, report) =
                curate_sft_dataset(&vocab, parsed.into_iter().map(|(_, r)| r), &rules);
            write_jsonl(&a.out, &kept)?;
            println!("{}", serde_json::to_string(&report).map_err(Error::from)?);
        }
        Command::TrainSft(a) => {
            let vocab = load_vocab(file_or(&a.vocab, &file, "model.vocab"))?;
            let cfg = resolve_train(&file, &a.train, TrainConfig::default())?;
            let recs: Vec<SummaryRecord> = read_jsonl(&a.data)?;
            let data: Vec<SftExample> = recs.iter().map(|r| r.to_example(&vocab)).collect();
            let init = match &a.init {
                Some(p) => checkpoint::load(p)?,
                None => ParameterSet::init(model_shape(&a, &file, vocab.size())?, cfg.seed)?,
            };
            let out = train_sft(&data, init, &cfg, Some(&a.out_dir))?;
            println!(
                "{} steps, final loss {:.4}, checkpoints in {}",
                out.steps,
                out.losses.last().copied().unwrap_or(f64::NAN),
                a.out_dir.display()
            );
        }
        Command::TrainDpo(a) => {
            let vocab = load_vocab(file_or(&a.vocab, &file, "model.vocab"))?;
            let base = TrainConfig {
                learning_rate: 1e-4,
                ..TrainConfig::default()
            };
            let mut cfg = resolve_train(&file, &a.train, base)?;
            if let Some(b) = a.beta {
                cfg.dpo_beta = b;
            }
            if let Some(s) = &a.interleave {
                let (d, r) = s
                    .split_once(',')
                    .ok_or_else(|| Failure::Usage("--interleave expects D,S".into()))?;
                cfg.interleave_dpo_steps = parse_flag("interleave", d.trim())?;
                cfg.interleave_sft_steps = parse_flag("interleave", r.trim())?;
            }
            cfg.dpo_length_normalize |= a.length_normalize;
            cfg.validate()?;
            let recs: Vec<PreferenceRecord> = read_jsonl(&a.pairs)?;
            let pairs: Vec<PreferencePair> = recs.iter().map(|r| r.to_pair(&vocab)).collect();
            let refresh: Vec<SftExample> = match &a.refresh {
                Some(p) => read_jsonl::<SummaryRecord>(p)?
                    .iter()
                    .map(|r| r.to_example(&vocab))
                    .collect(),
                None => Vec::new(),
            };
            let sft = checkpoint::load(&a.sft)?;
            let out = train_dpo(&pairs, &sft, &cfg, &refresh, Some(&a.out_dir))?;
            println!(
                "{} optimizer steps, final DPO loss {:.4}, checkpoints in {}",
                out.steps,
                out.losses.last().copied().unwrap_or(f64::NAN),
                a.out_dir.display()
            );
        }
        Command::Prefbuild(a) => prefbuild(&a, &file)?,
        Command::Quantize(a) => {
            let path = file_or(&a.checkpoint, &file, "model.checkpoint");
            let path = required(&path, "--checkpoint")?;
            let mode: QuantMode = match &a.mode {
                Some(m) => parse_flag("mode", m)?,
                None => file.get("quant.mode")?.unwrap_or(QuantMode::Int8WeightOnly),
            };
            let kv: KvScaling = match &a.kv_scaling {
                Some(m) => parse_flag("kv-scaling", m)?,
                None => file.get("quant.kv_scaling")?.unwrap_or_default(),
            };
            let m = Model::load(path)?.to_mode(mode, kv)?;
            store::save_model(&a.out, &m)?;
            println!("{mode} checkpoint written to {}", a.out.display());
        }
        Command::Decode(a) => {
            let cfg = resolve_serve(&file, &a.decode, &a.model)?;
            let vocab = load_vocab(cfg.vocab.clone())?;
            let model = load_model(&cfg)?;
            let inputs: Vec<PromptInput> = match &a.input {
                Some(p) => read_jsonl(p)?,
                None => vec![PromptInput {
                    query: a.query.clone().unwrap_or_default(),
                    title: a.title.clone(),
                    content: a.content.clone().unwrap_or_default(),
                }],
            };
            let mut out = stdout.lock();
            for input in &inputs {
                let s = summarize(&model, &vocab, input, &cfg.decode, cfg.budget)?;
                let rec = serde_json::json!({
                    "summary": s.text,
                    "tokens": s.tokens.len(),
                    "forward_steps": s.stats.forward_steps,
                    "ar": acceptance_rate(&s.stats),
                });
                writeln!(out, "{rec}")?;
            }
        }
        Command::Eval(a) => {
            let cfg = resolve_serve(&file, &a.decode, &a.model)?;
            let vocab = load_vocab(cfg.vocab.clone())?;
            let model = load_model(&cfg)?;
            let data: Vec<EvalExample> = read_jsonl(&a.data)?;
            let report = evaluate_model(&model, &vocab, &data, &cfg.decode, cfg.budget)?;
            println!("{report}");
            println!("{}", report.summary_json());
            if let Some(p) = &a.json {
                write_json(p, &report)?;
            }
        }
        Command::Gsb(a) => {
            let recs: Vec<GsbRecord> = read_jsonl(&a.input)?;
            let report = GsbReport::new(&recs)?;
            println!("{report}");
        }
        Command::Bench(a) => {
            let workers_flag = a.workers;
            let mut cfg = resolve_serve(&file, &a.decode, &a.model)?;
            if let Some(w) = workers_flag {
                cfg.workers = w;
            }
            cfg.validate()?;
            let vocab = load_vocab(cfg.vocab.clone())?;
            let data: Vec<Request> = read_jsonl(&a.data)?;
            let limit = match (a.requests, a.duration) {
                (_, Some(s)) if s > 0.0 => BenchLimit::Duration(Duration::from_secs_f64(s)),
                (_, Some(_)) => return Err(Failure::Usage("--duration must be positive".into())),
                (Some(n), None) => BenchLimit::Count(n),
                (None, None) => BenchLimit::Count(data.len()),
            };
            let table = if a.sweep {
                let path = required(&cfg.checkpoint, "--checkpoint")?;
                let base = Model::load(path)?;
                bench_sweep(
                    |mode| base.to_mode(mode, cfg.kv_scaling),
                    &vocab,
                    &data,
                    &cfg,
                    &[QuantMode::F32, QuantMode::Int8WeightOnly, QuantMode::Fp8W8A8Kv],
                    &sweep_strategies(),
                    limit,
                )?
            } else {
                let model = load_model(&cfg)?;
                let report = run_bench(&model, &vocab, &data, &cfg, limit)?;
                BenchTable {
                    rows: vec![crate::serve::BenchRow {
                        quant: cfg.quant,
                        strategy: cfg.decode.strategy,
                        report,
                    }],
                }
            };
            print!("{table}");
            println!("{}", serde_json::to_string(&table).map_err(Error::from)?);
            if let Some(p) = &a.json {
                write_json(p, &table)?;
            }
        }
        Command::Serve(a) => {
            let mut cfg = resolve_serve(&file, &a.decode, &a.model)?;
            if let Some(w) = a.workers {
                cfg.workers = w;
            }
            if let Some(b) = a.max_batch {
                cfg.max_batch = b;
            }
            cfg.validate()?;
            let vocab = load_vocab(cfg.vocab.clone())?;
            let model = load_model(&cfg)?;
            let summary = match (&a.input, &a.output) {
                (Some(i), Some(o)) => serve_loop(
                    &model,
                    &vocab,
                    &cfg,
                    BufReader::new(File::open(i)?),
                    BufWriter::new(File::create(o)?),
                )?,
                (Some(i), None) => serve_loop(
                    &model,
                    &vocab,
                    &cfg,
                    BufReader::new(File::open(i)?),
                    stdout.lock(),
                )?,
                (None, Some(o)) => serve_loop(
                    &model,
                    &vocab,
                    &cfg,
                    BufReader::new(io::stdin()),
                    BufWriter::new(File::create(o)?),
                )?,
                (None, None) => {
                    serve_loop(&model, &vocab, &cfg, BufReader::new(io::stdin()), stdout.lock())?
                }
            };
            log::info!(
                "served {} requests, {} failed",
                summary.requests,
                summary.failures
            );
        }
        Command::Synth(a) => {
            let ex = generate_task(a.n, &TaskConfig::default(), a.seed)?;
            if a.eval {
                let recs: Vec<EvalExample> = ex
                    .iter()
                    .map(|e| EvalExample {
                        query: e.input.query.clone(),
                        title: e.input.title.clone(),
                        content: e.input.content.clone(),
                        references: vec![e.gold.clone()],
                    })
                    .collect();
                write_jsonl(&a.out, &recs)?;
            } else {
                let recs: Vec<SummaryRecord> = ex
                    .iter()
                    .map(|e| SummaryRecord::new(&e.input, e.gold.clone()))
                    .collect();
                write_jsonl(&a.out, &recs)?;
            }
            println!("{} examples written to {}", a.n, a.out.display());
        }
        Command::Pipeline(a) => {
            let mut cfg = PipelineConfig::default();
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let out = run_pipeline(&cfg)?;
            println!("{out}");
            if let Some(p) = &a.json {
                write_json(p, &out.stages)?;
            }
            if let Some(d) = &a.out_dir {
                std::fs::create_dir_all(d)?;
                out.vocab.save(d.join("vocab.txt"))?;
                checkpoint::save(d.join("sft.ckpt"), &out.sft)?;
                checkpoint::save(d.join("dpo.ckpt"), &out.dpo)?;
            }
        }
    }
    Ok(())
}

fn prefbuild(a: &PrefbuildArgs, file: &ConfigFile) -> CliResult<()> {
    let mut sets: Vec<CandidateSet> = read_jsonl(&a.candidates)?;
    let seed = a.seed.unwrap_or(0);
    if sets.iter().any(|s| s.candidates.len() < 2) {
        let policy = required(&a.policy, "--policy to generate missing candidates")?;
        let vocab = load_vocab(file_or(&a.vocab, file, "model.vocab"))?;
        let policy = checkpoint::load(policy)?;
        let count = a.count.or(file.get("pref.candidates")?).unwrap_or(4);
        for (i, s) in sets.iter_mut().enumerate() {
            if s.candidates.len() >= 2 {
                continue;
            }
            let input = PromptInput {
                query: s.query.clone(),
                title: s.title.clone(),
                content: s.content.clone(),
            };
            let prompt = encode_prompt(&vocab, &input);
            let grid = default_strategy_grid(seed.wrapping_add(i as u64));
            match generate_candidates(&policy, &prompt, count, &grid, 80) {
                Ok(c) => {
                    s.candidates = c
                        .iter()
                        .map(|t| vocab.decode(t))
                        .collect::<Result<_>>()?;
                }
                Err(Error::InsufficientDiversity { distinct, tried }) => {
                    log::warn!("{}: {distinct} distinct candidates after {tried}", s.query_id);
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    let log: Vec<Impression> = match &a.log {
        Some(p) => read_jsonl(p)?,
        None => {
            let behavior = match a.click_model.as_deref().or(file.raw("pref.click_model")) {
                Some(s) => parse_click_model(s)?,
                None => ClickBehavior::Examine,
            };
            let mut model = ClickModel::new(behavior);
            let mut shown = Vec::new();
            for s in &sets {
                if s.candidates.len() < 2 {
                    continue;
                }
                if s.attractiveness.is_empty() {
                    log::warn!("{}: no attractiveness, left out of the simulated log", s.query_id);
                    continue;
                }
                if s.attractiveness.len() != s.candidates.len() {
                    return Err(Failure::Usage(format!(
                        "{}: simulation needs one attractiveness per candidate",
                        s.query_id
                    )));
                }
                for (c, &p) in s.attractiveness.iter().enumerate() {
                    model.set(&s.query_id, c, p)?;
                }
                for x in 0..s.candidates.len() {
                    for y in x + 1..s.candidates.len() {
                        shown.push(ShownPair {
                            query_id: s.query_id.clone(),
                            a: x,
                            b: y,
                        });
                    }
                }
            }
            let n = a.impressions.or(file.get("pref.impressions")?).unwrap_or(100);
            let log = simulate_impressions(&model, &shown, n, seed)?;
            if let Some(p) = &a.log_out {
                write_jsonl(p, &log)?;
            }
            log
        }
    };
    let d = PairFilterConfig::default();
    let filter = PairFilterConfig {
        min_impressions: a
            .min_impressions
            .or(file.get("pref.min_impressions")?)
            .unwrap_or(d.min_impressions),
        min_ctr_gap: a
            .min_ctr_gap
            .or(file.get("pref.min_ctr_gap")?)
            .unwrap_or(d.min_ctr_gap),
    };
    let decisions = build_preference_dataset(&log, &filter)?;
    let by_id: std::collections::HashMap<&str, &CandidateSet> =
        sets.iter().map(|s| (s.query_id.as_str(), s)).collect();
    let mut out = Vec::with_capacity(decisions.len());
    for d in &decisions {
        let s = by_id.get(d.query_id.as_str()).ok_or_else(|| {
            Failure::Runtime(Error::Domain(format!("log names unknown query {}", d.query_id)))
        })?;
        let pick = |c: usize| {
            s.candidates.get(c).cloned().ok_or_else(|| {
                Failure::Runtime(Error::Domain(format!(
                    "{}: no candidate {c}",
                    d.query_id
                )))
            })
        };
        out.push(PreferenceRecord {
            query: s.query.clone(),
            title: s.title.clone(),
            content: s.content.clone(),
            chosen: pick(d.chosen)?,
            rejected: pick(d.rejected)?,
        });
    }
    write_jsonl(&a.out, &out)?;
    println!("{} preference pairs from {} impressions", out.len(), log.len());
    Ok(())
}

/// Parses `argv` (program name first) and runs it; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}
