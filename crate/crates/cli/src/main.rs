//! `embqa` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config values or inputs; exit status 2.
    #[error("{0}")]
    Usage(String),
    /// Failure while running; exit status 1.
    #[error(transparent)]
    Runtime(#[from] embqa_core::Error),
    #[error("{0}")]
    Failed(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

fn keys_help() -> String {
    let mut out = String::from("Config keys (set in a TOML file through tables, or with --set key=value):\n");
    for (k, d) in config::KEYS {
        out.push_str(&format!("  {k:<26}{d}\n"));
    }
    out.push_str("\nDecoding is always greedy (temperature 0, reference default).");
    out
}

#[derive(Debug, Parser)]
#[command(name = "embqa", version, about = "Retrieval-augmented open-domain QA engine", after_help = keys_help())]
struct Cli {
    /// Flat key=value configuration file; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a corpus file and write it to a store.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a retrieval index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Rerank a knowledge base for one query.
    Rerank(RerankArgs),
    /// Run the exploratory-embedding gate on one prompt.
    Explore(ExploreArgs),
    /// Answer questions end to end.
    Answer(AnswerArgs),
    /// Score an answer report against gold answers.
    Eval(EvalArgs),
    /// Summarize prompt counts, tokens and time per mode.
    CostReport(CostArgs),
    /// Write the synthetic fixture (corpus, questions, script).
    #[command(hide = true)]
    Synth(SynthArgs),
}

#[derive(Debug, Subcommand)]
enum IndexCommand {
    /// BM25 inverted index.
    Lexical {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact dense embedding store; writes `<out>.json` describing the embedder.
    Dense {
        #[arg(long)]
        corpus: PathBuf,
        /// `toy` (seeded hashing embedder), `script:<file>` or a sidecar URL.
        #[arg(long)]
        backend: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Retrieval, refiner and gate settings shared by several commands.
#[derive(Debug, Clone, Args, Default)]
struct PipelineFlags {
    /// First-stage retriever: lexical | dense [default: lexical]
    #[arg(long)]
    first_stage: Option<String>,
    /// Knowledge-base size M [default: 100]
    #[arg(long)]
    m: Option<usize>,
    /// Context size N [reference default: 10]
    #[arg(long)]
    n: Option<usize>,
    /// Candidates per generation K [reference default: 2]
    #[arg(long)]
    k: Option<usize>,
    /// dot | cosine [default: dot]
    #[arg(long)]
    similarity: Option<String>,
    /// learned | sum [default: learned]
    #[arg(long)]
    refiner_mode: Option<String>,
    /// embedding | prompt [default: embedding]
    #[arg(long)]
    rerank_mode: Option<String>,
    /// InfoNCE temperature [default: 0.1]
    #[arg(long)]
    tau: Option<f64>,
    /// Refiner step size [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Refiner epochs per query [default: 20]
    #[arg(long)]
    epochs: Option<usize>,
    /// Negatives per positive [reference default: 5]
    #[arg(long)]
    negative_ratio: Option<usize>,
    /// Gate threshold T; `inf` accepts the first sample [reference default: 0.05]
    #[arg(long)]
    threshold: Option<String>,
    /// Leading gaps summed by the gate [default: 5]
    #[arg(long)]
    gate_p: Option<usize>,
    /// Gate attempts before falling back [default: 50]
    #[arg(long)]
    max_attempts: Option<usize>,
    /// Standardize hidden states before the gap statistic [default: true]
    #[arg(long)]
    standardize: Option<bool>,
    /// Base seed for refiner and gate [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum output tokens per generation [default: 32]
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Logprobs per output token [reference default: 20]
    #[arg(long)]
    top_logprobs: Option<usize>,
}

impl PipelineFlags {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        put("retrieval.first_stage", self.first_stage.clone());
        put("retrieval.m", self.m.map(|v| v.to_string()));
        put("retrieval.n", self.n.map(|v| v.to_string()));
        put("generation.k", self.k.map(|v| v.to_string()));
        put("retrieval.similarity", self.similarity.clone());
        put("refiner.mode", self.refiner_mode.clone());
        put("rerank.mode", self.rerank_mode.clone());
        put("refiner.tau", self.tau.map(|v| v.to_string()));
        put("refiner.lr", self.lr.map(|v| v.to_string()));
        put("refiner.epochs", self.epochs.map(|v| v.to_string()));
        put(
            "refiner.negative_ratio",
            self.negative_ratio.map(|v| v.to_string()),
        );
        put("gate.threshold", self.threshold.clone());
        put("gate.p", self.gate_p.map(|v| v.to_string()));
        put("gate.max_attempts", self.max_attempts.map(|v| v.to_string()));
        put("gate.standardize", self.standardize.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("generation.max_tokens", self.max_tokens.map(|v| v.to_string()));
        put(
            "generation.top_logprobs",
            self.top_logprobs.map(|v| v.to_string()),
        );
        out
    }
}

#[derive(Debug, Args)]
struct RerankArgs {
    /// Knowledge-base passage ids, comma-separated, or `@file` with one id per line.
    #[arg(long)]
    kb: String,
    #[arg(long)]
    query: String,
    /// Step-one candidate answers, comma-separated.
    #[arg(long)]
    candidates: String,
    /// learned | sum | prompt [default: learned]
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    indexes: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Needed for `--mode prompt`.
    #[arg(long)]
    backend: Option<String>,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Debug, Args)]
struct ExploreArgs {
    #[arg(long)]
    prompt_file: PathBuf,
    #[arg(long)]
    backend: Option<String>,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["question", "questions"])))]
struct AnswerArgs {
    /// A single question.
    #[arg(long)]
    question: Option<String>,
    /// JSONL file of {id, question, answers?} records.
    #[arg(long)]
    questions: Option<PathBuf>,
    /// Directory holding corpus.jsonl, lexical.idx and dense.idx.
    #[arg(long)]
    indexes: Option<PathBuf>,
    /// Corpus file; defaults to `<indexes>/corpus.jsonl`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// `toy`, `script:<file>` or a sidecar URL.
    #[arg(long)]
    backend: Option<String>,
    /// embqa | retrieval-only | no-explore | no-rerank | no-explore-no-rerank [default: embqa]
    #[arg(long)]
    mode: Option<String>,
    /// Report output (JSONL); stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Questions answered concurrently [default: 1]
    #[arg(long)]
    workers: Option<usize>,
    /// Record zero wall time so reports are byte-reproducible.
    #[arg(long)]
    no_timing: bool,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    report: PathBuf,
    /// JSONL of {id, question, answers}.
    #[arg(long)]
    golds: PathBuf,
    /// Human-readable table output; printed to stdout as well.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-question records (JSONL); defaults to `<out>.records.jsonl`.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Corpus for GT@10 over the final context.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CostArgs {
    /// One or more answer reports.
    #[arg(long, required = true, num_args = 1..)]
    report: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the rows as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    questions: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn build_config(cli: &Cli, extra: &[(&str, String)]) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    for (k, v) in extra {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Ingest { corpus, out } => commands::ingest(corpus, out),
        Command::Index(IndexCommand::Lexical { corpus, out }) => commands::index_lexical(corpus, out),
        Command::Index(IndexCommand::Dense { corpus, backend, out }) => {
            let cfg = build_config(&cli, &[])?;
            commands::index_dense(&cfg, corpus, backend, out)
        }
        Command::Rerank(a) => {
            let mut extra = a.pipeline.pairs();
            match a.mode.as_deref() {
                None => {}
                Some("prompt") => extra.push(("rerank.mode", "prompt".into())),
                Some(m) => {
                    extra.push(("rerank.mode", "embedding".into()));
                    extra.push(("refiner.mode", m.into()));
                }
            }
            extra.extend(
                a.indexes
                    .as_ref()
                    .map(|p| ("paths.indexes", p.display().to_string())),
            );
            extra.extend(
                a.corpus
                    .as_ref()
                    .map(|p| ("paths.corpus", p.display().to_string())),
            );
            extra.extend(a.backend.clone().map(|b| ("backend", b)));
            let cfg = build_config(&cli, &extra)?;
            commands::rerank(&cfg, &a.kb, &a.query, &a.candidates)
        }
        Command::Explore(a) => {
            let mut extra = a.pipeline.pairs();
            extra.extend(a.backend.clone().map(|b| ("backend", b)));
            let cfg = build_config(&cli, &extra)?;
            commands::explore(&cfg, &a.prompt_file)
        }
        Command::Answer(a) => {
            let mut extra = a.pipeline.pairs();
            extra.extend(a.mode.clone().map(|m| ("mode", m)));
            extra.extend(
                a.indexes
                    .as_ref()
                    .map(|p| ("paths.indexes", p.display().to_string())),
            );
            extra.extend(
                a.corpus
                    .as_ref()
                    .map(|p| ("paths.corpus", p.display().to_string())),
            );
            extra.extend(
                a.report
                    .as_ref()
                    .map(|p| ("paths.report", p.display().to_string())),
            );
            extra.extend(a.backend.clone().map(|b| ("backend", b)));
            extra.extend(a.workers.map(|w| ("workers", w.to_string())));
            if a.no_timing {
                extra.push(("report.timing", "false".into()));
            }
            let cfg = build_config(&cli, &extra)?;
            commands::answer(&cfg, a.question.as_deref(), a.questions.as_deref())
        }
        Command::Eval(a) => commands::eval(
            &a.report,
            &a.golds,
            a.out.as_deref(),
            a.records.as_deref(),
            a.corpus.as_deref(),
        ),
        Command::CostReport(a) => commands::cost_report(&a.report, a.out.as_deref(), a.json.as_deref()),
        Command::Synth(a) => commands::synth(&a.out, a.questions, a.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
