//! Run configuration.
//!
//! Every setting has a dotted key (`gate.threshold`). A TOML file sets keys
//! through tables (`[gate]` then `threshold = 0.05`); `--set key=value`
//! and command-line flags are applied after the file and win.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use embqa_core::pipeline::{FirstStage, Mode, PipelineConfig, RerankMode};

use crate::CliError;

/// Every recognised key, with its description.
pub const KEYS: &[(&str, &str)] = &[
    ("paths.corpus", "corpus file (JSONL with id, title, text)"),
    ("paths.indexes", "index directory"),
    ("paths.report", "answer report output"),
    ("backend", "toy | script:<file> | http(s)://host:port"),
    (
        "mode",
        "embqa | retrieval-only | no-explore | no-rerank | no-explore-no-rerank",
    ),
    ("seed", "base seed for refiner and gate"),
    ("workers", "questions answered concurrently"),
    ("report.timing", "record wall time in reports (true|false)"),
    ("retrieval.first_stage", "lexical | dense"),
    ("retrieval.m", "knowledge-base size M"),
    ("retrieval.n", "context size N"),
    ("retrieval.similarity", "dot | cosine"),
    ("generation.k", "candidates per generation K"),
    ("generation.max_tokens", "maximum output tokens per generation"),
    ("generation.top_logprobs", "logprobs requested per token"),
    ("refiner.mode", "learned | sum"),
    ("refiner.tau", "InfoNCE temperature"),
    ("refiner.lr", "gradient-descent step size"),
    ("refiner.epochs", "training epochs per query"),
    ("refiner.negative_ratio", "negatives sampled per positive"),
    ("refiner.batch_size", "positives per step (0 = all)"),
    ("refiner.seed", "refiner base seed"),
    ("rerank.mode", "embedding | prompt"),
    ("rerank.max_tokens", "output tokens per grading prompt"),
    (
        "gate.threshold",
        "accept when the gap statistic is below this (inf allowed)",
    ),
    ("gate.p", "leading gaps summed"),
    ("gate.max_attempts", "exploratory samples tried before giving up"),
    (
        "gate.standardize",
        "standardize the hidden state first (true|false)",
    ),
    ("gate.seed", "gate base seed"),
    ("embedder.dim", "hashing embedder dimension"),
    ("embedder.seed", "hashing embedder seed"),
    ("toy.seed", "toy transformer weight seed"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub indexes: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub backend: Option<String>,
    pub pipeline: PipelineConfig,
    /// `refiner.mode` and `rerank.mode` together select `pipeline.rerank`.
    pub refiner_sum: bool,
    pub prompt_rerank: bool,
    pub workers: usize,
    pub timing: bool,
    pub embedder_dim: usize,
    pub embedder_seed: u64,
    pub toy_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            indexes: None,
            report: None,
            backend: None,
            pipeline: PipelineConfig::default(),
            refiner_sum: false,
            prompt_rerank: false,
            workers: 1,
            timing: true,
            embedder_dim: 256,
            embedder_seed: 7,
            toy_seed: 42,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(CliError::Usage(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_threshold(key: &str, value: &str) -> Result<f64, CliError> {
    match value {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        v => parse(key, v),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let p = &mut self.pipeline;
        match key {
            "paths.corpus" => self.corpus = Some(value.into()),
            "paths.indexes" => self.indexes = Some(value.into()),
            "paths.report" => self.report = Some(value.into()),
            "backend" => self.backend = Some(value.into()),
            "mode" => {
                p.mode = value
                    .parse::<Mode>()
                    .map_err(|e| CliError::Usage(e.to_string()))?
            }
            "seed" => {
                let seed = parse(key, value)?;
                p.train.seed = seed;
                p.gate.seed = seed;
            }
            "workers" => self.workers = parse(key, value)?,
            "report.timing" => self.timing = parse_bool(key, value)?,
            "retrieval.first_stage" => {
                p.first_stage = value
                    .parse::<FirstStage>()
                    .map_err(|e| CliError::Usage(e.to_string()))?
            }
            "retrieval.m" => p.m = parse(key, value)?,
            "retrieval.n" => p.n = parse(key, value)?,
            "retrieval.similarity" => {
                p.similarity = value
                    .parse()
                    .map_err(|e: embqa_core::Error| CliError::Usage(e.to_string()))?;
                p.train.similarity = p.similarity;
            }
            "generation.k" => p.k = parse(key, value)?,
            "generation.max_tokens" => p.max_tokens = parse(key, value)?,
            "generation.top_logprobs" => p.top_logprobs = parse(key, value)?,
            "refiner.mode" => {
                self.refiner_sum = match value {
                    "learned" => false,
                    "sum" => true,
                    _ => {
                        return Err(CliError::Usage(format!(
                            "refiner.mode must be learned or sum, got `{value}`"
                        )))
                    }
                }
            }
            "refiner.tau" => p.train.tau = parse(key, value)?,
            "refiner.lr" => p.train.lr = parse(key, value)?,
            "refiner.epochs" => p.train.epochs = parse(key, value)?,
            "refiner.negative_ratio" => p.train.negative_ratio = parse(key, value)?,
            "refiner.batch_size" => {
                let n: usize = parse(key, value)?;
                p.train.batch_size = (n > 0).then_some(n);
            }
            "refiner.seed" => p.train.seed = parse(key, value)?,
            "rerank.mode" => {
                self.prompt_rerank = match value {
                    "embedding" => false,
                    "prompt" => true,
                    _ => {
                        return Err(CliError::Usage(format!(
                            "rerank.mode must be embedding or prompt, got `{value}`"
                        )))
                    }
                }
            }
            "rerank.max_tokens" => p.rerank_max_tokens = parse(key, value)?,
            "gate.threshold" => p.gate.threshold = parse_threshold(key, value)?,
            "gate.p" => p.gate.p = parse(key, value)?,
            "gate.max_attempts" => p.gate.max_attempts = parse(key, value)?,
            "gate.standardize" => p.gate.standardize = parse_bool(key, value)?,
            "gate.seed" => p.gate.seed = parse(key, value)?,
            "embedder.dim" => self.embedder_dim = parse(key, value)?,
            "embedder.seed" => self.embedder_seed = parse(key, value)?,
            "toy.seed" => self.toy_seed = parse(key, value)?,
            _ => return Err(CliError::Usage(format!("unknown config key `{key}`"))),
        }
        p.rerank = if self.prompt_rerank {
            RerankMode::Prompt
        } else if self.refiner_sum {
            RerankMode::Sum
        } else {
            RerankMode::Learned
        };
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat)?;
        for (key, value) in flat {
            self.set(&key, &value)
                .map_err(|e| CliError::Usage(format!("config: {e}")))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.pipeline
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        if self.workers == 0 {
            return Err(CliError::Usage("workers must be at least 1".into()));
        }
        if self.embedder_dim == 0 {
            return Err(CliError::Usage("embedder.dim must be positive".into()));
        }
        Ok(())
    }
}

/// Turns nested tables into dotted keys with scalar values as text.
fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, String)>) -> Result<(), CliError> {
    for (name, value) in table {
        let key = if prefix.is_empty() {
            name.clone()
        } else {
            format!("{prefix}.{name}")
        };
        let text = match value {
            toml::Value::Table(inner) => {
                flatten(&key, inner, out)?;
                continue;
            }
            toml::Value::String(v) => v.clone(),
            toml::Value::Integer(v) => v.to_string(),
            toml::Value::Float(v) => v.to_string(),
            toml::Value::Boolean(v) => v.to_string(),
            _ => return Err(CliError::Usage(format!("config: `{key}` must be a scalar"))),
        };
        out.push((key, text));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_keys() {
        let mut c = RunConfig::default();
        c.apply_text("# run\nbackend = \"toy\"\n[retrieval]\nn = 5\n[gate]\nthreshold = inf\np=3\n[refiner]\nmode = \"sum\"\n")
            .unwrap();
        assert_eq!(c.pipeline.n, 5);
        assert_eq!(c.pipeline.gate.threshold, f64::INFINITY);
        assert_eq!(c.pipeline.gate.p, 3);
        assert_eq!(c.pipeline.rerank, RerankMode::Sum);
        c.set("rerank.mode", "prompt").unwrap();
        assert_eq!(c.pipeline.rerank, RerankMode::Prompt);
    }

    #[test]
    fn every_key_is_settable() {
        let samples = [
            ("mode", "no-rerank"),
            ("backend", "toy"),
            ("retrieval.first_stage", "dense"),
            ("retrieval.similarity", "cosine"),
            ("refiner.mode", "learned"),
            ("rerank.mode", "embedding"),
            ("gate.standardize", "false"),
            ("report.timing", "false"),
            ("refiner.tau", "0.2"),
            ("refiner.lr", "0.01"),
            ("gate.threshold", "0.1"),
        ];
        for (key, _) in KEYS {
            let value = samples
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| *v)
                .unwrap_or(if key.starts_with("paths.") { "x" } else { "3" });
            RunConfig::default()
                .set(key, value)
                .unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn rejects_unknown_and_bad_values() {
        let mut c = RunConfig::default();
        assert!(c.set("gate.nope", "1").is_err());
        assert!(c.set("retrieval.n", "ten").is_err());
        assert!(c.apply_text("just words").is_err());
        c.set("retrieval.n", "20").unwrap();
        c.set("retrieval.m", "10").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn defaults_match_reference_values() {
        let c = RunConfig::default();
        let p = &c.pipeline;
        assert_eq!((p.n, p.k, p.m), (10, 2, 100));
        assert_eq!(p.gate.threshold, 0.05);
        assert_eq!(p.train.negative_ratio, 5);
        assert_eq!(p.mode, Mode::EmbQa);
    }
}
