//! Subcommand implementations.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use embqa_core::backend::{
    Backend, Metered, RemoteBackend, ScriptedBackend, ToyConfig, ToyModel, UsageCounter,
};
use embqa_core::backend::{BackendEmbedder, HiddenMode, Responder, Rule, ScriptFile};
use embqa_core::dense::{build_dense, DenseIndex, Embedder, EmbeddingVector};
use embqa_core::embedder::HashEmbedder;
use embqa_core::eval::{
    candidate_coverage, cost_summary, exact_match, f1, gt_at_k, load_questions, read_jsonl,
    render_cost_table, to_jsonl, EvalRecord, EvalReport, QaItem, UsageRecord,
};
use embqa_core::gate::acquire_exploratory;
use embqa_core::lexical::{build_lexical, LexicalIndex};
use embqa_core::pipeline::{
    answer_question, rerank as rerank_kb, DenseSide, FailedQuestion, FirstStage, ReportLine, RerankMode,
    Retrieval,
};
use embqa_core::synth::{generate, SynthConfig};
use embqa_core::text::{load_corpus, save_corpus, Corpus};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const LEXICAL_FILE: &str = "lexical.idx";
pub const DENSE_FILE: &str = "dense.idx";

/// How the vectors of a dense index were produced, stored next to it so
/// queries are embedded into the same space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmbedderSpec {
    Hash { dim: usize, seed: u64 },
    Script { path: PathBuf },
    Remote { url: String },
}

fn descriptor_path(index: &Path) -> PathBuf {
    let mut name = index.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn is_url(spec: &str) -> bool {
    spec.starts_with("http://") || spec.starts_with("https://")
}

fn make_backend(cfg: &RunConfig) -> Result<Box<dyn Backend>, CliError> {
    let spec = cfg
        .backend
        .as_deref()
        .ok_or_else(|| CliError::Usage("no backend configured (--backend toy|script:<file>|<url>)".into()))?;
    if spec == "toy" {
        return Ok(Box::new(ToyModel::new(ToyConfig {
            seed: cfg.toy_seed,
            ..ToyConfig::default()
        })));
    }
    if let Some(path) = spec.strip_prefix("script:") {
        return Ok(Box::new(ScriptedBackend::load(path)?));
    }
    if is_url(spec) {
        return Ok(Box::new(RemoteBackend::new(spec)));
    }
    Err(CliError::Usage(format!("unrecognised backend `{spec}`")))
}

struct OwnedBackendEmbedder(Box<dyn Backend>);

impl Embedder for OwnedBackendEmbedder {
    fn embed(&self, texts: &[String]) -> embqa_core::Result<Vec<EmbeddingVector>> {
        BackendEmbedder(self.0.as_ref()).embed(texts)
    }
}

fn make_embedder(spec: &EmbedderSpec) -> Result<Box<dyn Embedder>, CliError> {
    Ok(match spec {
        EmbedderSpec::Hash { dim, seed } => Box::new(HashEmbedder::new(*dim, *seed)),
        EmbedderSpec::Script { path } => {
            Box::new(OwnedBackendEmbedder(Box::new(ScriptedBackend::load(path)?)))
        }
        EmbedderSpec::Remote { url } => Box::new(OwnedBackendEmbedder(Box::new(RemoteBackend::new(url)))),
    })
}

fn write_output(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

pub fn ingest(corpus: &Path, out: &Path) -> Result<(), CliError> {
    let c = load_corpus(corpus)?;
    ensure_parent(out)?;
    save_corpus(&c, out)?;
    eprintln!("ingested {} passages into {}", c.len(), out.display());
    Ok(())
}

pub fn index_lexical(corpus: &Path, out: &Path) -> Result<(), CliError> {
    let c = load_corpus(corpus)?;
    let index = build_lexical(&c)?;
    ensure_parent(out)?;
    index.save(out)?;
    eprintln!(
        "indexed {} passages, {} terms",
        index.doc_count(),
        index.term_count()
    );
    Ok(())
}

pub fn index_dense(cfg: &RunConfig, corpus: &Path, backend: &str, out: &Path) -> Result<(), CliError> {
    let spec = if backend == "toy" {
        EmbedderSpec::Hash {
            dim: cfg.embedder_dim,
            seed: cfg.embedder_seed,
        }
    } else if let Some(path) = backend.strip_prefix("script:") {
        EmbedderSpec::Script {
            path: fs::canonicalize(path).map_err(|e| CliError::Usage(format!("{path}: {e}")))?,
        }
    } else if is_url(backend) {
        EmbedderSpec::Remote { url: backend.into() }
    } else {
        return Err(CliError::Usage(format!("unrecognised backend `{backend}`")));
    };
    let c = load_corpus(corpus)?;
    let embedder = make_embedder(&spec)?;
    let index = build_dense(&c, embedder.as_ref())?;
    ensure_parent(out)?;
    index.save(out)?;
    write_output(&descriptor_path(out), &serde_json::to_string_pretty(&spec)?)?;
    eprintln!("embedded {} passages at dim {}", index.len(), index.dim());
    Ok(())
}

/// Indexes and corpus loaded for answering or reranking.
struct Loaded {
    corpus: Corpus,
    lexical: Option<LexicalIndex>,
    dense: Option<(DenseIndex, Box<dyn Embedder>)>,
}

impl Loaded {
    fn open(cfg: &RunConfig) -> Result<Self, CliError> {
        let dir = cfg.indexes.as_deref();
        let corpus_path = match (&cfg.corpus, dir) {
            (Some(p), _) => p.clone(),
            (None, Some(d)) => d.join(CORPUS_FILE),
            (None, None) => return Err(CliError::Usage("need --indexes or --corpus".into())),
        };
        let corpus = load_corpus(&corpus_path)?;
        let lexical = match dir.map(|d| d.join(LEXICAL_FILE)).filter(|p| p.exists()) {
            Some(p) => Some(LexicalIndex::load(p)?),
            None => None,
        };
        let dense = match dir.map(|d| d.join(DENSE_FILE)).filter(|p| p.exists()) {
            Some(p) => {
                let desc = descriptor_path(&p);
                let spec: EmbedderSpec = serde_json::from_str(&fs::read_to_string(&desc).map_err(|e| {
                    CliError::Usage(format!(
                        "{}: {e} (dense index without embedder descriptor)",
                        desc.display()
                    ))
                })?)?;
                Some((DenseIndex::load(&p)?, make_embedder(&spec)?))
            }
            None => None,
        };
        let p = &cfg.pipeline;
        let needs_dense =
            p.first_stage == FirstStage::Dense || (p.mode.reranks() && p.rerank != RerankMode::Prompt);
        if needs_dense && dense.is_none() {
            return Err(CliError::Usage(format!(
                "this configuration needs a dense index for {} (build one with `index dense`)",
                if p.first_stage == FirstStage::Dense {
                    "first-stage retrieval"
                } else {
                    "reranking"
                }
            )));
        }
        if p.first_stage == FirstStage::Lexical && lexical.is_none() {
            return Err(CliError::Usage(
                "lexical first stage needs lexical.idx in the index directory".into(),
            ));
        }
        Ok(Self {
            corpus,
            lexical,
            dense,
        })
    }

    fn retrieval(&self) -> Retrieval<'_> {
        Retrieval {
            corpus: &self.corpus,
            lexical: self.lexical.as_ref(),
            dense: self.dense.as_ref().map(|(index, embedder)| DenseSide {
                index,
                embedder: embedder.as_ref(),
            }),
        }
    }
}

pub fn answer(cfg: &RunConfig, question: Option<&str>, questions: Option<&Path>) -> Result<(), CliError> {
    let items: Vec<QaItem> = match (question, questions) {
        (Some(q), None) => vec![QaItem {
            id: "q0".into(),
            question: q.into(),
            answers: Vec::new(),
        }],
        (None, Some(path)) => load_questions(path)?,
        _ => {
            return Err(CliError::Usage(
                "give exactly one of --question or --questions".into(),
            ))
        }
    };
    let loaded = Loaded::open(cfg)?;
    let backend = make_backend(cfg)?;
    let ctx = loaded.retrieval();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::Failed(e.to_string()))?;
    let lines: Vec<ReportLine> = pool.install(|| {
        items
            .par_iter()
            .map(
                |q| match answer_question(&ctx, backend.as_ref(), &q.id, &q.question, &cfg.pipeline) {
                    Ok(mut r) => {
                        if !cfg.timing {
                            r.usage.wall_time_ms = 0.0;
                        }
                        ReportLine::Answered(r)
                    }
                    Err(e) => {
                        log::warn!("{}: {e}", q.id);
                        ReportLine::Failed(FailedQuestion {
                            id: q.id.clone(),
                            question: q.question.clone(),
                            mode: cfg.pipeline.mode,
                            error: e.to_string(),
                        })
                    }
                },
            )
            .collect()
    });
    let body = to_jsonl(&lines)?;
    match &cfg.report {
        Some(path) => write_output(path, &body)?,
        None => std::io::stdout().write_all(body.as_bytes())?,
    }
    let failed = lines
        .iter()
        .filter(|l| matches!(l, ReportLine::Failed(_)))
        .count();
    eprintln!("answered {} of {} questions", lines.len() - failed, lines.len());
    if failed > 0 {
        return Err(CliError::Failed(format!(
            "{failed} of {} questions failed",
            lines.len()
        )));
    }
    Ok(())
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(str::to_owned)
        .collect()
}

pub fn rerank(cfg: &RunConfig, kb: &str, query: &str, candidates: &str) -> Result<(), CliError> {
    let kb_ids = match kb.strip_prefix('@') {
        Some(path) => fs::read_to_string(path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect(),
        None => split_list(kb),
    };
    if kb_ids.is_empty() {
        return Err(CliError::Usage("--kb lists no passages".into()));
    }
    let candidates = split_list(candidates);
    if candidates.is_empty() {
        return Err(CliError::Usage("--candidates lists no answers".into()));
    }
    if cfg.pipeline.n > kb_ids.len() {
        return Err(CliError::Usage(format!(
            "N={} exceeds the {}-passage knowledge base",
            cfg.pipeline.n,
            kb_ids.len()
        )));
    }
    let mut cfg = cfg.clone();
    // Reranking needs the dense side whatever the answer mode says.
    cfg.pipeline.mode = embqa_core::pipeline::Mode::NoExplore;
    if cfg.pipeline.first_stage == FirstStage::Lexical && cfg.pipeline.rerank != RerankMode::Prompt {
        cfg.pipeline.first_stage = FirstStage::Dense;
    }
    let loaded = Loaded::open(&cfg)?;
    let counter = UsageCounter::new();
    let backend = match cfg.pipeline.rerank {
        RerankMode::Prompt => Some(make_backend(&cfg)?),
        _ => None,
    };
    let metered = backend.as_deref().map(|b| Metered::new(b, &counter));
    let out = rerank_kb(
        &loaded.retrieval(),
        metered,
        query,
        &kb_ids,
        &candidates,
        &cfg.pipeline,
        query,
        &mut Vec::new(),
    )?;
    let json = serde_json::json!({
        "context": out.context,
        "refinement": out.summary,
        "usage": counter.report(),
    });
    println!("{}", serde_json::to_string_pretty(&json)?);
    Ok(())
}

pub fn explore(cfg: &RunConfig, prompt_file: &Path) -> Result<(), CliError> {
    let prompt = fs::read_to_string(prompt_file)?;
    let backend = make_backend(cfg)?;
    let input_dim = backend.info()?.input_dim;
    let counter = UsageCounter::new();
    let sample = acquire_exploratory(
        Metered::new(backend.as_ref(), &counter),
        &prompt,
        input_dim,
        &cfg.pipeline.gate,
    )?;
    let json = serde_json::json!({
        "s": if sample.s.is_finite() { Some(sample.s) } else { None },
        "accepted": sample.accepted,
        "attempt": sample.attempt,
        "attempts": sample.attempts,
        "threshold": if cfg.pipeline.gate.threshold.is_finite() { Some(cfg.pipeline.gate.threshold) } else { None },
        "probe_calls": counter.report().probe_calls,
        "e_r": sample.e_r,
        "h_r": sample.h_r,
    });
    println!("{}", serde_json::to_string_pretty(&json)?);
    Ok(())
}

fn read_report(path: &Path) -> Result<Vec<ReportLine>, CliError> {
    Ok(read_jsonl(path)?)
}

pub fn eval(
    report: &Path,
    golds: &Path,
    out: Option<&Path>,
    records_path: Option<&Path>,
    corpus: Option<&Path>,
) -> Result<(), CliError> {
    let lines = read_report(report)?;
    let gold_items = load_questions(golds)?;
    let golds: HashMap<&str, &Vec<String>> = gold_items.iter().map(|q| (q.id.as_str(), &q.answers)).collect();
    let corpus = corpus.map(load_corpus).transpose()?;
    let mut records = Vec::with_capacity(lines.len());
    let mut candidate_sets = Vec::new();
    let mut gold_sets = Vec::new();
    for line in &lines {
        let g = golds
            .get(line.id())
            .filter(|g| !g.is_empty())
            .ok_or_else(|| CliError::Usage(format!("no gold answers for `{}`", line.id())))?;
        let record = match line {
            ReportLine::Answered(r) => {
                let gt = match &corpus {
                    Some(c) => {
                        let ps = r
                            .context_final
                            .iter()
                            .map(|id| c.get(id).ok_or_else(|| embqa_core::Error::NotFound(id.clone())))
                            .collect::<Result<Vec<_>, _>>()?;
                        Some(gt_at_k(&ps, g, 10))
                    }
                    None => None,
                };
                let cands: Vec<String> = r
                    .candidates_initial
                    .iter()
                    .chain(&r.candidates_final)
                    .cloned()
                    .collect();
                let hit = candidate_coverage(std::slice::from_ref(&cands), std::slice::from_ref(*g))? == 1.0;
                candidate_sets.push(cands);
                gold_sets.push((*g).clone());
                EvalRecord {
                    id: r.id.clone(),
                    mode: r.mode.as_str().into(),
                    prediction: r.final_answer.clone(),
                    em: exact_match(&r.final_answer, g),
                    f1: f1(&r.final_answer, g),
                    gt_at_k: gt,
                    coverage_hit: hit,
                    generate_calls: r.usage.generate_calls,
                    output_tokens: r.usage.output_tokens,
                    wall_time_ms: r.usage.wall_time_ms,
                }
            }
            ReportLine::Failed(f) => EvalRecord {
                id: f.id.clone(),
                mode: f.mode.as_str().into(),
                prediction: String::new(),
                em: 0,
                f1: 0.0,
                gt_at_k: corpus.as_ref().map(|_| 0),
                coverage_hit: false,
                generate_calls: 0,
                output_tokens: 0,
                wall_time_ms: 0.0,
            },
        };
        records.push(record);
    }
    let report = EvalReport::from_records(records)?;
    let table = report.render_table();
    print!("{table}");
    if let Some(out) = out {
        write_output(out, &table)?;
    }
    let records_path = records_path
        .map(Path::to_path_buf)
        .or_else(|| out.map(|o| PathBuf::from(format!("{}.records.jsonl", o.display()))));
    if let Some(path) = records_path {
        let mut body = to_jsonl(&report.records)?;
        body.push_str(&serde_json::to_string(&report.aggregates)?);
        body.push('\n');
        write_output(&path, &body)?;
    }
    Ok(())
}

pub fn cost_report(reports: &[PathBuf], out: Option<&Path>, json: Option<&Path>) -> Result<(), CliError> {
    let mut usage = Vec::new();
    for path in reports {
        for line in read_report(path)? {
            if let ReportLine::Answered(r) = line {
                usage.push(UsageRecord {
                    mode: r.mode.as_str().into(),
                    usage: r.usage,
                });
            }
        }
    }
    let rows = cost_summary(&usage)?;
    let table = render_cost_table(&rows);
    print!("{table}");
    if let Some(out) = out {
        write_output(out, &table)?;
    }
    if let Some(path) = json {
        write_output(path, &serde_json::to_string_pretty(&rows)?)?;
    }
    Ok(())
}

/// Script answering grading prompts with a flat grade and candidate
/// prompts by echoing the word after the cue in the given passages.
pub fn fixture_script(cue: &str) -> ScriptFile {
    ScriptFile {
        input_dim: 16,
        hidden: HiddenMode::Echo,
        embed_seed: 0,
        rules: vec![
            Rule {
                contains: Some("judge the relevance".into()),
                responder: Responder::Canned {
                    reply: "2".into(),
                    tokens: None,
                },
                ..Rule::default()
            },
            Rule {
                responder: Responder::Echo {
                    echo_after: cue.into(),
                    k: 2,
                    decay: 0.8,
                },
                ..Rule::default()
            },
        ],
    }
}

pub fn synth(out: &Path, questions: usize, seed: u64) -> Result<(), CliError> {
    let cfg = SynthConfig {
        questions,
        seed,
        ..SynthConfig::default()
    };
    let fixture = generate(&cfg)?;
    fs::create_dir_all(out)?;
    save_corpus(&fixture.corpus, out.join(CORPUS_FILE))?;
    write_output(&out.join("questions.jsonl"), &to_jsonl(&fixture.questions)?)?;
    let mut script = serde_json::to_string_pretty(&fixture_script(&cfg.cue))?;
    script.push('\n');
    write_output(&out.join("script.json"), &script)?;
    eprintln!(
        "wrote {} passages and {} questions to {}",
        fixture.corpus.len(),
        fixture.questions.len(),
        out.display()
    );
    Ok(())
}
