//! End-to-end answering: retrieve, generate candidates, refine and rerank,
//! explore, regenerate, select by entropy.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::{
    Backend, CallKind, GenerationRequest, GenerationTrace, Metered, UsageCounter, UsageReport,
};
use crate::dense::{DenseIndex, Embedder, EmbeddingVector, Similarity};
use crate::error::{Error, Result};
use crate::gate::{acquire_exploratory, GateConfig};
use crate::lexical::{LexicalIndex, ScoredId};
use crate::prompt::{build_candidate_prompt, parse_candidates, ParsedCandidates};
use crate::refine::{
    label_passages, prompt_rerank, refine_query, rerank_kb, train_refiner, BatchItem, Refinement,
    RefinerWeights, TrainConfig,
};
use crate::select::{candidate_entropies, select_answer};
use crate::text::{Corpus, Passage};
use crate::util::derive_seed;

/// The ablation lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Rerank and explore.
    #[serde(rename = "embqa")]
    EmbQa,
    /// Rerank, then regenerate without exploration.
    #[serde(rename = "no-explore")]
    NoExplore,
    /// Explore over the first-stage context without reranking.
    #[serde(rename = "no-rerank")]
    NoRerank,
    /// One generation over the first-stage context, entropy pick.
    #[serde(rename = "retrieval-only")]
    RetrievalOnly,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::EmbQa => "embqa",
            Mode::NoExplore => "no-explore",
            Mode::NoRerank => "no-rerank",
            Mode::RetrievalOnly => "retrieval-only",
        }
    }

    pub fn reranks(self) -> bool {
        matches!(self, Mode::EmbQa | Mode::NoExplore)
    }

    pub fn explores(self) -> bool {
        matches!(self, Mode::EmbQa | Mode::NoRerank)
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embqa" | "full" => Ok(Mode::EmbQa),
            "no-explore" => Ok(Mode::NoExplore),
            "no-rerank" => Ok(Mode::NoRerank),
            "retrieval-only" | "no-explore-no-rerank" => Ok(Mode::RetrievalOnly),
            other => Err(Error::invalid(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RerankMode {
    /// Trained per-query refiner.
    Learned,
    /// Untrained refiner: `e_y + e_q`.
    Sum,
    /// One 0-4 grading prompt per knowledge-base passage.
    Prompt,
}

impl FromStr for RerankMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(RerankMode::Learned),
            "sum" => Ok(RerankMode::Sum),
            "prompt" => Ok(RerankMode::Prompt),
            other => Err(Error::invalid(format!("unknown rerank mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FirstStage {
    Lexical,
    Dense,
}

impl FromStr for FirstStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lexical" | "bm25" => Ok(FirstStage::Lexical),
            "dense" => Ok(FirstStage::Dense),
            other => Err(Error::invalid(format!("unknown first stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub rerank: RerankMode,
    pub first_stage: FirstStage,
    /// Knowledge-base size.
    pub m: usize,
    /// Context size.
    pub n: usize,
    /// Candidates per generation.
    pub k: usize,
    pub max_tokens: usize,
    pub top_logprobs: usize,
    pub rerank_max_tokens: usize,
    pub similarity: Similarity,
    pub train: TrainConfig,
    /// `train.seed` and `gate.seed` are base seeds; each question derives
    /// its own from them and its id.
    pub gate: GateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::EmbQa,
            rerank: RerankMode::Learned,
            first_stage: FirstStage::Lexical,
            m: 100,
            n: 10,
            k: 2,
            max_tokens: 32,
            top_logprobs: crate::backend::DEFAULT_TOP_LOGPROBS,
            rerank_max_tokens: 4,
            similarity: Similarity::Dot,
            train: TrainConfig::default(),
            gate: GateConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::invalid("N and M must be positive"));
        }
        if self.n > self.m {
            return Err(Error::invalid(format!("N={} exceeds M={}", self.n, self.m)));
        }
        if !(1..=10).contains(&self.k) {
            return Err(Error::invalid("K must lie in 1..=10"));
        }
        if self.max_tokens == 0 || self.top_logprobs == 0 {
            return Err(Error::invalid("max_tokens and top_logprobs must be positive"));
        }
        if !(self.train.tau.is_finite() && self.train.tau > 0.0) {
            return Err(Error::invalid("refiner tau must be positive"));
        }
        if !(self.train.lr.is_finite() && self.train.lr >= 0.0) {
            return Err(Error::invalid("refiner lr must be non-negative"));
        }
        self.gate.validate()
    }
}

/// A dense index and the embedder that produced it.
#[derive(Clone, Copy)]
pub struct DenseSide<'a> {
    pub index: &'a DenseIndex,
    /// Maps questions and candidates into the index space.
    pub embedder: &'a dyn Embedder,
}

/// Read-only retrieval state shared across questions.
#[derive(Clone, Copy)]
pub struct Retrieval<'a> {
    pub corpus: &'a Corpus,
    pub lexical: Option<&'a LexicalIndex>,
    /// Needed for dense first-stage retrieval and embedding reranking.
    pub dense: Option<DenseSide<'a>>,
}

impl<'a> Retrieval<'a> {
    fn dense(&self) -> Result<DenseSide<'a>> {
        self.dense
            .ok_or_else(|| Error::invalid("dense retrieval and embedding reranking need a dense index"))
    }

    pub fn first_stage(
        &self,
        question: &str,
        m: usize,
        stage: FirstStage,
        sim: Similarity,
    ) -> Result<Vec<ScoredId>> {
        match stage {
            FirstStage::Lexical => {
                let lexical = self
                    .lexical
                    .ok_or_else(|| Error::invalid("lexical first stage needs a lexical index"))?;
                Ok(lexical.top_k(question, m))
            }
            FirstStage::Dense => {
                let dense = self.dense()?;
                let q = dense.embedder.embed_one(question)?;
                dense.index.top_k(&q, m, sim)
            }
        }
    }

    pub fn passages(&self, ids: &[String]) -> Result<Vec<&'a Passage>> {
        ids.iter()
            .map(|id| self.corpus.get(id).ok_or_else(|| Error::NotFound(id.clone())))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    #[serde(with = "finite_or_null")]
    pub s: f64,
    pub attempts: usize,
    pub accepted: bool,
}

mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementSummary {
    /// `learned`, `sum`, `prompt` or `skipped`.
    pub status: String,
    pub positives: usize,
    pub negatives: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
}

/// Everything recorded about one answered question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionReport {
    pub id: String,
    pub question: String,
    pub mode: Mode,
    pub kb: Vec<String>,
    pub context_initial: Vec<String>,
    pub context_final: Vec<String>,
    pub candidates_initial: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement: Option<RefinementSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateSummary>,
    pub candidates_final: Vec<String>,
    pub entropies: Vec<f64>,
    pub chosen_index: usize,
    pub final_answer: String,
    pub usage: UsageReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// A question the pipeline could not answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedQuestion {
    pub id: String,
    pub question: String,
    pub mode: Mode,
    pub error: String,
}

/// One line of an answer report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
#[allow(clippy::large_enum_variant)]
pub enum ReportLine {
    Answered(QuestionReport),
    Failed(FailedQuestion),
}

impl ReportLine {
    pub fn id(&self) -> &str {
        match self {
            ReportLine::Answered(r) => &r.id,
            ReportLine::Failed(f) => &f.id,
        }
    }

    pub fn mode(&self) -> Mode {
        match self {
            ReportLine::Answered(r) => r.mode,
            ReportLine::Failed(f) => f.mode,
        }
    }
}

fn generate_candidates(
    backend: Metered<'_>,
    req: &GenerationRequest,
    k: usize,
    warnings: &mut Vec<String>,
) -> Result<(GenerationTrace, ParsedCandidates)> {
    let trace = backend.generate(CallKind::Generate, req)?;
    match parse_candidates(&trace.text, k) {
        Ok(parsed) => {
            warnings.extend(parsed.warnings.iter().cloned());
            Ok((trace, parsed))
        }
        Err(Error::CandidateParse { reply }) => {
            warnings.push(format!("unparseable reply {reply:?}; retrying once"));
            let trace = backend.generate(CallKind::Generate, req)?;
            let parsed = parse_candidates(&trace.text, k)?;
            warnings.extend(parsed.warnings.iter().cloned());
            Ok((trace, parsed))
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reranked {
    /// Top-N passage ids, best first.
    pub context: Vec<String>,
    pub summary: RefinementSummary,
}

/// Reranks the knowledge base `kb` for `question` given step-one
/// candidates, using the configured rerank mode. `backend` is only called
/// for prompt-level reranking. `id` seeds the refiner.
#[allow(clippy::too_many_arguments)]
pub fn rerank(
    ctx: &Retrieval<'_>,
    backend: Option<Metered<'_>>,
    question: &str,
    kb: &[String],
    candidates: &[String],
    cfg: &PipelineConfig,
    id: &str,
    warnings: &mut Vec<String>,
) -> Result<Reranked> {
    let n = cfg.n.min(kb.len());
    let kb_passages = ctx.passages(kb)?;
    if cfg.rerank == RerankMode::Prompt {
        let backend = backend.ok_or_else(|| Error::invalid("prompt reranking needs a backend"))?;
        let graded = prompt_rerank(backend, question, &kb_passages, cfg.rerank_max_tokens)?;
        warnings.extend(graded.warnings);
        return Ok(Reranked {
            context: graded.ranked.into_iter().take(n).map(|g| g.id).collect(),
            summary: RefinementSummary {
                status: "prompt".into(),
                positives: 0,
                negatives: 0,
                initial_loss: None,
                final_loss: None,
            },
        });
    }

    let dense = ctx.dense()?;
    let labels = label_passages(&kb_passages, candidates)?;
    let e_q = dense.embedder.embed_one(question)?;
    let e_y = EmbeddingVector::mean(&dense.embedder.embed(candidates)?)?;
    let items = |ids: &[String]| -> Result<Vec<BatchItem>> {
        ids.iter()
            .map(|id| {
                Ok(BatchItem {
                    id: id.clone(),
                    embedding: dense.index.vector(id)?,
                })
            })
            .collect()
    };
    let mut summary = RefinementSummary {
        status: String::new(),
        positives: labels.positives.len(),
        negatives: labels.negatives.len(),
        initial_loss: None,
        final_loss: None,
    };
    let query = match cfg.rerank {
        RerankMode::Sum => {
            summary.status = "sum".into();
            refine_query(&RefinerWeights::identity(e_q.dim()), &e_y, &e_q)?
        }
        _ => {
            let train = TrainConfig {
                seed: derive_seed(cfg.train.seed, &format!("refiner/{id}")),
                similarity: cfg.similarity,
                ..cfg.train
            };
            let positives = items(&labels.positives)?;
            let negatives = items(&labels.negatives)?;
            match train_refiner(&e_q, &e_y, &positives, &negatives, &train)? {
                Refinement::Trained(t) => {
                    summary.status = "learned".into();
                    summary.initial_loss = Some(t.initial_loss);
                    summary.final_loss = Some(t.final_loss);
                    refine_query(&t.weights, &e_y, &e_q)?
                }
                Refinement::Skipped(why) => {
                    warnings.push(format!("refinement skipped: {why}"));
                    summary.status = "skipped".into();
                    e_q
                }
            }
        }
    };
    let ranked = rerank_kb(dense.index, kb, &query, n, cfg.similarity)?;
    Ok(Reranked {
        context: ranked.into_iter().map(|h| h.id).collect(),
        summary,
    })
}

/// Answers one question. `id` seeds every random choice made for it, so
/// the result does not depend on what else runs concurrently.
pub fn answer_question(
    ctx: &Retrieval<'_>,
    backend: &dyn Backend,
    id: &str,
    question: &str,
    cfg: &PipelineConfig,
) -> Result<QuestionReport> {
    cfg.validate()?;
    let counter = UsageCounter::new();
    let metered = Metered::new(backend, &counter);
    let mut warnings = Vec::new();

    let kb: Vec<String> = ctx
        .first_stage(question, cfg.m, cfg.first_stage, cfg.similarity)?
        .into_iter()
        .map(|h| h.id)
        .collect();
    if kb.is_empty() {
        return Err(Error::NoEvidence);
    }
    let context_initial: Vec<String> = kb.iter().take(cfg.n).cloned().collect();

    let request = |context: &[String]| -> Result<GenerationRequest> {
        let prompt = build_candidate_prompt(question, &ctx.passages(context)?, cfg.k)?;
        Ok(GenerationRequest {
            top_logprobs: cfg.top_logprobs,
            ..GenerationRequest::greedy(prompt, cfg.max_tokens)
        })
    };

    let first_req = request(&context_initial)?;
    let (first_trace, first) = generate_candidates(metered, &first_req, cfg.k, &mut warnings)?;
    let candidates_initial = first.answers();

    let mut refinement = None;
    let mut gate = None;
    let mut context_final = context_initial.clone();
    let (trace, parsed) = if cfg.mode == Mode::RetrievalOnly {
        (first_trace, first)
    } else {
        if cfg.mode.reranks() {
            let r = rerank(
                ctx,
                Some(metered),
                question,
                &kb,
                &candidates_initial,
                cfg,
                id,
                &mut warnings,
            )?;
            context_final = r.context;
            refinement = Some(r.summary);
        }
        let mut req = request(&context_final)?;
        if cfg.mode.explores() {
            let input_dim = backend.info()?.input_dim;
            let gate_cfg = GateConfig {
                seed: derive_seed(cfg.gate.seed, &format!("gate/{id}")),
                ..cfg.gate
            };
            let sample = acquire_exploratory(metered, &req.prompt, input_dim, &gate_cfg)?;
            if !sample.accepted {
                warnings.push(format!(
                    "no exploratory sample passed the gate in {} attempts; using the lowest statistic",
                    sample.attempts
                ));
            }
            gate = Some(GateSummary {
                s: sample.s,
                attempts: sample.attempts,
                accepted: sample.accepted,
            });
            req = req.with_injection(sample.e_r, false);
        }
        generate_candidates(metered, &req, cfg.k, &mut warnings)?
    };

    let entropies = candidate_entropies(&trace, &parsed)?;
    let decision = select_answer(&parsed.answers(), &entropies)?;
    Ok(QuestionReport {
        id: id.to_owned(),
        question: question.to_owned(),
        mode: cfg.mode,
        kb,
        context_initial,
        context_final,
        candidates_initial,
        refinement,
        gate,
        candidates_final: parsed.answers(),
        entropies: decision.entropies,
        chosen_index: decision.chosen_index,
        final_answer: decision.final_answer,
        usage: counter.report(),
        warnings,
    })
}
