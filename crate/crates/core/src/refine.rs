//! Per-query linear query refinement trained with InfoNCE, and reranking of
//! the retrieved knowledge base with the refined query.
//!
//! The refined query is `W1·e_y + W2·e_q`. Weights start from identity, so
//! zero training epochs reduce to the plain sum `e_y + e_q`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{CallKind, GenerationRequest, Metered};
use crate::dense::{read_store, write_store, DenseIndex, EmbeddingVector, Similarity};
use crate::error::{Error, Result};
use crate::lexical::ScoredId;
use crate::prompt::{build_rerank_prompt, parse_grade};
use crate::text::{normalize_answer, Passage};

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    dim: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn scaled_identity(dim: usize, a: f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = a;
        }
        m
    }

    pub fn from_rows(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::DimMismatch {
                expected: dim * dim,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.dim + col]
    }

    fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.dim)) {
            *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// `self += scale · u vᵀ`
    fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        for (row, ui) in self.data.chunks_exact_mut(self.dim).zip(u) {
            let s = scale * ui;
            for (r, vj) in row.iter_mut().zip(v) {
                *r += s * vj;
            }
        }
    }

    fn axpy(&mut self, a: f64, other: &Matrix) {
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinerWeights {
    pub w1: Matrix,
    pub w2: Matrix,
}

impl RefinerWeights {
    pub fn identity(dim: usize) -> Self {
        Self {
            w1: Matrix::identity(dim),
            w2: Matrix::identity(dim),
        }
    }

    pub fn new(w1: Matrix, w2: Matrix) -> Result<Self> {
        if w1.dim() != w2.dim() {
            return Err(Error::DimMismatch {
                expected: w1.dim(),
                actual: w2.dim(),
            });
        }
        Ok(Self { w1, w2 })
    }

    pub fn dim(&self) -> usize {
        self.w1.dim()
    }

    /// Writes `{dim, W1 rows, W2 rows}` in the dense-store layout: `2·dim`
    /// f32 rows with ids `w1:<i>` then `w2:<i>`.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let d = self.dim();
        let ids: Vec<String> = (0..d)
            .map(|i| format!("w1:{i}"))
            .chain((0..d).map(|i| format!("w2:{i}")))
            .collect();
        let rows: Vec<f32> = self
            .w1
            .as_slice()
            .iter()
            .chain(self.w2.as_slice())
            .map(|&v| v as f32)
            .collect();
        write_store(w, d, &ids, &rows)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let (dim, ids, rows) = read_store(r)?;
        if ids.len() != 2 * dim {
            return Err(Error::CorruptIndex(format!(
                "weights store holds {} rows, expected {}",
                ids.len(),
                2 * dim
            )));
        }
        let wide: Vec<f64> = rows.iter().map(|&v| v as f64).collect();
        let (a, b) = wide.split_at(dim * dim);
        Self::new(
            Matrix::from_rows(dim, a.to_vec())?,
            Matrix::from_rows(dim, b.to_vec())?,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// `W1·e_y + W2·e_q`
pub fn refine_query(
    w: &RefinerWeights,
    e_y: &EmbeddingVector,
    e_q: &EmbeddingVector,
) -> Result<EmbeddingVector> {
    e_y.check_dim(w.dim())?;
    e_q.check_dim(w.dim())?;
    let mut out = vec![0.0; w.dim()];
    w.w1.mul_vec_into(e_y.values(), &mut out);
    w.w2.mul_vec_into(e_q.values(), &mut out);
    EmbeddingVector::new(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
}

/// Whether the normalized passage contains the normalized needle as a
/// whole-token sequence.
pub fn passage_contains(passage: &Passage, needle: &str) -> bool {
    contains_normalized(&normalize_answer(&passage.full_text()), needle)
}

pub(crate) fn contains_normalized(normalized_haystack: &str, needle: &str) -> bool {
    let needle = normalize_answer(needle);
    if needle.is_empty() {
        return false;
    }
    format!(" {normalized_haystack} ").contains(&format!(" {needle} "))
}

/// Splits the knowledge base into passages containing at least one
/// candidate (positives) and the rest, preserving knowledge-base order.
pub fn label_passages(kb: &[&Passage], candidates: &[String]) -> Result<Labels> {
    if kb.is_empty() {
        return Err(Error::invalid("cannot label an empty knowledge base"));
    }
    if candidates.is_empty() {
        return Err(Error::invalid("labeling needs at least one candidate"));
    }
    let mut labels = Labels {
        positives: Vec::new(),
        negatives: Vec::new(),
    };
    for p in kb {
        let text = normalize_answer(&p.full_text());
        if candidates.iter().any(|c| contains_normalized(&text, c)) {
            labels.positives.push(p.id.clone());
        } else {
            labels.negatives.push(p.id.clone());
        }
    }
    Ok(labels)
}

/// Uniform sample without replacement of `min(ratio·positives, |pool|)`
/// negatives, returned in pool order.
pub fn sample_negatives(
    pool: &[String],
    positive_count: usize,
    ratio: usize,
    seed: u64,
) -> Result<Vec<String>> {
    if positive_count == 0 {
        return Err(Error::NoPositives);
    }
    let amount = (ratio * positive_count).min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, pool.len(), amount).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| pool[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub id: String,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub e_q: EmbeddingVector,
    pub e_y: EmbeddingVector,
    pub positives: Vec<BatchItem>,
    pub negatives: Vec<BatchItem>,
}

impl ContrastiveBatch {
    pub fn new(
        e_q: EmbeddingVector,
        e_y: EmbeddingVector,
        positives: Vec<BatchItem>,
        negatives: Vec<BatchItem>,
    ) -> Result<Self> {
        let dim = e_q.dim();
        e_y.check_dim(dim)?;
        for item in positives.iter().chain(&negatives) {
            item.embedding.check_dim(dim)?;
        }
        if positives.iter().any(|p| negatives.iter().any(|n| n.id == p.id)) {
            return Err(Error::invalid("positives and negatives overlap"));
        }
        Ok(Self {
            e_q,
            e_y,
            positives,
            negatives,
        })
    }

    fn check(&self) -> Result<()> {
        if self.positives.is_empty() {
            return Err(Error::NoPositives);
        }
        if self.negatives.is_empty() {
            return Err(Error::invalid("contrastive batch needs at least one negative"));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Mean over positives of `-log softmax` of the positive among all items,
/// with logits `sim(anchor, x) / tau`.
pub fn infonce_loss(
    anchor: &EmbeddingVector,
    positives: &[EmbeddingVector],
    negatives: &[EmbeddingVector],
    tau: f64,
    mode: Similarity,
) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::NoPositives);
    }
    if negatives.is_empty() {
        return Err(Error::invalid("InfoNCE needs at least one negative"));
    }
    check_tau(tau)?;
    let mut logits = Vec::with_capacity(positives.len() + negatives.len());
    for x in positives.iter().chain(negatives) {
        x.check_dim(anchor.dim())?;
        let s = mode.score_slices(anchor.values(), x.values());
        if !s.is_finite() {
            return Err(Error::NonFinite("similarity"));
        }
        logits.push(s / tau);
    }
    let lse = log_sum_exp(&logits);
    let pos_mean = logits[..positives.len()].iter().sum::<f64>() / positives.len() as f64;
    Ok(lse - pos_mean)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub w1: Matrix,
    pub w2: Matrix,
}

/// Exact gradient of the InfoNCE loss of `refine_query(w, e_y, e_q)` with
/// respect to `W1` and `W2`.
pub fn infonce_grad(
    w: &RefinerWeights,
    batch: &ContrastiveBatch,
    tau: f64,
    mode: Similarity,
) -> Result<Gradients> {
    batch.check()?;
    check_tau(tau)?;
    let anchor = refine_query(w, &batch.e_y, &batch.e_q)?;
    let e = anchor.values();
    let dim = e.len();
    let n_pos = batch.positives.len();
    let items: Vec<&[f64]> = batch
        .positives
        .iter()
        .chain(&batch.negatives)
        .map(|b| b.embedding.values())
        .collect();

    let sims: Vec<f64> = items.iter().map(|x| mode.score_slices(e, x)).collect();
    if sims.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("similarity"));
    }
    let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    let lse = log_sum_exp(&logits);
    let loss = lse - logits[..n_pos].iter().sum::<f64>() / n_pos as f64;

    // dL/ds_x = (softmax_x - [x positive] / P) / tau
    let coeffs: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let target = if i < n_pos { 1.0 / n_pos as f64 } else { 0.0 };
            ((l - lse).exp() - target) / tau
        })
        .collect();

    let mut g = vec![0.0; dim];
    match mode {
        Similarity::Dot => {
            for (c, x) in coeffs.iter().zip(&items) {
                for (gi, xi) in g.iter_mut().zip(x.iter()) {
                    *gi += c * xi;
                }
            }
        }
        Similarity::Cosine => {
            let e_norm = anchor.norm();
            if e_norm > 0.0 {
                for ((c, x), s) in coeffs.iter().zip(&items).zip(&sims) {
                    let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if x_norm == 0.0 {
                        continue;
                    }
                    // d cos(e, x) / de = x / (|e||x|) - cos · e / |e|²
                    let a = c / (e_norm * x_norm);
                    let b = c * s / (e_norm * e_norm);
                    for ((gi, xi), ei) in g.iter_mut().zip(x.iter()).zip(e) {
                        *gi += a * xi - b * ei;
                    }
                }
            }
        }
    }

    let mut w1 = Matrix::zeros(dim);
    let mut w2 = Matrix::zeros(dim);
    w1.add_outer(1.0, &g, batch.e_y.values());
    w2.add_outer(1.0, &g, batch.e_q.values());
    Ok(Gradients { loss, w1, w2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tau: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Positives per step; `None` puts every positive in one batch.
    pub batch_size: Option<usize>,
    pub negative_ratio: usize,
    pub seed: u64,
    pub similarity: Similarity,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lr: 1e-3,
            epochs: 20,
            batch_size: None,
            negative_ratio: 5,
            seed: 0,
            similarity: Similarity::Dot,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRefiner {
    pub weights: RefinerWeights,
    /// Full labeled-set loss at identity initialization.
    pub initial_loss: f64,
    /// Full labeled-set loss of the returned weights.
    pub final_loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Refinement {
    Trained(TrainedRefiner),
    /// Labeling produced no positives (or nothing to contrast against); the
    /// caller should keep the unrefined query.
    Skipped(&'static str),
}

fn full_set_loss(
    w: &RefinerWeights,
    e_y: &EmbeddingVector,
    e_q: &EmbeddingVector,
    positives: &[BatchItem],
    negatives: &[BatchItem],
    cfg: &TrainConfig,
) -> Result<f64> {
    let anchor = refine_query(w, e_y, e_q)?;
    let pos: Vec<EmbeddingVector> = positives.iter().map(|b| b.embedding.clone()).collect();
    let neg: Vec<EmbeddingVector> = negatives.iter().map(|b| b.embedding.clone()).collect();
    infonce_loss(&anchor, &pos, &neg, cfg.tau, cfg.similarity)
}

/// Plain gradient descent from identity. Each epoch shuffles the positives,
/// splits them into batches and pairs every batch with a fresh negative
/// sample at `negative_ratio`. The returned weights are those with the
/// lowest full labeled-set loss seen, so `final_loss <= initial_loss`.
pub fn train_refiner(
    e_q: &EmbeddingVector,
    e_y: &EmbeddingVector,
    positives: &[BatchItem],
    negatives: &[BatchItem],
    cfg: &TrainConfig,
) -> Result<Refinement> {
    check_tau(cfg.tau)?;
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::invalid("learning rate must be finite and >= 0"));
    }
    if positives.is_empty() {
        return Ok(Refinement::Skipped("no positive passages"));
    }
    if negatives.is_empty() {
        return Ok(Refinement::Skipped("no negative passages"));
    }
    let dim = e_q.dim();
    e_y.check_dim(dim)?;
    let mut weights = RefinerWeights::identity(dim);
    let initial_loss = full_set_loss(&weights, e_y, e_q, positives, negatives, cfg)?;
    let mut best = (initial_loss, weights.clone());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let neg_ids: Vec<String> = negatives.iter().map(|n| n.id.clone()).collect();
    let batch_size = cfg.batch_size.unwrap_or(positives.len()).max(1);
    let mut order: Vec<usize> = (0..positives.len()).collect();
    let mut steps = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let pos: Vec<BatchItem> = chunk.iter().map(|&i| positives[i].clone()).collect();
            let sampled: HashSet<String> =
                sample_negatives(&neg_ids, pos.len(), cfg.negative_ratio, rng.random())?
                    .into_iter()
                    .collect();
            let neg: Vec<BatchItem> = negatives
                .iter()
                .filter(|n| sampled.contains(&n.id))
                .cloned()
                .collect();
            let batch = ContrastiveBatch {
                e_q: e_q.clone(),
                e_y: e_y.clone(),
                positives: pos,
                negatives: neg,
            };
            if batch.negatives.is_empty() {
                continue;
            }
            let g = infonce_grad(&weights, &batch, cfg.tau, cfg.similarity)?;
            weights.w1.axpy(-cfg.lr, &g.w1);
            weights.w2.axpy(-cfg.lr, &g.w2);
            steps += 1;
        }
        let loss = full_set_loss(&weights, e_y, e_q, positives, negatives, cfg)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        if loss <= best.0 {
            best = (loss, weights.clone());
        }
    }
    Ok(Refinement::Trained(TrainedRefiner {
        weights: best.1,
        initial_loss,
        final_loss: best.0,
        steps,
    }))
}

/// Top-`n` of the knowledge base by similarity to the refined query.
pub fn rerank_kb(
    index: &DenseIndex,
    kb: &[String],
    query: &EmbeddingVector,
    n: usize,
    mode: Similarity,
) -> Result<Vec<ScoredId>> {
    if n > kb.len() {
        return Err(Error::invalid(format!(
            "cannot take top {n} of a {}-passage knowledge base",
            kb.len()
        )));
    }
    index.top_k_within(query, kb, n, mode)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradedPassage {
    pub id: String,
    pub grade: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptRerank {
    pub ranked: Vec<GradedPassage>,
    pub warnings: Vec<String>,
}

/// Prompt-level baseline: one grading call per passage, stable sort by grade.
pub fn prompt_rerank(
    backend: Metered<'_>,
    query: &str,
    passages: &[&Passage],
    max_tokens: usize,
) -> Result<PromptRerank> {
    let mut graded = Vec::with_capacity(passages.len());
    let mut warnings = Vec::new();
    for p in passages {
        let req = GenerationRequest::greedy(build_rerank_prompt(query, &p.text), max_tokens.max(1));
        let trace = backend.generate(CallKind::Rerank, &req)?;
        let grade = parse_grade(&trace.text).unwrap_or_else(|| {
            let w = format!(
                "unparseable grade {:?} for passage `{}`; using 0",
                trace.text, p.id
            );
            log::warn!("{w}");
            warnings.push(w);
            0
        });
        graded.push(GradedPassage {
            id: p.id.clone(),
            grade,
        });
    }
    graded.sort_by_key(|g| std::cmp::Reverse(g.grade));
    Ok(PromptRerank {
        ranked: graded,
        warnings,
    })
}
