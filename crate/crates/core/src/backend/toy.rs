//! A seeded two-layer decoder-only transformer with tied embeddings.
//!
//! Tokenization is lowercase whitespace splitting over a small fixed vocab;
//! unknown words fall into hashed `<oov_k>` buckets. Position 0 is always
//! `<bos>`. An injected embedding occupies one extra input position after the
//! prompt and bypasses token lookup, so injecting a token's embedding row is
//! indistinguishable from appending that token.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Backend, BackendInfo, GenerationRequest, GenerationTrace, TokenLogprobs, Usage};
use crate::dense::EmbeddingVector;
use crate::error::{Error, Result};
use crate::util::stable_hash64;

const BOS: u32 = 0;
const EOS: u32 = 1;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub dim: usize,
    pub layers: usize,
    pub mlp_mult: usize,
    pub oov_buckets: usize,
    pub max_vocab: usize,
    pub max_context: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            layers: 2,
            mlp_mult: 4,
            oov_buckets: 64,
            max_vocab: 512,
            max_context: 4096,
            seed: 42,
        }
    }
}

const DEFAULT_WORDS: &str = "the of and to in is was for on that by with as at from it his an \
were are which this be has he or had not first one their its new after who they have her she \
two been other when there all during into school time may years more most only over city three \
between would also some known can about team such world later where these de being through \
up under year out state university united used including then national while both than many \
until new american him people series before could called since film number part well since \
what how why which who whom whose where capital river country born died album song band game \
name king queen war music north south east west city town village island lake mountain sea \
book novel author writer actor singer president company founded located largest famous \
(a) (b) (c) , . answer question passage title text yes no none unknown paris london berlin \
rome madrid france england germany italy spain europe asia africa america red blue green \
black white small big old young early late high low long short cat dog bird fish horse cow \
sat mat log run ran sun moon star water fire earth air stone gold silver iron wood glass";

/// One decoder block: single-head causal attention and a GELU MLP, pre-norm.
#[derive(Debug, Clone)]
struct Block {
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    w1: Vec<f64>,
    w2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    cfg: ToyConfig,
    vocab: Vec<String>,
    lookup: HashMap<String, u32>,
    embedding: Vec<f64>,
    blocks: Vec<Block>,
}

/// Per-layer key/value cache for incremental decoding.
struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

struct StepOutput {
    /// Residual stream after each block, index `l` = output of block `l`.
    layer_outputs: Vec<Vec<f64>>,
    final_norm: Vec<f64>,
}

impl ToyModel {
    pub fn new(cfg: ToyConfig) -> Self {
        let words: Vec<String> = DEFAULT_WORDS.split_whitespace().map(str::to_owned).collect();
        Self::with_words(cfg, &words)
    }

    /// Builds a model whose vocab holds the special tokens, the OOV buckets
    /// and then `words` (deduplicated, truncated to `max_vocab`).
    pub fn with_words(cfg: ToyConfig, words: &[String]) -> Self {
        assert!(
            cfg.dim >= 2 && cfg.layers >= 2,
            "toy model needs dim >= 2 and >= 2 layers"
        );
        let mut vocab = vec!["<bos>".to_owned(), "<eos>".to_owned()];
        vocab.extend((0..cfg.oov_buckets).map(|k| format!("<oov_{k}>")));
        let mut lookup: HashMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        for w in words {
            if vocab.len() >= cfg.max_vocab {
                break;
            }
            let w = w.to_lowercase();
            if !lookup.contains_key(&w) {
                lookup.insert(w.clone(), vocab.len() as u32);
                vocab.push(w);
            }
        }

        let d = cfg.dim;
        let h = d * cfg.mlp_mult;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut draw = |n: usize, std: f64| -> Vec<f64> {
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        let embedding = draw(vocab.len() * d, 1.0);
        let inv = 1.0 / (d as f64).sqrt();
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                wq: draw(d * d, inv),
                wk: draw(d * d, inv),
                wv: draw(d * d, inv),
                wo: draw(d * d, 0.5 * inv),
                w1: draw(h * d, inv),
                w2: draw(d * h, 0.5 / (h as f64).sqrt()),
            })
            .collect();
        Self {
            cfg,
            vocab,
            lookup,
            embedding,
            blocks,
        }
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn token_id(&self, word: &str) -> u32 {
        let w = word.to_lowercase();
        match self.lookup.get(&w) {
            Some(&id) => id,
            None => 2 + (stable_hash64(w.as_bytes()) % self.cfg.oov_buckets as u64) as u32,
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.token_id(w)).collect()
    }

    pub fn embedding_row(&self, id: u32) -> EmbeddingVector {
        let d = self.cfg.dim;
        let i = id as usize;
        EmbeddingVector::new(self.embedding[i * d..(i + 1) * d].to_vec()).expect("finite weights")
    }

    fn new_cache(&self) -> KvCache {
        KvCache {
            keys: vec![Vec::new(); self.cfg.layers],
            values: vec![Vec::new(); self.cfg.layers],
            len: 0,
        }
    }

    fn positional(&self, pos: usize) -> Vec<f64> {
        let d = self.cfg.dim;
        (0..d)
            .map(|j| {
                let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
                let angle = pos as f64 * freq;
                0.5 * if j % 2 == 0 { angle.sin() } else { angle.cos() }
            })
            .collect()
    }

    /// Pushes one input position through every block.
    fn step(&self, input: &[f64], cache: &mut KvCache) -> StepOutput {
        let d = self.cfg.dim;
        let pos = cache.len;
        let mut x: Vec<f64> = input
            .iter()
            .zip(self.positional(pos))
            .map(|(a, p)| a + p)
            .collect();
        let mut layer_outputs = Vec::with_capacity(self.blocks.len());
        let scale = 1.0 / (d as f64).sqrt();
        for (l, block) in self.blocks.iter().enumerate() {
            let a = layer_norm(&x);
            let q = matvec(&block.wq, &a, d);
            cache.keys[l].extend(matvec(&block.wk, &a, d));
            cache.values[l].extend(matvec(&block.wv, &a, d));
            let n = pos + 1;
            let mut scores: Vec<f64> = (0..n)
                .map(|j| dot(&q, &cache.keys[l][j * d..(j + 1) * d]) * scale)
                .collect();
            softmax_in_place(&mut scores);
            let mut attn = vec![0.0; d];
            for (j, w) in scores.iter().enumerate() {
                for (o, v) in attn.iter_mut().zip(&cache.values[l][j * d..(j + 1) * d]) {
                    *o += w * v;
                }
            }
            for (xi, oi) in x.iter_mut().zip(matvec(&block.wo, &attn, d)) {
                *xi += oi;
            }
            let m = layer_norm(&x);
            let hidden: Vec<f64> = matvec(&block.w1, &m, d).into_iter().map(gelu).collect();
            for (xi, oi) in x.iter_mut().zip(matvec(&block.w2, &hidden, hidden.len())) {
                *xi += oi;
            }
            layer_outputs.push(x.clone());
        }
        cache.len += 1;
        StepOutput {
            final_norm: layer_norm(&x),
            layer_outputs,
        }
    }

    fn token_input(&self, id: u32) -> &[f64] {
        let d = self.cfg.dim;
        &self.embedding[id as usize * d..(id as usize + 1) * d]
    }

    /// Log-softmax over the vocab with `<bos>` masked out; index `BOS` holds
    /// negative infinity.
    fn log_probs(&self, h: &[f64]) -> Vec<f64> {
        let d = self.cfg.dim;
        let scale = 2.0 / (d as f64).sqrt();
        let mut logits: Vec<f64> = (0..self.vocab.len())
            .map(|i| dot(h, &self.embedding[i * d..(i + 1) * d]) * scale)
            .collect();
        logits[BOS as usize] = f64::NEG_INFINITY;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits.iter_mut().for_each(|l| *l -= lse);
        logits
    }

    fn run(&self, req: &GenerationRequest) -> Result<GenerationTrace> {
        req.validate(self.cfg.dim)?;
        if req.temperature > 0.0 {
            return Err(Error::Backend(
                "toy backend only supports greedy decoding (temperature 0)".into(),
            ));
        }
        let start = Instant::now();
        let mut input_ids = vec![BOS];
        input_ids.extend(self.tokenize(&req.prompt));
        let needed = input_ids.len() + usize::from(req.inject_embedding.is_some()) + req.max_tokens;
        if needed > self.cfg.max_context {
            return Err(Error::Backend(format!(
                "context overflow: {needed} positions exceed {}",
                self.cfg.max_context
            )));
        }

        let mut cache = self.new_cache();
        let mut last = None;
        for &id in &input_ids {
            last = Some(self.step(self.token_input(id), &mut cache));
        }
        let mut injected_hidden = None;
        if let Some(e) = &req.inject_embedding {
            let out = self.step(e.values(), &mut cache);
            if req.return_hidden {
                let penultimate = &out.layer_outputs[self.cfg.layers - 2];
                injected_hidden = Some(EmbeddingVector::new(penultimate.clone())?);
            }
            last = Some(out);
        }
        let mut state = last.expect("bos is always present");

        let mut tokens = Vec::new();
        let mut text = String::new();
        for _ in 0..req.max_tokens {
            let lp = self.log_probs(&state.final_norm);
            let next = argmax(&lp);
            if next == EOS {
                break;
            }
            let word = &self.vocab[next as usize];
            let piece = if tokens.is_empty() {
                word.clone()
            } else {
                format!(" {word}")
            };
            text.push_str(&piece);
            tokens.push(TokenLogprobs {
                token: piece,
                logprobs: self.top_logprobs(&lp, req.top_logprobs),
            });
            if tokens.len() < req.max_tokens {
                state = self.step(self.token_input(next), &mut cache);
            }
        }
        let output_tokens = tokens.len() as u64;
        Ok(GenerationTrace {
            text,
            tokens,
            injected_hidden,
            usage: Usage {
                output_tokens,
                wall_time_ms: start.elapsed().as_secs_f64() * 1000.0,
            },
        })
    }

    fn top_logprobs(&self, lp: &[f64], k: usize) -> BTreeMap<String, f64> {
        let mut order: Vec<usize> = (0..lp.len()).filter(|&i| lp[i].is_finite()).collect();
        order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
        order
            .into_iter()
            .take(k)
            .map(|i| (self.vocab[i].clone(), lp[i]))
            .collect()
    }

    /// Mean of the final-norm hidden states over `<bos>` and the text tokens.
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        let mut ids = vec![BOS];
        ids.extend(self.tokenize(text));
        if ids.len() > self.cfg.max_context {
            return Err(Error::Backend("context overflow while embedding".into()));
        }
        let mut cache = self.new_cache();
        let mut acc = vec![0.0; self.cfg.dim];
        for &id in &ids {
            let out = self.step(self.token_input(id), &mut cache);
            for (a, h) in acc.iter_mut().zip(&out.final_norm) {
                *a += h;
            }
        }
        let n = ids.len() as f64;
        EmbeddingVector::new(acc.into_iter().map(|a| a / n).collect())
    }
}

impl Backend for ToyModel {
    fn info(&self) -> Result<BackendInfo> {
        Ok(BackendInfo {
            model: "toy-transformer".into(),
            input_dim: self.cfg.dim,
            hidden_dim: self.cfg.dim,
            vocab: self.vocab.len(),
        })
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(Error::invalid("embed needs at least one text"));
        }
        texts.iter().map(|t| self.embed_text(t)).collect()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationTrace> {
        self.run(req)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `m` is row-major with `cols` columns; the output has `m.len() / cols` rows.
fn matvec(m: &[f64], x: &[f64], cols: usize) -> Vec<f64> {
    m.chunks_exact(cols).map(|row| dot(row, x)).collect()
}

fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter().map(|v| (v - mean) * inv).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh())
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

/// Highest value, lowest index on ties.
fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best as u32
}
