//! The boundary to any language model.
//!
//! A [`Backend`] embeds text, decodes greedily with an optional single
//! injected input position, returns per-token top-k logprobs and, when asked,
//! the penultimate-layer hidden state at the injected position. The structs
//! here double as the `/v1` JSON wire format; field names are normative and
//! unknown fields are ignored on input.

mod meter;
mod remote;
mod scripted;
mod toy;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dense::{Embedder, EmbeddingVector};
use crate::error::{Error, Result};

pub use meter::{CallKind, Metered, UsageCounter, UsageReport};
pub use remote::RemoteBackend;
pub use scripted::{HiddenMode, Responder, Rule, ScriptFile, ScriptedBackend};
pub use toy::{ToyConfig, ToyModel};

pub const DEFAULT_TOP_LOGPROBS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
    #[serde(default)]
    pub inject_embedding: Option<EmbeddingVector>,
    #[serde(default)]
    pub return_hidden: bool,
    #[serde(default = "default_top_logprobs")]
    pub top_logprobs: usize,
}

fn default_top_logprobs() -> usize {
    DEFAULT_TOP_LOGPROBS
}

impl GenerationRequest {
    /// Greedy request with default top-logprobs and no injection.
    pub fn greedy(prompt: impl Into<String>, max_tokens: usize) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens,
            temperature: 0.0,
            inject_embedding: None,
            return_hidden: false,
            top_logprobs: DEFAULT_TOP_LOGPROBS,
        }
    }

    pub fn with_injection(mut self, e: EmbeddingVector, return_hidden: bool) -> Self {
        self.inject_embedding = Some(e);
        self.return_hidden = return_hidden;
        self
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::invalid("max_tokens must be positive"));
        }
        if self.top_logprobs == 0 {
            return Err(Error::invalid("top_logprobs must be positive"));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::invalid("temperature must be finite and >= 0"));
        }
        if let Some(e) = &self.inject_embedding {
            e.check_dim(input_dim)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprobs {
    pub token: String,
    pub logprobs: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub output_tokens: u64,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub text: String,
    pub tokens: Vec<TokenLogprobs>,
    #[serde(default)]
    pub injected_hidden: Option<EmbeddingVector>,
    #[serde(default)]
    pub usage: Usage,
}

impl GenerationTrace {
    /// Equality on everything except wall time.
    pub fn same_output(&self, other: &Self) -> bool {
        self.text == other.text
            && self.tokens == other.tokens
            && self.injected_hidden == other.injected_hidden
            && self.usage.output_tokens == other.usage.output_tokens
    }

    /// Checks the trace against the request that produced it.
    pub fn validate(&self, req: &GenerationRequest) -> Result<()> {
        for (i, t) in self.tokens.iter().enumerate() {
            if t.logprobs.len() > req.top_logprobs {
                return Err(Error::Backend(format!(
                    "token {i} carries {} logprobs, requested at most {}",
                    t.logprobs.len(),
                    req.top_logprobs
                )));
            }
            let mass: f64 = t.logprobs.values().map(|lp| lp.exp()).sum();
            if !mass.is_finite() || mass > 1.0 + 1e-6 {
                return Err(Error::Backend(format!("token {i} logprob mass {mass} exceeds 1")));
            }
        }
        let wants_hidden = req.return_hidden && req.inject_embedding.is_some();
        if wants_hidden != self.injected_hidden.is_some() {
            return Err(Error::Backend(
                "injected_hidden must be present exactly when return_hidden and inject_embedding are set"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Byte offsets of each token within `text`, when the token strings
    /// concatenate to exactly `text`.
    pub fn token_offsets(&self) -> Option<Vec<std::ops::Range<usize>>> {
        let mut offsets = Vec::with_capacity(self.tokens.len());
        let mut at = 0;
        for t in &self.tokens {
            let end = at + t.token.len();
            if self.text.get(at..end) != Some(t.token.as_str()) {
                return None;
            }
            offsets.push(at..end);
            at = end;
        }
        (at == self.text.len()).then_some(offsets)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub model: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub vocab: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub dim: usize,
    pub vectors: Vec<EmbeddingVector>,
}

pub trait Backend: Send + Sync {
    fn info(&self) -> Result<BackendInfo>;

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationTrace>;

    /// Penultimate hidden state at an injected final position. The default
    /// runs a one-token generation with `return_hidden` set.
    fn probe_hidden(&self, prompt: &str, inject: &EmbeddingVector) -> Result<EmbeddingVector> {
        let req = GenerationRequest::greedy(prompt, 1).with_injection(inject.clone(), true);
        self.generate(&req)?
            .injected_hidden
            .ok_or_else(|| Error::Backend("backend returned no injected hidden state".into()))
    }
}

/// Adapts a backend's `embed` to the retrieval [`Embedder`] interface.
pub struct BackendEmbedder<'a>(pub &'a dyn Backend);

impl Embedder for BackendEmbedder<'_> {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        self.0.embed(texts)
    }
}
