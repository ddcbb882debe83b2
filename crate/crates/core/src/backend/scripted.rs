//! Deterministic scripted backend for tests and fixtures.
//!
//! Rules are tried in order; the first whose matcher accepts the request
//! answers it. A rule either returns a canned reply (with optional canned
//! per-token logprobs) or echoes evidence from the prompt: it scans the
//! `Passage #i Text:` blocks in order and proposes the word following a cue
//! word, with confidence decaying by the rank of the passage it came from.
//!
//! Script files are JSON:
//!
//! ```json
//! {"input_dim": 16, "hidden": "echo",
//!  "rules": [{"prompt_sha256": "…", "reply": "(a) Paris, (b) Lyon"},
//!            {"contains": "Query:", "reply": "3"},
//!            {"echo_after": "code", "k": 2, "decay": 0.8}]}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{Backend, BackendInfo, GenerationRequest, GenerationTrace, TokenLogprobs, Usage};
use crate::dense::{Embedder, EmbeddingVector};
use crate::embedder::HashEmbedder;
use crate::error::{Error, Result};
use crate::util::sha256_hex;

/// How `injected_hidden` is produced for injected requests.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenMode {
    /// Return the injected vector itself.
    #[default]
    Echo,
    /// Return the same vector regardless of input.
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    /// Hex SHA-256 of the exact prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    /// Restrict to requests with (`true`) or without (`false`) injection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injected: Option<bool>,
    /// The rule stops matching after this many uses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_uses: Option<usize>,
    #[serde(flatten)]
    pub responder: Responder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Responder {
    Canned {
        reply: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tokens: Option<Vec<TokenLogprobs>>,
    },
    Echo {
        echo_after: String,
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default = "default_decay")]
        decay: f64,
    },
}

impl Default for Responder {
    fn default() -> Self {
        Responder::Canned {
            reply: String::new(),
            tokens: None,
        }
    }
}

fn default_k() -> usize {
    2
}

fn default_decay() -> f64 {
    0.8
}

fn default_dim() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptFile {
    #[serde(default = "default_dim")]
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: HiddenMode,
    #[serde(default)]
    pub embed_seed: u64,
    pub rules: Vec<Rule>,
}

#[derive(Debug)]
pub struct ScriptedBackend {
    input_dim: usize,
    hidden: HiddenMode,
    embedder: HashEmbedder,
    rules: Vec<Rule>,
    uses: Vec<AtomicUsize>,
}

impl ScriptedBackend {
    pub fn new(input_dim: usize) -> Self {
        Self::from_script(ScriptFile {
            input_dim,
            hidden: HiddenMode::Echo,
            embed_seed: 0,
            rules: Vec::new(),
        })
    }

    pub fn from_script(script: ScriptFile) -> Self {
        let uses = script.rules.iter().map(|_| AtomicUsize::new(0)).collect();
        Self {
            input_dim: script.input_dim.max(1),
            hidden: script.hidden,
            embedder: HashEmbedder::new(script.input_dim.max(1), script.embed_seed),
            rules: script.rules,
            uses,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let script: ScriptFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        Ok(Self::from_script(script))
    }

    pub fn with_hidden(mut self, hidden: HiddenMode) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_rule(mut self, rule: Rule) -> Self {
        self.rules.push(rule);
        self.uses.push(AtomicUsize::new(0));
        self
    }

    /// Canned reply for any prompt containing `needle`.
    pub fn reply_when(self, needle: &str, reply: &str) -> Self {
        self.with_rule(Rule {
            contains: Some(needle.into()),
            responder: Responder::Canned {
                reply: reply.into(),
                tokens: None,
            },
            ..Rule::default()
        })
    }

    pub fn reply_always(self, reply: &str) -> Self {
        self.with_rule(Rule {
            responder: Responder::Canned {
                reply: reply.into(),
                tokens: None,
            },
            ..Rule::default()
        })
    }

    pub fn echo(self, cue: &str) -> Self {
        self.with_rule(Rule {
            responder: Responder::Echo {
                echo_after: cue.into(),
                k: default_k(),
                decay: default_decay(),
            },
            ..Rule::default()
        })
    }

    fn matching_rule(&self, req: &GenerationRequest) -> Option<&Rule> {
        let mut hash = None;
        for (rule, uses) in self.rules.iter().zip(&self.uses) {
            if let Some(want) = &rule.prompt_sha256 {
                let h = hash.get_or_insert_with(|| sha256_hex(req.prompt.as_bytes()));
                if !want.eq_ignore_ascii_case(h) {
                    continue;
                }
            }
            if let Some(needle) = &rule.contains {
                if !req.prompt.contains(needle.as_str()) {
                    continue;
                }
            }
            if let Some(injected) = rule.injected {
                if injected != req.inject_embedding.is_some() {
                    continue;
                }
            }
            if let Some(max) = rule.max_uses {
                // Claim a use atomically; a rule that is used up falls through.
                if uses
                    .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| (n < max).then_some(n + 1))
                    .is_err()
                {
                    continue;
                }
            }
            return Some(rule);
        }
        None
    }

    fn hidden_for(&self, req: &GenerationRequest) -> Result<Option<EmbeddingVector>> {
        match (&req.inject_embedding, req.return_hidden) {
            (Some(e), true) => Ok(Some(match &self.hidden {
                HiddenMode::Echo => e.clone(),
                HiddenMode::Fixed(v) => EmbeddingVector::new(v.clone())?,
            })),
            _ => Ok(None),
        }
    }
}

/// Splits a reply into whitespace-led pieces that concatenate back to it,
/// splitting a trailing comma into its own piece.
fn split_pieces(reply: &str) -> Vec<String> {
    let mut pieces = Vec::new();
    let mut current = String::new();
    let mut in_word = false;
    for c in reply.chars() {
        if c.is_whitespace() {
            if in_word {
                pieces.push(std::mem::take(&mut current));
                in_word = false;
            }
            current.push(c);
        } else if c == ',' {
            if !current.is_empty() {
                pieces.push(std::mem::take(&mut current));
            }
            pieces.push(",".into());
            in_word = false;
        } else {
            current.push(c);
            in_word = true;
        }
    }
    if !current.is_empty() {
        pieces.push(current);
    }
    pieces
}

fn one_hot(piece: &str) -> TokenLogprobs {
    TokenLogprobs {
        token: piece.to_owned(),
        logprobs: BTreeMap::from([(piece.trim().to_owned(), 0.0)]),
    }
}

/// Alternatives sharing the mass an echoed answer does not take. With 19 of
/// them (filling the default top-20) entropy strictly decreases in `p` for
/// `p > 1/20`, which covers the first 13 ranks at the default decay, so a
/// better-ranked echo is always the less uncertain one.
const ALTERNATIVES: usize = 19;

fn confident(piece: &str, p: f64) -> TokenLogprobs {
    let mut logprobs = BTreeMap::from([(piece.trim().to_owned(), p.ln())]);
    if p < 1.0 {
        let rest = ((1.0 - p) / ALTERNATIVES as f64).ln();
        for k in 1..=ALTERNATIVES {
            logprobs.insert(format!("<alt{k}>"), rest);
        }
    }
    TokenLogprobs {
        token: piece.to_owned(),
        logprobs,
    }
}

/// Word after `cue` in each passage text, in passage order, with the
/// 0-based passage rank it was found at.
fn echo_candidates(prompt: &str, cue: &str, k: usize) -> Vec<(String, usize)> {
    let cue = cue.to_lowercase();
    let mut found: Vec<(String, usize)> = Vec::new();
    let texts = prompt
        .lines()
        .filter_map(|l| l.strip_prefix("Passage #"))
        .filter_map(|rest| rest.split_once(" Text: ").map(|(_, t)| t));
    for (rank, text) in texts.enumerate() {
        let words: Vec<&str> = text.split_whitespace().collect();
        for pair in words.windows(2) {
            let w0 = pair[0]
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase();
            if w0 != cue {
                continue;
            }
            let answer = pair[1].trim_matches(|c: char| !c.is_alphanumeric());
            if answer.is_empty() || found.iter().any(|(a, _)| a.eq_ignore_ascii_case(answer)) {
                continue;
            }
            found.push((answer.to_owned(), rank));
            if found.len() == k {
                return found;
            }
        }
    }
    found
}

fn echo_reply(prompt: &str, cue: &str, k: usize, decay: f64) -> (String, Vec<TokenLogprobs>) {
    let found = echo_candidates(prompt, cue, k);
    if found.is_empty() {
        let text = "no idea".to_owned();
        let tokens = split_pieces(&text).iter().map(|p| one_hot(p)).collect();
        return (text, tokens);
    }
    let mut text = String::new();
    let mut tokens = Vec::new();
    for (i, (answer, rank)) in found.iter().enumerate() {
        let marker = format!("({})", (b'a' + i as u8) as char);
        if i > 0 {
            text.push(',');
            tokens.push(one_hot(","));
            text.push(' ');
            tokens.push(one_hot(&format!(" {marker}")));
        } else {
            tokens.push(one_hot(&marker));
        }
        text.push_str(&marker);
        let p = decay.clamp(1e-6, 1.0).powi(*rank as i32 + 1).max(1e-6);
        let piece = format!(" {answer}");
        text.push_str(&piece);
        tokens.push(confident(&piece, p));
    }
    (text, tokens)
}

impl Backend for ScriptedBackend {
    fn info(&self) -> Result<BackendInfo> {
        let hidden_dim = match &self.hidden {
            HiddenMode::Echo => self.input_dim,
            HiddenMode::Fixed(v) => v.len(),
        };
        Ok(BackendInfo {
            model: "scripted".into(),
            input_dim: self.input_dim,
            hidden_dim,
            vocab: 0,
        })
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(Error::invalid("embed needs at least one text"));
        }
        self.embedder.embed(texts)
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationTrace> {
        req.validate(self.input_dim)?;
        let rule = self
            .matching_rule(req)
            .ok_or_else(|| Error::Backend("no scripted rule matches the request".into()))?;
        let (text, mut tokens) = match &rule.responder {
            Responder::Canned { reply, tokens } => {
                let tokens = match tokens {
                    Some(t) => t.clone(),
                    None => split_pieces(reply).iter().map(|p| one_hot(p)).collect(),
                };
                (reply.clone(), tokens)
            }
            Responder::Echo { echo_after, k, decay } => echo_reply(&req.prompt, echo_after, *k, *decay),
        };
        for t in &mut tokens {
            if t.logprobs.len() > req.top_logprobs {
                // Keep the most likely entries, as a real backend would.
                let mut entries: Vec<_> = std::mem::take(&mut t.logprobs).into_iter().collect();
                entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                t.logprobs = entries.into_iter().take(req.top_logprobs).collect();
            }
        }
        let output_tokens = tokens.len() as u64;
        Ok(GenerationTrace {
            text,
            tokens,
            injected_hidden: self.hidden_for(req)?,
            usage: Usage {
                output_tokens,
                wall_time_ms: 0.0,
            },
        })
    }
}
