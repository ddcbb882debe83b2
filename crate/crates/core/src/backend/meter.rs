//! Per-question usage accounting.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Backend, GenerationRequest, GenerationTrace};
use crate::dense::EmbeddingVector;
use crate::error::Result;

/// What a backend call was for. Only `Generate` calls count toward the
/// per-question prompt budget; gate probes and prompt-level rerank grading
/// are tallied separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallKind {
    Generate,
    Probe,
    Rerank,
}

#[derive(Debug, Default)]
pub struct UsageCounter {
    generate_calls: AtomicU64,
    probe_calls: AtomicU64,
    rerank_calls: AtomicU64,
    output_tokens: AtomicU64,
    wall_micros: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub generate_calls: u64,
    pub probe_calls: u64,
    pub rerank_calls: u64,
    pub output_tokens: u64,
    pub wall_time_ms: f64,
}

impl UsageCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, kind: CallKind, output_tokens: u64, micros: u64) {
        let calls = match kind {
            CallKind::Generate => &self.generate_calls,
            CallKind::Probe => &self.probe_calls,
            CallKind::Rerank => &self.rerank_calls,
        };
        calls.fetch_add(1, Ordering::Relaxed);
        self.output_tokens.fetch_add(output_tokens, Ordering::Relaxed);
        self.wall_micros.fetch_add(micros, Ordering::Relaxed);
    }

    pub fn report(&self) -> UsageReport {
        UsageReport {
            generate_calls: self.generate_calls.load(Ordering::Relaxed),
            probe_calls: self.probe_calls.load(Ordering::Relaxed),
            rerank_calls: self.rerank_calls.load(Ordering::Relaxed),
            output_tokens: self.output_tokens.load(Ordering::Relaxed),
            wall_time_ms: self.wall_micros.load(Ordering::Relaxed) as f64 / 1000.0,
        }
    }
}

impl UsageReport {
    pub fn total<'a>(reports: impl IntoIterator<Item = &'a UsageReport>) -> UsageReport {
        reports
            .into_iter()
            .fold(UsageReport::default(), |acc, r| UsageReport {
                generate_calls: acc.generate_calls + r.generate_calls,
                probe_calls: acc.probe_calls + r.probe_calls,
                rerank_calls: acc.rerank_calls + r.rerank_calls,
                output_tokens: acc.output_tokens + r.output_tokens,
                wall_time_ms: acc.wall_time_ms + r.wall_time_ms,
            })
    }
}

/// A backend handle that records every call into a [`UsageCounter`].
#[derive(Clone, Copy)]
pub struct Metered<'a> {
    backend: &'a dyn Backend,
    counter: &'a UsageCounter,
}

impl<'a> Metered<'a> {
    pub fn new(backend: &'a dyn Backend, counter: &'a UsageCounter) -> Self {
        Self { backend, counter }
    }

    pub fn backend(&self) -> &'a dyn Backend {
        self.backend
    }

    pub fn counter(&self) -> &'a UsageCounter {
        self.counter
    }

    pub fn generate(&self, kind: CallKind, req: &GenerationRequest) -> Result<GenerationTrace> {
        let start = Instant::now();
        let trace = self.backend.generate(req)?;
        trace.validate(req)?;
        self.counter.record(
            kind,
            trace.usage.output_tokens,
            start.elapsed().as_micros() as u64,
        );
        Ok(trace)
    }

    pub fn probe_hidden(&self, prompt: &str, inject: &EmbeddingVector) -> Result<EmbeddingVector> {
        let start = Instant::now();
        let h = self.backend.probe_hidden(prompt, inject)?;
        self.counter
            .record(CallKind::Probe, 0, start.elapsed().as_micros() as u64);
        Ok(h)
    }
}
