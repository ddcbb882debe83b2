//! Answer metrics, retrieval counts and cost summaries.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::UsageReport;
use crate::error::{Error, Result};
use crate::refine::contains_normalized;
use crate::text::{normalize_answer, normalized_tokens, Passage};

/// Prompts per question of the SuRe baseline, used as an analytic
/// reference row in cost reports.
pub const SURE_PROMPTS_PER_QUESTION: u64 = 7;

/// A question with optional gold answers, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub answers: Vec<String>,
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let raw = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Format {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn load_questions(path: impl AsRef<Path>) -> Result<Vec<QaItem>> {
    let items: Vec<QaItem> = read_jsonl(path)?;
    let mut seen = std::collections::HashSet::new();
    for q in &items {
        if !seen.insert(q.id.as_str()) {
            return Err(Error::DuplicateId(q.id.clone()));
        }
    }
    Ok(items)
}

fn check_golds(golds: &[String]) {
    debug_assert!(!golds.is_empty(), "metrics need at least one gold answer");
}

/// 1 iff the normalized prediction equals some normalized gold.
pub fn exact_match(prediction: &str, golds: &[String]) -> u8 {
    check_golds(golds);
    let p = normalize_answer(prediction);
    u8::from(golds.iter().any(|g| normalize_answer(g) == p))
}

fn f1_single(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() {
            1.0
        } else {
            0.0
        };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-level F1 over normalized token multisets, maximized over golds.
pub fn f1(prediction: &str, golds: &[String]) -> f64 {
    check_golds(golds);
    let pred = normalized_tokens(prediction);
    golds
        .iter()
        .map(|g| f1_single(&pred, &normalized_tokens(g)))
        .fold(0.0, f64::max)
}

/// Number of the first `k` passages whose normalized text contains a
/// normalized gold answer.
pub fn gt_at_k(ranked: &[&Passage], golds: &[String], k: usize) -> usize {
    ranked
        .iter()
        .take(k)
        .filter(|p| {
            let text = normalize_answer(&p.full_text());
            golds.iter().any(|g| contains_normalized(&text, g))
        })
        .count()
}

/// Whether one normalized string contains the other as whole tokens.
pub fn covers(candidate: &str, gold: &str) -> bool {
    let c = normalize_answer(candidate);
    let g = normalize_answer(gold);
    if c.is_empty() || g.is_empty() {
        return false;
    }
    contains_normalized(&c, &g) || contains_normalized(&g, &c)
}

/// Fraction of questions where some candidate covers some gold.
pub fn candidate_coverage(candidates: &[Vec<String>], golds: &[Vec<String>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::invalid("coverage needs at least one question"));
    }
    if candidates.len() != golds.len() {
        return Err(Error::invalid("one gold list per candidate set required"));
    }
    let hits = candidates
        .iter()
        .zip(golds)
        .filter(|(cs, gs)| cs.iter().any(|c| gs.iter().any(|g| covers(c, g))))
        .count();
    Ok(hits as f64 / candidates.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub mode: String,
    pub prediction: String,
    pub em: u8,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_at_k: Option<usize>,
    pub coverage_hit: bool,
    pub generate_calls: u64,
    pub output_tokens: u64,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub questions: usize,
    pub em: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_at_k: Option<f64>,
    pub coverage: f64,
    pub generate_calls: f64,
    pub output_tokens: f64,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aggregates: Aggregates,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn from_records(records: Vec<EvalRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("evaluation needs at least one record"));
        }
        let n = records.len() as f64;
        let mean = |f: &dyn Fn(&EvalRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        let gt_at_k = records
            .iter()
            .map(|r| r.gt_at_k)
            .collect::<Option<Vec<_>>>()
            .map(|v| v.iter().sum::<usize>() as f64 / n);
        let aggregates = Aggregates {
            questions: records.len(),
            em: mean(&|r| r.em as f64),
            f1: mean(&|r| r.f1),
            gt_at_k,
            coverage: mean(&|r| if r.coverage_hit { 1.0 } else { 0.0 }),
            generate_calls: mean(&|r| r.generate_calls as f64),
            output_tokens: mean(&|r| r.output_tokens as f64),
            wall_time_ms: mean(&|r| r.wall_time_ms),
        };
        Ok(Self { aggregates, records })
    }

    pub fn render_table(&self) -> String {
        let a = &self.aggregates;
        let mut out = String::new();
        let _ = writeln!(out, "{:<22}{:>10}", "metric", "value");
        let _ = writeln!(out, "{:<22}{:>10}", "questions", a.questions);
        let _ = writeln!(out, "{:<22}{:>10.4}", "EM", a.em);
        let _ = writeln!(out, "{:<22}{:>10.4}", "F1", a.f1);
        if let Some(gt) = a.gt_at_k {
            let _ = writeln!(out, "{:<22}{:>10.4}", "GT@10", gt);
        }
        let _ = writeln!(out, "{:<22}{:>10.4}", "candidate coverage", a.coverage);
        let _ = writeln!(out, "{:<22}{:>10.4}", "prompts/query", a.generate_calls);
        let _ = writeln!(out, "{:<22}{:>10.4}", "output tokens/query", a.output_tokens);
        let _ = writeln!(out, "{:<22}{:>10.3}", "time ms/query", a.wall_time_ms);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub mode: String,
    pub usage: UsageReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub mode: String,
    pub questions: usize,
    pub prompts_per_query: f64,
    /// `None` on analytic reference rows.
    pub tokens_per_query: Option<f64>,
    pub time_ms_per_query: Option<f64>,
    pub reference: bool,
}

/// Per-mode means of generate calls, output tokens and wall time, followed
/// by the analytic SuRe reference row.
pub fn cost_summary(records: &[UsageRecord]) -> Result<Vec<CostRow>> {
    if records.is_empty() {
        return Err(Error::invalid("cost summary needs at least one record"));
    }
    let mut by_mode: BTreeMap<&str, Vec<&UsageReport>> = BTreeMap::new();
    for r in records {
        by_mode.entry(r.mode.as_str()).or_default().push(&r.usage);
    }
    let mut rows: Vec<CostRow> = by_mode
        .into_iter()
        .map(|(mode, usages)| {
            let n = usages.len() as f64;
            let total = UsageReport::total(usages.iter().copied());
            CostRow {
                mode: mode.to_owned(),
                questions: usages.len(),
                prompts_per_query: total.generate_calls as f64 / n,
                tokens_per_query: Some(total.output_tokens as f64 / n),
                time_ms_per_query: Some(total.wall_time_ms / n),
                reference: false,
            }
        })
        .collect();
    rows.push(CostRow {
        mode: "sure (reference)".into(),
        questions: 0,
        prompts_per_query: SURE_PROMPTS_PER_QUESTION as f64,
        tokens_per_query: None,
        time_ms_per_query: None,
        reference: true,
    });
    Ok(rows)
}

pub fn render_cost_table(rows: &[CostRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<20}{:>10}{:>16}{:>16}{:>16}",
        "mode", "questions", "prompts/query", "tokens/query", "time ms/query"
    );
    let opt = |v: Option<f64>, prec: usize| v.map_or_else(|| "-".to_owned(), |x| format!("{x:.prec$}"));
    for r in rows {
        let questions = if r.reference {
            "-".to_owned()
        } else {
            r.questions.to_string()
        };
        let _ = writeln!(
            out,
            "{:<20}{:>10}{:>16}{:>16}{:>16}",
            r.mode,
            questions,
            format!("{}", r.prompts_per_query),
            opt(r.tokens_per_query, 2),
            opt(r.time_ms_per_query, 3)
        );
    }
    out
}
