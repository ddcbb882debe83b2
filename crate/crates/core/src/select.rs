//! Entropy-based answer selection.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::backend::GenerationTrace;
use crate::error::{Error, Result};
use crate::prompt::ParsedCandidates;

/// Shannon entropy in nats of a top-k logprob map after renormalizing its
/// probabilities to sum to one.
pub fn token_entropy(logprobs: &BTreeMap<String, f64>) -> Result<f64> {
    entropy_of(logprobs.values().copied())
}

fn entropy_of(logprobs: impl Iterator<Item = f64> + Clone) -> Result<f64> {
    let max = logprobs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::invalid("entropy of an empty distribution"));
    }
    if !max.is_finite() {
        return Err(Error::NonFinite("logprob"));
    }
    let weights: Vec<f64> = logprobs.map(|lp| (lp - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    let h = weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let p = w / z;
            -p * p.ln()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Mean token entropy over `tokens`, a range of token indices in `trace`.
pub fn candidate_entropy(trace: &GenerationTrace, tokens: Range<usize>) -> Result<f64> {
    if tokens.is_empty() || tokens.end > trace.tokens.len() {
        return Err(Error::invalid(format!(
            "token span {tokens:?} outside a {}-token trace",
            trace.tokens.len()
        )));
    }
    let n = tokens.len() as f64;
    let mut sum = 0.0;
    for t in &trace.tokens[tokens] {
        sum += token_entropy(&t.logprobs)?;
    }
    Ok(sum / n)
}

/// Indices of the tokens whose text overlaps the byte span `span` of
/// `trace.text`.
pub fn token_span(trace: &GenerationTrace, span: &Range<usize>) -> Result<Range<usize>> {
    let offsets = trace
        .token_offsets()
        .ok_or_else(|| Error::Backend("trace tokens do not concatenate to its text".into()))?;
    let mut hits = offsets
        .iter()
        .enumerate()
        .filter(|(_, r)| r.start < span.end && span.start < r.end)
        .map(|(i, _)| i);
    let first = hits
        .next()
        .ok_or_else(|| Error::invalid(format!("span {span:?} covers no token of the trace")))?;
    let last = hits.next_back().unwrap_or(first);
    Ok(first..last + 1)
}

/// Entropy of each parsed candidate, located in the trace by its span.
pub fn candidate_entropies(trace: &GenerationTrace, parsed: &ParsedCandidates) -> Result<Vec<f64>> {
    parsed
        .candidates
        .iter()
        .map(|c| candidate_entropy(trace, token_span(trace, &c.span)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerDecision {
    pub final_answer: String,
    pub entropies: Vec<f64>,
    pub chosen_index: usize,
}

/// Lowest-entropy candidate, first index on ties.
pub fn select_answer(answers: &[String], entropies: &[f64]) -> Result<AnswerDecision> {
    if answers.is_empty() {
        return Err(Error::invalid("no candidates to select from"));
    }
    if answers.len() != entropies.len() {
        return Err(Error::invalid("one entropy per candidate required"));
    }
    if entropies.iter().any(|h| !h.is_finite()) {
        return Err(Error::NonFinite("candidate entropy"));
    }
    let mut chosen = 0;
    for (i, h) in entropies.iter().enumerate() {
        if *h < entropies[chosen] {
            chosen = i;
        }
    }
    Ok(AnswerDecision {
        final_answer: answers[chosen].clone(),
        entropies: entropies.to_vec(),
        chosen_index: chosen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{TokenLogprobs, Usage};
    use crate::prompt::parse_candidates;
    use proptest::prelude::*;

    fn dist(ps: &[f64]) -> BTreeMap<String, f64> {
        ps.iter()
            .enumerate()
            .map(|(i, p)| (format!("t{i}"), p.ln()))
            .collect()
    }

    fn tok(text: &str, ps: &[f64]) -> TokenLogprobs {
        TokenLogprobs {
            token: text.into(),
            logprobs: dist(ps),
        }
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(token_entropy(&dist(&[1.0])).unwrap(), 0.0);
        assert!((token_entropy(&dist(&[0.5, 0.5])).unwrap() - 2f64.ln()).abs() < 1e-12);
        let h = token_entropy(&dist(&[0.7, 0.2, 0.1])).unwrap();
        let oracle = -(0.7f64 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        assert!((h - oracle).abs() < 1e-12);
        assert!((h - 0.8018).abs() < 1e-4);
        assert!(token_entropy(&BTreeMap::new()).is_err());
        // A truncated top-k map is renormalized.
        assert!((token_entropy(&dist(&[0.3, 0.3])).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn candidate_entropy_means_tokens() {
        let trace = GenerationTrace {
            text: "ab".into(),
            tokens: vec![tok("a", &[0.5, 0.5]), tok("b", &[1.0])],
            injected_hidden: None,
            usage: Usage::default(),
        };
        let h = candidate_entropy(&trace, 0..2).unwrap();
        assert!((h - 2f64.ln() / 2.0).abs() < 1e-12);
        assert!((h - 0.3466).abs() < 1e-4);
        assert!(candidate_entropy(&trace, 1..3).is_err());
        assert!(candidate_entropy(&trace, 1..1).is_err());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn selection_examples() {
        let ans: Vec<String> = vec!["x".into(), "y".into(), "z".into()];
        assert_eq!(select_answer(&ans[..2], &[0.9, 0.3]).unwrap().chosen_index, 1);
        assert_eq!(select_answer(&ans[..2], &[0.5, 0.5]).unwrap().chosen_index, 0);
        let d = select_answer(&ans, &[0.8018, 0.3466, 0.6931]).unwrap();
        assert_eq!((d.chosen_index, d.final_answer.as_str()), (1, "y"));
        assert!(select_answer(&[], &[]).is_err());
    }

    #[test]
    fn spans_map_to_tokens() {
        let trace = GenerationTrace {
            text: "(a) New York, (b) Lyon".into(),
            tokens: vec![
                tok("(a)", &[1.0]),
                tok(" New", &[0.5, 0.5]),
                tok(" York", &[1.0]),
                tok(",", &[1.0]),
                tok(" (b)", &[1.0]),
                tok(" Lyon", &[0.7, 0.2, 0.1]),
            ],
            injected_hidden: None,
            usage: Usage::default(),
        };
        let parsed = parse_candidates(&trace.text, 2).unwrap();
        assert_eq!(token_span(&trace, &parsed.candidates[0].span).unwrap(), 1..3);
        assert_eq!(token_span(&trace, &parsed.candidates[1].span).unwrap(), 5..6);
        let hs = candidate_entropies(&trace, &parsed).unwrap();
        assert!((hs[0] - 2f64.ln() / 2.0).abs() < 1e-12);
        assert_eq!(
            select_answer(&parsed.answers(), &hs).unwrap().final_answer,
            "New York"
        );
    }

    proptest! {
        #[test]
        fn shift_invariant(ps in prop::collection::vec(0.01f64..1.0, 1..10), c in -5.0f64..5.0) {
            let base: BTreeMap<String, f64> = ps.iter().enumerate().map(|(i, p)| (i.to_string(), p.ln())).collect();
            let shifted: BTreeMap<String, f64> = base.iter().map(|(k, v)| (k.clone(), v + c)).collect();
            let a = token_entropy(&base).unwrap();
            let b = token_entropy(&shifted).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(a >= 0.0 && a <= (ps.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn argmin_first(hs in prop::collection::vec(0.0f64..3.0, 1..8)) {
            let ans: Vec<String> = (0..hs.len()).map(|i| i.to_string()).collect();
            let d = select_answer(&ans, &hs).unwrap();
            let min = hs.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(d.chosen_index, hs.iter().position(|&h| h == min).unwrap());
        }
    }
}
