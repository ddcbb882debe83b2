//! Prompt templates and candidate parsing.

use std::fmt::Write as _;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::text::Passage;

const COUNT_WORDS: [&str; 10] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
];

fn marker(i: usize) -> String {
    format!("({})", (b'a' + i as u8) as char)
}

fn format_rule(k: usize) -> String {
    const PLACEHOLDERS: [&str; 10] = ["xx", "yy", "zz", "ww", "vv", "uu", "tt", "ss", "rr", "qq"];
    (0..k)
        .map(|i| format!("{} {}", marker(i), PLACEHOLDERS[i]))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Renders the candidate-generation prompt for `k` candidates (1..=10).
/// With `k = 2` this is the reference template verbatim.
pub fn build_candidate_prompt(question: &str, passages: &[&Passage], k: usize) -> Result<String> {
    if passages.is_empty() {
        return Err(Error::invalid("candidate prompt needs at least one passage"));
    }
    if !(1..=COUNT_WORDS.len()).contains(&k) {
        return Err(Error::invalid(format!("candidate count {k} outside 1..=10")));
    }
    let noun = if k == 1 { "candidate" } else { "candidates" };
    let mut out = String::new();
    let _ = write!(
        out,
        "Below are {} passages related to the question at the end.\n\n\
         After reading the passages, provide {} correct {noun} for the answer to the question.\n\n\
         Each answer should be in the form: {}, and should not exceed 3 words.\n\n",
        passages.len(),
        COUNT_WORDS[k - 1],
        format_rule(k),
    );
    for (i, p) in passages.iter().enumerate() {
        let n = i + 1;
        let _ = write!(
            out,
            "Passage #{n} Title: {}\n\nPassage #{n} Text: {}\n\n",
            p.title, p.text
        );
    }
    let _ = write!(out, "Question: {question}\n\nAnswer:");
    Ok(out)
}

/// Renders the 0-4 relevance grading prompt used by the prompt-level
/// reranking baseline.
pub fn build_rerank_prompt(query: &str, doc_text: &str) -> String {
    format!(
        "Query: {query}\n\n\
         Document: {doc_text}\n\n\
         From a scale of 0 to 4, judge the relevance between the query and the document.\n\n\
         0 means 'Not Relevant', 1 means 'Little Relevant', 2 means 'Somewhat Relevant', \
         3 means 'Highly Relevant', 4 means 'Perfectly Relevant'.\n\n\
         Return only the integer."
    )
}

/// First integer in a grading reply, if it is a valid 0-4 grade.
pub fn parse_grade(reply: &str) -> Option<u8> {
    let start = reply.find(|c: char| c.is_ascii_digit())?;
    let digits: String = reply[start..].chars().take_while(char::is_ascii_digit).collect();
    digits.parse::<u8>().ok().filter(|g| *g <= 4)
}

/// One parsed candidate and its byte span within the reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCandidate {
    pub answer: String,
    pub span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCandidates {
    pub candidates: Vec<ParsedCandidate>,
    pub warnings: Vec<String>,
}

impl ParsedCandidates {
    pub fn answers(&self) -> Vec<String> {
        self.candidates.iter().map(|c| c.answer.clone()).collect()
    }
}

/// Extracts the spans after `(a)`, `(b)`, … in order of appearance. Each
/// span ends at the next marker, newline or comma and is whitespace-trimmed.
pub fn parse_candidates(reply: &str, k: usize) -> Result<ParsedCandidates> {
    let mut found: Vec<(usize, usize)> = (0..k)
        .filter_map(|i| reply.find(&marker(i)).map(|pos| (pos, pos + 3)))
        .collect();
    if found.is_empty() {
        return Err(Error::CandidateParse {
            reply: reply.to_owned(),
        });
    }
    found.sort_unstable();
    let mut candidates = Vec::new();
    let mut warnings = Vec::new();
    for (n, &(_, body_start)) in found.iter().enumerate() {
        let limit = found.get(n + 1).map_or(reply.len(), |&(next, _)| next);
        let region = &reply[body_start..limit.max(body_start)];
        let cut = region.find(['\n', ',']).unwrap_or(region.len());
        let raw = &region[..cut];
        let lead = raw.len() - raw.trim_start().len();
        let answer = raw.trim();
        if answer.is_empty() {
            continue;
        }
        let start = body_start + lead;
        if answer.split_whitespace().count() > 3 {
            warnings.push(format!("candidate `{answer}` exceeds 3 words; kept verbatim"));
        }
        candidates.push(ParsedCandidate {
            answer: answer.to_owned(),
            span: start..start + answer.len(),
        });
    }
    if candidates.is_empty() {
        return Err(Error::CandidateParse {
            reply: reply.to_owned(),
        });
    }
    if candidates.len() < k {
        warnings.push(format!("expected {k} candidates, parsed {}", candidates.len()));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ParsedCandidates { candidates, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOLDEN_ONE_PASSAGE: &str = include_str!("../tests/data/candidate_prompt_one_passage.txt");

    #[test]
    fn golden_one_passage() {
        let p = Passage::new("p1", "Eiffel Tower", "The Eiffel Tower is a landmark in Paris.");
        let prompt = build_candidate_prompt("Where is the Eiffel Tower?", &[&p], 2).unwrap();
        assert_eq!(prompt, GOLDEN_ONE_PASSAGE);
    }

    #[test]
    fn structure() {
        let a = Passage::new("a", "A", "alpha");
        let b = Passage::new("b", "B", "beta");
        let prompt = build_candidate_prompt("q?", &[&a, &b], 2).unwrap();
        assert_eq!(prompt.matches("Passage #2 Title:").count(), 1);
        assert!(prompt.starts_with("Below are 2 passages"));
        assert!(build_candidate_prompt("q?", &[], 2).is_err());
    }

    #[test]
    fn three_candidates_extend_the_format() {
        let a = Passage::new("a", "A", "alpha");
        let prompt = build_candidate_prompt("q?", &[&a], 3).unwrap();
        assert!(prompt.contains("provide three correct candidates"));
        assert!(prompt.contains("(a) xx, (b) yy, (c) zz"));
    }

    #[test]
    fn parse_examples() {
        let p = parse_candidates("(a) Paris, (b) Lyon", 2).unwrap();
        assert_eq!(p.answers(), ["Paris", "Lyon"]);
        assert!(p.warnings.is_empty());
        assert_eq!(&"(a) Paris, (b) Lyon"[p.candidates[1].span.clone()], "Lyon");

        let p = parse_candidates("(a) Paris", 2).unwrap();
        assert_eq!(p.answers(), ["Paris"]);
        assert_eq!(p.warnings.len(), 1);

        assert!(matches!(
            parse_candidates("no idea", 2),
            Err(Error::CandidateParse { reply }) if reply == "no idea"
        ));
    }

    #[test]
    fn parse_stops_at_newline_and_keeps_long_answers() {
        let p = parse_candidates("(a) New York City Hall\n(b) Boston", 2).unwrap();
        assert_eq!(p.answers(), ["New York City Hall", "Boston"]);
        assert!(p.warnings.iter().any(|w| w.contains("exceeds 3 words")));
    }

    #[test]
    fn grades() {
        assert_eq!(parse_grade("4"), Some(4));
        assert_eq!(parse_grade("relevance: 3"), Some(3));
        assert_eq!(parse_grade("maybe"), None);
        assert_eq!(parse_grade("10"), None);
    }

    #[test]
    fn rerank_prompt_shape() {
        let p = build_rerank_prompt("who?", "doc body");
        assert!(p.starts_with("Query: who?\n\nDocument: doc body\n\n"));
        assert!(p.ends_with("Return only the integer."));
    }
}
