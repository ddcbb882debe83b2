//! Corpus ingestion, tokenization and answer normalization.
//!
//! The corpus file is line-delimited JSON, one `{"id", "title", "text"}`
//! record per line. Tokenization and normalization here are shared by the
//! BM25 index, positive labeling and the EM/F1 metrics so that all three see
//! the same token stream.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub title: String,
    pub text: String,
}

impl Passage {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            text: text.into(),
        }
    }

    /// Title and text joined with a single space; this is what gets indexed
    /// and embedded.
    pub fn full_text(&self) -> String {
        format!("{} {}", self.title, self.text)
    }
}

/// Immutable, insertion-ordered passage collection with id lookup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_passages(passages: Vec<Passage>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if p.text.trim().is_empty() {
                return Err(Error::Format {
                    line: i + 1,
                    message: format!("passage `{}` has empty text", p.id),
                });
            }
            if by_id.insert(p.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(p.id.clone()));
            }
        }
        Ok(Self { passages, by_id })
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn iter(&self) -> impl Iterator<Item = &Passage> {
        self.passages.iter()
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    title: Option<String>,
    text: Option<String>,
}

/// Loads a line-delimited corpus file. Blank lines are skipped.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let reader = BufReader::new(File::open(path)?);
    read_corpus(reader)
}

pub fn read_corpus(reader: impl BufRead) -> Result<Corpus> {
    let mut passages = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: line_no,
            message: e.to_string(),
        })?;
        let missing = |field: &str| Error::Format {
            line: line_no,
            message: format!("missing field `{field}`"),
        };
        let passage = Passage {
            id: raw.id.ok_or_else(|| missing("id"))?,
            title: raw.title.ok_or_else(|| missing("title"))?,
            text: raw.text.ok_or_else(|| missing("text"))?,
        };
        if passage.text.trim().is_empty() {
            return Err(Error::Format {
                line: line_no,
                message: "field `text` is empty".into(),
            });
        }
        passages.push(passage);
    }
    Corpus::from_passages(passages)
}

pub fn write_corpus(corpus: &Corpus, writer: impl Write) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for p in corpus.iter() {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    write_corpus(corpus, File::create(path)?)
}

/// Lowercases and splits on every run of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// SQuAD-style normalization: lowercase, strip punctuation, drop the
/// articles `a`, `an`, `the`, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !is_punctuation(*c)).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace())
}

/// Normalized tokens of `text`; the token stream used by F1.
pub fn normalized_tokens(text: &str) -> Vec<String> {
    normalize_answer(text)
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}
