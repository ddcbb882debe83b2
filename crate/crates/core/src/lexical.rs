//! BM25 inverted index over `title + " " + text`.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "EMBQALEX"
//! version    u8       1
//! k1, b      f64, f64
//! doc_count  u32
//! per doc    id_len u32, id bytes (utf-8), length u32
//! term_count u32
//! per term   term_len u32, term bytes, posting_count u32,
//!            postings as (doc_index u32, tf u32), doc_index ascending
//! ```
//!
//! Terms are written in lexicographic order so the file is byte-stable.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{read_f64, read_string, read_u32, read_u8, write_string};
use crate::text::{tokenize, Corpus};

pub const LEXICAL_MAGIC: &[u8; 8] = b"EMBQALEX";
pub const LEXICAL_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LexicalIndex {
    params: Bm25Params,
    doc_ids: Vec<String>,
    doc_lens: Vec<u32>,
    avg_len: f64,
    postings: HashMap<String, Vec<Posting>>,
    by_id: HashMap<String, u32>,
}

/// A ranked hit: passage id and its score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredId {
    pub id: String,
    pub score: f64,
}

impl ScoredId {
    pub fn new(id: impl Into<String>, score: f64) -> Self {
        Self { id: id.into(), score }
    }
}

/// Descending score, then ascending id.
pub(crate) fn rank_order(a: &ScoredId, b: &ScoredId) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.id.cmp(&b.id))
}

pub fn build_lexical(corpus: &Corpus) -> Result<LexicalIndex> {
    build_lexical_with(corpus, Bm25Params::default())
}

pub fn build_lexical_with(corpus: &Corpus, params: Bm25Params) -> Result<LexicalIndex> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut doc_ids = Vec::with_capacity(corpus.len());
    let mut doc_lens = Vec::with_capacity(corpus.len());
    let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
    for (doc, passage) in corpus.iter().enumerate() {
        let tokens = tokenize(&passage.full_text());
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in &tokens {
            *tf.entry(t.clone()).or_default() += 1;
        }
        for (term, count) in tf {
            postings.entry(term).or_default().push(Posting {
                doc: doc as u32,
                tf: count,
            });
        }
        doc_ids.push(passage.id.clone());
        doc_lens.push(tokens.len() as u32);
    }
    Ok(LexicalIndex::from_parts(params, doc_ids, doc_lens, postings))
}

impl LexicalIndex {
    fn from_parts(
        params: Bm25Params,
        doc_ids: Vec<String>,
        doc_lens: Vec<u32>,
        postings: HashMap<String, Vec<Posting>>,
    ) -> Self {
        let total: u64 = doc_lens.iter().map(|&l| l as u64).sum();
        let avg_len = total as f64 / doc_lens.len() as f64;
        let by_id = doc_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
        Self {
            params,
            doc_ids,
            doc_lens,
            avg_len,
            postings,
            by_id,
        }
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn set_params(&mut self, params: Bm25Params) {
        self.params = params;
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_len(&self, id: &str) -> Option<u32> {
        self.by_id.get(id).map(|&d| self.doc_lens[d as usize])
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count() as f64;
        let df = self.df(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, len: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = if self.avg_len > 0.0 {
            len as f64 / self.avg_len
        } else {
            0.0
        };
        idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm))
    }

    /// BM25 score of a single passage. Repeated query terms count once per
    /// occurrence, matching the usual sum over the query token sequence.
    pub fn bm25_score(&self, query_tokens: &[String], passage_id: &str) -> Result<f64> {
        let doc = *self
            .by_id
            .get(passage_id)
            .ok_or_else(|| Error::NotFound(passage_id.to_owned()))?;
        let len = self.doc_lens[doc as usize];
        let mut score = 0.0;
        for term in query_tokens {
            let list = self.postings(term);
            if let Ok(pos) = list.binary_search_by_key(&doc, |p| p.doc) {
                score += self.term_weight(self.idf(term), list[pos].tf, len);
            }
        }
        Ok(score)
    }

    /// Top-`k` passages for `query`. Passages sharing no term with the
    /// query are never returned, so a zero-overlap query yields an empty list.
    pub fn top_k(&self, query: &str, k: usize) -> Vec<ScoredId> {
        if k == 0 {
            return Vec::new();
        }
        let tokens = tokenize(query);
        // Accumulate in query-token order so each document's sum matches
        // `bm25_score` term for term.
        let mut touched: Vec<u32> = Vec::new();
        let mut seen = vec![false; self.doc_count()];
        let mut scores = vec![0.0f64; self.doc_count()];
        for term in &tokens {
            let idf = self.idf(term);
            for p in self.postings(term) {
                if !std::mem::replace(&mut seen[p.doc as usize], true) {
                    touched.push(p.doc);
                }
                scores[p.doc as usize] += self.term_weight(idf, p.tf, self.doc_lens[p.doc as usize]);
            }
        }
        let mut hits: Vec<ScoredId> = touched
            .into_iter()
            .map(|d| ScoredId::new(self.doc_ids[d as usize].clone(), scores[d as usize]))
            .collect();
        hits.sort_by(rank_order);
        hits.truncate(k);
        hits
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(LEXICAL_MAGIC)?;
        w.write_all(&[LEXICAL_VERSION])?;
        w.write_all(&self.params.k1.to_le_bytes())?;
        w.write_all(&self.params.b.to_le_bytes())?;
        w.write_all(&(self.doc_ids.len() as u32).to_le_bytes())?;
        for (id, len) in self.doc_ids.iter().zip(&self.doc_lens) {
            write_string(w, id)?;
            w.write_all(&len.to_le_bytes())?;
        }
        let mut terms: Vec<&String> = self.postings.keys().collect();
        terms.sort();
        w.write_all(&(terms.len() as u32).to_le_bytes())?;
        for term in terms {
            let list = &self.postings[term];
            write_string(w, term)?;
            w.write_all(&(list.len() as u32).to_le_bytes())?;
            for p in list {
                w.write_all(&p.doc.to_le_bytes())?;
                w.write_all(&p.tf.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != LEXICAL_MAGIC {
            return Err(Error::CorruptIndex("bad lexical magic".into()));
        }
        let version = read_u8(r)?;
        if version != LEXICAL_VERSION {
            return Err(Error::CorruptIndex(format!(
                "unsupported lexical version {version}"
            )));
        }
        let params = Bm25Params {
            k1: read_f64(r)?,
            b: read_f64(r)?,
        };
        let docs = read_u32(r)? as usize;
        if docs == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut doc_ids = Vec::with_capacity(docs);
        let mut doc_lens = Vec::with_capacity(docs);
        for _ in 0..docs {
            doc_ids.push(read_string(r)?);
            doc_lens.push(read_u32(r)?);
        }
        let terms = read_u32(r)? as usize;
        let mut postings = HashMap::with_capacity(terms);
        for _ in 0..terms {
            let term = read_string(r)?;
            let n = read_u32(r)? as usize;
            let mut list = Vec::with_capacity(n);
            for _ in 0..n {
                let doc = read_u32(r)?;
                if doc as usize >= docs {
                    return Err(Error::CorruptIndex(format!(
                        "posting for `{term}` references document {doc} of {docs}"
                    )));
                }
                list.push(Posting {
                    doc,
                    tf: read_u32(r)?,
                });
            }
            postings.insert(term, list);
        }
        Ok(Self::from_parts(params, doc_ids, doc_lens, postings))
    }
}
