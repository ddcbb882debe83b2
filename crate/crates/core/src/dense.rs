//! Exact dense retrieval over passage embeddings.
//!
//! Store layout (little-endian):
//!
//! ```text
//! magic    8 bytes "EMBQADNS"
//! version  u8      1
//! dim      u32
//! count    u32
//! rows     count * dim f32
//! ids      count * (len u32, utf-8 bytes)
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{read_f32, read_string, read_u32, read_u8, write_string};
use crate::lexical::{rank_order, ScoredId};
use crate::text::Corpus;

pub const DENSE_MAGIC: &[u8; 8] = b"EMBQADNS";
pub const DENSE_VERSION: u8 = 1;

const EMBED_BATCH: usize = 64;

/// A finite, non-empty real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("embedding must have dim >= 1"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self(self.0.iter().map(|v| v * a).collect())
    }

    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::DimMismatch {
                expected,
                actual: self.dim(),
            });
        }
        Ok(())
    }

    /// Element-wise mean of a non-empty set of equal-dim vectors.
    pub fn mean(vectors: &[EmbeddingVector]) -> Result<Self> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::invalid("mean of zero vectors"))?;
        let mut acc = vec![0.0; first.dim()];
        for v in vectors {
            v.check_dim(first.dim())?;
            for (a, x) in acc.iter_mut().zip(v.values()) {
                *a += x;
            }
        }
        let n = vectors.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Self::new(acc)
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Dot,
    Cosine,
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" | "inner" | "ip" => Ok(Similarity::Dot),
            "cosine" | "cos" => Ok(Similarity::Cosine),
            other => Err(Error::invalid(format!("unknown similarity `{other}`"))),
        }
    }
}

impl Similarity {
    /// Scores two equal-length slices. Cosine with a zero vector is 0.
    pub fn score_slices(self, a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        match self {
            Similarity::Dot => dot,
            Similarity::Cosine => {
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot / (na * nb)
                }
            }
        }
    }

    fn score_row(self, q: &[f64], row: &[f32], q_norm: f64) -> f64 {
        let dot: f64 = q.iter().zip(row).map(|(x, &y)| x * y as f64).sum();
        match self {
            Similarity::Dot => dot,
            Similarity::Cosine => {
                let nr = row.iter().map(|&y| (y as f64) * (y as f64)).sum::<f64>().sqrt();
                if q_norm == 0.0 || nr == 0.0 {
                    0.0
                } else {
                    dot / (q_norm * nr)
                }
            }
        }
    }
}

pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector, mode: Similarity) -> Result<f64> {
    b.check_dim(a.dim())?;
    Ok(mode.score_slices(a.values(), b.values()))
}

/// Anything that maps texts to fixed-dimension vectors.
pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector> {
        self.embed(&[text.to_owned()])?
            .pop()
            .ok_or_else(|| Error::Backend("embedder returned no vectors".into()))
    }
}

/// Row-per-passage embedding matrix, stored as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<f32>,
    by_id: HashMap<String, usize>,
}

pub fn build_dense(corpus: &Corpus, embedder: &dyn Embedder) -> Result<DenseIndex> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut dim = None;
    let mut ids = Vec::with_capacity(corpus.len());
    let mut rows = Vec::new();
    for chunk in corpus.passages().chunks(EMBED_BATCH) {
        let texts: Vec<String> = chunk.iter().map(|p| p.full_text()).collect();
        let vectors = embedder.embed(&texts)?;
        if vectors.len() != texts.len() {
            return Err(Error::Backend(format!(
                "embedder returned {} vectors for {} texts",
                vectors.len(),
                texts.len()
            )));
        }
        for (p, v) in chunk.iter().zip(vectors) {
            let d = *dim.get_or_insert(v.dim());
            v.check_dim(d)?;
            ids.push(p.id.clone());
            rows.extend(v.values().iter().map(|&x| x as f32));
        }
    }
    DenseIndex::from_rows(dim.unwrap_or(1), ids, rows)
}

impl DenseIndex {
    pub fn from_rows(dim: usize, ids: Vec<String>, rows: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dense index dim must be positive"));
        }
        if rows.len() != dim * ids.len() {
            return Err(Error::DimMismatch {
                expected: dim * ids.len(),
                actual: rows.len(),
            });
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dense index row"));
        }
        let mut by_id = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if by_id.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            dim,
            ids,
            rows,
            by_id,
        })
    }

    pub fn from_vectors(entries: Vec<(String, EmbeddingVector)>) -> Result<Self> {
        let dim = entries.first().map_or(1, |(_, v)| v.dim());
        let mut ids = Vec::with_capacity(entries.len());
        let mut rows = Vec::with_capacity(entries.len() * dim);
        for (id, v) in entries {
            v.check_dim(dim)?;
            ids.push(id);
            rows.extend(v.values().iter().map(|&x| x as f32));
        }
        Self::from_rows(dim, ids, rows)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, id: &str) -> Option<&[f32]> {
        self.by_id
            .get(id)
            .map(|&i| &self.rows[i * self.dim..(i + 1) * self.dim])
    }

    /// The stored row widened back to f64.
    pub fn vector(&self, id: &str) -> Result<EmbeddingVector> {
        let row = self.row(id).ok_or_else(|| Error::NotFound(id.to_owned()))?;
        EmbeddingVector::new(row.iter().map(|&x| x as f64).collect())
    }

    pub fn score(&self, q: &EmbeddingVector, id: &str, mode: Similarity) -> Result<f64> {
        q.check_dim(self.dim)?;
        let row = self.row(id).ok_or_else(|| Error::NotFound(id.to_owned()))?;
        Ok(mode.score_row(q.values(), row, q.norm()))
    }

    /// Exhaustive top-`k` over every row.
    pub fn top_k(&self, q: &EmbeddingVector, k: usize, mode: Similarity) -> Result<Vec<ScoredId>> {
        q.check_dim(self.dim)?;
        let q_norm = q.norm();
        let mut hits: Vec<ScoredId> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let row = &self.rows[i * self.dim..(i + 1) * self.dim];
                ScoredId::new(id.clone(), mode.score_row(q.values(), row, q_norm))
            })
            .collect();
        hits.sort_by(rank_order);
        hits.truncate(k);
        Ok(hits)
    }

    /// Top-`k` restricted to `members`; every member must be indexed.
    pub fn top_k_within(
        &self,
        q: &EmbeddingVector,
        members: &[String],
        k: usize,
        mode: Similarity,
    ) -> Result<Vec<ScoredId>> {
        q.check_dim(self.dim)?;
        let q_norm = q.norm();
        let mut hits = Vec::with_capacity(members.len());
        for id in members {
            let row = self.row(id).ok_or_else(|| Error::NotFound(id.clone()))?;
            hits.push(ScoredId::new(id.clone(), mode.score_row(q.values(), row, q_norm)));
        }
        hits.sort_by(rank_order);
        hits.truncate(k);
        Ok(hits)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_store(w, self.dim, &self.ids, &self.rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let (dim, ids, rows) = read_store(r)?;
        Self::from_rows(dim, ids, rows)
    }
}

pub(crate) fn write_store(w: &mut impl Write, dim: usize, ids: &[String], rows: &[f32]) -> Result<()> {
    w.write_all(DENSE_MAGIC)?;
    w.write_all(&[DENSE_VERSION])?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(ids.len() as u32).to_le_bytes())?;
    for v in rows {
        w.write_all(&v.to_le_bytes())?;
    }
    for id in ids {
        write_string(w, id)?;
    }
    Ok(())
}

pub(crate) fn read_store(r: &mut impl Read) -> Result<(usize, Vec<String>, Vec<f32>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DENSE_MAGIC {
        return Err(Error::CorruptIndex("bad dense magic".into()));
    }
    let version = read_u8(r)?;
    if version != DENSE_VERSION {
        return Err(Error::CorruptIndex(format!(
            "unsupported dense version {version}"
        )));
    }
    let dim = read_u32(r)? as usize;
    let count = read_u32(r)? as usize;
    let total = dim
        .checked_mul(count)
        .filter(|&n| n < (1 << 31))
        .ok_or_else(|| Error::CorruptIndex("store too large".into()))?;
    let mut rows = Vec::with_capacity(total);
    for _ in 0..total {
        rows.push(read_f32(r)?);
    }
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        ids.push(read_string(r)?);
    }
    Ok((dim, ids, rows))
}
