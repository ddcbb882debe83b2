//! Seeded hashing embedder used as the desk-scale dense retriever.
//!
//! Every token maps to a fixed Gaussian direction derived from
//! `(seed, token)`; a text embeds as the L2-normalized sum of its token
//! directions, so inner products approximate normalized token overlap.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dense::{Embedder, EmbeddingVector};
use crate::error::Result;
use crate::text::tokenize;
use crate::util::stable_hash64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 256, seed: 7 }
    }
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim: dim.max(1),
            seed,
        }
    }

    pub fn token_direction(&self, token: &str) -> Vec<f64> {
        let key = stable_hash64(token.as_bytes()) ^ self.seed.rotate_left(17);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let scale = 1.0 / (self.dim as f64).sqrt();
        (0..self.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect()
    }

    fn embed_with_cache(&self, text: &str, cache: &mut HashMap<String, Vec<f64>>) -> EmbeddingVector {
        let mut acc = vec![0.0; self.dim];
        for token in tokenize(text) {
            let dir = cache.entry(token).or_insert_with_key(|t| self.token_direction(t));
            for (a, d) in acc.iter_mut().zip(dir.iter()) {
                *a += d;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector::new(acc).expect("finite by construction")
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let mut cache = HashMap::new();
        Ok(texts
            .iter()
            .map(|t| self.embed_with_cache(t, &mut cache))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{similarity, Similarity};

    #[test]
    fn deterministic_and_unit_norm() {
        let e = HashEmbedder::new(64, 3);
        let a = e.embed_one("the cat sat").unwrap();
        let b = e.embed_one("the cat sat").unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert_eq!(a.dim(), 64);
    }

    #[test]
    fn overlap_scores_higher() {
        let e = HashEmbedder::new(256, 1);
        let q = e.embed_one("capital of france").unwrap();
        let near = e.embed_one("paris is the capital of france").unwrap();
        let far = e.embed_one("dolphins swim in warm oceans").unwrap();
        let s_near = similarity(&q, &near, Similarity::Dot).unwrap();
        let s_far = similarity(&q, &far, Similarity::Dot).unwrap();
        assert!(s_near > s_far + 0.3, "{s_near} vs {s_far}");
    }

    #[test]
    fn empty_text_is_zero() {
        let e = HashEmbedder::new(8, 0);
        assert_eq!(e.embed_one("").unwrap().norm(), 0.0);
    }
}
