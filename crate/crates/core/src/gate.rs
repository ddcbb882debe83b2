//! Exploratory-embedding gate.
//!
//! A standard-normal vector is injected as one extra input position; the
//! backend returns the penultimate hidden state at that position and the
//! gap statistic of its leading order statistics decides acceptance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backend::Metered;
use crate::dense::EmbeddingVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub threshold: f64,
    pub p: usize,
    pub max_attempts: usize,
    pub standardize: bool,
    pub seed: u64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            threshold: 0.05,
            p: 5,
            max_attempts: 50,
            standardize: true,
            seed: 0,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threshold.is_nan() || self.threshold <= 0.0 {
            return Err(Error::invalid("gate threshold must be positive"));
        }
        if self.p == 0 {
            return Err(Error::invalid("gate p must be positive"));
        }
        if self.max_attempts == 0 {
            return Err(Error::invalid("gate max_attempts must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSample {
    pub e_r: EmbeddingVector,
    pub h_r: EmbeddingVector,
    /// `+inf` for a zero-variance hidden state under standardization;
    /// serialized as `null`.
    #[serde(with = "infinite_as_null")]
    pub s: f64,
    pub accepted: bool,
    /// 1-based index of the attempt that produced this sample.
    pub attempt: usize,
    /// Number of attempts made before the gate returned.
    pub attempts: usize,
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// `dim` i.i.d. standard-normal draws, a pure function of `(seed, attempt)`.
pub fn sample_exploratory(dim: usize, seed: u64, attempt: u64) -> Result<EmbeddingVector> {
    if dim == 0 {
        return Err(Error::invalid("exploratory dimension must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attempt);
    let values = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    EmbeddingVector::new(values)
}

/// Sum of the squared first `p` gaps between adjacent entries of `h`
/// sorted in descending order, optionally after standardizing `h` with its
/// population standard deviation. A zero-variance `h` under
/// standardization yields `+inf`.
pub fn gap_statistic(h: &[f64], p: usize, standardize: bool) -> Result<f64> {
    if p >= h.len() {
        return Err(Error::invalid(format!(
            "gap count p={p} must be below the hidden dimension {}",
            h.len()
        )));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("hidden state"));
    }
    let mut v = h.to_vec();
    if standardize {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        if var == 0.0 {
            return Ok(f64::INFINITY);
        }
        let sd = var.sqrt();
        for x in &mut v {
            *x = (*x - mean) / sd;
        }
    }
    // Only the top p+1 order statistics matter.
    let top = p + 1;
    if top < v.len() {
        v.select_nth_unstable_by(top - 1, |a, b| b.total_cmp(a));
        v.truncate(top);
    }
    v.sort_unstable_by(|a, b| b.total_cmp(a));
    Ok(v.windows(2).map(|w| (w[0] - w[1]) * (w[0] - w[1])).sum())
}

/// Samples, probes and gates until a sample's statistic falls below the
/// threshold or attempts run out; in the latter case the lowest-statistic
/// sample is returned with `accepted = false`.
pub fn acquire_exploratory(
    backend: Metered<'_>,
    prompt: &str,
    input_dim: usize,
    cfg: &GateConfig,
) -> Result<GateSample> {
    cfg.validate()?;
    let mut best: Option<GateSample> = None;
    for attempt in 1..=cfg.max_attempts {
        let e_r = sample_exploratory(input_dim, cfg.seed, attempt as u64)?;
        let h_r = backend.probe_hidden(prompt, &e_r)?;
        let s = gap_statistic(h_r.values(), cfg.p, cfg.standardize)?;
        let sample = GateSample {
            e_r,
            h_r,
            s,
            accepted: s < cfg.threshold,
            attempt,
            attempts: attempt,
        };
        if sample.accepted {
            return Ok(sample);
        }
        if best.as_ref().is_none_or(|b| s < b.s) {
            best = Some(sample);
        }
    }
    let mut best = best.expect("max_attempts is positive");
    best.attempts = cfg.max_attempts;
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{HiddenMode, ScriptedBackend, UsageCounter};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    fn brute(h: &[f64], p: usize, standardize: bool) -> f64 {
        let mut v = h.to_vec();
        if standardize {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            if sd == 0.0 {
                return f64::INFINITY;
            }
            v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
        }
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let gaps: Vec<f64> = (0..v.len() - 1).map(|i| v[i] - v[i + 1]).collect();
        gaps[..p].iter().map(|g| g * g).sum()
    }

    #[test]
    fn hand_cases() {
        assert_eq!(gap_statistic(&[3.0, 1.0, 0.0, -2.0], 2, false).unwrap(), 5.0);
        assert_eq!(gap_statistic(&[5.0, 1.0, 1.0, 1.0], 3, false).unwrap(), 16.0);
        assert_eq!(gap_statistic(&[2.0; 6], 3, false).unwrap(), 0.0);
        assert_eq!(gap_statistic(&[2.0; 6], 3, true).unwrap(), f64::INFINITY);
        assert!(gap_statistic(&[1.0, 2.0], 2, false).is_err());
    }

    #[test]
    fn sampler_moments() {
        let mut sum = 0.0;
        let mut sq = 0.0;
        let n = 10_000 * 64;
        for a in 0..10_000 {
            for x in sample_exploratory(64, 11, a).unwrap().values() {
                sum += x;
                sq += x * x;
            }
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
        assert_eq!(
            sample_exploratory(8, 3, 2).unwrap(),
            sample_exploratory(8, 3, 2).unwrap()
        );
        assert_ne!(
            sample_exploratory(8, 3, 2).unwrap(),
            sample_exploratory(8, 3, 3).unwrap()
        );
    }

    #[test]
    fn infinite_threshold_accepts_first() {
        let b = ScriptedBackend::new(16).reply_always("x");
        let counter = UsageCounter::new();
        let cfg = GateConfig {
            threshold: f64::INFINITY,
            ..GateConfig::default()
        };
        let s = acquire_exploratory(Metered::new(&b, &counter), "p", 16, &cfg).unwrap();
        assert!(s.accepted);
        assert_eq!(s.attempt, 1);
        assert_eq!(counter.report().probe_calls, 1);
    }

    #[test]
    fn fixed_hidden_exhausts_attempts() {
        let h = vec![4.0, 1.0, 0.5, 0.0, -1.0, -3.0, 2.0, 0.25];
        let fixed = gap_statistic(&h, 5, true).unwrap();
        let b = ScriptedBackend::new(8)
            .reply_always("x")
            .with_hidden(HiddenMode::Fixed(h));
        let counter = UsageCounter::new();
        let cfg = GateConfig {
            threshold: fixed / 2.0,
            max_attempts: 7,
            ..GateConfig::default()
        };
        let s = acquire_exploratory(Metered::new(&b, &counter), "p", 8, &cfg).unwrap();
        assert!(!s.accepted);
        assert_eq!(s.s, fixed);
        assert_eq!(s.attempts, 7);
        assert_eq!(counter.report().probe_calls, 7);
    }

    #[test]
    fn deterministic_given_seed() {
        let b = ScriptedBackend::new(32).reply_always("x");
        let counter = UsageCounter::new();
        let cfg = GateConfig {
            seed: 99,
            ..GateConfig::default()
        };
        let a = acquire_exploratory(Metered::new(&b, &counter), "p", 32, &cfg).unwrap();
        let c = acquire_exploratory(Metered::new(&b, &counter), "p", 32, &cfg).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn serializes_infinite_statistic_as_null() {
        let e = EmbeddingVector::new(vec![1.0, 1.0]).unwrap();
        let s = GateSample {
            e_r: e.clone(),
            h_r: e,
            s: f64::INFINITY,
            accepted: false,
            attempt: 1,
            attempts: 1,
        };
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"s\":null"));
        let back: GateSample = serde_json::from_str(&json).unwrap();
        assert_eq!(back.s, f64::INFINITY);
    }

    proptest! {
        #[test]
        fn matches_brute_force(h in prop::collection::vec(-100.0f64..100.0, 2..64), p in 1usize..8, standardize: bool) {
            prop_assume!(p < h.len());
            let fast = gap_statistic(&h, p, standardize).unwrap();
            let slow = brute(&h, p, standardize);
            if slow.is_infinite() {
                prop_assert!(fast.is_infinite());
            } else {
                prop_assert!((fast - slow).abs() <= 1e-12 * slow.abs().max(1.0));
            }
        }

        #[test]
        fn permutation_invariant(mut h in prop::collection::vec(-10.0f64..10.0, 6..40), seed: u64) {
            let before = gap_statistic(&h, 5, true).unwrap();
            h.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let after = gap_statistic(&h, 5, true).unwrap();
            if before.is_finite() {
                prop_assert!((before - after).abs() <= 1e-12 * before.max(1.0));
            }
        }

        #[test]
        fn affine_invariant_when_standardized(h in prop::collection::vec(-10.0f64..10.0, 6..40), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let base = gap_statistic(&h, 5, true).unwrap();
            let mapped: Vec<f64> = h.iter().map(|x| a * x + b).collect();
            let after = gap_statistic(&mapped, 5, true).unwrap();
            if base.is_finite() {
                prop_assert!((base - after).abs() <= 1e-9 * base.max(1.0));
            }
        }

        #[test]
        fn gaps_telescope(h in prop::collection::vec(-10.0f64..10.0, 2..40)) {
            let mut v = h.clone();
            v.sort_by(|a, b| b.total_cmp(a));
            let total: f64 = v.windows(2).map(|w| w[0] - w[1]).sum();
            prop_assert!((total - (v[0] - v[v.len() - 1])).abs() < 1e-9);
        }
    }
}
