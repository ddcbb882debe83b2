//! Seeded synthetic QA fixtures with planted gold passages.
//!
//! Every question asks for the `cue` of two entity words within a topic.
//! Its passages are:
//!
//! * one strong gold: both entities, the topic and `cue <answer>`;
//! * weak golds: the topic and `cue <answer>` amid filler, no entities;
//! * decoys: one entity and `cue <decoy>`;
//! * distractors: both entities repeated, no cue.
//!
//! Answers and decoys are unique pseudo-words, so a passage contains a
//! question's gold answer only if it was planted for that question.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::QaItem;
use crate::text::{Corpus, Passage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub questions: usize,
    pub weak_golds: usize,
    pub decoys: usize,
    pub distractors: usize,
    /// Questions sharing one topic word.
    pub questions_per_topic: usize,
    pub filler_vocab: usize,
    pub filler_len: (usize, usize),
    pub cue: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            questions: 50,
            weak_golds: 5,
            decoys: 2,
            distractors: 2,
            questions_per_topic: 5,
            filler_vocab: 400,
            filler_len: (6, 12),
            cue: "code".into(),
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn passages_per_question(&self) -> usize {
        1 + self.weak_golds + self.decoys + self.distractors
    }
}

#[derive(Debug, Clone)]
pub struct SynthFixture {
    pub corpus: Corpus,
    pub questions: Vec<QaItem>,
    /// Decoy answer of each question, aligned with `questions`.
    pub decoys: Vec<String>,
}

struct Words {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Words {
    fn fresh(&mut self) -> String {
        const ONSETS: &[u8] = b"bdfgklmnprstvz";
        const VOWELS: &[u8] = b"aeiou";
        loop {
            let w: String = (0..3)
                .flat_map(|_| {
                    let c = *ONSETS.choose(&mut self.rng).expect("non-empty");
                    let v = *VOWELS.choose(&mut self.rng).expect("non-empty");
                    [c as char, v as char]
                })
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

/// Splices `insert` into `base` at a random position.
fn splice(rng: &mut ChaCha8Rng, mut base: Vec<String>, insert: Vec<String>) -> Vec<String> {
    let at = rng.random_range(0..=base.len());
    base.splice(at..at, insert);
    base
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthFixture> {
    if cfg.questions == 0 || cfg.questions_per_topic == 0 || cfg.filler_vocab == 0 {
        return Err(Error::invalid(
            "synthetic fixture needs questions, topics and filler",
        ));
    }
    if cfg.filler_len.0 == 0 || cfg.filler_len.0 > cfg.filler_len.1 {
        return Err(Error::invalid(
            "filler length range must be non-empty and positive",
        ));
    }
    let mut words = Words {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        used: HashSet::from([cfg.cue.to_lowercase()]),
    };
    let filler: Vec<String> = (0..cfg.filler_vocab).map(|_| words.fresh()).collect();
    let topics: Vec<String> = (0..cfg.questions.div_ceil(cfg.questions_per_topic))
        .map(|_| words.fresh())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let fill = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let n = rng.random_range(cfg.filler_len.0..=cfg.filler_len.1);
        (0..n)
            .map(|_| filler.choose(rng).expect("non-empty").clone())
            .collect()
    };
    let sentence = |parts: Vec<String>| -> String {
        let mut s = capitalize(&parts.join(" "));
        s.push('.');
        s
    };
    let cue = cfg.cue.as_str();
    let mut passages = Vec::with_capacity(cfg.questions * cfg.passages_per_question());
    let mut questions = Vec::with_capacity(cfg.questions);
    let mut decoys = Vec::with_capacity(cfg.questions);
    for qi in 0..cfg.questions {
        let (e1, e2) = (words.fresh(), words.fresh());
        let answer = words.fresh();
        let decoy = words.fresh();
        let topic = &topics[qi / cfg.questions_per_topic];
        let mut local = Vec::with_capacity(cfg.passages_per_question());

        let base = fill(&mut rng);

        let body = splice(&mut rng, base, vec![cue.into(), answer.clone()]);
        let mut parts = vec![e1.clone(), e2.clone(), topic.clone()];
        parts.extend(body);
        local.push((
            "g0".to_owned(),
            format!("{} {}", capitalize(&e1), capitalize(&e2)),
            sentence(parts),
        ));

        for j in 0..cfg.weak_golds {
            let base = fill(&mut rng);
            let mut body = splice(&mut rng, base, vec![topic.clone()]);
            body = splice(&mut rng, body, vec![cue.into(), answer.clone()]);
            let title = capitalize(&fill(&mut rng)[0]);
            local.push((format!("w{j}"), title, sentence(body)));
        }
        for j in 0..cfg.decoys {
            let base = fill(&mut rng);
            let body = splice(&mut rng, base, vec![cue.into(), decoy.clone()]);
            let mut parts = vec![e1.clone()];
            parts.extend(body);
            local.push((format!("d{j}"), capitalize(&e1), sentence(parts)));
        }
        for j in 0..cfg.distractors {
            let base = fill(&mut rng);
            let mut body = splice(&mut rng, base, vec![e1.clone(), e2.clone()]);
            body = splice(&mut rng, body, vec![e1.clone()]);
            local.push((
                format!("x{j}"),
                format!("{} {}", capitalize(&e1), capitalize(&e2)),
                sentence(body),
            ));
        }
        local.shuffle(&mut rng);
        for (tag, title, text) in local {
            passages.push(Passage::new(format!("q{qi:03}-{tag}"), title, text));
        }
        questions.push(QaItem {
            id: format!("q{qi:03}"),
            question: format!(
                "What is the {cue} of {} {} in {topic}?",
                capitalize(&e1),
                capitalize(&e2)
            ),
            answers: vec![answer],
        });
        decoys.push(decoy);
    }
    passages.shuffle(&mut rng);
    Ok(SynthFixture {
        corpus: Corpus::from_passages(passages)?,
        questions,
        decoys,
    })
}
