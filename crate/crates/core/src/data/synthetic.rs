//! Deterministic templated grading corpus.
//!
//! Every question owns `CONCEPTS_PER_QUESTION` key-concept words that no other
//! question uses. A student answer has one slot per concept, each holding
//! either the concept itself or a distractor word and preceded by a filler
//! word, so answers have constant length. The raw score is the fraction of
//! concepts present; feedback is a score-band phrase followed by the missing
//! concepts.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetSplits, GradingExample, ScaleKind};
use crate::error::{Error, Result};

pub const CONCEPTS_PER_QUESTION: usize = 4;
const DISTRACTOR_POOL: usize = 24;

const FILLERS: [&str; 10] = [
    "it", "uses", "with", "and", "then", "so", "because", "the", "also", "via",
];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

const BAND_PHRASES: [&str; 5] = [
    "incorrect answer , please review the lecture material .",
    "weak answer , most key ideas are not addressed .",
    "partially correct , about half of the key ideas are covered .",
    "good answer , mostly correct but one point is absent .",
    "excellent work , the answer is complete and correct .",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub n_questions: usize,
    pub n_examples: usize,
    /// Number of generated theme words; the first `4 · n_questions` become key
    /// concepts, the rest join the distractor pool.
    pub vocab_theme_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_questions: 20,
            n_examples: 2000,
            vocab_theme_size: 100,
            seed: 7,
        }
    }
}

/// Score band 0..=4 of a unit-interval score.
pub fn band_of(score: f64) -> usize {
    if score >= 1.0 {
        4
    } else if score >= 0.75 {
        3
    } else if score >= 0.5 {
        2
    } else if score >= 0.25 {
        1
    } else {
        0
    }
}

pub fn band_phrase(score: f64) -> &'static str {
    BAND_PHRASES[band_of(score)]
}

fn reserved_words() -> HashSet<String> {
    let mut set: HashSet<String> = FILLERS.iter().map(|s| s.to_string()).collect();
    for phrase in BAND_PHRASES {
        set.extend(phrase.split(' ').map(str::to_string));
    }
    for w in [
        "explain", "role", "of", "in", "system", "depends", "on", "missing", "question", "answer", "rubric", "grade",
        "feedback", "full", "credit", "requires",
    ] {
        set.insert(w.to_string());
    }
    set
}

fn pseudo_words(n: usize, rng: &mut ChaCha8Rng, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
        }
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

struct Question {
    topic: String,
    concepts: Vec<String>,
}

impl Question {
    fn text(&self) -> String {
        format!("explain the role of {} in the system .", self.topic)
    }

    fn reference(&self) -> String {
        let c = &self.concepts;
        format!(
            "{} depends on {} , {} , {} and {} .",
            self.topic, c[0], c[1], c[2], c[3]
        )
    }
}

/// Feedback for an answer that covers `present` (flags in concept order).
fn feedback(q: &Question, score: f64, present: &[bool]) -> String {
    let missing: Vec<&str> = q
        .concepts
        .iter()
        .zip(present)
        .filter(|(_, &p)| !p)
        .map(|(c, _)| c.as_str())
        .collect();
    let mut text = band_phrase(score).to_string();
    if !missing.is_empty() {
        text.push_str(" missing : ");
        text.push_str(&missing.join(" "));
        text.push_str(" .");
    }
    text
}

fn answer(q: &Question, distractors: &[String], rng: &mut ChaCha8Rng) -> (String, f64, Vec<bool>) {
    let k = CONCEPTS_PER_QUESTION;
    let n_present = rng.random_range(0..=k);
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    let mut present = vec![false; k];
    for &i in &order[..n_present] {
        present[i] = true;
    }
    order.shuffle(rng);
    let mut words = Vec::with_capacity(2 * k);
    for &slot in &order {
        words.push(FILLERS.choose(rng).unwrap().to_string());
        if present[slot] {
            words.push(q.concepts[slot].clone());
        } else {
            words.push(distractors.choose(rng).unwrap().clone());
        }
    }
    (words.join(" "), n_present as f64 / k as f64, present)
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<DatasetSplits> {
    let bad = |m: String| Err(Error::InvalidSpec(m));
    if spec.n_examples < 40 {
        return bad(format!("n_examples must be at least 40, got {}", spec.n_examples));
    }
    if spec.n_questions < 2 {
        return bad(format!("n_questions must be at least 2, got {}", spec.n_questions));
    }
    if spec.n_questions > 200 {
        return bad(format!("n_questions must be at most 200, got {}", spec.n_questions));
    }
    let n_concepts = spec.n_questions * CONCEPTS_PER_QUESTION;
    if spec.vocab_theme_size < n_concepts || spec.vocab_theme_size > 4000 {
        return bad(format!(
            "vocab_theme_size must be in {n_concepts}..=4000 for {} questions, got {}",
            spec.n_questions, spec.vocab_theme_size
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut taken = reserved_words();
    let topics = pseudo_words(spec.n_questions, &mut rng, &mut taken);
    let theme = pseudo_words(spec.vocab_theme_size, &mut rng, &mut taken);
    let mut distractors = pseudo_words(DISTRACTOR_POOL, &mut rng, &mut taken);
    distractors.extend_from_slice(&theme[n_concepts..]);
    let questions: Vec<Question> = topics
        .into_iter()
        .enumerate()
        .map(|(i, topic)| Question {
            topic,
            concepts: theme[i * CONCEPTS_PER_QUESTION..(i + 1) * CONCEPTS_PER_QUESTION].to_vec(),
        })
        .collect();

    let n = spec.n_examples;
    let n_uq = ((n as f64) * 0.075).round() as usize;
    let n_ua = ((n as f64) * 0.075).round() as usize;
    let n_val = ((n as f64) * 0.15).round() as usize;
    let n_train = n - n_uq - n_ua - n_val;
    let held_out = ((spec.n_questions as f64) * 0.1).round().max(1.0) as usize;
    let seen = spec.n_questions - held_out;

    let mut splits = DatasetSplits::default();
    let mut next_id = 0usize;
    let plan = [(n_train, false), (n_val, false), (n_ua, false), (n_uq, true)];
    for (split_idx, &(count, unseen)) in plan.iter().enumerate() {
        let mut out = Vec::with_capacity(count);
        for j in 0..count {
            let qi = if unseen {
                seen + j % held_out
            } else {
                rng.random_range(0..seen)
            };
            let q = &questions[qi];
            let (provided, score, present) = answer(q, &distractors, &mut rng);
            out.push(GradingExample {
                id: format!("syn-{next_id:05}"),
                question: q.text(),
                reference_answer: q.reference(),
                provided_answer: provided,
                score,
                raw_score: score,
                scale: ScaleKind::UnitInterval,
                feedback: feedback(q, score, &present),
            });
            next_id += 1;
        }
        match split_idx {
            0 => splits.train = out,
            1 => splits.validation = out,
            2 => splits.test_unseen_answers = out,
            _ => splits.test_unseen_questions = out,
        }
    }
    Ok(splits)
}
