//! Grading records, score scales, the dataset file format, class-balancing
//! upsampling, tokenization, and the synthetic grading corpus.
//!
//! Dataset files are UTF-8, one record per line, eight tab-separated fields:
//! `id split question reference_answer provided_answer raw_score scale feedback`.
//! Lines starting with `#` are ignored.

mod synthetic;
mod vocab;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use synthetic::{band_of, band_phrase, gen_synthetic, SyntheticSpec, CONCEPTS_PER_QUESTION};
pub use vocab::{split_tokens, Vocab, BOS_ID, EOS_ID, PAD_ID, SEP_ID, UNK_ID};

use crate::error::{Error, Result};

pub const DEFAULT_UPSAMPLE_BINS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScaleKind {
    UnitInterval,
    /// 0–5 in steps of 0.5 (11 grades).
    MohlerHalfStep,
}

impl ScaleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScaleKind::UnitInterval => "unit",
            ScaleKind::MohlerHalfStep => "mohler",
        }
    }
}

impl FromStr for ScaleKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "unit" => Ok(ScaleKind::UnitInterval),
            "mohler" => Ok(ScaleKind::MohlerHalfStep),
            other => Err(format!("unknown scale {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradeScale {
    pub kind: ScaleKind,
    pub min: f64,
    pub max: f64,
    /// Grade resolution; 0 for a continuous scale.
    pub step: f64,
}

impl GradeScale {
    pub const UNIT: GradeScale = GradeScale {
        kind: ScaleKind::UnitInterval,
        min: 0.0,
        max: 1.0,
        step: 0.0,
    };
    pub const MOHLER: GradeScale = GradeScale {
        kind: ScaleKind::MohlerHalfStep,
        min: 0.0,
        max: 5.0,
        step: 0.5,
    };

    pub fn of(kind: ScaleKind) -> Self {
        match kind {
            ScaleKind::UnitInterval => Self::UNIT,
            ScaleKind::MohlerHalfStep => Self::MOHLER,
        }
    }

    /// Every representable grade of a stepped scale.
    pub fn grades(&self) -> Option<Vec<f64>> {
        if self.step <= 0.0 {
            return None;
        }
        let n = ((self.max - self.min) / self.step).round() as usize;
        Some((0..=n).map(|i| self.min + i as f64 * self.step).collect())
    }
}

/// Maps a raw score to `[0, 1]` via `(raw - min) / (max - min)`.
pub fn normalize_score(raw: f64, scale: &GradeScale) -> Result<f64> {
    if !(raw >= scale.min && raw <= scale.max) {
        return Err(Error::ScoreOutOfRange {
            raw,
            min: scale.min,
            max: scale.max,
        });
    }
    if scale.kind == ScaleKind::UnitInterval {
        return Ok(raw);
    }
    Ok((raw - scale.min) / (scale.max - scale.min))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    TestUa,
    TestUq,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestUa, Split::TestUq];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestUa => "test_ua",
            Split::TestUq => "test_uq",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| format!("unknown split {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradingExample {
    pub id: String,
    pub question: String,
    pub reference_answer: String,
    /// May be empty: a blank response is a legitimate answer.
    pub provided_answer: String,
    /// Normalized to `[0, 1]`.
    pub score: f64,
    pub raw_score: f64,
    pub scale: ScaleKind,
    pub feedback: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<GradingExample>,
    pub validation: Vec<GradingExample>,
    pub test_unseen_answers: Vec<GradingExample>,
    pub test_unseen_questions: Vec<GradingExample>,
}

impl DatasetSplits {
    pub fn get(&self, split: Split) -> &[GradingExample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.validation,
            Split::TestUa => &self.test_unseen_answers,
            Split::TestUq => &self.test_unseen_questions,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<GradingExample> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.validation,
            Split::TestUa => &mut self.test_unseen_answers,
            Split::TestUq => &mut self.test_unseen_questions,
        }
    }

    pub fn sizes(&self) -> [usize; 4] {
        Split::ALL.map(|s| self.get(s).len())
    }

    pub fn len(&self) -> usize {
        self.sizes().iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(split, example)` pairs in split order.
    pub fn iter(&self) -> impl Iterator<Item = (Split, &GradingExample)> {
        Split::ALL
            .into_iter()
            .flat_map(move |s| self.get(s).iter().map(move |e| (s, e)))
    }

    /// Fails on the first id that occurs in more than one split.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen: HashSet<&str> = HashSet::new();
        for split in Split::ALL {
            let local: HashSet<&str> = self.get(split).iter().map(|e| e.id.as_str()).collect();
            if let Some(dup) = local.iter().find(|id| seen.contains(*id)) {
                return Err(Error::DuplicateId(dup.to_string()));
            }
            seen.extend(local);
        }
        Ok(())
    }
}

fn clean_field(text: &str) -> String {
    text.chars()
        .map(|c| if c == '\t' || c == '\n' || c == '\r' { ' ' } else { c })
        .collect()
}

/// Serializes splits in the dataset file format.
pub fn format_dataset(splits: &DatasetSplits) -> String {
    let mut out =
        String::from("# id\tsplit\tquestion\treference_answer\tprovided_answer\traw_score\tscale\tfeedback\n");
    for (split, e) in splits.iter() {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            clean_field(&e.id),
            split,
            clean_field(&e.question),
            clean_field(&e.reference_answer),
            clean_field(&e.provided_answer),
            e.raw_score,
            e.scale.as_str(),
            clean_field(&e.feedback),
        ));
    }
    out
}

pub fn write_dataset(path: &Path, splits: &DatasetSplits) -> Result<()> {
    fs::write(path, format_dataset(splits))?;
    Ok(())
}

/// Parses dataset text. Every record must declare `scale`'s kind.
pub fn parse_dataset(text: &str, scale: &GradeScale) -> Result<DatasetSplits> {
    let mut splits = DatasetSplits::default();
    let mut ids: HashSet<String> = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::ParseError { line: line_no, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 8 {
            return Err(err(format!("expected 8 tab-separated fields, found {}", fields.len())));
        }
        let id = fields[0];
        if id.is_empty() {
            return Err(err("empty id".into()));
        }
        let split: Split = fields[1].parse().map_err(err)?;
        let raw_score: f64 = fields[5]
            .parse()
            .map_err(|_| err(format!("bad raw score {:?}", fields[5])))?;
        let kind: ScaleKind = fields[6].parse().map_err(err)?;
        if kind != scale.kind {
            return Err(err(format!(
                "record scale {} does not match expected {}",
                kind.as_str(),
                scale.kind.as_str()
            )));
        }
        let score = normalize_score(raw_score, scale)?;
        if !ids.insert(id.to_string()) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        splits.get_mut(split).push(GradingExample {
            id: id.to_string(),
            question: fields[2].to_string(),
            reference_answer: fields[3].to_string(),
            provided_answer: fields[4].to_string(),
            score,
            raw_score,
            scale: kind,
            feedback: fields[7].to_string(),
        });
    }
    Ok(splits)
}

pub fn load_dataset(path: &Path, scale: &GradeScale) -> Result<DatasetSplits> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text, scale)
}

/// Equal-width score bin over `[0, 1]`.
pub fn score_bin(score: f64, n_bins: usize) -> usize {
    ((score.clamp(0.0, 1.0) * n_bins as f64).floor() as usize).min(n_bins - 1)
}

/// Duplicates examples of minority score bins (seeded sampling with
/// replacement) until every nonempty bin matches the largest, then shuffles.
pub fn upsample_balance(examples: &[GradingExample], n_bins: usize, seed: u64) -> Result<Vec<GradingExample>> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if n_bins < 2 {
        return Err(Error::InvalidConfig(format!(
            "upsampling needs at least 2 bins, got {n_bins}"
        )));
    }
    let mut bins: Vec<Vec<&GradingExample>> = vec![Vec::new(); n_bins];
    for e in examples {
        bins[score_bin(e.score, n_bins)].push(e);
    }
    let largest = bins.iter().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<GradingExample> = examples.to_vec();
    for bin in bins.iter().filter(|b| !b.is_empty()) {
        for _ in bin.len()..largest {
            out.push(bin[rng.random_range(0..bin.len())].clone());
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}
