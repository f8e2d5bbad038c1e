//! Scoring metrics (RMSE, MAE, Pearson) and generation metrics (corpus BLEU-4,
//! ROUGE-1/2 F1).

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::hash::Hash;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreMetrics {
    pub rmse: f64,
    pub mae: f64,
    /// `None` when either side has zero variance or fewer than two items.
    pub pearson: Option<f64>,
}

pub fn score_metrics(preds: &[f64], targets: &[f64]) -> Result<ScoreMetrics> {
    if preds.len() != targets.len() {
        return Err(Error::LengthMismatch(preds.len(), targets.len()));
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = preds.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
    }
    Ok(ScoreMetrics {
        rmse: (se / n).sqrt(),
        mae: ae / n,
        pearson: pearson(preds, targets),
    })
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_overlap<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> usize {
    let r = ngram_counts(reference, n);
    ngram_counts(cand, n)
        .into_iter()
        .map(|(g, c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum()
}

/// Corpus-level BLEU-4 with brevity penalty and no smoothing: clipped n-gram
/// matches and candidate n-gram counts are pooled over the corpus before the
/// precisions are formed.
pub fn bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch(candidates.len(), references.len()));
    }
    if candidates.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut c_len = 0usize;
    let mut r_len = 0usize;
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            matches[n - 1] += clipped_overlap(c, r, n);
            totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    if matches.iter().zip(&totals).any(|(&m, &t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_p.exp())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rouge {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// ROUGE-N overlap. Degenerate inputs (no n-grams on either side) give zeros.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Rouge {
    let zero = Rouge {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
    if n == 0 || candidate.len() < n || reference.len() < n {
        return zero;
    }
    let overlap = clipped_overlap(candidate, reference, n) as f64;
    if overlap == 0.0 {
        return zero;
    }
    let precision = overlap / (candidate.len() + 1 - n) as f64;
    let recall = overlap / (reference.len() + 1 - n) as f64;
    Rouge {
        precision,
        recall,
        f1: 2.0 * precision * recall / (precision + recall),
    }
}

/// Mean ROUGE-N F1 over aligned candidate/reference pairs.
pub fn mean_rouge_f1<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch(candidates.len(), references.len()));
    }
    if candidates.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_n(c, r, n).f1)
        .sum();
    Ok(total / candidates.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationMetrics {
    pub bleu: f64,
    pub rouge1_f: f64,
    pub rouge2_f: f64,
}

pub fn generation_metrics<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<GenerationMetrics> {
    Ok(GenerationMetrics {
        bleu: bleu(candidates, references)?,
        rouge1_f: mean_rouge_f1(candidates, references, 1)?,
        rouge2_f: mean_rouge_f1(candidates, references, 2)?,
    })
}

/// Evaluation report. Fields that a run did not measure are `None` and are
/// written as `n/a`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    pub pearson: Option<f64>,
    pub bleu: Option<f64>,
    pub rouge1_f: Option<f64>,
    pub rouge2_f: Option<f64>,
    pub n_examples: usize,
}

pub const REPORT_KEYS: [&str; 7] = ["rmse", "mae", "pearson", "bleu", "rouge1_f", "rouge2_f", "n_examples"];

impl MetricsReport {
    pub fn with_scores(mut self, m: &ScoreMetrics) -> Self {
        self.rmse = Some(m.rmse);
        self.mae = Some(m.mae);
        self.pearson = m.pearson;
        self
    }

    pub fn with_generation(mut self, m: &GenerationMetrics) -> Self {
        self.bleu = Some(m.bleu);
        self.rouge1_f = Some(m.rouge1_f);
        self.rouge2_f = Some(m.rouge2_f);
        self
    }

    fn values(&self) -> [Option<f64>; 6] {
        [
            self.rmse,
            self.mae,
            self.pearson,
            self.bleu,
            self.rouge1_f,
            self.rouge2_f,
        ]
    }

    /// `metric\tvalue` lines in the fixed key order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (key, v) in REPORT_KEYS.iter().zip(self.values()) {
            match v {
                Some(x) => {
                    let _ = writeln!(out, "{key}\t{x:.6}");
                }
                None => {
                    let _ = writeln!(out, "{key}\tn/a");
                }
            }
        }
        let _ = writeln!(out, "n_examples\t{}", self.n_examples);
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values: HashMap<&str, &str> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('\t').ok_or_else(|| Error::ParseError {
                line: i + 1,
                msg: "expected metric<TAB>value".into(),
            })?;
            if !REPORT_KEYS.contains(&k) {
                return Err(Error::ParseError {
                    line: i + 1,
                    msg: format!("unknown metric {k:?}"),
                });
            }
            values.insert(k, v);
        }
        let num = |k: &str| -> Result<Option<f64>> {
            match values.get(k) {
                None | Some(&"n/a") => Ok(None),
                Some(v) => v.parse().map(Some).map_err(|_| Error::ParseError {
                    line: 0,
                    msg: format!("bad value for {k}: {v:?}"),
                }),
            }
        };
        Ok(Self {
            rmse: num("rmse")?,
            mae: num("mae")?,
            pearson: num("pearson")?,
            bleu: num("bleu")?,
            rouge1_f: num("rouge1_f")?,
            rouge2_f: num("rouge2_f")?,
            n_examples: values.get("n_examples").and_then(|v| v.parse().ok()).unwrap_or(0),
        })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_tsv())
    }
}
