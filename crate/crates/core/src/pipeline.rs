//! Two-stage grading: a scorer predicts the grade, which is injected with the
//! question, answer, and rubric into the feedback generator's prompt.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::{split_tokens, GradingExample, Vocab, EOS_ID, SEP_ID};
use crate::error::{Error, Result};
use crate::metrics::{generation_metrics, score_metrics, MetricsReport};
use crate::model::{build_model, DecodeConfig, HeadKind, Model, ModelConfig};
use crate::train::{train, Objective, Sample, Target, TrainConfig, TrainReport};

/// Upper bound on generated feedback length.
pub const DEFAULT_FEEDBACK_BUDGET: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rubric(String);

impl Rubric {
    pub fn new(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Err(Error::InvalidConfig("rubric text is empty".into()));
        }
        Ok(Self(text.to_string()))
    }

    /// Rubric derived from the example's reference answer.
    pub fn for_example(example: &GradingExample) -> Self {
        Self(format!("full credit requires : {}", example.reference_answer))
    }

    pub fn text(&self) -> &str {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GeneratorMode {
    WithGrade,
    WithoutGrade,
}

impl GeneratorMode {
    pub const BOTH: [GeneratorMode; 2] = [GeneratorMode::WithGrade, GeneratorMode::WithoutGrade];

    pub fn name(self) -> &'static str {
        match self {
            GeneratorMode::WithGrade => "with_grade",
            GeneratorMode::WithoutGrade => "without_grade",
        }
    }
}

impl fmt::Display for GeneratorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeneratorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with_grade" => Ok(GeneratorMode::WithGrade),
            "without_grade" => Ok(GeneratorMode::WithoutGrade),
            _ => Err(Error::InvalidConfig(format!("unknown generator mode {s:?}"))),
        }
    }
}

/// Where the grades in with-grade training and validation prompts come from.
/// Evaluation always uses the scorer's predictions. `Gold` is the default
/// (teacher forcing); `Predicted` trains on the distribution seen at eval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GradeSource {
    Gold,
    Predicted,
}

impl GradeSource {
    pub fn name(self) -> &'static str {
        match self {
            GradeSource::Gold => "gold",
            GradeSource::Predicted => "predicted",
        }
    }
}

impl fmt::Display for GradeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold" => Ok(GradeSource::Gold),
            "predicted" => Ok(GradeSource::Predicted),
            _ => Err(Error::InvalidConfig(format!("unknown grade source {s:?}"))),
        }
    }
}

/// Prompt ids for the generator:
/// `question: q [SEP] answer: a [SEP] rubric: r [SEP] grade: g [SEP] feedback:`
/// with absent segments omitted. When longer than `max_len`, tokens are
/// dropped from the front so the trailing cue survives.
pub fn build_prompt(
    example: &GradingExample,
    rubric: Option<&Rubric>,
    grade: Option<f64>,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut segments = vec![
        format!("question: {}", example.question),
        format!("answer: {}", example.provided_answer),
    ];
    if let Some(r) = rubric {
        segments.push(format!("rubric: {}", r.text()));
    }
    if let Some(g) = grade {
        if !(0.0..=1.0).contains(&g) {
            return Err(Error::InvalidGrade(g));
        }
        segments.push(format!("grade: {g:.2}"));
    }
    segments.push("feedback:".to_string());
    let mut ids = Vec::new();
    for (i, seg) in segments.iter().enumerate() {
        if i > 0 {
            ids.push(SEP_ID);
        }
        ids.extend(vocab.tokenize(seg));
    }
    if ids.len() > max_len {
        ids.drain(..ids.len() - max_len);
    }
    Ok(ids)
}

/// Prompt text with separators shown as `[SEP]`.
pub fn render_prompt(ids: &[usize], vocab: &Vocab) -> String {
    ids.split(|&t| t == SEP_ID)
        .map(|seg| vocab.detokenize(seg))
        .collect::<Vec<_>>()
        .join(" [SEP] ")
}

/// Scorer input: `question [SEP] answer`, keeping the tail when too long.
pub fn scorer_input(example: &GradingExample, vocab: &Vocab, max_len: usize) -> Vec<usize> {
    let mut ids = vocab.tokenize(&example.question);
    ids.push(SEP_ID);
    ids.extend(vocab.tokenize(&example.provided_answer));
    if ids.len() > max_len {
        ids.drain(..ids.len() - max_len);
    }
    ids
}

pub fn predict_grade(scorer: &Model, example: &GradingExample, vocab: &Vocab) -> Result<f64> {
    if scorer.config().head_kind != HeadKind::Regression {
        return Err(Error::WrongHead {
            expected: HeadKind::Regression.name(),
            actual: scorer.config().head_kind.name(),
        });
    }
    scorer.forward_score(&scorer_input(example, vocab, scorer.config().max_seq_len))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub id: String,
    pub predicted_score: f64,
    pub feedback_text: String,
    pub prompt_ids: Vec<usize>,
    pub prompt_text: String,
    pub mode: GeneratorMode,
}

/// Room left for the prompt once the generation budget is reserved.
fn prompt_budget(generator: &Model, decode: &DecodeConfig) -> usize {
    let max = generator.config().max_seq_len;
    max.saturating_sub(decode.max_new_tokens.min(max / 2)).max(1)
}

fn generate_feedback(generator: &Model, prompt: &[usize], decode: &DecodeConfig, vocab: &Vocab) -> Result<String> {
    let out = generator.generate(prompt, decode)?;
    let mut gen = &out[prompt.len()..];
    if let Some(p) = gen.iter().position(|&t| t == EOS_ID) {
        gen = &gen[..p];
    }
    Ok(vocab.detokenize(gen))
}

/// Runs the scorer, then the generator. In with-grade mode the predicted
/// grade (never the stored one) is placed in the prompt.
pub fn grade_and_feedback(
    scorer: &Model,
    generator: &Model,
    example: &GradingExample,
    rubric: Option<&Rubric>,
    mode: GeneratorMode,
    decode: &DecodeConfig,
    vocab: &Vocab,
) -> Result<PipelineOutput> {
    let predicted_score = predict_grade(scorer, example, vocab)?;
    feedback_with_grade(generator, example, rubric, mode, predicted_score, decode, vocab)
}

fn feedback_with_grade(
    generator: &Model,
    example: &GradingExample,
    rubric: Option<&Rubric>,
    mode: GeneratorMode,
    predicted_score: f64,
    decode: &DecodeConfig,
    vocab: &Vocab,
) -> Result<PipelineOutput> {
    let grade = (mode == GeneratorMode::WithGrade).then_some(predicted_score);
    let prompt_ids = build_prompt(example, rubric, grade, vocab, prompt_budget(generator, decode))?;
    let feedback_text = generate_feedback(generator, &prompt_ids, decode, vocab)?;
    Ok(PipelineOutput {
        id: example.id.clone(),
        predicted_score,
        feedback_text,
        prompt_text: render_prompt(&prompt_ids, vocab),
        prompt_ids,
        mode,
    })
}

const PROMPT_WORDS: &str = "question: answer: rubric: grade: feedback: full credit requires 0 1 2 3 4 5 6 7 8 9 .";

/// Vocabulary over the training texts plus the prompt template words and
/// digits, so scorer and generator built from the same split share ids.
pub fn build_vocab(train: &[GradingExample], max_size: usize) -> Vocab {
    let mut corpus: Vec<&str> = Vec::with_capacity(4 * train.len() + 1);
    for e in train {
        corpus.extend([
            e.question.as_str(),
            e.reference_answer.as_str(),
            e.provided_answer.as_str(),
            e.feedback.as_str(),
        ]);
    }
    // Repeated so the template words survive any frequency cut.
    let template = PROMPT_WORDS.repeat(train.len().max(1));
    corpus.push(&template);
    Vocab::build(&corpus, max_size)
}

/// Regression samples with normalized scores as targets.
pub fn scorer_samples(examples: &[GradingExample], vocab: &Vocab, max_len: usize) -> Vec<Sample> {
    examples
        .iter()
        .map(|e| Sample {
            ids: scorer_input(e, vocab, max_len),
            target: Target::Score(e.score),
        })
        .collect()
}

/// Generator samples: prompt followed by the reference feedback and EOS.
/// With-grade prompts carry `grades[i]`, or the stored grade when `grades`
/// is `None`.
pub fn feedback_samples(
    examples: &[GradingExample],
    grades: Option<&[f64]>,
    vocab: &Vocab,
    mode: GeneratorMode,
    use_rubric: bool,
    max_len: usize,
) -> Result<Vec<Sample>> {
    if let Some(g) = grades {
        if g.len() != examples.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} grades for {} examples",
                g.len(),
                examples.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(examples.len());
    for (i, e) in examples.iter().enumerate() {
        let mut tail = vocab.tokenize(&e.feedback);
        tail.push(EOS_ID);
        if tail.len() >= max_len {
            tail.truncate(max_len - 1);
        }
        let rubric = use_rubric.then(|| Rubric::for_example(e));
        let grade = (mode == GeneratorMode::WithGrade).then(|| grades.map_or(e.score, |g| g[i]));
        let prompt = build_prompt(e, rubric.as_ref(), grade, vocab, max_len - tail.len())?;
        let prompt_len = prompt.len();
        let mut ids = prompt;
        ids.extend(tail);
        out.push(Sample {
            ids,
            target: Target::Lm { prompt_len },
        });
    }
    Ok(out)
}

/// Thread count from `QGRADE_THREADS`, defaulting to the available cores.
pub fn thread_limit() -> usize {
    std::env::var("QGRADE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Order-preserving parallel map over read-only inputs.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate_scorer(
    scorer: &Model,
    examples: &[GradingExample],
    vocab: &Vocab,
    threads: usize,
) -> Result<(Vec<f64>, MetricsReport)> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = parallel_map(examples, threads, |e| predict_grade(scorer, e, vocab))?;
    let targets: Vec<f64> = examples.iter().map(|e| e.score).collect();
    let m = score_metrics(&preds, &targets)?;
    let report = MetricsReport {
        n_examples: examples.len(),
        ..MetricsReport::default()
    }
    .with_scores(&m);
    Ok((preds, report))
}

/// Generates feedback for every example. `grades` supplies the grade injected
/// in with-grade mode (normally the scorer's predictions).
pub fn evaluate_generator(
    generator: &Model,
    examples: &[GradingExample],
    grades: &[f64],
    mode: GeneratorMode,
    use_rubric: bool,
    decode: &DecodeConfig,
    vocab: &Vocab,
    threads: usize,
) -> Result<(Vec<PipelineOutput>, MetricsReport)> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if grades.len() != examples.len() {
        return Err(Error::LengthMismatch(grades.len(), examples.len()));
    }
    let pairs: Vec<(&GradingExample, f64)> = examples.iter().zip(grades.iter().copied()).collect();
    let outputs = parallel_map(&pairs, threads, |&(e, g)| {
        let rubric = use_rubric.then(|| Rubric::for_example(e));
        feedback_with_grade(generator, e, rubric.as_ref(), mode, g, decode, vocab)
    })?;
    let cands: Vec<Vec<String>> = outputs.iter().map(|o| split_tokens(&o.feedback_text)).collect();
    let refs: Vec<Vec<String>> = examples.iter().map(|e| split_tokens(&e.feedback)).collect();
    let m = generation_metrics(&cands, &refs)?;
    let report = MetricsReport {
        n_examples: examples.len(),
        ..MetricsReport::default()
    }
    .with_generation(&m);
    Ok((outputs, report))
}

/// Full pipeline over a split: scorer metrics plus generation metrics in one
/// report.
pub fn run_pipeline(
    scorer: &Model,
    generator: &Model,
    examples: &[GradingExample],
    mode: GeneratorMode,
    use_rubric: bool,
    decode: &DecodeConfig,
    vocab: &Vocab,
    threads: usize,
) -> Result<(Vec<PipelineOutput>, MetricsReport)> {
    let (preds, score_report) = evaluate_scorer(scorer, examples, vocab, threads)?;
    let (outputs, gen_report) =
        evaluate_generator(generator, examples, &preds, mode, use_rubric, decode, vocab, threads)?;
    let report = MetricsReport {
        rmse: score_report.rmse,
        mae: score_report.mae,
        pearson: score_report.pearson,
        ..gen_report
    };
    Ok((outputs, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOptions {
    pub use_rubric: bool,
    pub train_grades: GradeSource,
    pub decode: DecodeConfig,
    pub threads: usize,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            use_rubric: true,
            train_grades: GradeSource::Gold,
            decode: DecodeConfig {
                max_new_tokens: DEFAULT_FEEDBACK_BUDGET,
                ..DecodeConfig::default()
            },
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRun {
    pub seed: u64,
    pub mode: GeneratorMode,
    pub train: TrainReport,
    pub metrics: MetricsReport,
}

impl ExperimentRun {
    pub fn final_val_loss(&self) -> f64 {
        self.train.epochs.last().map_or(f64::NAN, |e| e.val_loss)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub runs: Vec<ExperimentRun>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

impl ExperimentReport {
    pub fn runs_for(&self, mode: GeneratorMode) -> impl Iterator<Item = &ExperimentRun> {
        self.runs.iter().filter(move |r| r.mode == mode)
    }

    pub fn median_final_val_loss(&self, mode: GeneratorMode) -> f64 {
        median(self.runs_for(mode).map(ExperimentRun::final_val_loss).collect())
    }

    pub fn median_metric(&self, mode: GeneratorMode, pick: impl Fn(&MetricsReport) -> Option<f64>) -> f64 {
        median(self.runs_for(mode).filter_map(|r| pick(&r.metrics)).collect())
    }

    /// Per-(seed, mode) blocks: a `# seed=<s> mode=<m>` header, one
    /// `epoch\tval_loss` line per epoch, then `metrics` and the report lines.
    pub fn run_block(run: &ExperimentRun) -> String {
        let mut out = format!("# seed={} mode={}\n", run.seed, run.mode);
        for e in &run.train.epochs {
            let _ = writeln!(out, "{}\t{:.6}", e.epoch, e.val_loss);
        }
        out.push_str("metrics\n");
        out.push_str(&run.metrics.to_tsv());
        out
    }

    pub fn to_text(&self) -> String {
        self.runs.iter().map(Self::run_block).collect()
    }

    /// Mode × metric medians across seeds.
    pub fn summary(&self) -> String {
        let mut out = String::from("mode\tfinal_val_loss\tbleu\trouge1_f\trouge2_f\n");
        for mode in GeneratorMode::BOTH {
            let _ = writeln!(
                out,
                "{mode}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                self.median_final_val_loss(mode),
                self.median_metric(mode, |m| m.bleu),
                self.median_metric(mode, |m| m.rouge1_f),
                self.median_metric(mode, |m| m.rouge2_f),
            );
        }
        out
    }
}

/// Inputs shared by every run of the conditioning experiment.
pub struct ExperimentData<'a> {
    pub train: &'a [GradingExample],
    pub validation: &'a [GradingExample],
    pub eval: &'a [GradingExample],
    pub vocab: &'a Vocab,
    pub scorer: &'a Model,
}

/// For each seed, trains a grade-conditioned generator and an unconditioned
/// one from the same initialization, then evaluates both. Training and
/// validation prompts carry grades from `opts.train_grades`; evaluation
/// prompts carry scorer predictions.
pub fn conditioning_experiment(
    data: &ExperimentData<'_>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    opts: &ExperimentOptions,
) -> Result<ExperimentReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("at least one seed is required".into()));
    }
    let cfg = ModelConfig {
        head_kind: HeadKind::Lm,
        ..model_cfg.clone()
    };
    cfg.validate()?;
    let (grades, _) = evaluate_scorer(data.scorer, data.eval, data.vocab, opts.threads)?;
    let (train_grades, val_grades) = match opts.train_grades {
        GradeSource::Gold => (None, None),
        GradeSource::Predicted => (
            Some(evaluate_scorer(data.scorer, data.train, data.vocab, opts.threads)?.0),
            Some(evaluate_scorer(data.scorer, data.validation, data.vocab, opts.threads)?.0),
        ),
    };
    let mut runs = Vec::with_capacity(2 * seeds.len());
    for &seed in seeds {
        for mode in GeneratorMode::BOTH {
            let tr = feedback_samples(
                data.train,
                train_grades.as_deref(),
                data.vocab,
                mode,
                opts.use_rubric,
                cfg.max_seq_len,
            )?;
            let va = feedback_samples(
                data.validation,
                val_grades.as_deref(),
                data.vocab,
                mode,
                opts.use_rubric,
                cfg.max_seq_len,
            )?;
            let mut generator = build_model(&cfg, seed)?;
            let tc = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            let report = train(&mut generator, &tr, &va, Objective::Lm, &tc)?;
            let (_, metrics) = evaluate_generator(
                &generator,
                data.eval,
                &grades,
                mode,
                opts.use_rubric,
                &opts.decode,
                data.vocab,
                opts.threads,
            )?;
            runs.push(ExperimentRun {
                seed,
                mode,
                train: report,
                metrics,
            });
        }
    }
    Ok(ExperimentReport { runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ScaleKind;

    fn example() -> GradingExample {
        GradingExample {
            id: "x1".into(),
            question: "What is a packet?".into(),
            reference_answer: "A unit of data.".into(),
            provided_answer: "data unit".into(),
            score: 0.75,
            raw_score: 0.75,
            scale: ScaleKind::UnitInterval,
            feedback: "good".into(),
        }
    }

    fn vocab() -> Vocab {
        Vocab::build(
            &["question answer rubric grade feedback : what is a packet ? data unit . 0 1 2 3 4 5 6 7 8 9 full credit requires good"],
            128,
        )
    }

    #[test]
    fn prompt_segments_and_grade_rendering() {
        let v = vocab();
        let e = example();
        let without = build_prompt(&e, None, None, &v, 512).unwrap();
        assert!(!v.detokenize(&without).contains("grade"));
        let with = build_prompt(&e, None, Some(0.75), &v, 512).unwrap();
        assert!(v.detokenize(&with).contains("grade : 0 . 7 5"));
        assert_eq!(with, build_prompt(&e, None, Some(0.75), &v, 512).unwrap());
        assert_ne!(with, build_prompt(&e, None, Some(0.74), &v, 512).unwrap());
        assert!(matches!(
            build_prompt(&e, None, Some(1.5), &v, 512),
            Err(Error::InvalidGrade(_))
        ));
        // The two prompts differ exactly by the `[SEP] grade: 0.75` span.
        let span = with.len() - without.len();
        assert_eq!(span, 1 + 6);
        let cut = without.len() - 3;
        assert_eq!(&with[..cut], &without[..cut]);
        assert_eq!(&with[cut + span..], &without[cut..]);
    }

    #[test]
    fn truncation_keeps_cue() {
        let v = vocab();
        let r = Rubric::for_example(&example());
        for max in 2..30 {
            let ids = build_prompt(&example(), Some(&r), Some(0.5), &v, max).unwrap();
            assert!(ids.len() <= max);
            assert_eq!(&ids[ids.len() - 2..], &v.tokenize("feedback:")[..]);
        }
    }

    #[test]
    fn median_and_report_shape() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0]), 2.5);
        assert!(Rubric::new("  ").is_err());
    }
}
