use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use qgrade::checkpoint::{self, Checkpoint, TrainingMeta};
use qgrade::config::RunConfig;
use qgrade::data::{gen_synthetic, load_dataset, upsample_balance, write_dataset, GradeScale, Split, SyntheticSpec};
use qgrade::model::{build_model, HeadKind, ModelConfig, Tune};
use qgrade::pipeline::{
    build_vocab, conditioning_experiment, evaluate_generator, evaluate_scorer, feedback_samples, run_pipeline,
    scorer_samples, thread_limit, ExperimentData, ExperimentOptions, ExperimentReport, GeneratorMode, GradeSource,
};
use qgrade::train::{train, Objective, TrainConfig};
use qgrade::{Error, Result};

#[derive(Parser)]
#[command(
    name = "qgrade",
    version,
    about = "Quantized low-rank fine-tuning for short-answer grading and feedback"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grading corpus.
    GenData(GenDataArgs),
    /// Train a scorer or feedback generator and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Run scorer then generator over a split.
    Pipeline(PipelineArgs),
    /// Train paired with/without-grade generators for several seeds.
    Experiment(ExperimentArgs),
    /// Print a checkpoint header.
    Inspect { ckpt: PathBuf },
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    examples: usize,
    #[arg(long, default_value_t = 20)]
    questions: usize,
    #[arg(long, default_value_t = 100)]
    theme_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Task {
    Scorer,
    Feedback,
}

impl Task {
    fn name(self) -> &'static str {
        match self {
            Task::Scorer => "scorer",
            Task::Feedback => "feedback",
        }
    }

    fn head(self) -> HeadKind {
        match self {
            Task::Scorer => HeadKind::Regression,
            Task::Feedback => HeadKind::Lm,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Scorer,
    Feedback,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    WithGrade,
    WithoutGrade,
}

impl From<ModeArg> for GeneratorMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::WithGrade => GeneratorMode::WithGrade,
            ModeArg::WithoutGrade => GeneratorMode::WithoutGrade,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    TestUa,
    TestUq,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::TestUa => Split::TestUa,
            SplitArg::TestUq => Split::TestUq,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TuneArg {
    Lora,
    Heads,
    Full,
}

/// Options shared by commands that build a run configuration.
#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file, applied before flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file and before
    /// explicit flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    task: Task,
    /// Defaults to the preset named after the task.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quantize_base: bool,
    #[arg(long, value_enum)]
    tune: Option<TuneArg>,
    /// Prompt mode for feedback generators.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Epoch log path; defaults to `<out>.log`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Scorer whose predictions fill with-grade training prompts when
    /// `train_grades = predicted`.
    #[arg(long)]
    scorer: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    task: Task,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test-ua")]
    split: SplitArg,
    /// Scorer whose predictions fill with-grade prompts; stored grades are
    /// used when absent.
    #[arg(long)]
    scorer: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    scorer_ckpt: PathBuf,
    #[arg(long)]
    gen_ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "with-grade")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "test-ua")]
    split: SplitArg,
    /// Per-example output records.
    #[arg(long)]
    out: PathBuf,
    /// Add the prompt text as a fourth column.
    #[arg(long)]
    dump_prompts: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Generator epochs; defaults to the feedback preset.
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn run_config(preset: TrainConfig, args: &ConfigArgs) -> Result<RunConfig> {
    let mut rc = RunConfig::with_preset(preset);
    if let Some(path) = &args.config {
        rc.apply_file(path)?;
    }
    for kv in &args.overrides {
        rc.apply_override(kv)?;
    }
    Ok(rc)
}

fn load_data(rc: &RunConfig, path: &Path) -> Result<qgrade::data::DatasetSplits> {
    load_dataset(path, &GradeScale::of(rc.scale))
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_questions: a.questions,
        n_examples: a.examples,
        vocab_theme_size: a.theme_size,
        seed: a.seed,
    };
    let data = gen_synthetic(&spec)?;
    write_dataset(&a.out, &data)?;
    for split in Split::ALL {
        println!("{split}\t{}", data.get(split).len());
    }
    Ok(())
}

fn model_config(rc: &RunConfig, head: HeadKind, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        head_kind: head,
        ..rc.model.clone()
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let preset = match a.preset.unwrap_or(match a.task {
        Task::Scorer => Preset::Scorer,
        Task::Feedback => Preset::Feedback,
    }) {
        Preset::Scorer => TrainConfig::scorer(),
        Preset::Feedback => TrainConfig::feedback(),
    };
    let mut rc = run_config(preset, &a.cfg)?;
    if let Some(seed) = a.seed {
        rc.train.seed = seed;
    }
    if a.quantize_base {
        rc.model.quantize_base = true;
    }
    if let Some(t) = a.tune {
        rc.model.tune = match t {
            TuneArg::Lora => Tune::Lora,
            TuneArg::Heads => Tune::Heads,
            TuneArg::Full => Tune::Full,
        };
    }
    if let Some(m) = a.mode {
        rc.mode = m.into();
    }
    if let Some(e) = a.epochs {
        rc.train.epochs = e;
    }
    if let Some(d) = &a.data {
        rc.data = Some(d.clone());
    }
    rc.validate()?;
    let data_path = rc
        .data
        .clone()
        .ok_or_else(|| Error::InvalidRunConfig("no data file given (--data or data = ...)".into()))?;
    let data = load_data(&rc, &data_path)?;
    let mut train_set = data.train.clone();
    if rc.upsample {
        train_set = upsample_balance(&train_set, rc.upsample_bins, rc.train.seed)?;
    }
    let vocab = build_vocab(&data.train, rc.model.vocab_size);
    let cfg = model_config(&rc, a.task.head(), vocab.len());
    let mut model = build_model(&cfg, rc.train.seed)?;
    let max_len = cfg.max_seq_len;
    let (tr, va, objective, mode) = match a.task {
        Task::Scorer => (
            scorer_samples(&train_set, &vocab, max_len),
            scorer_samples(&data.validation, &vocab, max_len),
            Objective::Mse,
            "none".to_string(),
        ),
        Task::Feedback => {
            let (tg, vg) = match (rc.mode, rc.train_grades, &a.scorer) {
                (GeneratorMode::WithGrade, GradeSource::Predicted, None) => {
                    return Err(Error::InvalidRunConfig(
                        "train_grades = predicted needs --scorer".into(),
                    ))
                }
                (GeneratorMode::WithGrade, GradeSource::Predicted, Some(p)) => {
                    let scorer = load_ckpt(p, Task::Scorer)?;
                    if scorer.vocab != vocab {
                        return Err(Error::IncompatibleCheckpoint(
                            "scorer vocabulary differs from the one built from this data".into(),
                        ));
                    }
                    let threads = thread_limit();
                    (
                        Some(evaluate_scorer(&scorer.model, &train_set, &vocab, threads)?.0),
                        Some(evaluate_scorer(&scorer.model, &data.validation, &vocab, threads)?.0),
                    )
                }
                _ => (None, None),
            };
            (
                feedback_samples(&train_set, tg.as_deref(), &vocab, rc.mode, rc.use_rubric, max_len)?,
                feedback_samples(&data.validation, vg.as_deref(), &vocab, rc.mode, rc.use_rubric, max_len)?,
                Objective::Lm,
                rc.mode.to_string(),
            )
        }
    };
    let report = train(&mut model, &tr, &va, objective, &rc.train)?;
    let meta = TrainingMeta {
        seed: rc.train.seed,
        epoch: report.best_epoch as u64,
        task: a.task.name().to_string(),
        mode,
    };
    Checkpoint::new(model, vocab, meta)?.save(&a.out)?;
    let log = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log");
        PathBuf::from(p)
    });
    checkpoint::write_atomic(&log, report.to_log().as_bytes())?;
    print!("{}", report.to_log());
    println!("trainable_fraction\t{:.6}", report.trainable_fraction);
    Ok(())
}

fn load_ckpt(path: &Path, task: Task) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.require_head(task.head())?;
    Ok(ckpt)
}

fn mode_of(ckpt: &Checkpoint) -> Result<GeneratorMode> {
    ckpt.meta
        .mode
        .parse()
        .map_err(|_| Error::IncompatibleCheckpoint(format!("generator mode {:?} is not recognised", ckpt.meta.mode)))
}

fn same_vocab(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    if a.vocab != b.vocab {
        return Err(Error::IncompatibleCheckpoint(
            "scorer and generator vocabularies differ".into(),
        ));
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let rc = run_config(TrainConfig::scorer(), &a.cfg)?;
    let ckpt = load_ckpt(&a.ckpt, a.task)?;
    let data = load_data(&rc, &a.data)?;
    let examples = data.get(a.split.into());
    let threads = thread_limit();
    let report = match a.task {
        Task::Scorer => evaluate_scorer(&ckpt.model, examples, &ckpt.vocab, threads)?.1,
        Task::Feedback => {
            let mode = mode_of(&ckpt)?;
            let grades = match &a.scorer {
                Some(p) => {
                    let scorer = load_ckpt(p, Task::Scorer)?;
                    same_vocab(&scorer, &ckpt)?;
                    evaluate_scorer(&scorer.model, examples, &scorer.vocab, threads)?.0
                }
                None => examples.iter().map(|e| e.score).collect(),
            };
            evaluate_generator(
                &ckpt.model,
                examples,
                &grades,
                mode,
                rc.use_rubric,
                &rc.decode,
                &ckpt.vocab,
                threads,
            )?
            .1
        }
    };
    print!("{}", report.to_tsv());
    Ok(())
}

fn clean(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

fn cmd_pipeline(a: &PipelineArgs) -> Result<()> {
    let rc = run_config(TrainConfig::feedback(), &a.cfg)?;
    let scorer = load_ckpt(&a.scorer_ckpt, Task::Scorer)?;
    let generator = load_ckpt(&a.gen_ckpt, Task::Feedback)?;
    same_vocab(&scorer, &generator)?;
    let data = load_data(&rc, &a.data)?;
    let examples = data.get(a.split.into());
    let (outputs, report) = run_pipeline(
        &scorer.model,
        &generator.model,
        examples,
        a.mode.into(),
        rc.use_rubric,
        &rc.decode,
        &generator.vocab,
        thread_limit(),
    )?;
    let mut out = String::from(if a.dump_prompts {
        "# id\tpredicted_score\tfeedback\tprompt\n"
    } else {
        "# id\tpredicted_score\tfeedback\n"
    });
    for o in &outputs {
        let _ = write!(
            out,
            "{}\t{:.6}\t{}",
            clean(&o.id),
            o.predicted_score,
            clean(&o.feedback_text)
        );
        if a.dump_prompts {
            let _ = write!(out, "\t{}", clean(&o.prompt_text));
        }
        out.push('\n');
    }
    checkpoint::write_atomic(&a.out, out.as_bytes())?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn cmd_experiment(a: &ExperimentArgs) -> Result<()> {
    let mut rc = run_config(TrainConfig::feedback(), &a.cfg)?;
    if let Some(e) = a.epochs {
        rc.train.epochs = e;
    }
    rc.validate()?;
    if a.seeds.is_empty() {
        return Err(Error::InvalidRunConfig("at least one seed is required".into()));
    }
    let data = load_data(&rc, &a.data)?;
    let vocab = build_vocab(&data.train, rc.model.vocab_size);
    let scorer_cfg = ModelConfig {
        quantize_base: false,
        tune: Tune::Full,
        ..model_config(&rc, HeadKind::Regression, vocab.len())
    };
    let seed0 = a.seeds[0];
    let mut scorer = build_model(&scorer_cfg, seed0)?;
    let max_len = scorer_cfg.max_seq_len;
    train(
        &mut scorer,
        &scorer_samples(&data.train, &vocab, max_len),
        &scorer_samples(&data.validation, &vocab, max_len),
        Objective::Mse,
        &TrainConfig {
            seed: seed0,
            ..TrainConfig::scorer()
        },
    )?;
    let exp = ExperimentData {
        train: &data.train,
        validation: &data.validation,
        eval: &data.test_unseen_answers,
        vocab: &vocab,
        scorer: &scorer,
    };
    let opts = ExperimentOptions {
        use_rubric: rc.use_rubric,
        train_grades: rc.train_grades,
        decode: rc.decode.clone(),
        threads: thread_limit(),
    };
    let gen_cfg = model_config(&rc, HeadKind::Lm, vocab.len());
    let report = conditioning_experiment(&exp, &gen_cfg, &rc.train, &a.seeds, &opts)?;
    fs::create_dir_all(&a.out_dir)?;
    for &seed in &a.seeds {
        let text: String = report
            .runs
            .iter()
            .filter(|r| r.seed == seed)
            .map(ExperimentReport::run_block)
            .collect();
        checkpoint::write_atomic(&a.out_dir.join(format!("seed_{seed}.report")), text.as_bytes())?;
    }
    let summary = report.summary();
    checkpoint::write_atomic(&a.out_dir.join("summary.tsv"), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    print!("{}", checkpoint::describe(&fs::read(path)?)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Inspect { ckpt } => cmd_inspect(ckpt),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
