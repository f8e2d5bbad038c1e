//! Acceptance suite. Runs as a plain binary (no libtest harness) so that each
//! criterion prints exactly one PASS/FAIL line. Set `QGRADE_ACCEPTANCE=1,4,9`
//! to run a subset.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qgrade::checkpoint::Checkpoint;
use qgrade::data::{
    format_dataset, gen_synthetic, load_dataset, write_dataset, GradeScale, GradingExample, SyntheticSpec, Vocab,
};
use qgrade::lora::{lora_init, lora_merge, qlora_forward, QLoraLinear};
use qgrade::metrics::{bleu, rouge_n, score_metrics};
use qgrade::model::{build_model, cross_entropy, mse_loss, HeadKind, Model, ModelConfig, Tune, MLP_RATIO};
use qgrade::pipeline::{
    build_vocab, conditioning_experiment, evaluate_scorer, predict_grade, scorer_samples, ExperimentData,
    ExperimentOptions, GeneratorMode,
};
use qgrade::quant::{dequantize, quantize_absmax, Bits};
use qgrade::tensor::grad_check;
use qgrade::train::{batch_loss, early_stop_check, evaluate_loss, train, Objective, Sample, Target, TrainConfig};
use qgrade::{Graph, Tensor, Var};

struct Fail(String);

impl<E: std::error::Error> From<E> for Fail {
    fn from(e: E) -> Self {
        Fail(e.to_string())
    }
}

type Check = Result<String, Fail>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(Fail(format!($($msg)+)));
        }
    };
}

/// The trained scorer is shared between the scorer and conditioning runs.
#[derive(Default)]
struct Shared {
    scorer: Option<(Model, Vocab)>,
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("QGRADE_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut shared = Shared::default();
    let criteria: [(u32, &str, fn(&mut Shared) -> Check); 9] = [
        (1, "quantization suite", |_| quantization()),
        (2, "gradient suite", |_| gradients()),
        (3, "loss oracles", |_| losses()),
        (4, "metric oracles", |_| metric_oracles()),
        (5, "lora/qlora", |_| lora_suite()),
        (6, "desk-scale scorer", scorer_experiment),
        (7, "conditioning experiment", conditioning),
        (8, "determinism and persistence", |_| determinism()),
        (9, "early stopping", |_| early_stopping()),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let result = run(&mut shared);
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(Fail(why)) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {why}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

// ---- 1: quantization ----

fn quantization() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut elements = 0usize;
    for i in 0..10_000 {
        let rows = rng.random_range(1..=128);
        let cols = rng.random_range(1..=128);
        let n = rows * cols;
        let spread = 10f64.powf(rng.random_range(-3.0..3.0));
        let x = Tensor::new(&[rows, cols], uniform(&mut rng, n, -spread, spread), false)?;
        let block = match i % 3 {
            0 => 8,
            1 => 64,
            _ => n,
        };
        let q = quantize_absmax(&x, Bits::Int4, block)?;
        ensure!(
            q.codes().iter().all(|c| (-7..=7).contains(c)),
            "tensor {i}: int4 code out of range"
        );

        let back = dequantize(&q);
        for (xb, yb) in x.data().chunks(block).zip(back.data().chunks(block)) {
            let absmax = xb.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let bound = absmax / 14.0 * (1.0 + 1e-12);
            for (a, b) in xb.iter().zip(yb) {
                ensure!(
                    (a - b).abs() <= bound,
                    "tensor {i}: error {} above bound {bound}",
                    (a - b).abs()
                );
            }
        }

        let c = 10f64.powf(rng.random_range(-2.0..2.0));
        let scaled = Tensor::new(x.shape(), x.data().iter().map(|v| c * v).collect(), false)?;
        let qs = quantize_absmax(&scaled, Bits::Int4, block)?;
        ensure!(
            qs.codes() == q.codes(),
            "tensor {i}: codes changed under scaling by {c}"
        );

        let neg = Tensor::new(x.shape(), x.data().iter().map(|v| -v).collect(), false)?;
        let qn = quantize_absmax(&neg, Bits::Int4, block)?;
        ensure!(
            qn.codes().iter().zip(q.codes()).all(|(a, b)| *a == -*b),
            "tensor {i}: negation is not sign symmetric"
        );
        elements += n;
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.1}s");
    Ok(format!("10000 tensors, {elements} elements"))
}

// ---- 2: gradients ----

/// Deterministic weighted sum so every output element reaches the loss with
/// a distinct coefficient.
fn weighted_sum(g: &mut Graph, y: Var) -> qgrade::Result<Var> {
    let shape = g.shape(y).to_vec();
    let n = g.value(y).len();
    let w = g.constant(&shape, (0..n).map(|i| ((i as f64 + 1.0) * 0.7).sin()).collect())?;
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type OpFn = Box<dyn Fn(&mut Graph, Var) -> qgrade::Result<Var>>;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<usize>, f64, OpFn)> {
    let c45 = uniform(rng, 20, -1.0, 1.0);
    let c23 = uniform(rng, 6, -1.0, 1.0);
    let c54 = uniform(rng, 20, -1.0, 1.0);
    let c24 = uniform(rng, 8, -1.0, 1.0);
    let c34 = uniform(rng, 12, -1.0, 1.0);
    let c4 = uniform(rng, 4, -1.0, 1.0);
    let c6 = uniform(rng, 6, 0.5, 1.5);
    let c36 = uniform(rng, 18, -1.0, 1.0);
    let smooth = 1e-6;
    let tol = 1e-4;
    let mut cases: Vec<(&'static str, Vec<usize>, f64, OpFn)> = Vec::new();
    macro_rules! case {
        ($name:expr, $shape:expr, $tol:expr, $body:expr) => {
            cases.push(($name, $shape.to_vec(), $tol, Box::new($body)));
        };
    }
    {
        let c = c45.clone();
        case!("matmul lhs", [3, 4], tol, move |g: &mut Graph, x| {
            let b = g.constant(&[4, 5], c.clone())?;
            let y = g.matmul(x, b)?;
            weighted_sum(g, y)
        });
    }
    {
        let c = c23.clone();
        case!("matmul rhs", [3, 4], tol, move |g: &mut Graph, x| {
            let a = g.constant(&[2, 3], c.clone())?;
            let y = g.matmul(a, x)?;
            weighted_sum(g, y)
        });
    }
    {
        let c = c54.clone();
        case!("matmul_t lhs", [3, 4], tol, move |g: &mut Graph, x| {
            let b = g.constant(&[5, 4], c.clone())?;
            let y = g.matmul_t(x, b)?;
            weighted_sum(g, y)
        });
    }
    {
        let c = c24.clone();
        case!("matmul_t rhs", [3, 4], tol, move |g: &mut Graph, x| {
            let a = g.constant(&[2, 4], c.clone())?;
            let y = g.matmul_t(a, x)?;
            weighted_sum(g, y)
        });
    }
    case!("transpose", [3, 4], tol, |g: &mut Graph, x| {
        let y = g.transpose(x)?;
        weighted_sum(g, y)
    });
    {
        let c = c34.clone();
        case!("add", [3, 4], smooth, move |g: &mut Graph, x| {
            let b = g.constant(&[3, 4], c.clone())?;
            let y = g.add(b, x)?;
            weighted_sum(g, y)
        });
    }
    {
        let c = c34.clone();
        case!("add broadcast scalar", [1], smooth, move |g: &mut Graph, x| {
            let a = g.constant(&[3, 4], c.clone())?;
            let y = g.add(a, x)?;
            weighted_sum(g, y)
        });
    }
    {
        let c = c34.clone();
        case!("sub", [3, 4], smooth, move |g: &mut Graph, x| {
            let b = g.constant(&[3, 4], c.clone())?;
            let y = g.sub(b, x)?;
            weighted_sum(g, y)
        });
    }
    {
        let c = c34.clone();
        case!("mul", [3, 4], smooth, move |g: &mut Graph, x| {
            let b = g.constant(&[3, 4], c.clone())?;
            let y = g.mul(x, b)?;
            weighted_sum(g, y)
        });
    }
    case!("mul self", [3, 4], smooth, |g: &mut Graph, x| {
        let y = g.mul(x, x)?;
        weighted_sum(g, y)
    });
    case!("scale", [3, 4], smooth, |g: &mut Graph, x| {
        let y = g.scale(x, -1.7);
        weighted_sum(g, y)
    });
    case!("gelu", [3, 4], smooth, |g: &mut Graph, x| {
        let y = g.gelu(x);
        weighted_sum(g, y)
    });
    case!("sigmoid", [3, 4], smooth, |g: &mut Graph, x| {
        let y = g.sigmoid(x);
        weighted_sum(g, y)
    });
    {
        let c = c4.clone();
        case!("add_bias input", [3, 4], smooth, move |g: &mut Graph, x| {
            let b = g.constant(&[4], c.clone())?;
            let y = g.add_bias(x, b)?;
            weighted_sum(g, y)
        });
    }
    {
        let c = c34.clone();
        case!("add_bias bias", [4], smooth, move |g: &mut Graph, x| {
            let a = g.constant(&[3, 4], c.clone())?;
            let y = g.add_bias(a, x)?;
            weighted_sum(g, y)
        });
    }
    case!("softmax_rows", [3, 5], tol, |g: &mut Graph, x| {
        let y = g.softmax_rows(x)?;
        weighted_sum(g, y)
    });
    case!("softmax_causal", [2, 4, 4], tol, |g: &mut Graph, x| {
        let y = g.softmax_causal(x)?;
        weighted_sum(g, y)
    });
    {
        let (gain, bias) = (c6.clone(), c6.iter().map(|v| v - 1.0).collect::<Vec<_>>());
        case!("layer_norm input", [3, 6], tol, move |g: &mut Graph, x| {
            let gn = g.constant(&[6], gain.clone())?;
            let b = g.constant(&[6], bias.clone())?;
            let y = g.layer_norm(x, gn, b, 1e-5)?;
            weighted_sum(g, y)
        });
    }
    {
        let (input, bias) = (c36.clone(), c6.clone());
        case!("layer_norm gain", [6], tol, move |g: &mut Graph, x| {
            let a = g.constant(&[3, 6], input.clone())?;
            let b = g.constant(&[6], bias.clone())?;
            let y = g.layer_norm(a, x, b, 1e-5)?;
            weighted_sum(g, y)
        });
    }
    {
        let (input, gain) = (c36.clone(), c6.clone());
        case!("layer_norm bias", [6], tol, move |g: &mut Graph, x| {
            let a = g.constant(&[3, 6], input.clone())?;
            let gn = g.constant(&[6], gain.clone())?;
            let y = g.layer_norm(a, gn, x, 1e-5)?;
            weighted_sum(g, y)
        });
    }
    case!("gather", [6, 4], tol, |g: &mut Graph, x| {
        let y = g.gather(x, &[0, 3, 3, 5, 1])?;
        weighted_sum(g, y)
    });
    case!("split_heads", [3, 6], tol, |g: &mut Graph, x| {
        let y = g.split_heads(x, 2)?;
        weighted_sum(g, y)
    });
    case!("merge_heads", [2, 3, 3], tol, |g: &mut Graph, x| {
        let y = g.merge_heads(x)?;
        weighted_sum(g, y)
    });
    case!("select_rows", [4, 3], tol, |g: &mut Graph, x| {
        let y = g.select_rows(x, &[3, 1, 1])?;
        weighted_sum(g, y)
    });
    {
        let c = c34.clone();
        case!("concat_rows", [2, 4], tol, move |g: &mut Graph, x| {
            let a = g.constant(&[3, 4], c.clone())?;
            let y = g.concat_rows(&[a, x, x])?;
            weighted_sum(g, y)
        });
    }
    case!("reshape", [3, 4], tol, |g: &mut Graph, x| {
        let y = g.reshape(x, &[2, 6])?;
        weighted_sum(g, y)
    });
    case!("sum", [3, 4], tol, |g: &mut Graph, x| {
        let y = g.gelu(x);
        Ok(g.sum(y))
    });
    case!("mean", [3, 4], tol, |g: &mut Graph, x| {
        let y = g.sigmoid(x);
        Ok(g.mean(y))
    });
    case!("cross_entropy", [3, 5], tol, |g: &mut Graph, x| g
        .cross_entropy(x, &[4, 0, 2]));
    cases
}

fn tiny_config(head: HeadKind, tune: Tune, quantize_base: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: 9,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        max_seq_len: 6,
        head_kind: head,
        n_classes: 4,
        quantize_base,
        tune,
        lora_rank: 2,
        lora_alpha: 4.0,
        block_size: 8,
    }
}

fn tiny_batch(head: HeadKind) -> Vec<Sample> {
    let target = |i: usize| match head {
        HeadKind::Lm => Target::Lm { prompt_len: 2 },
        HeadKind::Regression => Target::Score(0.3 + 0.4 * i as f64),
        HeadKind::Classification => Target::Class(i * 3),
    };
    vec![
        Sample {
            ids: vec![2, 5, 6, 7, 8, 3],
            target: target(0),
        },
        Sample {
            ids: vec![2, 8, 5, 5, 3],
            target: target(1),
        },
    ]
}

fn objective_for(head: HeadKind) -> Objective {
    match head {
        HeadKind::Lm => Objective::Lm,
        HeadKind::Regression => Objective::Mse,
        HeadKind::Classification => Objective::Ce,
    }
}

fn gradients() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    let mut worst_smooth: f64 = 0.0;
    let mut worst: f64 = 0.0;
    let cases = op_cases(&mut rng);
    for (name, shape, tol, f) in &cases {
        let n: usize = shape.iter().product();
        for point in 0..20 {
            let x = Tensor::new(shape, uniform(&mut rng, n, -1.5, 1.5), false)?;
            let err = grad_check(|g, v| f(g, v), &x, h)?;
            ensure!(err < *tol, "{name} point {point}: relative error {err:e} >= {tol:e}");
            if *tol < 1e-4 {
                worst_smooth = worst_smooth.max(err);
            } else {
                worst = worst.max(err);
            }
        }
    }

    let variants = [
        (HeadKind::Lm, Tune::Full, false),
        (HeadKind::Regression, Tune::Full, false),
        (HeadKind::Classification, Tune::Heads, false),
        (HeadKind::Lm, Tune::Lora, true),
        (HeadKind::Regression, Tune::Lora, true),
    ];
    let mut worst_model: f64 = 0.0;
    for (head, tune, quant) in variants {
        let batch = tiny_batch(head);
        let refs: Vec<&Sample> = batch.iter().collect();
        for point in 0..20u64 {
            let mut model = build_model(&tiny_config(head, tune, quant), point)?;
            // Random point in parameter space, including nonzero LoRA B.
            for p in model.params_mut() {
                for v in p.tensor.data_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
            for i in 0..model.params().len() {
                let at = model.params()[i].tensor.clone();
                let err = grad_check(
                    |g, x| {
                        let mut vars = model.bind(g, false);
                        vars.params[i] = x;
                        Ok(batch_loss(&model, g, &vars, &refs, objective_for(head))?.0)
                    },
                    &at,
                    h,
                )?;
                ensure!(
                    err < 1e-4,
                    "{head}/{tune} model point {point} param {}: relative error {err:e}",
                    model.params()[i].name
                );
                worst_model = worst_model.max(err);
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!(
        "{} ops x 20 points, max err smooth {worst_smooth:.1e} / other {worst:.1e}; 2-layer model x 5 configs x 20 points, max err {worst_model:.1e}",
        cases.len()
    ))
}

// ---- 3: losses ----

fn losses() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for classes in [2usize, 11] {
        for trial in 0..50 {
            let rows = rng.random_range(1..=8);
            let mut logits = Vec::with_capacity(rows * classes);
            for _ in 0..rows {
                let c = rng.random_range(-5.0..5.0);
                logits.extend(std::iter::repeat_n(c, classes));
            }
            let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
            let t = Tensor::new(&[rows, classes], logits, false)?;
            let ce = cross_entropy(&t, &targets)?;
            let expected = (classes as f64).ln();
            ensure!(
                (ce - expected).abs() <= 1e-12,
                "C={classes} trial {trial}: {ce} vs ln C {expected}"
            );
        }
    }
    let hand = cross_entropy(&Tensor::new(&[1, 2], vec![0.0, 0.0], false)?, &[0])?;
    ensure!(
        (hand - std::f64::consts::LN_2).abs() <= 1e-12,
        "[0,0] target 0 gave {hand}"
    );
    let mse = mse_loss(&[0.5, 0.7], &[0.5, 0.5])?;
    // 0.7 - 0.5 is not exactly 0.2 in binary floating point, so the result is
    // held to the f64 evaluation of the definition and to 0.02 within 1e-15.
    #[allow(clippy::eq_op)]
    let by_definition = ((0.5f64 - 0.5).powi(2) + (0.7f64 - 0.5).powi(2)) / 2.0;
    ensure!(
        mse == by_definition,
        "mse {mse} differs from f64 definition {by_definition}"
    );
    ensure!((mse - 0.02).abs() <= 1e-15, "mse {mse} not 0.02");
    Ok(format!("ln C for C in {{2, 11}}; hand CE {hand:.12}; mse {mse}"))
}

// ---- 4: metrics ----

/// All n-grams of `s` listed by brute force.
fn ngrams(s: &[u8], n: usize) -> Vec<&[u8]> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| &s[i..i + n]).collect()
}

fn occurrences(list: &[&[u8]], g: &[u8]) -> usize {
    list.iter().filter(|x| **x == g).count()
}

/// Clipped overlap and candidate n-gram count by linear scans.
fn overlap_oracle(c: &[u8], r: &[u8], n: usize) -> (usize, usize) {
    let cg = ngrams(c, n);
    let rg = ngrams(r, n);
    let mut seen: Vec<&[u8]> = Vec::new();
    let mut clipped = 0;
    for g in &cg {
        if seen.contains(g) {
            continue;
        }
        seen.push(g);
        clipped += occurrences(&cg, g).min(occurrences(&rg, g));
    }
    (clipped, cg.len())
}

fn bleu_oracle(pairs: &[(Vec<u8>, Vec<u8>)]) -> f64 {
    let mut prod = 1.0;
    for n in 1..=4 {
        let (mut m, mut t) = (0, 0);
        for (c, r) in pairs {
            let (a, b) = overlap_oracle(c, r, n);
            m += a;
            t += b;
        }
        if m == 0 || t == 0 {
            return 0.0;
        }
        prod *= m as f64 / t as f64;
    }
    let c: usize = pairs.iter().map(|p| p.0.len()).sum();
    let r: usize = pairs.iter().map(|p| p.1.len()).sum();
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * prod.powf(0.25)
}

fn rouge_oracle(c: &[u8], r: &[u8], n: usize) -> f64 {
    let (m, tc) = overlap_oracle(c, r, n);
    let tr = ngrams(r, n).len();
    if m == 0 || tc == 0 || tr == 0 {
        return 0.0;
    }
    let (p, rc) = (m as f64 / tc as f64, m as f64 / tr as f64);
    2.0 * p * rc / (p + rc)
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn metric_oracles() -> Check {
    let p = score_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0])?.pearson;
    let expected_r = 3.0 / (2.0f64 * 14.0 / 3.0).sqrt();
    ensure!(
        p.is_some_and(|r| (r - expected_r).abs() <= 1e-9),
        "pearson {p:?} vs {expected_r}"
    );
    ensure!((expected_r - 0.981981).abs() < 5e-7, "hand pearson {expected_r}");

    let b = bleu(&[words("the cat sat on mat")], &[words("the cat sat on the mat")])?;
    let expected_b = (-0.2f64).exp() * (1.0f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
    ensure!((b - expected_b).abs() <= 1e-9, "bleu {b} vs {expected_b}");
    ensure!((expected_b - 0.5789).abs() < 5e-5, "hand bleu {expected_b}");

    let r = rouge_n(&words("the cat sat"), &words("the cat"), 1);
    ensure!(
        (r.precision - 2.0 / 3.0).abs() <= 1e-9 && (r.recall - 1.0).abs() <= 1e-9 && (r.f1 - 0.8).abs() <= 1e-9,
        "rouge-1 {r:?}"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pairs = Vec::with_capacity(200);
    for i in 0..200 {
        let lc = rng.random_range(1..=12);
        let lr = rng.random_range(1..=12);
        let c: Vec<u8> = (0..lc).map(|_| rng.random_range(0..5)).collect();
        let r: Vec<u8> = (0..lr).map(|_| rng.random_range(0..5)).collect();
        let got = bleu(std::slice::from_ref(&c), std::slice::from_ref(&r))?;
        let want = bleu_oracle(&[(c.clone(), r.clone())]);
        ensure!((got - want).abs() <= 1e-12, "pair {i}: bleu {got} vs oracle {want}");
        for n in [1, 2] {
            let got = rouge_n(&c, &r, n).f1;
            let want = rouge_oracle(&c, &r, n);
            ensure!(
                (got - want).abs() <= 1e-12,
                "pair {i}: rouge-{n} {got} vs oracle {want}"
            );
        }
        pairs.push((c, r));
    }
    let (cands, refs): (Vec<Vec<u8>>, Vec<Vec<u8>>) = pairs.iter().cloned().unzip();
    let corpus = bleu(&cands, &refs)?;
    let want = bleu_oracle(&pairs);
    ensure!((corpus - want).abs() <= 1e-12, "corpus bleu {corpus} vs oracle {want}");

    for i in 0..1000 {
        let n = rng.random_range(1..=30);
        let a = uniform(&mut rng, n, -3.0, 3.0);
        let b = uniform(&mut rng, n, -3.0, 3.0);
        let m = score_metrics(&a, &b)?;
        ensure!(m.mae <= m.rmse, "pair {i}: mae {} > rmse {}", m.mae, m.rmse);
    }
    Ok(format!("pearson {expected_r:.6}, bleu {b:.4}, rouge-1 f1 {:.1}; 200 oracle pairs, corpus bleu {corpus:.4}; 1000 mae<=rmse", r.f1))
}

// ---- 5: lora ----

fn plain_forward(g: &mut Graph, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> qgrade::Result<Tensor> {
    let xv = g.leaf(x);
    let wv = g.leaf(w);
    let mut y = g.matmul_t(xv, wv)?;
    if let Some(b) = bias {
        let bv = g.leaf(b);
        y = g.add_bias(y, bv)?;
    }
    Ok(g.to_tensor(y))
}

fn expected_counts(c: &ModelConfig) -> (usize, usize) {
    let (v, d, l, nl, r) = (c.vocab_size, c.d_model, c.max_seq_len, c.n_layers, c.lora_rank);
    let ff = MLP_RATIO * d;
    let emb = v * d + l * d;
    let norms = (2 * nl + 1) * 2 * d;
    let weights = nl * (4 * d * d + 2 * d * ff);
    let biases = nl * (d + ff + d);
    let adapters = if c.tune == Tune::Lora {
        nl * (2 * r * (d + d) + r * (ff + d))
    } else {
        0
    };
    let head = match c.head_kind {
        HeadKind::Lm => v * d,
        HeadKind::Regression => d + 1,
        HeadKind::Classification => c.n_classes * d + c.n_classes,
    };
    let total = emb + norms + weights + biases + adapters + head;
    let trainable = match c.tune {
        Tune::Full => total,
        Tune::Heads => emb + norms + head,
        Tune::Lora => norms + adapters + if c.head_kind == HeadKind::Lm { 0 } else { head },
    };
    (trainable, total)
}

fn lora_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let d_in = rng.random_range(1..=24);
        let d_out = rng.random_range(1..=24);
        let rank = rng.random_range(1..=d_in.min(d_out));
        let alpha = rng.random_range(0.5..32.0);
        let w = Tensor::new(&[d_out, d_in], uniform(&mut rng, d_in * d_out, -1.0, 1.0), false)?;
        let block = [4, 8, 64][i as usize % 3];
        let q = quantize_absmax(&w, Bits::Int4, block)?;
        let bias = Tensor::new(&[d_out], uniform(&mut rng, d_out, -1.0, 1.0), false)?;
        let batch = rng.random_range(1..=5);
        let x = Tensor::new(&[batch, d_in], uniform(&mut rng, batch * d_in, -2.0, 2.0), false)?;

        let adapter = lora_init(d_in, d_out, rank, alpha, i)?;
        let base = dequantize(&q);
        ensure!(
            lora_merge(&base, &adapter)? == base,
            "layer {i}: zero-init merge changed W0"
        );
        let mut layer = QLoraLinear::new(q, adapter, Some(bias.clone()))?;
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let y = qlora_forward(&layer, &mut g, xv)?;
        let adapted = g.to_tensor(y);
        let plain = plain_forward(&mut Graph::new(), &x, &base, Some(&bias))?;
        ensure!(
            adapted.data() == plain.data(),
            "layer {i}: zero-init adapter changed the output"
        );

        let b_vals = uniform(&mut rng, d_out * rank, -1.0, 1.0);
        layer.adapter_mut().b_mut().data_mut().copy_from_slice(&b_vals);
        let merged = lora_merge(&base, layer.adapter())?;
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let y = qlora_forward(&layer, &mut g, xv)?;
        let unmerged = g.to_tensor(y);
        let via_merge = plain_forward(&mut Graph::new(), &x, &merged, Some(&bias))?;
        for (a, b) in unmerged.data().iter().zip(via_merge.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure!(worst < 1e-10, "merged vs unmerged differ by {worst:e}");

    let cfg = ModelConfig {
        vocab_size: 12,
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        max_seq_len: 16,
        head_kind: HeadKind::Regression,
        quantize_base: true,
        tune: Tune::Lora,
        lora_rank: 4,
        block_size: 16,
        ..ModelConfig::default()
    };
    let mut model = build_model(&cfg, 11)?;
    let bases_before = model.bases().to_vec();
    let base_bytes: Vec<Vec<u8>> = bases_before
        .iter()
        .map(|b| {
            let mut v = b.quantized.packed_codes();
            v.extend(b.quantized.scales().iter().flat_map(|s| s.to_le_bytes()));
            v
        })
        .collect();
    let frozen_before: Vec<Tensor> = model
        .params()
        .iter()
        .filter(|p| !p.trainable)
        .map(|p| p.tensor.clone())
        .collect();
    let samples: Vec<Sample> = (0..50)
        .map(|i| Sample {
            ids: (0..6).map(|j| 5 + (i * 7 + j * 3) % 7).collect(),
            target: Target::Score((i % 5) as f64 / 4.0),
        })
        .collect();
    let tc = TrainConfig {
        batch_size: 1,
        epochs: 1,
        learning_rate: 1e-2,
        ..TrainConfig::scorer()
    };
    let report = train(&mut model, &samples, &samples[..5], Objective::Mse, &tc)?;
    ensure!(report.epochs.len() == 1, "expected one epoch of 50 steps");
    let base_bytes_after: Vec<Vec<u8>> = model
        .bases()
        .iter()
        .map(|b| {
            let mut v = b.quantized.packed_codes();
            v.extend(b.quantized.scales().iter().flat_map(|s| s.to_le_bytes()));
            v
        })
        .collect();
    ensure!(
        model.bases() == bases_before.as_slice(),
        "quantized bases changed during training"
    );
    ensure!(
        base_bytes == base_bytes_after,
        "quantized base bytes changed during training"
    );
    let frozen_after: Vec<Tensor> = model
        .params()
        .iter()
        .filter(|p| !p.trainable)
        .map(|p| p.tensor.clone())
        .collect();
    ensure!(
        frozen_before == frozen_after,
        "frozen parameters changed during training"
    );
    let b_moved = model
        .adapters()
        .iter()
        .any(|a| model.params()[a.b].tensor.data().iter().any(|&v| v != 0.0));
    ensure!(b_moved, "adapters did not train");

    let mut checked = 0;
    for head in [HeadKind::Lm, HeadKind::Regression, HeadKind::Classification] {
        for tune in [Tune::Full, Tune::Heads, Tune::Lora] {
            for quant in [false, true] {
                if quant && tune == Tune::Full {
                    continue;
                }
                for (d, heads, layers, vocab, rank) in [(8, 2, 1, 10, 2), (16, 4, 2, 30, 4), (64, 4, 2, 512, 8)] {
                    let cfg = ModelConfig {
                        vocab_size: vocab,
                        d_model: d,
                        n_heads: heads,
                        n_layers: layers,
                        max_seq_len: 32,
                        head_kind: head,
                        quantize_base: quant,
                        tune,
                        lora_rank: rank,
                        ..ModelConfig::default()
                    };
                    let m = build_model(&cfg, 0)?;
                    let counts = m.param_counts();
                    let (t, n) = expected_counts(&cfg);
                    ensure!(
                        counts.trainable == t && counts.total == n,
                        "{head}/{tune}/quant={quant}/d={d}: counts {counts:?} vs ({t}, {n})"
                    );
                    ensure!(
                        m.trainable_fraction() == t as f64 / n as f64,
                        "fraction arithmetic for {cfg:?}"
                    );
                    checked += 1;
                }
            }
        }
    }
    let desk = build_model(
        &ModelConfig {
            quantize_base: true,
            tune: Tune::Lora,
            ..ModelConfig::default()
        },
        0,
    )?;
    Ok(format!(
        "100 layers, merge gap {worst:.1e}; base unchanged over 50 steps; {checked} configs counted exactly; desk lora fraction {:.4}",
        desk.trainable_fraction()
    ))
}

// ---- 6: scorer ----

fn desk_corpus() -> qgrade::Result<qgrade::data::DatasetSplits> {
    gen_synthetic(&SyntheticSpec {
        n_examples: 2857,
        seed: 7,
        ..SyntheticSpec::default()
    })
}

/// Least-squares fit on answer bag-of-words counts, evaluated on validation.
fn bow_oracle_mae(train: &[GradingExample], val: &[GradingExample], vocab: &Vocab) -> f64 {
    let dim = vocab.len() + 1;
    let features = |e: &GradingExample| {
        let mut f = vec![0.0; dim];
        f[dim - 1] = 1.0;
        for id in vocab.tokenize(&e.provided_answer) {
            f[id] += 1.0;
        }
        f
    };
    let rows: Vec<f64> = train.iter().flat_map(features).collect();
    let x = DMatrix::from_row_slice(train.len(), dim, &rows);
    let y = DVector::from_iterator(train.len(), train.iter().map(|e| e.score));
    let xtx = x.transpose() * &x + DMatrix::<f64>::identity(dim, dim) * 1e-6;
    let xty = x.transpose() * y;
    let w = xtx.cholesky().expect("ridge system is positive definite").solve(&xty);
    let err: f64 = val
        .iter()
        .map(|e| {
            let pred: f64 = features(e).iter().zip(w.iter()).map(|(a, b)| a * b).sum();
            (pred - e.score).abs()
        })
        .sum();
    err / val.len() as f64
}

fn train_desk_scorer(data: &qgrade::data::DatasetSplits) -> qgrade::Result<(Model, Vocab, f64, f64)> {
    let vocab = build_vocab(&data.train, 512);
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        head_kind: HeadKind::Regression,
        ..ModelConfig::default()
    };
    let mut scorer = build_model(&cfg, 0)?;
    let tc = TrainConfig::scorer();
    let tr = scorer_samples(&data.train, &vocab, cfg.max_seq_len);
    let va = scorer_samples(&data.validation, &vocab, cfg.max_seq_len);
    let untrained = evaluate_loss(&scorer, &va, Objective::Mse, tc.batch_size)?;
    let report = train(&mut scorer, &tr, &va, Objective::Mse, &tc)?;
    Ok((scorer, vocab, untrained, report.best_val_loss()))
}

fn scorer_experiment(shared: &mut Shared) -> Check {
    let t0 = Instant::now();
    let data = desk_corpus()?;
    let sizes = data.sizes();
    ensure!(
        sizes[0] == 2000 && (420..=440).contains(&sizes[1]),
        "split sizes {sizes:?}"
    );
    let vocab = build_vocab(&data.train, 512);
    ensure!(vocab.len() <= 512, "vocab {}", vocab.len());
    let oracle = bow_oracle_mae(&data.train, &data.validation, &vocab);
    ensure!(
        oracle <= 0.05,
        "bag-of-words oracle mae {oracle}: task not linearly learnable"
    );

    let (scorer, vocab, untrained_mse, best_mse) = train_desk_scorer(&data)?;
    ensure!(
        best_mse < untrained_mse,
        "best val mse {best_mse} not below untrained {untrained_mse}"
    );
    let (_, report) = evaluate_scorer(&scorer, &data.validation, &vocab, 1)?;
    let rmse = report.rmse.unwrap_or(f64::NAN);
    let mae = report.mae.unwrap_or(f64::NAN);
    let mean = data.train.iter().map(|e| e.score).sum::<f64>() / data.train.len() as f64;
    let baseline = score_metrics(
        &vec![mean; data.validation.len()],
        &data.validation.iter().map(|e| e.score).collect::<Vec<_>>(),
    )?
    .rmse;

    let template = &data.validation[0];
    let concepts: Vec<&str> = template
        .reference_answer
        .split_whitespace()
        .skip(3)
        .filter(|t| !matches!(*t, "," | "and" | "."))
        .collect();
    let perfect = GradingExample {
        provided_answer: concepts.join(" "),
        ..template.clone()
    };
    let empty = GradingExample {
        provided_answer: String::new(),
        ..template.clone()
    };
    let (hi, lo) = (
        predict_grade(&scorer, &perfect, &vocab)?,
        predict_grade(&scorer, &empty, &vocab)?,
    );

    let secs = t0.elapsed().as_secs_f64();
    shared.scorer = Some((scorer, vocab));
    ensure!(
        rmse <= 0.5 * baseline,
        "val rmse {rmse:.4} above half the baseline {baseline:.4}"
    );
    ensure!(mae <= 0.05, "val mae {mae:.4} above 0.05");
    ensure!(hi > lo, "perfect answer scored {hi:.3}, empty answer {lo:.3}");
    ensure!(secs <= 600.0, "took {secs:.0}s");
    Ok(format!(
        "val rmse {rmse:.4} (baseline {baseline:.4}), mae {mae:.4}; bag-of-words oracle mae {oracle:.4}; perfect {hi:.3} > empty {lo:.3}"
    ))
}

// ---- 7: conditioning ----

fn conditioning(shared: &mut Shared) -> Check {
    let t0 = Instant::now();
    let data = desk_corpus()?;
    if shared.scorer.is_none() {
        let (scorer, vocab, _, _) = train_desk_scorer(&data)?;
        shared.scorer = Some((scorer, vocab));
    }
    let (scorer, vocab) = shared.scorer.as_ref().expect("scorer trained above");
    let ed = ExperimentData {
        train: &data.train,
        validation: &data.validation,
        eval: &data.test_unseen_answers,
        vocab,
        scorer,
    };
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    let report = conditioning_experiment(
        &ed,
        &cfg,
        &TrainConfig::feedback(),
        &[1, 2, 3],
        &ExperimentOptions::default(),
    )?;
    let with = report.median_final_val_loss(GeneratorMode::WithGrade);
    let without = report.median_final_val_loss(GeneratorMode::WithoutGrade);
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in [1u64, 2, 3] {
        let bleu_of = |mode| {
            report
                .runs
                .iter()
                .find(|r| r.seed == seed && r.mode == mode)
                .and_then(|r| r.metrics.bleu)
                .unwrap_or(f64::NAN)
        };
        let (a, b) = (bleu_of(GeneratorMode::WithGrade), bleu_of(GeneratorMode::WithoutGrade));
        if a >= b {
            wins += 1;
        }
        pairs.push(format!("{a:.3}/{b:.3}"));
    }
    let secs = t0.elapsed().as_secs_f64();
    let summary = format!(
        "median final val loss with/without {with:.6}/{without:.6}; bleu with/without per seed {}; {secs:.0}s",
        pairs.join(", ")
    );
    let mut problems = Vec::new();
    if !(with < without) {
        problems.push("val loss with_grade not below without_grade".to_string());
    }
    if wins < 2 {
        problems.push(format!("bleu with >= without in only {wins} of 3 seeds"));
    }
    if secs > 1800.0 {
        problems.push("over 1800s".to_string());
    }
    if problems.is_empty() {
        Ok(summary)
    } else {
        Err(Fail(format!("{}: {summary}", problems.join("; "))))
    }
}

// ---- 8: determinism ----

fn qgrade(args: &[&str]) -> Result<String, Fail> {
    let out = Command::new(env!("CARGO_BIN_EXE_qgrade")).args(args).output()?;
    if !out.status.success() {
        return Err(Fail(format!(
            "qgrade {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        )));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Log lines with the timing column removed.
fn without_timing(log: &str) -> String {
    log.lines()
        .map(|l| {
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() == 4 {
                cols[..3].join("\t")
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn read(path: &Path) -> Result<Vec<u8>, Fail> {
    Ok(std::fs::read(path)?)
}

fn determinism() -> Check {
    let dir = tempfile::tempdir()?;
    let p = |name: &str| dir.path().join(name);
    let s = |name: &str| p(name).to_string_lossy().into_owned();

    qgrade(&["gen-data", "--seed", "5", "--examples", "200", "--out", &s("a.tsv")])?;
    qgrade(&["gen-data", "--seed", "5", "--examples", "200", "--out", &s("b.tsv")])?;
    ensure!(
        read(&p("a.tsv"))? == read(&p("b.tsv"))?,
        "gen-data output differs between runs"
    );

    let runs: [(&str, &[&str]); 2] = [
        ("scorer", &["--task", "scorer", "--epochs", "2", "--seed", "3"]),
        (
            "feedback",
            &[
                "--task",
                "feedback",
                "--epochs",
                "1",
                "--seed",
                "3",
                "--tune",
                "lora",
                "--quantize-base",
            ],
        ),
    ];
    for (task, flags) in runs {
        for copy in ["1", "2"] {
            let (data, out) = (s("a.tsv"), s(&format!("{task}{copy}.ckpt")));
            let mut args = vec!["train", "--data", &data, "--out", &out];
            args.extend_from_slice(flags);
            qgrade(&args)?;
        }
        let (c1, c2) = (read(&p(&format!("{task}1.ckpt")))?, read(&p(&format!("{task}2.ckpt")))?);
        ensure!(c1 == c2, "{task} checkpoints differ between identical runs");
        let l1 = String::from_utf8_lossy(&read(&p(&format!("{task}1.ckpt.log")))?).into_owned();
        let l2 = String::from_utf8_lossy(&read(&p(&format!("{task}2.ckpt.log")))?).into_owned();
        ensure!(
            without_timing(&l1) == without_timing(&l2),
            "{task} training logs differ"
        );

        let e1 = qgrade(&[
            "eval",
            "--task",
            task,
            "--ckpt",
            &s(&format!("{task}1.ckpt")),
            "--data",
            &s("a.tsv"),
        ])?;
        let e2 = qgrade(&[
            "eval",
            "--task",
            task,
            "--ckpt",
            &s(&format!("{task}2.ckpt")),
            "--data",
            &s("a.tsv"),
        ])?;
        ensure!(e1 == e2, "{task} eval reports differ");

        let loaded = Checkpoint::load(&p(&format!("{task}1.ckpt")))?;
        loaded.save(&p(&format!("{task}1.resaved")))?;
        ensure!(
            read(&p(&format!("{task}1.resaved")))? == c1,
            "{task} save/load/save not byte-identical"
        );
    }

    for copy in ["1", "2"] {
        qgrade(&[
            "pipeline",
            "--scorer-ckpt",
            &s("scorer1.ckpt"),
            "--gen-ckpt",
            &s("feedback1.ckpt"),
            "--data",
            &s("a.tsv"),
            "--out",
            &s(&format!("pipe{copy}.tsv")),
        ])?;
    }
    ensure!(
        read(&p("pipe1.tsv"))? == read(&p("pipe2.tsv"))?,
        "pipeline records differ"
    );

    let data = gen_synthetic(&SyntheticSpec {
        n_examples: 300,
        seed: 9,
        ..SyntheticSpec::default()
    })?;
    write_dataset(&p("rt.tsv"), &data)?;
    let back = load_dataset(&p("rt.tsv"), &GradeScale::UNIT)?;
    ensure!(back == data, "dataset round-trip changed records");
    ensure!(
        format_dataset(&back) == format_dataset(&data),
        "dataset text changed on rewrite"
    );
    Ok("gen-data, scorer and lora generator checkpoints, logs, eval and pipeline outputs identical; save/load/save and dataset round-trip exact".into())
}

// ---- 9: early stopping ----

/// Epoch (1-based) at which the rule stops a run over `history`, if it does.
fn stop_epoch(history: &[f64], patience: usize) -> Option<usize> {
    (1..=history.len()).find(|&e| early_stop_check(&history[..e], patience))
}

fn early_stopping() -> Check {
    let decreasing: Vec<f64> = (0..20).map(|i| 1.0 / (i as f64 + 1.0)).collect();
    let plateau = vec![0.5; 20];
    let worsening: Vec<f64> = (0..20).map(|i| 0.1 * i as f64).collect();
    let cases = [
        ("strictly decreasing", &decreasing, 3, None),
        ("plateau", &plateau, 3, Some(4)),
        ("worsening", &worsening, 3, Some(4)),
        ("worsening, patience 1", &worsening, 1, Some(2)),
    ];
    for (name, h, patience, want) in cases {
        let got = stop_epoch(h, patience);
        ensure!(got == want, "{name}: stopped at {got:?}, expected {want:?}");
    }
    ensure!(!early_stop_check(&[], 10), "empty history stopped");

    let preset = TrainConfig::feedback();
    ensure!(
        preset.early_stop_patience == 10 && preset.epochs == 20,
        "feedback preset {preset:?}"
    );
    // Best at epoch 6, never improved on afterwards: stops after epoch 16.
    let mut late: Vec<f64> = (0..6).map(|i| 1.0 - 0.1 * i as f64).collect();
    late.extend(std::iter::repeat_n(0.6, 14));
    let got = stop_epoch(&late, preset.early_stop_patience);
    ensure!(got == Some(16), "best at 6 stopped at {got:?}");
    // An improvement at epoch 12 resets the count: runs all 20 epochs.
    let mut reset = late.clone();
    reset[11] = 0.1;
    let got = stop_epoch(&reset, preset.early_stop_patience);
    ensure!(got.is_none(), "improvement at 12 stopped at {got:?}");

    // Real run: validation targets are the opposite of training targets on the
    // same inputs, so validation loss only grows after the first epoch.
    let cfg = ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        max_seq_len: 8,
        head_kind: HeadKind::Regression,
        ..ModelConfig::default()
    };
    let mut model = build_model(&cfg, 4)?;
    let inputs: Vec<Vec<usize>> = (0..8).map(|i| vec![5 + i % 7, 6, 5 + (i * 3) % 7]).collect();
    let tr: Vec<Sample> = inputs
        .iter()
        .map(|ids| Sample {
            ids: ids.clone(),
            target: Target::Score(1.0),
        })
        .collect();
    let va: Vec<Sample> = inputs
        .iter()
        .map(|ids| Sample {
            ids: ids.clone(),
            target: Target::Score(0.0),
        })
        .collect();
    let tc = TrainConfig {
        epochs: 20,
        learning_rate: 1e-2,
        ..TrainConfig::scorer()
    };
    let report = train(&mut model, &tr, &va, Objective::Mse, &tc)?;
    let history = report.val_losses();
    ensure!(
        report.best_epoch == 1 && report.epochs.len() == 11 && report.stopped_early,
        "real run: best {} over {} epochs, stopped_early {}, history {history:?}",
        report.best_epoch,
        report.epochs.len(),
        report.stopped_early
    );
    let restored = evaluate_loss(&model, &va, Objective::Mse, tc.batch_size)?;
    ensure!(
        (restored - report.best_val_loss()).abs() <= 1e-12,
        "restored weights give val loss {restored}, best was {}",
        report.best_val_loss()
    );
    Ok(format!(
        "{} traces match; preset stops at 16 after a best at 6; real run stopped after {} epochs with best epoch 1 restored",
        cases.len(),
        report.epochs.len()
    ))
}
