//! AdamW training loop with early stopping and run logging.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{HeadKind, Model, ModelVars};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Ce,
    Mse,
    Lm,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Ce => "ce",
            Objective::Mse => "mse",
            Objective::Lm => "lm",
        }
    }

    pub fn head(self) -> HeadKind {
        match self {
            Objective::Ce => HeadKind::Classification,
            Objective::Mse => HeadKind::Regression,
            Objective::Lm => HeadKind::Lm,
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Objective::Ce),
            "mse" => Ok(Objective::Mse),
            "lm" => Ok(Objective::Lm),
            _ => Err(Error::InvalidConfig(format!("unknown objective {s:?}"))),
        }
    }
}

/// One training record, already tokenized.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub ids: Vec<usize>,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Regression target in [0, 1].
    Score(f64),
    Class(usize),
    /// Next-token prediction over `ids[prompt_len..]`; the prompt itself is
    /// not scored.
    Lm {
        prompt_len: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub max_seq_len: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::scorer()
    }
}

impl TrainConfig {
    pub fn scorer() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 2e-4,
            weight_decay: 0.05,
            epochs: 10,
            early_stop_patience: 10,
            seed: 0,
            max_seq_len: 512,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: None,
        }
    }

    pub fn feedback() -> Self {
        Self {
            weight_decay: 1e-3,
            epochs: 20,
            ..Self::scorer()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "scorer" => Ok(Self::scorer()),
            "feedback" => Ok(Self::feedback()),
            _ => Err(Error::InvalidConfig(format!("unknown preset {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0 && self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) {
            return bad("adam betas must lie in (0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return bad("grad_clip_norm must be positive");
            }
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be at least 1");
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    /// Zeroed moments for parameters of the given lengths.
    pub fn new(lens: &[usize]) -> Self {
        Self {
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.t
    }
}

/// One AdamW update. Weight decay is decoupled: `p -= lr·wd·p` is applied
/// before the bias-corrected adaptive step.
pub fn adamw_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::StateMismatch(format!(
            "{} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::StateMismatch(format!(
                "slot {i}: param {} grad {} state {}",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    let decay = 1.0 - hyper.lr * hyper.weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj;
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] = p[j] * decay - hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// True iff the best (earliest minimum) value of `val_history` is at least
/// `patience` epochs behind the latest entry.
pub fn early_stop_check(val_history: &[f64], patience: usize) -> bool {
    let Some(best) = best_index(val_history) else {
        return false;
    };
    val_history.len() - 1 - best >= patience
}

/// Index of the earliest minimum.
fn best_index(history: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in history.iter().enumerate() {
        match best {
            Some(b) if v >= history[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub trainable_fraction: f64,
}

impl TrainReport {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }

    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.best_epoch - 1].val_loss
    }

    /// Run log: `epoch\ttrain_loss\tval_loss\tseconds` per epoch plus a
    /// summary line.
    pub fn to_log(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tval_loss\tseconds\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.3}",
                e.epoch, e.train_loss, e.val_loss, e.seconds
            );
        }
        let _ = writeln!(out, "{}", self.summary());
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "summary\tbest_epoch={}\tbest_val_loss={:.6}\tstopped_early={}\ttrainable_fraction={:.6}",
            self.best_epoch,
            self.best_val_loss(),
            self.stopped_early,
            self.trainable_fraction
        )
    }
}

fn check_sample(model: &Model, objective: Objective, s: &Sample) -> Result<()> {
    let ok = matches!(
        (objective, &s.target),
        (Objective::Mse, Target::Score(_)) | (Objective::Ce, Target::Class(_)) | (Objective::Lm, Target::Lm { .. })
    );
    if !ok {
        return Err(Error::InvalidConfig(format!(
            "sample target {:?} does not fit objective {objective}",
            s.target
        )));
    }
    if let Target::Lm { prompt_len } = s.target {
        if prompt_len == 0 || prompt_len >= s.ids.len() {
            return Err(Error::InvalidConfig(format!(
                "lm sample needs 1 <= prompt_len < {}, got {prompt_len}",
                s.ids.len()
            )));
        }
    }
    if let Target::Class(c) = s.target {
        if c >= model.config().n_classes {
            return Err(Error::TargetOutOfRange {
                target: c,
                classes: model.config().n_classes,
            });
        }
    }
    Ok(())
}

/// Mean loss over `batch` as a scalar node, together with the number of
/// scored items (examples, or target tokens for the LM objective).
pub fn batch_loss(
    model: &Model,
    g: &mut Graph,
    vars: &ModelVars,
    batch: &[&Sample],
    objective: Objective,
) -> Result<(Var, usize)> {
    match objective {
        Objective::Mse => {
            let mut preds = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for s in batch {
                preds.push(model.score_var(g, vars, &s.ids)?);
                if let Target::Score(t) = s.target {
                    targets.push(t);
                }
            }
            let p = g.concat_rows(&preds)?;
            let t = g.constant(&[batch.len(), 1], targets)?;
            let d = g.sub(p, t)?;
            let sq = g.mul(d, d)?;
            Ok((g.mean(sq), batch.len()))
        }
        Objective::Ce => {
            let mut logits = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for s in batch {
                logits.push(model.class_var(g, vars, &s.ids)?);
                if let Target::Class(c) = s.target {
                    targets.push(c);
                }
            }
            let z = g.concat_rows(&logits)?;
            Ok((g.cross_entropy(z, &targets)?, batch.len()))
        }
        Objective::Lm => {
            let mut logits = Vec::with_capacity(batch.len());
            let mut targets = Vec::new();
            for s in batch {
                let Target::Lm { prompt_len } = s.target else { continue };
                let n = s.ids.len();
                let h = model.hidden(g, vars, &s.ids[..n - 1])?;
                let rows: Vec<usize> = (prompt_len - 1..n - 1).collect();
                logits.push(model.lm_logits(g, vars, h, Some(&rows))?);
                targets.extend_from_slice(&s.ids[prompt_len..]);
            }
            let z = g.concat_rows(&logits)?;
            let count = targets.len();
            Ok((g.cross_entropy(z, &targets)?, count))
        }
    }
}

/// Mean loss over a whole set without recording gradients.
pub fn evaluate_loss(model: &Model, samples: &[Sample], objective: Objective, batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let batch: Vec<&Sample> = chunk.iter().collect();
        let (loss, n) = batch_loss(model, &mut g, &vars, &batch, objective)?;
        total += g.scalar(loss) * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0xd1b5_4a32_d192_ed03)
}

fn clip(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// Trains the model's trainable parameters and restores the parameters of
/// the best validation epoch before returning.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    val_set: &[Sample],
    objective: Objective,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let head = model.config().head_kind;
    if objective.head() != head {
        return Err(Error::IncompatibleObjective {
            objective: objective.name(),
            head: head.name(),
        });
    }
    for s in train_set.iter().chain(val_set) {
        check_sample(model, objective, s)?;
    }

    let trainable = model.trainable_indices();
    let lens: Vec<usize> = trainable.iter().map(|&i| model.params()[i].tensor.len()).collect();
    let mut state = AdamState::new(&lens);
    let hyper = config.hyper();
    let snapshot = |m: &Model| -> Vec<Vec<f64>> {
        trainable
            .iter()
            .map(|&i| m.params()[i].tensor.data().to_vec())
            .collect()
    };
    let mut best_params = snapshot(model);
    let mut history = Vec::new();
    let mut logs = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(config.seed, epoch));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true);
            let (loss, n) = batch_loss(model, &mut g, &vars, &batch, objective)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFiniteInput("training loss"));
            }
            total += value * n as f64;
            count += n;
            g.backward(loss)?;
            let mut grads: Vec<Vec<f64>> = trainable
                .iter()
                .zip(&lens)
                .map(|(&i, &n)| g.grad(vars.params[i]).map_or_else(|| vec![0.0; n], <[f64]>::to_vec))
                .collect();
            if let Some(c) = config.grad_clip_norm {
                clip(&mut grads, c);
            }
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let params = model.params_mut();
            let mut slots: Vec<&mut [f64]> = params
                .iter_mut()
                .filter(|p| p.trainable)
                .map(|p| p.tensor.data_mut())
                .collect();
            adamw_step(&mut slots, &grad_refs, &mut state, &hyper)?;
        }
        let val_loss = evaluate_loss(model, val_set, objective, config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteInput("validation loss"));
        }
        history.push(val_loss);
        if best_index(&history) == Some(history.len() - 1) {
            best_params = snapshot(model);
        }
        logs.push(EpochLog {
            epoch,
            train_loss: total / count as f64,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        });
        if early_stop_check(&history, config.early_stop_patience) {
            stopped_early = epoch < config.epochs;
            break;
        }
    }

    for (&i, data) in trainable.iter().zip(best_params) {
        model.param_mut(i).tensor.data_mut().copy_from_slice(&data);
    }
    Ok(TrainReport {
        best_epoch: best_index(&history).map_or(1, |b| b + 1),
        epochs: logs,
        stopped_early,
        trainable_fraction: model.trainable_fraction(),
    })
}
