//! Tiny pre-norm decoder-only transformer with LM, regression and
//! classification heads.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::PAD_ID;
use crate::error::{Error, Result};
use crate::lora::{self, gaussian, lora_init, ParamCounts, INIT_STD};
use crate::quant::{dequantize, quantize_absmax, Bits, QuantizedTensor, DEFAULT_BLOCK_SIZE};
use crate::tensor::{Graph, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
/// MLP hidden width as a multiple of `d_model`.
pub const MLP_RATIO: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Lm,
    Regression,
    Classification,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Lm => "lm",
            HeadKind::Regression => "regression",
            HeadKind::Classification => "classification",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lm" => Ok(HeadKind::Lm),
            "regression" => Ok(HeadKind::Regression),
            "classification" => Ok(HeadKind::Classification),
            _ => Err(Error::InvalidConfig(format!("unknown head kind {s:?}"))),
        }
    }
}

/// Which parameters receive gradient updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tune {
    /// Low-rank adapters on q/v/MLP-out plus norms and task heads. The LM
    /// head counts as part of the frozen base.
    Lora,
    /// Heads, norms and embeddings; block weights frozen.
    Heads,
    /// Everything.
    Full,
}

impl Tune {
    pub fn name(self) -> &'static str {
        match self {
            Tune::Lora => "lora",
            Tune::Heads => "heads",
            Tune::Full => "full",
        }
    }
}

impl fmt::Display for Tune {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tune {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(Tune::Lora),
            "heads" => Ok(Tune::Heads),
            "full" => Ok(Tune::Full),
            _ => Err(Error::InvalidConfig(format!("unknown tune mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub head_kind: HeadKind,
    pub n_classes: usize,
    pub quantize_base: bool,
    pub tune: Tune,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub block_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            max_seq_len: 512,
            head_kind: HeadKind::Lm,
            n_classes: 11,
            quantize_base: false,
            tune: Tune::Full,
            lora_rank: lora::DEFAULT_RANK,
            lora_alpha: lora::DEFAULT_ALPHA,
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return bad("vocab_size, d_model, n_heads and n_layers must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be at least 1".into());
        }
        if self.head_kind == HeadKind::Classification && self.n_classes < 2 {
            return bad(format!("classification needs n_classes >= 2, got {}", self.n_classes));
        }
        if self.quantize_base && self.tune == Tune::Full {
            return bad("tune=full cannot train a quantized base".into());
        }
        if self.tune == Tune::Lora && (self.lora_rank == 0 || self.lora_rank > self.d_model) {
            return bad(format!("lora_rank {} must be in 1..={}", self.lora_rank, self.d_model));
        }
        if !(self.lora_alpha > 0.0) {
            return bad(format!("lora_alpha must be positive, got {}", self.lora_alpha));
        }
        if self.block_size == 0 {
            return bad("block_size must be positive".into());
        }
        Ok(())
    }

    /// `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        format!(
            "vocab_size={}\nd_model={}\nn_heads={}\nn_layers={}\nmax_seq_len={}\nhead_kind={}\nn_classes={}\nquantize_base={}\ntune={}\nlora_rank={}\nlora_alpha={}\nblock_size={}\n",
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.max_seq_len,
            self.head_kind,
            self.n_classes,
            self.quantize_base,
            self.tune,
            self.lora_rank,
            self.lora_alpha,
            self.block_size
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("malformed config line {line:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field by name; used by config files and checkpoints.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidConfig(format!("bad value {v:?} for {key}")))
        }
        match key {
            "vocab_size" => self.vocab_size = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "n_layers" => self.n_layers = num(key, value)?,
            "max_seq_len" => self.max_seq_len = num(key, value)?,
            "head_kind" => self.head_kind = value.parse()?,
            "n_classes" => self.n_classes = num(key, value)?,
            "quantize_base" => self.quantize_base = num(key, value)?,
            "tune" => self.tune = value.parse()?,
            "lora_rank" => self.lora_rank = num(key, value)?,
            "lora_alpha" => self.lora_alpha = num(key, value)?,
            "block_size" => self.block_size = num(key, value)?,
            _ => return Err(Error::InvalidConfig(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBase {
    pub name: String,
    pub quantized: QuantizedTensor,
    dequantized: Tensor,
}

impl FrozenBase {
    pub fn new(name: String, quantized: QuantizedTensor) -> Self {
        let dequantized = dequantize(&quantized);
        Self {
            name,
            quantized,
            dequantized,
        }
    }

    pub fn dequantized(&self) -> &Tensor {
        &self.dequantized
    }
}

/// Adapter metadata; `A` and `B` live in the parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterInfo {
    pub name: String,
    pub a: usize,
    pub b: usize,
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl AdapterInfo {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum WeightSlot {
    Param(usize),
    Base(usize),
}

#[derive(Clone, Debug, PartialEq)]
struct LinearLayout {
    weight: WeightSlot,
    bias: Option<usize>,
    adapter: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
struct BlockLayout {
    ln1: (usize, usize),
    q: LinearLayout,
    k: LinearLayout,
    v: LinearLayout,
    o: LinearLayout,
    ln2: (usize, usize),
    fc1: LinearLayout,
    fc2: LinearLayout,
}

#[derive(Clone, Debug, PartialEq)]
enum HeadLayout {
    Lm { w: usize },
    Regression { w: usize, b: usize },
    Classification { w: usize, b: usize },
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<BlockLayout>,
    ln_f: (usize, usize),
    head: HeadLayout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    bases: Vec<FrozenBase>,
    adapters: Vec<AdapterInfo>,
    layout: Layout,
}

/// Graph handles for one registration of a model's parameters.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub params: Vec<Var>,
    pub bases: Vec<Var>,
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    rng: ChaCha8Rng,
    seed: u64,
    params: Vec<Param>,
    bases: Vec<FrozenBase>,
    adapters: Vec<AdapterInfo>,
}

impl Builder<'_> {
    fn param(&mut self, name: String, shape: &[usize], values: Vec<f64>, trainable: bool) -> usize {
        let tensor = Tensor::new(shape, values, trainable).expect("builder shapes are valid");
        self.params.push(Param {
            name,
            tensor,
            trainable,
        });
        self.params.len() - 1
    }

    fn normal(&mut self, name: String, shape: &[usize], trainable: bool) -> usize {
        let n = shape.iter().product();
        let v = gaussian(n, INIT_STD, &mut self.rng);
        self.param(name, shape, v, trainable)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64, trainable: bool) -> usize {
        let n = shape.iter().product();
        self.param(name, shape, vec![value; n], trainable)
    }

    fn norm(&mut self, prefix: &str) -> (usize, usize) {
        let d = self.cfg.d_model;
        (
            self.constant(format!("{prefix}.gain"), &[d], 1.0, true),
            self.constant(format!("{prefix}.bias"), &[d], 0.0, true),
        )
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize, with_bias: bool, adapt: bool) -> Result<LinearLayout> {
        let cfg = self.cfg;
        let full = cfg.tune == Tune::Full;
        let w = gaussian(d_in * d_out, INIT_STD, &mut self.rng);
        let weight = if cfg.quantize_base {
            let t = Tensor::new(&[d_out, d_in], w, false)?;
            let q = quantize_absmax(&t, Bits::Int4, cfg.block_size)?;
            self.bases.push(FrozenBase::new(format!("{name}.weight"), q));
            WeightSlot::Base(self.bases.len() - 1)
        } else {
            WeightSlot::Param(self.param(format!("{name}.weight"), &[d_out, d_in], w, full))
        };
        let bias = with_bias.then(|| self.constant(format!("{name}.bias"), &[d_out], 0.0, full));
        let adapter = if adapt && cfg.tune == Tune::Lora {
            let seed = self
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(self.adapters.len() as u64 + 1);
            let init = lora_init(d_in, d_out, cfg.lora_rank, cfg.lora_alpha, seed)?;
            let a = self.param(
                format!("{name}.lora_a"),
                init.a().shape(),
                init.a().data().to_vec(),
                true,
            );
            let b = self.param(
                format!("{name}.lora_b"),
                init.b().shape(),
                init.b().data().to_vec(),
                true,
            );
            self.adapters.push(AdapterInfo {
                name: name.to_string(),
                a,
                b,
                rank: init.rank(),
                alpha: init.alpha(),
                seed,
            });
            Some(self.adapters.len() - 1)
        } else {
            None
        };
        Ok(LinearLayout { weight, bias, adapter })
    }
}

/// Builds a model with deterministic initialization: weights `N(0, 0.02²)`,
/// norms gain 1 / bias 0, regression head zero. With `quantize_base`, every
/// block weight matrix is stored as frozen int4.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let d = config.d_model;
    let tune = config.tune;
    let embed_trainable = tune != Tune::Lora;
    let mut b = Builder {
        cfg: config,
        rng: ChaCha8Rng::seed_from_u64(seed),
        seed,
        params: Vec::new(),
        bases: Vec::new(),
        adapters: Vec::new(),
    };
    let tok_emb = b.normal("tok_emb".into(), &[config.vocab_size, d], embed_trainable);
    let pos_emb = b.normal("pos_emb".into(), &[config.max_seq_len, d], embed_trainable);
    let mut blocks = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = format!("blocks.{l}");
        let ln1 = b.norm(&format!("{p}.ln1"));
        let q = b.linear(&format!("{p}.attn.q"), d, d, false, true)?;
        let k = b.linear(&format!("{p}.attn.k"), d, d, false, false)?;
        let v = b.linear(&format!("{p}.attn.v"), d, d, false, true)?;
        let o = b.linear(&format!("{p}.attn.o"), d, d, true, false)?;
        let ln2 = b.norm(&format!("{p}.ln2"));
        let fc1 = b.linear(&format!("{p}.mlp.fc1"), d, MLP_RATIO * d, true, false)?;
        let fc2 = b.linear(&format!("{p}.mlp.fc2"), MLP_RATIO * d, d, true, true)?;
        blocks.push(BlockLayout {
            ln1,
            q,
            k,
            v,
            o,
            ln2,
            fc1,
            fc2,
        });
    }
    let ln_f = b.norm("ln_f");
    let head = match config.head_kind {
        HeadKind::Lm => HeadLayout::Lm {
            w: b.normal("head.lm.weight".into(), &[config.vocab_size, d], tune != Tune::Lora),
        },
        HeadKind::Regression => HeadLayout::Regression {
            w: b.constant("head.reg.weight".into(), &[1, d], 0.0, true),
            b: b.constant("head.reg.bias".into(), &[1], 0.0, true),
        },
        HeadKind::Classification => HeadLayout::Classification {
            w: b.normal("head.cls.weight".into(), &[config.n_classes, d], true),
            b: b.constant("head.cls.bias".into(), &[config.n_classes], 0.0, true),
        },
    };
    Ok(Model {
        config: config.clone(),
        params: b.params,
        bases: b.bases,
        adapters: b.adapters,
        layout: Layout {
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
        },
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn bases(&self) -> &[FrozenBase] {
        &self.bases
    }

    pub fn adapters(&self) -> &[AdapterInfo] {
        &self.adapters
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.params[i].trainable).collect()
    }

    /// Replaces a frozen base. Used when restoring checkpoints.
    pub fn set_base(&mut self, idx: usize, quantized: QuantizedTensor) -> Result<()> {
        let slot = &mut self.bases[idx];
        if quantized.shape() != slot.quantized.shape() {
            return Err(Error::ShapeMismatch(format!(
                "base {} expects {:?}, got {:?}",
                slot.name,
                slot.quantized.shape(),
                quantized.shape()
            )));
        }
        *slot = FrozenBase::new(slot.name.clone(), quantized);
        Ok(())
    }

    pub fn set_adapter_meta(&mut self, idx: usize, alpha: f64, seed: u64) -> Result<()> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidAlpha(alpha));
        }
        self.adapters[idx].alpha = alpha;
        self.adapters[idx].seed = seed;
        Ok(())
    }

    pub fn param_counts(&self) -> ParamCounts {
        let trainable = self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.len()).sum();
        let total = self.params.iter().map(|p| p.tensor.len()).sum::<usize>()
            + self.bases.iter().map(|b| b.quantized.len()).sum::<usize>();
        ParamCounts { trainable, total }
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.param_counts().fraction()
    }

    /// Registers parameters on `g`. With `track_grads`, trainable parameters
    /// become gradient-tracking leaves; frozen ones never do.
    pub fn bind(&self, g: &mut Graph, track_grads: bool) -> ModelVars {
        let params = self
            .params
            .iter()
            .map(|p| {
                let rg = track_grads && p.trainable;
                g.input(p.tensor.shape(), p.tensor.data().to_vec(), rg)
                    .expect("parameter shapes are valid")
            })
            .collect();
        let bases = self.bases.iter().map(|b| g.leaf(b.dequantized())).collect();
        ModelVars { params, bases }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn linear(&self, g: &mut Graph, vars: &ModelVars, lin: &LinearLayout, x: Var) -> Result<Var> {
        let w = match lin.weight {
            WeightSlot::Param(i) => vars.params[i],
            WeightSlot::Base(i) => vars.bases[i],
        };
        let bias = lin.bias.map(|i| vars.params[i]);
        let adapter = lin.adapter.map(|i| {
            let info = &self.adapters[i];
            (vars.params[info.a], vars.params[info.b], info.scaling())
        });
        lora::adapted_linear(g, x, w, bias, adapter)
    }

    fn norm(&self, g: &mut Graph, vars: &ModelVars, ln: (usize, usize), x: Var) -> Result<Var> {
        g.layer_norm(x, vars.params[ln.0], vars.params[ln.1], LN_EPS)
    }

    /// Final-norm hidden states `[T, d_model]`.
    pub fn hidden(&self, g: &mut Graph, vars: &ModelVars, ids: &[usize]) -> Result<Var> {
        self.check_ids(ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = g.gather(vars.params[self.layout.tok_emb], ids)?;
        let pos = g.gather(vars.params[self.layout.pos_emb], &positions)?;
        let mut x = g.add(tok, pos)?;
        let heads = self.config.n_heads;
        let inv_sqrt_dh = 1.0 / ((self.config.d_model / heads) as f64).sqrt();
        for block in &self.layout.blocks {
            let h = self.norm(g, vars, block.ln1, x)?;
            let q = self.linear(g, vars, &block.q, h)?;
            let k = self.linear(g, vars, &block.k, h)?;
            let v = self.linear(g, vars, &block.v, h)?;
            let qh = g.split_heads(q, heads)?;
            let kh = g.split_heads(k, heads)?;
            let vh = g.split_heads(v, heads)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, inv_sqrt_dh);
            let attn = g.softmax_causal(scores)?;
            let ctx = g.matmul(attn, vh)?;
            let ctx = g.merge_heads(ctx)?;
            let out = self.linear(g, vars, &block.o, ctx)?;
            x = g.add(x, out)?;

            let h = self.norm(g, vars, block.ln2, x)?;
            let up = self.linear(g, vars, &block.fc1, h)?;
            let act = g.gelu(up);
            let down = self.linear(g, vars, &block.fc2, act)?;
            x = g.add(x, down)?;
        }
        self.norm(g, vars, self.layout.ln_f, x)
    }

    fn wrong_head(&self, expected: HeadKind) -> Error {
        Error::WrongHead {
            expected: expected.name(),
            actual: self.config.head_kind.name(),
        }
    }

    /// LM logits `[rows, vocab]` for the given rows of `hidden`.
    pub fn lm_logits(&self, g: &mut Graph, vars: &ModelVars, hidden: Var, rows: Option<&[usize]>) -> Result<Var> {
        let HeadLayout::Lm { w } = self.layout.head else {
            return Err(self.wrong_head(HeadKind::Lm));
        };
        let h = match rows {
            Some(r) => g.select_rows(hidden, r)?,
            None => hidden,
        };
        g.matmul_t(h, vars.params[w])
    }

    /// Tokens up to and including the final non-pad token.
    fn pooled_len(ids: &[usize]) -> Result<usize> {
        ids.iter()
            .rposition(|&t| t != PAD_ID)
            .map(|p| p + 1)
            .ok_or(Error::EmptyInput)
    }

    /// Regression output `sigmoid(w·h_last + b)` as a `[1, 1]` node.
    pub fn score_var(&self, g: &mut Graph, vars: &ModelVars, ids: &[usize]) -> Result<Var> {
        let HeadLayout::Regression { w, b } = self.layout.head else {
            return Err(self.wrong_head(HeadKind::Regression));
        };
        let n = Self::pooled_len(ids)?;
        let h = self.hidden(g, vars, &ids[..n])?;
        let last = g.select_rows(h, &[n - 1])?;
        let z = g.matmul_t(last, vars.params[w])?;
        let z = g.add_bias(z, vars.params[b])?;
        Ok(g.sigmoid(z))
    }

    /// Classification logits as a `[1, n_classes]` node.
    pub fn class_var(&self, g: &mut Graph, vars: &ModelVars, ids: &[usize]) -> Result<Var> {
        let HeadLayout::Classification { w, b } = self.layout.head else {
            return Err(self.wrong_head(HeadKind::Classification));
        };
        let n = Self::pooled_len(ids)?;
        let h = self.hidden(g, vars, &ids[..n])?;
        let last = g.select_rows(h, &[n - 1])?;
        let z = g.matmul_t(last, vars.params[w])?;
        g.add_bias(z, vars.params[b])
    }

    pub fn forward_lm(&self, ids: &[usize]) -> Result<Tensor> {
        if self.config.head_kind != HeadKind::Lm {
            return Err(self.wrong_head(HeadKind::Lm));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let h = self.hidden(&mut g, &vars, ids)?;
        let logits = self.lm_logits(&mut g, &vars, h, None)?;
        Ok(g.to_tensor(logits))
    }

    pub fn forward_score(&self, ids: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let s = self.score_var(&mut g, &vars, ids)?;
        Ok(g.scalar(s))
    }

    pub fn forward_class(&self, ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let z = self.class_var(&mut g, &vars, ids)?;
        let z = g.reshape(z, &[self.config.n_classes])?;
        Ok(g.to_tensor(z))
    }

    /// Autoregressive decoding. Returns the prompt followed by the generated
    /// tokens (including the stop token when it is produced).
    pub fn generate(&self, prompt: &[usize], decode: &DecodeConfig) -> Result<Vec<usize>> {
        if self.config.head_kind != HeadKind::Lm {
            return Err(self.wrong_head(HeadKind::Lm));
        }
        if prompt.is_empty() {
            return Err(Error::EmptyInput);
        }
        self.check_ids(prompt)?;
        let mut ids = prompt.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(decode.seed);
        for _ in 0..decode.max_new_tokens {
            if ids.len() >= self.config.max_seq_len {
                break;
            }
            let mut g = Graph::new();
            let vars = self.bind(&mut g, false);
            let h = self.hidden(&mut g, &vars, &ids)?;
            let logits = self.lm_logits(&mut g, &vars, h, Some(&[ids.len() - 1]))?;
            let next = match decode.mode {
                DecodeMode::Greedy => argmax(g.value(logits)),
                DecodeMode::Sample => sample(g.value(logits), decode.temperature, &mut rng),
            };
            ids.push(next);
            if decode.stop_id == Some(next) {
                break;
            }
        }
        Ok(ids)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub stop_id: Option<usize>,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            max_new_tokens: 32,
            stop_id: Some(crate::data::EOS_ID),
            seed: 0,
        }
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn sample(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    if !(temperature > 0.0) {
        return argmax(logits);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    argmax(logits)
}

/// Mean cross-entropy of `[N, C]` logits against class targets.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.leaf(&logits.clone().with_requires_grad(false));
    let ce = g.cross_entropy(l, targets)?;
    Ok(g.scalar(ce))
}

pub fn mse_loss(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::LengthMismatch(preds.len(), targets.len()));
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / preds.len() as f64)
}

/// Class bin of a unit-interval score on an `n_classes`-point grade scale.
/// For 11 classes this is `round(2·s)` on the 0–5 half-step scale.
pub fn score_to_class(score: f64, n_classes: usize) -> usize {
    let top = (n_classes - 1) as f64;
    (score.clamp(0.0, 1.0) * top).round() as usize
}
