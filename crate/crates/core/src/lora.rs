//! Low-rank adapters over frozen (optionally int4-quantized) base weights.
//!
//! An adapter of rank `r` holds `A: [r, d_in]` and `B: [d_out, r]`; the layer
//! computes `W0·x + (alpha / r)·B·(A·x) + bias`. `B` starts at zero, so a fresh
//! adapter leaves the base layer's output unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::quant::{dequantize, QuantizedTensor};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_ALPHA: f64 = 16.0;
pub const INIT_STD: f64 = 0.02;

pub(crate) fn gaussian(len: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("std is positive");
    (0..len).map(|_| normal.sample(rng)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    a: Tensor,
    b: Tensor,
    rank: usize,
    alpha: f64,
    seed: u64,
}

fn validate(d_in: usize, d_out: usize, rank: usize, alpha: f64) -> Result<()> {
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(Error::InvalidRank { rank, d_in, d_out });
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidAlpha(alpha));
    }
    Ok(())
}

/// Fresh adapter: `A ~ N(0, 0.02²)` from a ChaCha8 stream seeded with `seed`, `B = 0`.
pub fn lora_init(d_in: usize, d_out: usize, rank: usize, alpha: f64, seed: u64) -> Result<LoraAdapter> {
    validate(d_in, d_out, rank, alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::new(&[rank, d_in], gaussian(rank * d_in, INIT_STD, &mut rng), true)?;
    let b = Tensor::new(&[d_out, rank], vec![0.0; d_out * rank], true)?;
    Ok(LoraAdapter {
        a,
        b,
        rank,
        alpha,
        seed,
    })
}

impl LoraAdapter {
    pub fn from_parts(a: Tensor, b: Tensor, alpha: f64, seed: u64) -> Result<Self> {
        let [rank, d_in] = a.shape()[..] else {
            return Err(Error::ShapeMismatch(format!(
                "adapter A must be rank 2, got {:?}",
                a.shape()
            )));
        };
        let [d_out, rb] = b.shape()[..] else {
            return Err(Error::ShapeMismatch(format!(
                "adapter B must be rank 2, got {:?}",
                b.shape()
            )));
        };
        if rb != rank {
            return Err(Error::ShapeMismatch(format!("A rank {rank} vs B rank {rb}")));
        }
        validate(d_in, d_out, rank, alpha)?;
        Ok(Self {
            a: a.with_requires_grad(true),
            b: b.with_requires_grad(true),
            rank,
            alpha,
            seed,
        })
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Tensor {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Tensor {
        &mut self.b
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        validate(self.d_in(), self.d_out(), self.rank, alpha)?;
        self.alpha = alpha;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `ΔW = (alpha / r)·B·A`, shape `[d_out, d_in]`.
    pub fn delta_weight(&self) -> Tensor {
        let mut g = Graph::new();
        let a = g.leaf(&self.a.clone().with_requires_grad(false));
        let b = g.leaf(&self.b.clone().with_requires_grad(false));
        let ba = g.matmul(b, a).expect("adapter shapes are consistent");
        let d = g.scale(ba, self.scaling());
        g.to_tensor(d)
    }
}

/// `W0 + (alpha / r)·B·A`; inputs are left untouched.
pub fn lora_merge(w0: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    if w0.shape() != [adapter.d_out(), adapter.d_in()] {
        return Err(Error::ShapeMismatch(format!(
            "base {:?} vs adapter [{}, {}]",
            w0.shape(),
            adapter.d_out(),
            adapter.d_in()
        )));
    }
    let delta = adapter.delta_weight();
    let merged = w0.data().iter().zip(delta.data()).map(|(w, d)| w + d).collect();
    Tensor::new(w0.shape(), merged, false)
}

/// `y = x·Wᵀ + bias + scaling·(x·Aᵀ)·Bᵀ` on `x: [batch, d_in]`.
pub(crate) fn adapted_linear(
    g: &mut Graph,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    adapter: Option<(Var, Var, f64)>,
) -> Result<Var> {
    let mut y = g.matmul_t(x, weight)?;
    if let Some(b) = bias {
        y = g.add_bias(y, b)?;
    }
    if let Some((a, b, scaling)) = adapter {
        let xa = g.matmul_t(x, a)?;
        let xab = g.matmul_t(xa, b)?;
        let delta = g.scale(xab, scaling);
        y = g.add(y, delta)?;
    }
    Ok(y)
}

/// Frozen quantized base plus a trainable adapter.
#[derive(Clone, Debug)]
pub struct QLoraLinear {
    base: QuantizedTensor,
    dequantized: Tensor,
    adapter: LoraAdapter,
    bias: Option<Tensor>,
}

/// Graph handles of one [`QLoraLinear`] registration.
#[derive(Clone, Copy, Debug)]
pub struct BoundQLora {
    pub base: Var,
    pub a: Var,
    pub b: Var,
    pub bias: Option<Var>,
    pub scaling: f64,
}

impl QLoraLinear {
    pub fn new(base: QuantizedTensor, adapter: LoraAdapter, bias: Option<Tensor>) -> Result<Self> {
        if base.shape() != [adapter.d_out(), adapter.d_in()] {
            return Err(Error::ShapeMismatch(format!(
                "base {:?} vs adapter [{}, {}]",
                base.shape(),
                adapter.d_out(),
                adapter.d_in()
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [adapter.d_out()] {
                return Err(Error::ShapeMismatch(format!(
                    "bias {:?} for d_out {}",
                    b.shape(),
                    adapter.d_out()
                )));
            }
        }
        let dequantized = dequantize(&base);
        Ok(Self {
            base,
            dequantized,
            adapter,
            bias: bias.map(|b| b.with_requires_grad(false)),
        })
    }

    pub fn base(&self) -> &QuantizedTensor {
        &self.base
    }

    pub fn dequantized_base(&self) -> &Tensor {
        &self.dequantized
    }

    pub fn adapter(&self) -> &LoraAdapter {
        &self.adapter
    }

    pub fn adapter_mut(&mut self) -> &mut LoraAdapter {
        &mut self.adapter
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    /// Registers the layer on `g`; only `A` and `B` require grad.
    pub fn bind(&self, g: &mut Graph) -> BoundQLora {
        BoundQLora {
            base: g.leaf(&self.dequantized),
            a: g.leaf(&self.adapter.a),
            b: g.leaf(&self.adapter.b),
            bias: self.bias.as_ref().map(|b| g.leaf(b)),
            scaling: self.adapter.scaling(),
        }
    }
}

impl BoundQLora {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        adapted_linear(g, x, self.base, self.bias, Some((self.a, self.b, self.scaling)))
    }
}

/// Forward of a [`QLoraLinear`] on `x: [d_in]` or `[batch, d_in]`.
pub fn qlora_forward(layer: &QLoraLinear, g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let d_in = layer.adapter.d_in();
    let (x2, vector) = match shape[..] {
        [n] if n == d_in => (g.reshape(x, &[1, n])?, true),
        [_, n] if n == d_in => (x, false),
        _ => return Err(Error::ShapeMismatch(format!("input {shape:?} for d_in {d_in}"))),
    };
    let bound = layer.bind(g);
    let y = bound.forward(g, x2)?;
    if vector {
        g.reshape(y, &[layer.adapter.d_out()])
    } else {
        Ok(y)
    }
}

/// Parameter accounting: quantized base elements count as parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamCounts {
    pub trainable: usize,
    pub total: usize,
}

impl ParamCounts {
    pub fn fraction(&self) -> f64 {
        trainable_fraction(self.trainable, self.total)
    }
}

pub fn trainable_fraction(trainable: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        trainable as f64 / total as f64
    }
}
