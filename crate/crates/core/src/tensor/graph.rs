use super::gemm::{gemm, View};
use super::{check_shape, Tensor};
use crate::error::{Error, Result};

/// sqrt(2 / pi) for the tanh form of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient for the tanh form of GELU.
pub const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Gelu,
    Sigmoid,
    Scale,
}

/// Second operand of [`Graph::elementwise`].
#[derive(Clone, Copy, Debug)]
pub enum Operand {
    None,
    Var(Var),
    Scalar(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SplitHeads {
        a: Var,
        heads: usize,
    },
    MergeHeads(Var),
    SelectRows {
        a: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Append-only operation tape. Inputs of every node precede it, so reverse
/// append order is a valid reverse topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap();
    (shape.iter().product::<usize>() / cols, cols)
}

/// Batch count and matrix dims of a rank-2 or rank-3 shape.
fn as_batched(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [m, n] => Some((1, m, n)),
        [b, m, n] => Some((b, m, n)),
        _ => None,
    }
}

fn mismatch(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
}

fn gelu(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a copy of `tensor` as a leaf.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            Op::Leaf,
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad(),
        )
    }

    pub fn input(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let t = Tensor::new(shape, values, requires_grad)?;
        let shape = t.shape().to_vec();
        let rg = t.requires_grad();
        Ok(self.push(Op::Leaf, shape, t.into_data(), rg))
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        self.input(shape, values, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(&node.shape, node.value.clone(), false).expect("graph node shapes are valid")
    }

    /// Accumulated gradient of a leaf after one or more [`Graph::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- linear algebra ----

    /// Matrix product for rank-2 (`[m,k]·[k,n]`) or batched rank-3 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two dims, without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || mismatch("matmul", &sa, &sb);
        let (ba, m, k) = as_batched(&sa).ok_or_else(err)?;
        let (bb, r, c) = as_batched(&sb).ok_or_else(err)?;
        if sa.len() != sb.len() || ba != bb {
            return Err(err());
        }
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if kb != k {
            return Err(err());
        }
        let mut out = vec![0.0; ba * m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..ba {
                let a_i = &av[i * m * k..(i + 1) * m * k];
                let b_i = &bv[i * k * n..(i + 1) * k * n];
                let bview = if trans_b {
                    View::transposed(b_i, k)
                } else {
                    View::row_major(b_i, n)
                };
                gemm(
                    m,
                    k,
                    n,
                    View::row_major(a_i, k),
                    bview,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let mut shape = sa.clone();
        let last = shape.len() - 1;
        shape[last] = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul { a, b, trans_b }, shape, out, rg))
    }

    /// Swaps the last two dims.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (bt, m, n) = as_batched(&s).ok_or_else(|| Error::ShapeMismatch(format!("transpose of {s:?}")))?;
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; v.len()];
        for b in 0..bt {
            let off = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[off + j * m + i] = v[off + i * n + j];
                }
            }
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        let rg = self.rg(a);
        Ok(self.push(Op::Transpose(a), shape, out, rg))
    }

    // ---- elementwise ----

    /// Elementwise op dispatch. Binary kinds take an equal-shape tensor or a
    /// single-element tensor (broadcast); `Scale` takes a constant scalar.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Operand) -> Result<Var> {
        match (kind, b) {
            (Elementwise::Gelu, Operand::None) => Ok(self.gelu(a)),
            (Elementwise::Sigmoid, Operand::None) => Ok(self.sigmoid(a)),
            (Elementwise::Scale, Operand::Scalar(s)) => Ok(self.scale(a, s)),
            (Elementwise::Mul, Operand::Scalar(s)) => Ok(self.scale(a, s)),
            (Elementwise::Add, Operand::Scalar(s)) => {
                let c = self.constant(&[1], vec![s])?;
                self.add(a, c)
            }
            (Elementwise::Sub, Operand::Scalar(s)) => {
                let c = self.constant(&[1], vec![-s])?;
                self.add(a, c)
            }
            (Elementwise::Add, Operand::Var(b)) => self.add(a, b),
            (Elementwise::Sub, Operand::Var(b)) => self.sub(a, b),
            (Elementwise::Mul, Operand::Var(b)) => self.mul(a, b),
            (kind, b) => Err(Error::ShapeMismatch(format!("operand {b:?} is not valid for {kind:?}"))),
        }
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let av = self.value(a);
        let bv = self.value(b);
        if sa == sb {
            Ok((sa.to_vec(), av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()))
        } else if bv.len() == 1 {
            let y = bv[0];
            Ok((sa.to_vec(), av.iter().map(|&x| f(x, y)).collect()))
        } else {
            Err(mismatch(what, sa, sb))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.shape(a) != self.shape(b);
        let (shape, out) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        if broadcast {
            // Materialize the broadcast scalar so backward stays elementwise.
            let n = out.len();
            let bval = self.value(b)[0];
            let ones = self.push(Op::Leaf, shape.clone(), vec![1.0; n], false);
            let b_rg = self.rg(b);
            let bb = self.push(Op::Mul(ones, b), shape.clone(), vec![bval; n], b_rg);
            return Ok(self.push(Op::Add(a, bb), shape, out, rg));
        }
        Ok(self.push(Op::Add(a, b), shape, out, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            let nb = self.scale(b, -1.0);
            return self.add(a, nb);
        }
        let (shape, out) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), shape, out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), shape, out, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), shape, out, rg)
    }

    /// Adds a `[n]` bias to every row of an `[.., n]` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(bias).to_vec();
        let (_, cols) = rows_cols(&sa);
        if sb != [cols] {
            return Err(mismatch("add_bias", &sa, &sb));
        }
        let bv = self.value(bias);
        let out = self
            .value(a)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bv).map(|(x, b)| x + b))
            .collect();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Op::AddBias(a, bias), sa, out, rg))
    }

    /// GELU, tanh form: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Op::Gelu(a), shape, out, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), shape, out, rg)
    }

    // ---- normalization ----

    /// Softmax over the last dim, stabilized by per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Softmax over the last dim where row `i` of each square matrix only
    /// attends to columns `j <= i`; masked entries are exactly zero.
    pub fn softmax_causal(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let v = self.value(a);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput("softmax_rows"));
        }
        let (rows, cols) = rows_cols(&shape);
        let mrows = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        if causal && mrows != cols {
            return Err(Error::ShapeMismatch(format!(
                "causal softmax needs square rows, got {shape:?}"
            )));
        }
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let width = if causal { r % mrows + 1 } else { cols };
            let row = &v[r * cols..r * cols + width];
            let dst = &mut out[r * cols..r * cols + width];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                sum += *d;
            }
            dst.iter_mut().for_each(|d| *d /= sum);
        }
        let rg = self.rg(a);
        Ok(self.push(Op::Softmax(a), shape, out, rg))
    }

    /// Row-wise layer normalization of `[.., n]` with affine `gain`/`bias` of shape `[n]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&shape);
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(mismatch("layer_norm", &shape, self.shape(gain)));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv[c] + bv[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            shape,
            out,
            rg,
        ))
    }

    // ---- indexing / layout ----

    /// Rows of a `[V, d]` table selected by `ids`, giving `[len(ids), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        let [v, d] = shape[..] else {
            return Err(Error::ShapeMismatch(format!(
                "gather table must be rank 2, got {shape:?}"
            )));
        };
        if ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TokenOutOfRange { id: bad, vocab_size: v });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            vec![ids.len(), d],
            out,
            rg,
        ))
    }

    /// `[T, H·dh]` → `[H, T, dh]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let [t, d] = shape[..] else {
            return Err(Error::ShapeMismatch(format!("split_heads needs rank 2, got {shape:?}")));
        };
        if heads == 0 || d % heads != 0 {
            return Err(Error::ShapeMismatch(format!("{d} not divisible into {heads} heads")));
        }
        let dh = d / heads;
        let v = self.value(a);
        let mut out = vec![0.0; v.len()];
        for h in 0..heads {
            for i in 0..t {
                out[(h * t + i) * dh..(h * t + i + 1) * dh].copy_from_slice(&v[i * d + h * dh..i * d + (h + 1) * dh]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SplitHeads { a, heads }, vec![heads, t, dh], out, rg))
    }

    /// `[H, T, dh]` → `[T, H·dh]`.
    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let [heads, t, dh] = shape[..] else {
            return Err(Error::ShapeMismatch(format!("merge_heads needs rank 3, got {shape:?}")));
        };
        let d = heads * dh;
        let v = self.value(a);
        let mut out = vec![0.0; v.len()];
        for h in 0..heads {
            for i in 0..t {
                out[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&v[(h * t + i) * dh..(h * t + i + 1) * dh]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::MergeHeads(a), vec![t, d], out, rg))
    }

    /// Selected rows of a rank-2 tensor.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let [m, n] = shape[..] else {
            return Err(Error::ShapeMismatch(format!("select_rows needs rank 2, got {shape:?}")));
        };
        if rows.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::ShapeMismatch(format!("row {bad} out of range for {m} rows")));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&v[r * n..(r + 1) * n]);
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SelectRows { a, rows: rows.to_vec() }, vec![rows.len(), n], out, rg))
    }

    /// Stacks rank-1 (`[n]`) or rank-2 (`[m_i, n]`) tensors along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput)?;
        let (_, n) = rows_cols(self.shape(first));
        let mut out = Vec::new();
        let mut rg = false;
        for &p in parts {
            let s = self.shape(p);
            if s.len() > 2 || *s.last().unwrap() != n {
                return Err(mismatch("concat_rows", self.shape(first), s));
            }
            out.extend_from_slice(self.value(p));
            rg |= self.rg(p);
        }
        let m = out.len() / n;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), vec![m, n], out, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = check_shape(shape)?;
        if n != self.value(a).len() {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), shape.to_vec(), out, rg))
    }

    // ---- reductions / losses ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), vec![1], vec![s], rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Op::Mean(a), vec![1], vec![s], rg)
    }

    /// Mean over rows of `-log softmax(logits)[target]`, log-sum-exp stabilized.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [n, c] = shape[..] else {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy logits must be [N, C], got {shape:?}"
            )));
        };
        if targets.len() != n {
            return Err(Error::LengthMismatch(targets.len(), n));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::TargetOutOfRange {
                target: bad,
                classes: c,
            });
        }
        let lv = self.value(logits);
        if lv.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput("cross_entropy"));
        }
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / n as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            vec![1],
            vec![loss],
            rg,
        ))
    }

    // ---- backward ----

    /// Propagates d(loss)/d(node) to every leaf that requires grad. Leaf
    /// gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::NotScalar(node.shape.clone()));
        }
        if matches!(node.op, Op::Leaf) || !node.requires_grad {
            return Err(Error::DetachedGraph);
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&mut self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        let len_of = |v: Var| nodes[v.0].value.len();
        let rg = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {
                let slot = accumulate(&mut self.leaf_grads[idx], g.len());
                slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            &Op::MatMul { a, b, trans_b } => {
                let (batches, m, k) = as_batched(&nodes[a.0].shape).unwrap();
                let n = *node.shape.last().unwrap();
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if rg(a) {
                    let ga = accumulate(&mut grads[a.0], av.len());
                    for i in 0..batches {
                        let g_i = &g[i * m * n..(i + 1) * m * n];
                        let b_i = &bv[i * k * n..(i + 1) * k * n];
                        // dA = dC · op(B)ᵀ
                        let bt = if trans_b {
                            View::row_major(b_i, k)
                        } else {
                            View::transposed(b_i, n)
                        };
                        gemm(
                            m,
                            n,
                            k,
                            View::row_major(g_i, n),
                            bt,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                }
                if rg(b) {
                    let gb = accumulate(&mut grads[b.0], bv.len());
                    for i in 0..batches {
                        let g_i = &g[i * m * n..(i + 1) * m * n];
                        let a_i = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // dB[n,k] = dCᵀ · A
                            gemm(n, m, k, View::transposed(g_i, n), View::row_major(a_i, k), out, true);
                        } else {
                            // dB[k,n] = Aᵀ · dC
                            gemm(k, m, n, View::transposed(a_i, k), View::row_major(g_i, n), out, true);
                        }
                    }
                }
            }
            &Op::Transpose(a) => {
                let (bt, m, n) = as_batched(&nodes[a.0].shape).unwrap();
                let ga = accumulate(&mut grads[a.0], len_of(a));
                for b in 0..bt {
                    let off = b * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            ga[off + i * n + j] += g[off + j * m + i];
                        }
                    }
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if rg(b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                }
            }
            &Op::Mul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let bcast = bv.len() == 1 && av.len() != 1;
                if rg(a) {
                    let ga = accumulate(&mut grads[a.0], av.len());
                    if bcast {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * bv[0]);
                    } else {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    }
                }
                if rg(b) {
                    let gb = accumulate(&mut grads[b.0], bv.len());
                    if bcast {
                        gb[0] += g.iter().zip(av).map(|(x, y)| x * y).sum::<f64>();
                    } else {
                        for i in 0..gb.len() {
                            gb[i] += g[i] * av[i];
                        }
                    }
                }
            }
            &Op::Scale(a, s) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
            }
            &Op::AddBias(a, bias) => {
                let cols = len_of(bias);
                if rg(a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if rg(bias) {
                    let gb = accumulate(&mut grads[bias.0], cols);
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Gelu(a) => {
                let av = &nodes[a.0].value;
                let ga = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * gelu_grad(av[i]);
                }
            }
            &Op::Sigmoid(a) => {
                let y = &node.value;
                let ga = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let (rows, cols) = rows_cols(&node.shape);
                let ga = accumulate(&mut grads[a.0], g.len());
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..cols {
                        ga[r * cols + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let (rows, cols) = rows_cols(&node.shape);
                let gv = &nodes[gain.0].value;
                if rg(gain) {
                    let gg = accumulate(&mut grads[gain.0], cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if rg(bias) {
                    let gb = accumulate(&mut grads[bias.0], cols);
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
                if rg(x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    let inv_n = 1.0 / cols as f64;
                    for r in 0..rows {
                        let off = r * cols;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let d = g[off + c] * gv[c];
                            mean_d += d;
                            mean_dx += d * xhat[off + c];
                        }
                        mean_d *= inv_n;
                        mean_dx *= inv_n;
                        for c in 0..cols {
                            let d = g[off + c] * gv[c];
                            gx[off + c] += rstd[r] * (d - mean_d - xhat[off + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = *node.shape.last().unwrap();
                let gt = accumulate(&mut grads[table.0], len_of(*table));
                for (r, &i) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[i * d + c] += g[r * d + c];
                    }
                }
            }
            &Op::SplitHeads { a, heads } => {
                let [_, t, dh] = node.shape[..] else { unreachable!() };
                let d = heads * dh;
                let ga = accumulate(&mut grads[a.0], g.len());
                for h in 0..heads {
                    for i in 0..t {
                        for e in 0..dh {
                            ga[i * d + h * dh + e] += g[(h * t + i) * dh + e];
                        }
                    }
                }
            }
            &Op::MergeHeads(a) => {
                let [heads, t, dh] = nodes[a.0].shape[..] else {
                    unreachable!()
                };
                let d = heads * dh;
                let ga = accumulate(&mut grads[a.0], g.len());
                for h in 0..heads {
                    for i in 0..t {
                        for e in 0..dh {
                            ga[(h * t + i) * dh + e] += g[i * d + h * dh + e];
                        }
                    }
                }
            }
            Op::SelectRows { a, rows } => {
                let n = *node.shape.last().unwrap();
                let ga = accumulate(&mut grads[a.0], len_of(*a));
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..n {
                        ga[r * n + c] += g[k * n + c];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = len_of(p);
                    if rg(p) {
                        let gp = accumulate(&mut grads[p.0], len);
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(a, b)| *a += b);
                    }
                    off += len;
                }
            }
            &Op::Reshape(a) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            &Op::Sum(a) => {
                let ga = accumulate(&mut grads[a.0], len_of(a));
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            &Op::Mean(a) => {
                let n = len_of(a);
                let ga = accumulate(&mut grads[a.0], n);
                let s = g[0] / n as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = nodes[logits.0].shape[1];
                let n = targets.len() as f64;
                let gl = accumulate(&mut grads[logits.0], probs.len());
                let s = g[0] / n;
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let y = if j == t { 1.0 } else { 0.0 };
                        gl[r * c + j] += s * (probs[r * c + j] - y);
                    }
                }
            }
        }
    }
}
