//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles.
//! Leaves are created with [`Graph::leaf`]; a leaf that does not require a
//! gradient (a frozen weight, a mask, a cached reference feature) prunes the
//! backward sweep through every node that depends only on such leaves.
//! [`Graph::backward`] never mutates the tape, so repeated sweeps over the same
//! recording give identical gradients.

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, validate_mask, Scalar, Tensor};
use crate::error::{MmrlError, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MulRow(Var, Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    QuickGelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    MeanRows(Var),
    SumRows(Var),
    Sum(Var),
    L2Normalize { x: Var, norms: Vec<T>, eps: T },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    Pick { x: Var, cols: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every leaf that requires one.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_SLOPE: f64 = 1.702;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a)?;
        let (m, k2) = self.dims(b)?;
        if k != k2 {
            return Err(MmrlError::Shape(format!("matmul_nt ({n}, {k}) x ({m}, {k2})^T")));
        }
        let mut out = vec![T::zero(); n * m];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).scale(s);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Scale(x, s), rg))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row(self.value(bias))?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    /// Multiplies every row of `x` elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let g = self.value(gain);
        if g.len() != c {
            return Err(MmrlError::Shape(format!("row gain of {:?} onto ({r}, {c})", g.shape())));
        }
        let mut out = self.value(x).data().to_vec();
        for i in 0..r {
            for (o, &s) in out[i * c..(i + 1) * c].iter_mut().zip(g.data()) {
                *o = *o * s;
            }
        }
        let rg = self.rg(&[x, gain]);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::MulRow(x, gain), rg))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        let mut inv_std = Vec::with_capacity(r);
        let inv_c = T::one() / T::of(c as f64);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let inv = T::one() / (var + eps).sqrt();
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::LayerNorm { x, inv_std }, rg))
    }

    /// `x * sigmoid(1.702 x)`.
    pub fn quick_gelu(&mut self, x: Var) -> Result<Var> {
        let k = T::of(GELU_SLOPE);
        let value = self.value(x).map(|v| v * sigmoid(k * v));
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::QuickGelu(x), rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = super::tensor::softmax_rows(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let mut out = self.value(x).data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::LogSoftmax(x), rg))
    }

    /// Mean over rows: (n, c) -> (1, c).
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.dims(x)?;
        let value = self.value(x).mean_rows()?.reshape(vec![1, c])?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MeanRows(x), rg))
    }

    /// Sum within each row: (n, c) -> (n, 1).
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let src = self.value(x).data();
        let out = (0..r).map(|i| src[i * c..(i + 1) * c].iter().copied().sum()).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![r, 1], out)?, Op::SumRows(x), rg))
    }

    /// Sum of every entry: -> (1, 1).
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![1, 1], vec![total])?, Op::Sum(x), rg))
    }

    /// Mean of every entry: -> (1, 1).
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// `x / (||x|| + eps)` per row.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let denom = n + eps;
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v / denom;
            }
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::L2Normalize { x, norms, eps }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if start + len > c || len == 0 {
            return Err(MmrlError::Shape(format!(
                "column slice {start}..{} of {c} columns",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| MmrlError::Shape("empty concatenation".into()))?;
        let r = self.dims(*first)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p)?;
            if pr != r {
                return Err(MmrlError::Shape(format!("concat cols height {pr} != {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, c) = self.dims(table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(MmrlError::Range {
                what: "embedding id",
                index: bad,
                lo: 0,
                hi: v - 1,
            });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            out.extend_from_slice(&src[id * c..(id + 1) * c]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), c], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// One entry per row: (n, c) -> (n, 1) with `out[i] = x[i, cols[i]]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if cols.len() != r {
            return Err(MmrlError::Shape(format!("{} picks for {r} rows", cols.len())));
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(MmrlError::Range {
                what: "column pick",
                index: bad,
                lo: 0,
                hi: c - 1,
            });
        }
        let src = self.value(x).data();
        let out = cols.iter().enumerate().map(|(i, &j)| src[i * c + j]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![r, 1], out)?, Op::Pick { x, cols: cols.to_vec() }, rg))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries, keys and values. `mask` is an additive (n, n) constant.
    pub fn multi_head_attention(&mut self, q: Var, k: Var, v: Var, mask: Option<Var>, heads: usize) -> Result<Var> {
        let (n, d) = self.dims(q)?;
        if heads == 0 || d % heads != 0 {
            return Err(MmrlError::Shape(format!("width {d} not divisible by {heads} heads")));
        }
        if self.dims(k)? != (n, d) || self.dims(v)? != (n, d) {
            return Err(MmrlError::Shape("q, k, v shapes differ".into()));
        }
        if let Some(m) = mask {
            if self.dims(m)? != (n, n) {
                return Err(MmrlError::Shape(format!(
                    "mask {:?} for sequence length {n}",
                    self.value(m).shape()
                )));
            }
            validate_mask(self.value(m))?;
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.slice_cols(q, h * dh, dh)?,
                    self.slice_cols(k, h * dh, dh)?,
                    self.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = self.matmul_nt(qh, kh)?;
            let mut scores = self.scale(scores, scale)?;
            if let Some(m) = mask {
                scores = self.add(scores, m)?;
            }
            let weights = self.softmax_rows(scores)?;
            outs.push(self.matmul(weights, vh)?);
        }
        if heads == 1 {
            Ok(outs[0])
        } else {
            self.concat_cols(&outs)
        }
    }

    /// Reverse sweep from a (1, 1) output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(MmrlError::Shape(format!(
                "backward needs a scalar output, got {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("leaf gradient shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a)?;
                let m = self.dims(*b)?.1;
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); n * k];
                    matmul_nt_into(g, self.value(*b).data(), &mut ga, n, m, k);
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * m];
                    matmul_tn_into(self.value(*a).data(), g, &mut gb, k, n, m);
                    accumulate(grads, *b, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                // out = a b^T, a: (n, k), b: (m, k)
                let (n, k) = self.dims(*a)?;
                let m = self.dims(*b)?.0;
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); n * k];
                    matmul_into(g, self.value(*b).data(), &mut ga, n, m, k);
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); m * k];
                    matmul_tn_into(g, self.value(*a).data(), &mut gb, m, n, k);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.dims(*x)?;
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let gb = self.value(*b).data();
                    accumulate(grads, *a, g.iter().zip(gb).map(|(&x, &y)| x * y).collect());
                }
                if self.wants(*b) {
                    let ga = self.value(*a).data();
                    accumulate(grads, *b, g.iter().zip(ga).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(x, s) => {
                accumulate(grads, *x, g.iter().map(|&v| v * *s).collect());
            }
            Op::AddRow(x, bias) => {
                let (r, c) = self.dims(*x)?;
                if self.wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if self.wants(*bias) {
                    let mut gb = vec![T::zero(); c];
                    for i in 0..r {
                        for (o, &v) in gb.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *o = *o + v;
                        }
                    }
                    accumulate(grads, *bias, gb);
                }
            }
            Op::MulRow(x, gain) => {
                let (r, c) = self.dims(*x)?;
                let s = self.value(*gain).data();
                if self.wants(*x) {
                    let mut gx = g.to_vec();
                    for i in 0..r {
                        for (o, &sv) in gx[i * c..(i + 1) * c].iter_mut().zip(s) {
                            *o = *o * sv;
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if self.wants(*gain) {
                    let xv = self.value(*x).data();
                    let mut gs = vec![T::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            gs[j] = gs[j] + g[i * c + j] * xv[i * c + j];
                        }
                    }
                    accumulate(grads, *gain, gs);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let (r, c) = self.dims(*x)?;
                let inv_c = T::one() / T::of(c as f64);
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    let yr = &out[i * c..(i + 1) * c];
                    let mean_g = gr.iter().copied().sum::<T>() * inv_c;
                    let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_c;
                    for j in 0..c {
                        gx[i * c + j] = inv_std[i] * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::QuickGelu(x) => {
                let k = T::of(GELU_SLOPE);
                let xv = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| {
                        let s = sigmoid(k * v);
                        gv * (s + k * v * s * (T::one() - s))
                    })
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let (r, c) = self.dims(*x)?;
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    let yr = &out[i * c..(i + 1) * c];
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..c {
                        gx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let (r, c) = self.dims(*x)?;
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    let total = gr.iter().copied().sum::<T>();
                    let mut p: Vec<T> = out[i * c..(i + 1) * c].to_vec();
                    for v in p.iter_mut() {
                        *v = v.exp();
                    }
                    for j in 0..c {
                        gx[i * c + j] = gr[j] - p[j] * total;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::MeanRows(x) => {
                let (r, c) = self.dims(*x)?;
                let inv = T::one() / T::of(r as f64);
                let mut gx = Vec::with_capacity(r * c);
                for _ in 0..r {
                    gx.extend(g.iter().map(|&v| v * inv));
                }
                accumulate(grads, *x, gx);
            }
            Op::SumRows(x) => {
                let (r, c) = self.dims(*x)?;
                let mut gx = Vec::with_capacity(r * c);
                for &gv in g.iter().take(r) {
                    gx.extend(std::iter::repeat_n(gv, c));
                }
                accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::L2Normalize { x, norms, eps } => {
                let (r, c) = self.dims(*x)?;
                let xv = self.value(*x).data();
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    let n = norms[i];
                    let denom = n + *eps;
                    let xr = &xv[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    let corr = if n > T::zero() {
                        dot / (denom * denom * n)
                    } else {
                        T::zero()
                    };
                    for j in 0..c {
                        gx[i * c + j] = gr[j] / denom - xr[j] * corr;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.dims(*x)?;
                let mut gx = vec![T::zero(); r * c];
                gx[start * c..start * c + g.len()].copy_from_slice(g);
                accumulate(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.wants(p) {
                        accumulate(grads, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.dims(*x)?;
                let w = node.value.cols();
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p)?.1;
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::Gather { table, ids } => {
                let (v, c) = self.dims(*table)?;
                let mut gt = vec![T::zero(); v * c];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        gt[id * c + j] = gt[id * c + j] + g[i * c + j];
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::Pick { x, cols } => {
                let (r, c) = self.dims(*x)?;
                let mut gx = vec![T::zero(); r * c];
                for (i, &j) in cols.iter().enumerate() {
                    gx[i * c + j] = g[i];
                }
                accumulate(grads, *x, gx);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e = *e + c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}
