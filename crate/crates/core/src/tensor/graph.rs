//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation pushes its
//! output after its inputs, so the append order is a topological order and
//! `backward` is a single reverse sweep.

use super::kernels::{self, add_into, mm_nn, mm_nt, mm_tn};
use super::Tensor;
use crate::error::{Error, Result};
use crate::par;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape {
        x: Var,
    },
    TransposeBlocks {
        x: Var,
        blocks: usize,
        rows: usize,
        cols: usize,
    },
    SplitHeads {
        x: Var,
        dims: HeadDims,
    },
    MergeHeads {
        x: Var,
        dims: HeadDims,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        idx: Vec<usize>,
    },
    GatherColumn {
        x: Var,
        rows: Vec<usize>,
        col: usize,
    },
    MulRows {
        x: Var,
        w: Var,
    },
    WeightedSum {
        x: Var,
        w: Vec<f64>,
    },
    Sum {
        x: Var,
    },
}

#[derive(Debug, Clone, Copy)]
struct HeadDims {
    batch: usize,
    tokens: usize,
    heads: usize,
    head_dim: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation graph with value storage and gradient buffers.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    macs: u64,
    relu_margin: f64,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            relu_margin: f64::INFINITY,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of all matrix products recorded so far.
    pub fn forward_macs(&self) -> u64 {
        self.macs
    }

    /// Smallest |pre-activation| seen by any ReLU in this graph.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let c = mm_nn(self.data(a), self.data(b), m, k, n);
        self.macs += (m * k * n) as u64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], c),
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    /// Batched product of `[batch, m, k]` with `[batch, k, n]`, or with
    /// `[batch, n, k]` transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[batch, m, k], &[batch2, r, c]) = (&sa[..], &sb[..]) else {
            return Err(Error::shape("bmm", &sa, &sb));
        };
        let (k2, n) = if trans_b { (c, r) } else { (r, c) };
        if batch != batch2 || k != k2 {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; batch * m * n];
        par::for_each_row(&mut out, m * n, batch * m * k * n, |i, dst| {
            let ab = &ad[i * m * k..(i + 1) * m * k];
            let bb = &bd[i * k * n..(i + 1) * k * n];
            let prod = if trans_b {
                mm_nt(ab, bb, m, k, n)
            } else {
                mm_nn(ab, bb, m, k, n)
            };
            dst.copy_from_slice(&prod);
        });
        self.macs += (batch * m * k * n) as u64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2();
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            add_into(row, b);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_parts(shape, data), Op::Scale { x, c }, rg)
    }

    /// Elementwise `max(0, x)`; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.data(x);
        let margin = src.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let data = src.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        self.relu_margin = self.relu_margin.min(margin);
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_parts(shape, data), Op::Relu { x }, rg)
    }

    /// Row-wise softmax over the last axis.
    ///
    /// `keep`, when given, marks the entries that take part; the others are
    /// treated as `-inf` logits and come out as exact zeros.
    pub fn softmax_rows(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if let Some(k) = keep {
            if k.len() != m * n {
                return Err(Error::shape("softmax_rows", self.shape(x), &[k.len()]));
            }
        }
        let src = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let kept = |j: usize| keep.is_none_or(|k| k[i * n + j]);
            let max = (0..n)
                .filter(|&j| kept(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Routing(format!(
                    "softmax row {i} has no unmasked entry"
                )));
            }
            let dst = &mut out[i * n..(i + 1) * n];
            let mut total = 0.0;
            for j in 0..n {
                if kept(j) {
                    dst[j] = (row[j] - max).exp();
                    total += dst[j];
                }
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x }, rg))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// per-column `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (m, n) = self.value(x).dims2();
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let (src, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Transposes each `rows×cols` block of a `[blocks·rows, cols]` matrix,
    /// giving `[blocks·cols, rows]`.
    pub fn transpose_blocks(&mut self, x: Var, rows: usize) -> Result<Var> {
        let (total, cols) = self.value(x).dims2();
        if rows == 0 || total % rows != 0 {
            return Err(Error::shape("transpose_blocks", self.shape(x), &[rows]));
        }
        let blocks = total / rows;
        let out = block_transpose(self.data(x), blocks, rows, cols);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![blocks * cols, rows], out),
            Op::TransposeBlocks {
                x,
                blocks,
                rows,
                cols,
            },
            rg,
        ))
    }

    /// `[batch·tokens, heads·head_dim]` → `[batch·heads, tokens, head_dim]`.
    pub fn split_heads(&mut self, x: Var, tokens: usize, heads: usize) -> Result<Var> {
        let (total, width) = self.value(x).dims2();
        if tokens == 0 || heads == 0 || total % tokens != 0 || width % heads != 0 {
            return Err(Error::shape("split_heads", self.shape(x), &[tokens, heads]));
        }
        let dims = HeadDims {
            batch: total / tokens,
            tokens,
            heads,
            head_dim: width / heads,
        };
        let out = permute_heads(self.data(x), dims, true);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![dims.batch * heads, tokens, dims.head_dim], out),
            Op::SplitHeads { x, dims },
            rg,
        ))
    }

    /// Inverse of [`split_heads`](Self::split_heads).
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [bh, tokens, head_dim] = s[..] else {
            return Err(Error::shape("merge_heads", &s, &[heads]));
        };
        if heads == 0 || bh % heads != 0 {
            return Err(Error::shape("merge_heads", &s, &[heads]));
        }
        let dims = HeadDims {
            batch: bh / heads,
            tokens,
            heads,
            head_dim,
        };
        let out = permute_heads(self.data(x), dims, false);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![dims.batch * tokens, heads * head_dim], out),
            Op::MergeHeads { x, dims },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if idx.is_empty() || idx.iter().any(|&i| i >= m) {
            return Err(Error::Contract(format!(
                "gather_rows: indices must be nonempty and < {m}"
            )));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), n], out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Places row `r` of `x` at row `idx[r]` of a zero `[total, n]` matrix
    /// (rows sharing an index are summed).
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], total: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if idx.len() != m || idx.iter().any(|&i| i >= total) {
            return Err(Error::shape("scatter_rows", self.shape(x), &[idx.len(), total]));
        }
        let src = self.data(x);
        let mut out = vec![0.0; total * n];
        for (r, &i) in idx.iter().enumerate() {
            add_into(&mut out[i * n..(i + 1) * n], &src[r * n..(r + 1) * n]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![total, n], out),
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Picks `x[rows[i], col]` into a vector.
    pub fn gather_column(&mut self, x: Var, rows: &[usize], col: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if rows.is_empty() || col >= n || rows.iter().any(|&r| r >= m) {
            return Err(Error::Contract(format!(
                "gather_column: bad index for {m}x{n} matrix"
            )));
        }
        let src = self.data(x);
        let out = rows.iter().map(|&r| src[r * n + col]).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len()], out),
            Op::GatherColumn {
                x,
                rows: rows.to_vec(),
                col,
            },
            rg,
        ))
    }

    /// Scales row `i` of an `m×n` matrix by `w[i]`.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.shape(w) != [m] {
            return Err(Error::shape("mul_rows", self.shape(x), self.shape(w)));
        }
        let wd = self.data(w);
        let mut out = self.data(x).to_vec();
        for (row, &s) in out.chunks_mut(n).zip(wd) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MulRows { x, w }, rg))
    }

    /// `Σ x ⊙ w` for a constant weight array; returns a scalar node.
    pub fn weighted_sum(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        if w.len() != self.value(x).len() {
            return Err(Error::shape("weighted_sum", self.shape(x), &[w.len()]));
        }
        let s = kernels::dot(self.data(x), w);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum { x, w: w.to_vec() },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Populates gradients of `loss` with respect to every node that requires
    /// them. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => add_into(existing, &g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Pending accumulations are collected first so the op can borrow
        // node values immutably.
        let mut updates: Vec<(Var, Vec<f64>)> = Vec::with_capacity(2);
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    updates.push((a, mm_nt(g, self.data(b), m, n, k)));
                }
                if self.wants(b) {
                    updates.push((b, mm_tn(self.data(a), g, m, k, n)));
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if self.wants(a) {
                    let mut da = vec![0.0; batch * m * k];
                    par::for_each_row(&mut da, m * k, batch * m * k * n, |s, dst| {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let bs = &bd[s * k * n..(s + 1) * k * n];
                        let r = if trans_b {
                            mm_nn(gs, bs, m, n, k)
                        } else {
                            mm_nt(gs, bs, m, n, k)
                        };
                        dst.copy_from_slice(&r);
                    });
                    updates.push((a, da));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; batch * k * n];
                    par::for_each_row(&mut db, k * n, batch * m * k * n, |s, dst| {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let as_ = &ad[s * m * k..(s + 1) * m * k];
                        let r = if trans_b {
                            mm_tn(gs, as_, m, n, k)
                        } else {
                            mm_tn(as_, gs, m, k, n)
                        };
                        dst.copy_from_slice(&r);
                    });
                    updates.push((b, db));
                }
            }
            &Op::Add(a, b) => {
                updates.push((a, g.to_vec()));
                updates.push((b, g.to_vec()));
            }
            &Op::Sub(a, b) => {
                updates.push((a, g.to_vec()));
                updates.push((b, g.iter().map(|v| -v).collect()));
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                updates.push((a, g.iter().zip(bd).map(|(x, y)| x * y).collect()));
                updates.push((b, g.iter().zip(ad).map(|(x, y)| x * y).collect()));
            }
            &Op::AddBias { x, bias } => {
                let n = self.shape(bias)[0];
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    add_into(&mut db, row);
                }
                updates.push((x, g.to_vec()));
                updates.push((bias, db));
            }
            &Op::Scale { x, c } => updates.push((x, g.iter().map(|v| v * c).collect())),
            &Op::Relu { x } => {
                let dx = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                updates.push((x, dx));
            }
            &Op::Softmax { x } => {
                let (m, n) = self.nodes[i].value.dims2();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let (y, dy) = (&out[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let s = kernels::dot(y, dy);
                    for j in 0..n {
                        dx[r * n + j] = y[j] * (dy[j] - s);
                    }
                }
                updates.push((x, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = self.nodes[i].value.dims2();
                let gd = self.data(*gain);
                let mut dx = vec![0.0; m * n];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for r in 0..m {
                    let (h, dy) = (&xhat[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..n {
                        let dh = dy[j] * gd[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                        dg[j] += dy[j] * h[j];
                        db[j] += dy[j];
                    }
                    mean_dh /= n as f64;
                    mean_dh_h /= n as f64;
                    for j in 0..n {
                        let dh = dy[j] * gd[j];
                        dx[r * n + j] = inv_std[r] * (dh - mean_dh - h[j] * mean_dh_h);
                    }
                }
                updates.push((*x, dx));
                updates.push((*gain, dg));
                updates.push((*bias, db));
            }
            &Op::Reshape { x } => updates.push((x, g.to_vec())),
            &Op::TransposeBlocks {
                x,
                blocks,
                rows,
                cols,
            } => updates.push((x, block_transpose(g, blocks, cols, rows))),
            &Op::SplitHeads { x, dims } => updates.push((x, permute_heads(g, dims, false))),
            &Op::MergeHeads { x, dims } => updates.push((x, permute_heads(g, dims, true))),
            Op::GatherRows { x, idx } => {
                let (m, n) = self.value(*x).dims2();
                let mut dx = vec![0.0; m * n];
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut dx[src * n..(src + 1) * n], &g[r * n..(r + 1) * n]);
                }
                updates.push((*x, dx));
            }
            Op::ScatterRows { x, idx } => {
                let n = self.value(*x).dims2().1;
                let mut dx = Vec::with_capacity(idx.len() * n);
                for &dst in idx {
                    dx.extend_from_slice(&g[dst * n..(dst + 1) * n]);
                }
                updates.push((*x, dx));
            }
            Op::GatherColumn { x, rows, col } => {
                let (m, n) = self.value(*x).dims2();
                let mut dx = vec![0.0; m * n];
                for (k, &r) in rows.iter().enumerate() {
                    dx[r * n + col] += g[k];
                }
                updates.push((*x, dx));
            }
            &Op::MulRows { x, w } => {
                let n = self.value(x).dims2().1;
                let (xd, wd) = (self.data(x), self.data(w));
                if self.wants(x) {
                    let mut dx = g.to_vec();
                    for (row, &s) in dx.chunks_mut(n).zip(wd) {
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    updates.push((x, dx));
                }
                let dw = g
                    .chunks(n)
                    .zip(xd.chunks(n))
                    .map(|(gr, xr)| kernels::dot(gr, xr))
                    .collect();
                updates.push((w, dw));
            }
            Op::WeightedSum { x, w } => {
                updates.push((*x, w.iter().map(|v| v * g[0]).collect()));
            }
            &Op::Sum { x } => {
                let len = self.value(x).len();
                updates.push((x, vec![g[0]; len]));
            }
        }
        for (v, gv) in updates {
            self.accumulate(v, gv);
        }
    }
}

fn block_transpose(src: &[f64], blocks: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(src.len());
    for b in 0..blocks {
        let block = &src[b * rows * cols..(b + 1) * rows * cols];
        out.extend(kernels::transpose(block, rows, cols));
    }
    out
}

/// `split = true`: `[b·t, h·d]` → `[b·h, t, d]`; `false` is the inverse.
fn permute_heads(src: &[f64], dims: HeadDims, split: bool) -> Vec<f64> {
    let HeadDims {
        batch,
        tokens,
        heads,
        head_dim,
    } = dims;
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        for t in 0..tokens {
            for h in 0..heads {
                let merged = (b * tokens + t) * heads * head_dim + h * head_dim;
                let split_at = ((b * heads + h) * tokens + t) * head_dim;
                let (from, to) = if split {
                    (merged, split_at)
                } else {
                    (split_at, merged)
                };
                out[to..to + head_dim].copy_from_slice(&src[from..from + head_dim]);
            }
        }
    }
    out
}
