//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass together with the
//! activations its backward rule needs. [`Tape::backward`] replays the record
//! in reverse exactly once and returns a [`Gradients`] table, which can be
//! accumulated into a [`ParamStore`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, gemm_at, gemm_bt, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Leaf,
    Param,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    AddGroup(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Elu(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var, f64),
    Clamp(Var, f64, f64),
    Softmax(Var, f64),
    RowNormalize(Var),
    GcnNormalize(Var),
    RowL2Normalize(Var, f64),
    MeanRows(Var),
    SumAll(Var),
    RowSumSq(Var),
    Concat(Vec<Var>, usize),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    NodeNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Variance floor inside node normalisation.
pub const NODE_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Free differentiable leaf (gradients readable via [`Gradients::get`]).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a parameter once per tape; later calls return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Batched product `[B×m×k]·[B×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, m, k) = self.value(a).dims3()?;
        let (bb, k2, n) = self.value(b).dims3()?;
        if ba != bb || k != k2 {
            return Err(Error::dim("bmm", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; ba * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..ba {
                gemm(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[ba, m, n], out)?, Op::BatchMatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64, mk: fn(Var, Var) -> Op) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), op, f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, mk(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    /// Adds a `[d]`/`[1×d]` row to every row of `x` (any rank, last axis `d`).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(row).len() != d {
            return Err(Error::dim("add_row", self.shape(x), self.shape(row)));
        }
        let mut out = self.value(x).clone();
        {
            let r = self.value(row).data().to_vec();
            for chunk in out.data_mut().chunks_mut(d) {
                for (o, b) in chunk.iter_mut().zip(&r) {
                    *o += b;
                }
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    /// `x[g, i, :] + c[g, :]` for `x: [G×n×d]`, `c: [G×d]`.
    pub fn add_group(&mut self, x: Var, c: Var) -> Result<Var> {
        let (g, n, d) = self.value(x).dims3()?;
        let (g2, d2) = self.value(c).dims2()?;
        if g != g2 || d != d2 {
            return Err(Error::dim("add_group", self.shape(x), self.shape(c)));
        }
        let mut out = self.value(x).clone();
        {
            let cd = self.value(c).data().to_vec();
            let od = out.data_mut();
            for gi in 0..g {
                for i in 0..n {
                    let s = (gi * n + i) * d;
                    for k in 0..d {
                        od[s + k] += cd[gi * d + k];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(c);
        Ok(self.push(out, Op::AddGroup(x, c), rg))
    }

    /// Scales each row `i` of `x: [n×d]` by `c[i]` where `c: [n×1]`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(c).len() != n {
            return Err(Error::dim("mul_col", self.shape(x), self.shape(c)));
        }
        let mut out = self.value(x).clone();
        {
            let cd = self.value(c).data().to_vec();
            for (i, chunk) in out.data_mut().chunks_mut(d).enumerate() {
                for o in chunk {
                    *o *= cd[i];
                }
            }
        }
        let rg = self.rg(x) || self.rg(c);
        Ok(self.push(out, Op::MulCol(x, c), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { v.exp_m1() });
        let rg = self.rg(x);
        self.push(out, Op::Elu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// `ln(max(x, floor))`.
    pub fn log(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).map(|v| v.max(floor).ln());
        let rg = self.rg(x);
        self.push(out, Op::Log(x, floor), rg)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(out, Op::Clamp(x, lo, hi), rg)
    }

    /// Softmax of `scale·x` along the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var, scale: f64) -> Result<Var> {
        if scale.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Domain {
                op: "row_softmax",
                msg: format!("scale must be > 0, got {scale}"),
            });
        }
        let out = softmax_last(self.value(x), scale);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x, scale), rg))
    }

    /// Divides every row (last axis) by its sum.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let d = out.last_dim();
        for chunk in out.data_mut().chunks_mut(d) {
            let s: f64 = chunk.iter().sum();
            for v in chunk {
                *v /= s;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::RowNormalize(x), rg)
    }

    /// `D^{-1/2}(A + I)D^{-1/2}` per square slice, `D` the row sums of `A + I`.
    pub fn gcn_normalize(&mut self, adj: Var) -> Result<Var> {
        let a = self.value(adj);
        let n = a.last_dim();
        if a.rank() < 2 || a.shape()[a.rank() - 2] != n {
            return Err(Error::dim("gcn_normalize", a.shape(), &[n, n]));
        }
        let mut out = a.clone();
        for slice in out.data_mut().chunks_mut(n * n) {
            for i in 0..n {
                slice[i * n + i] += 1.0;
            }
            let r: Vec<f64> = (0..n)
                .map(|i| slice[i * n..(i + 1) * n].iter().sum::<f64>().powf(-0.5))
                .collect();
            for i in 0..n {
                for j in 0..n {
                    slice[i * n + j] *= r[i] * r[j];
                }
            }
        }
        let rg = self.rg(adj);
        Ok(self.push(out, Op::GcnNormalize(adj), rg))
    }

    /// Rows divided by `max(‖row‖₂, eps)`.
    pub fn row_l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let mut out = self.value(x).clone();
        let d = out.last_dim();
        for chunk in out.data_mut().chunks_mut(d) {
            let n = chunk.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            for v in chunk {
                *v /= n;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::RowL2Normalize(x, eps), rg)
    }

    /// Mean over the second-to-last axis: `[n×d] → [1×d]`, `[B×n×d] → [B×d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (b, n, d) = match t.shape()[..] {
            [n, d] => (1, n, d),
            [b, n, d] => (b, n, d),
            _ => return Err(Error::dim("mean_rows", t.shape(), &[0, 0])),
        };
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for i in 0..n {
                let row = &t.data()[(bi * n + i) * d..(bi * n + i + 1) * d];
                for (o, v) in out[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let shape = if t.rank() == 2 { vec![1, d] } else { vec![b, d] };
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MeanRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::SumAll(x), rg)
    }

    /// Squared L2 norm of each row: `[n×d] → [n×1]`.
    pub fn row_sum_sq(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, 1], data)?, Op::RowSumSq(x), rg))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::Domain {
                op: "concat",
                msg: format!("need at least one part and axis 0/1, got axis {axis}"),
            });
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.value(p).dims2())
            .collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        let out = if axis == 0 {
            if let Some(i) = dims.iter().position(|d| d.1 != c0) {
                return Err(Error::dim("concat", self.shape(parts[0]), self.shape(parts[i])));
            }
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new(&[rows, c0], data)?
        } else {
            if let Some(i) = dims.iter().position(|d| d.0 != r0) {
                return Err(Error::dim("concat", self.shape(parts[0]), self.shape(parts[i])));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::new(&[r0, cols], data)?
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Selects slices along the first axis.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let first = t.shape()[0];
        let stride = t.len() / first.max(1);
        if let Some(&bad) = idx.iter().find(|&&i| i >= first) {
            return Err(Error::dim("gather_rows", t.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start >= end || end > c {
            return Err(Error::dim("slice_cols", &[r, c], &[start, end]));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.value(x).row(i)[start..end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[r, w], data)?, Op::SliceCols(x, start, end), rg))
    }

    /// Standardises each column of `x: [M×d]` over its `M` rows, then applies
    /// `gamma ⊙ x̂ + beta`.
    pub fn node_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, d) = self.value(x).dims2()?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dim("node_norm", self.shape(x), self.shape(gamma)));
        }
        let (xhat, inv_std) = standardize_columns(self.value(x), m, d);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(d) {
            for k in 0..d {
                row[k] = row[k] * g[k] + b[k];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::NodeNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar (single-element) output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::dim("backward", lv.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.1;
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_bt(g.data(), self.value(*b).data(), &mut da, m, n, k);
                    self.acc(grads, *a, Tensor::new(&[m, k], da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_at(self.value(*a).data(), g.data(), &mut db, k, m, n);
                    self.acc(grads, *b, Tensor::new(&[k, n], db)?);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (bs, m, k) = self.value(*a).dims3()?;
                let n = self.value(*b).dims3()?.2;
                let (ad, bd, gd) = (self.value(*a).data(), self.value(*b).data(), g.data());
                if self.rg(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm_bt(
                            &gd[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.acc(grads, *a, Tensor::new(&[bs, m, k], da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm_at(
                            &ad[i * m * k..(i + 1) * m * k],
                            &gd[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    self.acc(grads, *b, Tensor::new(&[bs, k, n], db)?);
                }
            }
            Op::Transpose(x) => self.acc(grads, *x, g.transpose()?),
            Op::Reshape(x) => self.acc(grads, *x, g.reshape(self.shape(*x))?),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, g.zip_map(self.value(*b), "mul", |gv, bv| gv * bv)?);
                self.acc(grads, *b, g.zip_map(self.value(*a), "mul", |gv, av| gv * av)?);
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                self.acc(grads, *a, g.zip_map(bv, "div", |gv, b| gv / b)?);
                if self.rg(*b) {
                    let num = g.zip_map(self.value(*a), "div", |gv, a| gv * a)?;
                    self.acc(grads, *b, num.zip_map(bv, "div", |n, b| -n / (b * b))?);
                }
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, g.clone());
                if self.rg(*row) {
                    let d = g.last_dim();
                    let mut dr = vec![0.0; d];
                    for chunk in g.data().chunks(d) {
                        for (o, v) in dr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    self.acc(grads, *row, Tensor::new(self.shape(*row), dr)?);
                }
            }
            Op::AddGroup(x, c) => {
                self.acc(grads, *x, g.clone());
                if self.rg(*c) {
                    let (gn, n, d) = g.dims3()?;
                    let mut dc = vec![0.0; gn * d];
                    for gi in 0..gn {
                        for i in 0..n {
                            let s = (gi * n + i) * d;
                            for k in 0..d {
                                dc[gi * d + k] += g.data()[s + k];
                            }
                        }
                    }
                    self.acc(grads, *c, Tensor::new(&[gn, d], dc)?);
                }
            }
            Op::MulCol(x, c) => {
                let (n, d) = g.dims2()?;
                let cv = self.value(*c).data();
                let xv = self.value(*x).data();
                if self.rg(*x) {
                    let mut dx = g.clone();
                    for (i, chunk) in dx.data_mut().chunks_mut(d).enumerate() {
                        for v in chunk {
                            *v *= cv[i];
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.rg(*c) {
                    let dc = (0..n)
                        .map(|i| (0..d).map(|k| g.data()[i * d + k] * xv[i * d + k]).sum())
                        .collect();
                    self.acc(grads, *c, Tensor::new(self.shape(*c), dc)?);
                }
            }
            Op::Scale(x, s) => self.acc(grads, *x, g.map(|v| v * s)),
            Op::AddScalar(x) => self.acc(grads, *x, g.clone()),
            Op::Elu(x) => {
                let dx = g.zip_map(y, "elu", |gv, yv| if yv > 0.0 { gv } else { gv * (yv + 1.0) })?;
                self.acc(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = g.zip_map(self.value(*x), "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                self.acc(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = g.zip_map(y, "sigmoid", |gv, yv| gv * yv * (1.0 - yv))?;
                self.acc(grads, *x, dx);
            }
            Op::Log(x, floor) => {
                let dx = g.zip_map(self.value(*x), "log", |gv, xv| if xv > *floor { gv / xv } else { 0.0 })?;
                self.acc(grads, *x, dx);
            }
            Op::Clamp(x, lo, hi) => {
                let dx = g.zip_map(self.value(*x), "clamp", |gv, xv| {
                    if xv >= *lo && xv <= *hi {
                        gv
                    } else {
                        0.0
                    }
                })?;
                self.acc(grads, *x, dx);
            }
            Op::Softmax(x, scale) => {
                let d = y.last_dim();
                let mut dx = g.clone();
                for (dr, yr) in dx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                    let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (dv, yv) in dr.iter_mut().zip(yr) {
                        *dv = scale * yv * (*dv - dot);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::RowNormalize(x) => {
                let d = y.last_dim();
                let xv = self.value(*x);
                let mut dx = g.clone();
                for ((dr, xr), yr) in dx.data_mut().chunks_mut(d).zip(xv.data().chunks(d)).zip(y.data().chunks(d)) {
                    let s: f64 = xr.iter().sum();
                    let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for dv in dr.iter_mut() {
                        *dv = (*dv - dot) / s;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::GcnNormalize(adj) => {
                let av = self.value(*adj);
                let n = av.last_dim();
                let mut dx = vec![0.0; av.len()];
                for ((ga, aa), da) in g.data().chunks(n * n).zip(av.data().chunks(n * n)).zip(dx.chunks_mut(n * n)) {
                    let mut ah = aa.to_vec();
                    for i in 0..n {
                        ah[i * n + i] += 1.0;
                    }
                    let deg: Vec<f64> = (0..n).map(|i| ah[i * n..(i + 1) * n].iter().sum()).collect();
                    let r: Vec<f64> = deg.iter().map(|d| d.powf(-0.5)).collect();
                    let mut dr = vec![0.0; n];
                    for i in 0..n {
                        for j in 0..n {
                            let gij = ga[i * n + j];
                            da[i * n + j] += gij * r[i] * r[j];
                            dr[i] += gij * ah[i * n + j] * r[j];
                            dr[j] += gij * ah[i * n + j] * r[i];
                        }
                    }
                    for i in 0..n {
                        let dd = dr[i] * -0.5 * deg[i].powf(-1.5);
                        for j in 0..n {
                            da[i * n + j] += dd;
                        }
                    }
                }
                self.acc(grads, *adj, Tensor::new(av.shape(), dx)?);
            }
            Op::RowL2Normalize(x, eps) => {
                let d = y.last_dim();
                let xv = self.value(*x);
                let mut dx = g.clone();
                for ((dr, xr), yr) in dx.data_mut().chunks_mut(d).zip(xv.data().chunks(d)).zip(y.data().chunks(d)) {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > *eps {
                        let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (dv, yv) in dr.iter_mut().zip(yr) {
                            *dv = (*dv - yv * dot) / norm;
                        }
                    } else {
                        for dv in dr.iter_mut() {
                            *dv /= eps;
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::MeanRows(x) => {
                let xs = self.shape(*x).to_vec();
                let (b, n, d) = match xs[..] {
                    [n, d] => (1, n, d),
                    [b, n, d] => (b, n, d),
                    _ => unreachable!(),
                };
                let mut dx = vec![0.0; b * n * d];
                for bi in 0..b {
                    for i in 0..n {
                        for k in 0..d {
                            dx[(bi * n + i) * d + k] = g.data()[bi * d + k] / n as f64;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(&xs, dx)?);
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                self.acc(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::RowSumSq(x) => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let mut dx = xv.clone();
                for (i, chunk) in dx.data_mut().chunks_mut(d).enumerate() {
                    let gi = g.data()[i];
                    for v in chunk {
                        *v *= 2.0 * gi;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Concat(parts, axis) => {
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        let piece = Tensor::new(self.shape(p), g.data()[off..off + len].to_vec())?;
                        off += len;
                        self.acc(grads, p, piece);
                    }
                } else {
                    let (r, total) = g.dims2()?;
                    let mut col = 0;
                    for &p in parts {
                        let c = self.value(p).dims2()?.1;
                        let mut data = Vec::with_capacity(r * c);
                        for i in 0..r {
                            data.extend_from_slice(&g.data()[i * total + col..i * total + col + c]);
                        }
                        col += c;
                        self.acc(grads, p, Tensor::new(&[r, c], data)?);
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                let xs = self.shape(*x).to_vec();
                let stride = self.value(*x).len() / xs[0].max(1);
                let mut dx = vec![0.0; self.value(*x).len()];
                for (k, &i) in idx.iter().enumerate() {
                    for s in 0..stride {
                        dx[i * stride + s] += g.data()[k * stride + s];
                    }
                }
                self.acc(grads, *x, Tensor::new(&xs, dx)?);
            }
            Op::SliceCols(x, start, end) => {
                let (r, c) = self.value(*x).dims2()?;
                let w = end - start;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                self.acc(grads, *x, Tensor::new(&[r, c], dx)?);
            }
            Op::NodeNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, d) = xhat.dims2()?;
                let gam = self.value(*gamma).data();
                if self.rg(*gamma) {
                    let mut dg = vec![0.0; d];
                    for i in 0..m {
                        for k in 0..d {
                            dg[k] += g.data()[i * d + k] * xhat.data()[i * d + k];
                        }
                    }
                    self.acc(grads, *gamma, Tensor::new(self.shape(*gamma), dg)?);
                }
                if self.rg(*beta) {
                    let mut db = vec![0.0; d];
                    for chunk in g.data().chunks(d) {
                        for (o, v) in db.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    self.acc(grads, *beta, Tensor::new(self.shape(*beta), db)?);
                }
                if self.rg(*x) {
                    let mf = m as f64;
                    let mut dx = vec![0.0; m * d];
                    for k in 0..d {
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for i in 0..m {
                            let gh = g.data()[i * d + k] * gam[k];
                            mean_g += gh;
                            mean_gx += gh * xhat.data()[i * d + k];
                        }
                        mean_g /= mf;
                        mean_gx /= mf;
                        for i in 0..m {
                            let gh = g.data()[i * d + k] * gam[k];
                            dx[i * d + k] = inv_std[k] * (gh - mean_g - xhat.data()[i * d + k] * mean_gx);
                        }
                    }
                    self.acc(grads, *x, Tensor::new(&[m, d], dx)?);
                }
            }
        }
        Ok(())
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds the gradient of every parameter recorded on `tape` into `store`.
    pub fn accumulate(&self, tape: &Tape, store: &mut ParamStore) {
        for (&id, &v) in &tape.param_vars {
            if let Some(g) = self.get(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }

    /// Gradients aligned with the store's parameter order (zeros where unused).
    pub fn param_grads(&self, tape: &Tape, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        for (&id, &v) in &tape.param_vars {
            if let Some(g) = self.get(v) {
                out[id].add_assign(g);
            }
        }
        out
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Softmax of `scale·x` along the last axis.
pub fn softmax_last(x: &Tensor, scale: f64) -> Tensor {
    let mut out = x.clone();
    let d = out.last_dim();
    for chunk in out.data_mut().chunks_mut(d) {
        let m = chunk.iter().map(|v| v * scale).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in chunk.iter_mut() {
            *v = (*v * scale - m).exp();
            s += *v;
        }
        for v in chunk.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn standardize_columns(x: &Tensor, m: usize, d: usize) -> (Tensor, Vec<f64>) {
    let mf = m as f64;
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v;
        }
    }
    for a in &mut mean {
        *a /= mf;
    }
    let mut var = vec![0.0; d];
    for row in x.data().chunks(d) {
        for k in 0..d {
            var[k] += (row[k] - mean[k]).powi(2);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / mf + NODE_NORM_EPS).sqrt()).collect();
    let mut xhat = x.clone();
    for row in xhat.data_mut().chunks_mut(d) {
        for k in 0..d {
            row[k] = (row[k] - mean[k]) * inv_std[k];
        }
    }
    (xhat, inv_std)
}
