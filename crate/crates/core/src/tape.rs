//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operator applied during a forward pass. Node ids
//! grow monotonically, so a reverse sweep over the node list visits each node
//! after all of its consumers. Parameter values are copied onto the tape when
//! first referenced; [`Tape::backward`] adds their gradients back into the
//! owning [`ParamStore`].

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{self, gemm};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gather index that produces a zero instead of reading the source.
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    Tanh,
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(ActivationKind::Relu),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "tanh" => Ok(ActivationKind::Tanh),
            other => Err(Error::Config(alloc::format!(
                "unknown activation kind {other:?}"
            ))),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    BatchedMatMul {
        a: Var,
        b: Var,
        groups: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Activation {
        x: Var,
        kind: ActivationKind,
    },
    Abs(Var),
    SoftmaxRows(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    RowBlock {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskMul {
        x: Var,
        mask: Vec<f64>,
    },
    GruCell {
        xp: Var,
        hp: Var,
        h: Var,
        r: Vec<f64>,
        z: Vec<f64>,
        n: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Tape::backward`] call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
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

    /// Constant input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is tracked (readable through [`Tape::grad`]).
    pub fn input_with_grad(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// References a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `x * w + bias` over the matrix view of `x`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        let (r, k) = (xs.rows(), xs.cols());
        if ws.shape().len() != 2 || ws.rows() != k {
            return Err(Error::shape("linear", xs.shape(), ws.shape()));
        }
        let n = ws.cols();
        let mut shape = xs.shape().to_vec();
        match shape.last_mut() {
            Some(last) => *last = n,
            None => shape.push(n),
        }
        let mut out = vec![0.0; r * n];
        let beta = if let Some(b) = bias {
            let bv = self.value(b);
            if bv.numel() != n {
                return Err(Error::shape("linear bias", ws.shape(), bv.shape()));
            }
            for row in out.chunks_exact_mut(n.max(1)) {
                row.copy_from_slice(bv.data());
            }
            1.0
        } else {
            0.0
        };
        gemm(r, k, n, xs.data(), k, 1, ws.data(), n, 1, beta, &mut out);
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Linear { x, w, bias }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear(a, b, None)
    }

    /// Independent products of `groups` stacked matrix pairs.
    ///
    /// `a` is `[groups*n, k]`; `b` is `[groups*k, m]`, or `[groups*m, k]`
    /// when `trans_b` is set. The result is `[groups*n, m]`.
    pub fn batched_matmul(&mut self, a: Var, b: Var, groups: usize, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let err = || Error::shape("batched_matmul", av.shape(), bv.shape());
        if groups == 0 || av.rows() % groups != 0 || bv.rows() % groups != 0 {
            return Err(err());
        }
        let n = av.rows() / groups;
        let k = av.cols();
        let m = if trans_b {
            if bv.cols() != k {
                return Err(err());
            }
            bv.rows() / groups
        } else {
            if bv.rows() / groups != k {
                return Err(err());
            }
            bv.cols()
        };
        let mut out = vec![0.0; groups * n * m];
        for g in 0..groups {
            let ag = &av.data()[g * n * k..(g + 1) * n * k];
            let bg = &bv.data()[g * k * m..(g + 1) * k * m];
            let og = &mut out[g * n * m..(g + 1) * n * m];
            if trans_b {
                gemm(n, k, m, ag, k, 1, bg, 1, k, 0.0, og);
            } else {
                gemm(n, k, m, ag, k, 1, bg, m, 1, 0.0, og);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(vec![groups * n, m], out)?;
        Ok(self.push(
            value,
            Op::BatchedMatMul {
                a,
                b,
                groups,
                trans_b,
            },
            rg,
        ))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| scale * v + shift).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same length");
        let rg = self.rg(x);
        self.push(t, Op::Affine { x, scale }, rg)
    }

    pub fn activation(&mut self, x: Var, kind: ActivationKind) -> Var {
        let xv = self.value(x);
        let f: fn(f64) -> f64 = match kind {
            ActivationKind::Relu => |v| if v > 0.0 { v } else { 0.0 },
            ActivationKind::Sigmoid => math::sigmoid,
            ActivationKind::Tanh => math::tanh,
        };
        let data = xv.data().iter().map(|v| f(*v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same length");
        let rg = self.rg(x);
        self.push(t, Op::Activation { x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, ActivationKind::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, ActivationKind::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, ActivationKind::Tanh)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.abs()).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same length");
        let rg = self.rg(x);
        self.push(t, Op::Abs(x), rg)
    }

    /// Row-wise softmax; `mask[i] == false` excludes entry `i`, which then
    /// comes out as exactly zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.len() != xv.numel() {
                return Err(Error::shape("softmax_rows mask", xv.shape(), &[m.len()]));
            }
        }
        let mut out = vec![0.0; xv.numel()];
        softmax_rows_into(xv.data(), xv.cols(), mask, &mut out)?;
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SoftmaxRows(x), rg))
    }

    /// `out[i] = x.flat[index[i]]`, or 0 for [`GATHER_ZERO`].
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::shape("gather", shape, &[index.len()]));
        }
        let src = xv.data();
        let mut out = Vec::with_capacity(n);
        for &i in &index {
            if i == GATHER_ZERO {
                out.push(0.0);
            } else if i < src.len() {
                out.push(src[i]);
            } else {
                return Err(Error::Index {
                    what: "gather",
                    index: i,
                    len: src.len(),
                });
            }
        }
        let t = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Gather { x, index }, rg))
    }

    /// Rows `start..start+rows` of the matrix view.
    pub fn row_block(&mut self, x: Var, start: usize, rows: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + rows > xv.rows() {
            return Err(Error::Index {
                what: "row_block",
                index: start + rows,
                len: xv.rows(),
            });
        }
        let t = Tensor::new(vec![rows, c], xv.data()[start * c..(start + rows) * c].to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::RowBlock { x, start }, rg))
    }

    /// Columns `start..start+width` of the matrix view.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + width > c {
            return Err(Error::Index {
                what: "slice_cols",
                index: start + width,
                len: c,
            });
        }
        let mut out = Vec::with_capacity(xv.rows() * width);
        for row in xv.data().chunks_exact(c) {
            out.extend_from_slice(&row[start..start + width]);
        }
        let t = Tensor::new(vec![xv.rows(), width], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |p| self.value(*p).rows());
        let mut width = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.rows() != rows {
                return Err(Error::shape("concat_cols", &[rows], pv.shape()));
            }
            width += pv.cols();
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, width], out)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |p| self.value(*p).cols());
        let mut out = Vec::new();
        for p in parts {
            let pv = self.value(*p);
            if pv.cols() != cols {
                return Err(Error::shape("concat_rows", &[cols], pv.shape()));
            }
            out.extend_from_slice(pv.data());
        }
        let rows = out.len() / cols.max(1);
        let t = Tensor::new(vec![rows, cols], out)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Per-row normalization to zero mean and unit variance, then
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.numel() != c || bv.numel() != c {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / math::sqrt(var + eps);
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. Outside training, or with `p == 0`, returns `x`
    /// itself so inference is exactly the identity.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(alloc::format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MaskMul { x, mask }, rg))
    }

    /// One gated recurrent update.
    ///
    /// `xp = x W_i + b_i` and `hp = h W_h + b_h` are `[B, 3D]` with gate
    /// blocks ordered reset, update, candidate; `h` is `[B, D]`.
    pub fn gru_cell(&mut self, xp: Var, hp: Var, h: Var) -> Result<Var> {
        let (xv, hpv, hv) = (self.value(xp), self.value(hp), self.value(h));
        let d = hv.cols();
        let b = hv.rows();
        if xv.cols() != 3 * d || hpv.cols() != 3 * d || xv.rows() != b || hpv.rows() != b {
            return Err(Error::shape("gru_cell", xv.shape(), hv.shape()));
        }
        let mut r = vec![0.0; b * d];
        let mut z = vec![0.0; b * d];
        let mut n = vec![0.0; b * d];
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            let xr = xv.row(i);
            let hr = hpv.row(i);
            let h0 = hv.row(i);
            for j in 0..d {
                let rj = math::sigmoid(xr[j] + hr[j]);
                let zj = math::sigmoid(xr[d + j] + hr[d + j]);
                let nj = math::tanh(xr[2 * d + j] + rj * hr[2 * d + j]);
                let o = i * d + j;
                r[o] = rj;
                z[o] = zj;
                n[o] = nj;
                out[o] = nj + zj * (h0[j] - nj);
            }
        }
        let t = Tensor::new(vec![b, d], out)?;
        let rg = self.rg(xp) || self.rg(hp) || self.rg(h);
        Ok(self.push(t, Op::GruCell { xp, hp, h, r, z, n }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.numel().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Back-propagates from the scalar `loss` and adds parameter gradients
    /// into `store`. Calling it again accumulates once more.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                let dst = store.get_mut(*id).grad.data_mut();
                if dst.len() != g.len() {
                    return Err(Error::Contract("parameter changed shape during backward".to_string()));
                }
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, bias } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (r, k, n) = (xv.rows(), xv.cols(), wv.cols());
                if let Some(dx) = self.slot(*x, grads) {
                    gemm(r, n, k, g, n, 1, wv.data(), 1, n, 1.0, dx);
                }
                if let Some(dw) = self.slot(*w, grads) {
                    gemm(k, r, n, xv.data(), 1, k, g, n, 1, 1.0, dw);
                }
                if let Some(b) = bias {
                    if let Some(db) = self.slot(*b, grads) {
                        for row in g.chunks_exact(n.max(1)) {
                            for (d, s) in db.iter_mut().zip(row) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::BatchedMatMul {
                a,
                b,
                groups,
                trans_b,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let groups = *groups;
                let n = av.rows() / groups;
                let k = av.cols();
                let m = node.value.cols();
                if let Some(da) = self.slot(*a, grads) {
                    for gi in 0..groups {
                        let gg = &g[gi * n * m..(gi + 1) * n * m];
                        let bg = &bv.data()[gi * k * m..(gi + 1) * k * m];
                        let dag = &mut da[gi * n * k..(gi + 1) * n * k];
                        if *trans_b {
                            gemm(n, m, k, gg, m, 1, bg, k, 1, 1.0, dag);
                        } else {
                            gemm(n, m, k, gg, m, 1, bg, 1, m, 1.0, dag);
                        }
                    }
                }
                if let Some(db) = self.slot(*b, grads) {
                    for gi in 0..groups {
                        let gg = &g[gi * n * m..(gi + 1) * n * m];
                        let ag = &av.data()[gi * n * k..(gi + 1) * n * k];
                        let dbg = &mut db[gi * k * m..(gi + 1) * k * m];
                        if *trans_b {
                            gemm(m, n, k, gg, 1, m, ag, k, 1, 1.0, dbg);
                        } else {
                            gemm(k, n, m, ag, 1, k, gg, m, 1, 1.0, dbg);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(*a, grads) {
                    axpy(da, 1.0, g);
                }
                if let Some(db) = self.slot(*b, grads) {
                    axpy(db, 1.0, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(*a, grads) {
                    axpy(da, 1.0, g);
                }
                if let Some(db) = self.slot(*b, grads) {
                    axpy(db, -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(*a, grads) {
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(db) = self.slot(*b, grads) {
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(dx) = self.slot(*x, grads) {
                    axpy(dx, *scale, g);
                }
            }
            Op::Activation { x, kind } => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(*x, grads) {
                    match kind {
                        ActivationKind::Relu => {
                            for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                                if *xi > 0.0 {
                                    *d += gi;
                                }
                            }
                        }
                        ActivationKind::Sigmoid => {
                            for ((d, gi), y) in dx.iter_mut().zip(g).zip(out) {
                                *d += gi * y * (1.0 - y);
                            }
                        }
                        ActivationKind::Tanh => {
                            for ((d, gi), y) in dx.iter_mut().zip(g).zip(out) {
                                *d += gi * (1.0 - y * y);
                            }
                        }
                    }
                }
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(*x, grads) {
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *d += gi;
                        } else if *xi < 0.0 {
                            *d -= gi;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let c = node.value.cols();
                if let Some(dx) = self.slot(*x, grads) {
                    for ((drow, grow), yrow) in dx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(out.chunks_exact(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                if let Some(dx) = self.slot(*x, grads) {
                    for (gi, &src) in g.iter().zip(index) {
                        if src != GATHER_ZERO {
                            dx[src] += gi;
                        }
                    }
                }
            }
            Op::RowBlock { x, start } => {
                let c = node.value.cols();
                if let Some(dx) = self.slot(*x, grads) {
                    axpy(&mut dx[start * c..start * c + g.len()], 1.0, g);
                }
            }
            Op::SliceCols { x, start } => {
                let w = node.value.cols();
                let c = self.value(*x).cols();
                if let Some(dx) = self.slot(*x, grads) {
                    for (drow, grow) in dx.chunks_exact_mut(c).zip(g.chunks_exact(w.max(1))) {
                        axpy(&mut drow[*start..*start + w], 1.0, grow);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let width = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if let Some(dp) = self.slot(*p, grads) {
                        for (drow, grow) in dp.chunks_exact_mut(pc.max(1)).zip(g.chunks_exact(width)) {
                            axpy(drow, 1.0, &grow[offset..offset + pc]);
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if let Some(dp) = self.slot(*p, grads) {
                        axpy(dp, 1.0, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let gv = self.value(*gamma).data();
                if let Some(dgamma) = self.slot(*gamma, grads) {
                    for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            dgamma[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(dbeta) = self.slot(*beta, grads) {
                    for grow in g.chunks_exact(c) {
                        axpy(dbeta, 1.0, grow);
                    }
                }
                if let Some(dx) = self.slot(*x, grads) {
                    let mut dh = vec![0.0; c];
                    for (r, ((drow, grow), hrow)) in dx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                        .enumerate()
                    {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..c {
                            dh[j] = grow[j] * gv[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hrow[j];
                        }
                        mean_dh /= c as f64;
                        mean_dh_h /= c as f64;
                        for j in 0..c {
                            drow[j] += inv_std[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::MaskMul { x, mask } => {
                if let Some(dx) = self.slot(*x, grads) {
                    for ((d, gi), m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::GruCell { xp, hp, h, r, z, n } => {
                let d = node.value.cols();
                let b = node.value.rows();
                let hpv = self.value(*hp).data();
                let hv = self.value(*h).data();
                // pre-activation gradients in [reset | update | candidate] order
                let mut dpre_x = vec![0.0; b * 3 * d];
                let mut dpre_hn = vec![0.0; b * d];
                let mut dh_direct = vec![0.0; b * d];
                for i in 0..b {
                    for j in 0..d {
                        let o = i * d + j;
                        let gi = g[o];
                        let (rj, zj, nj) = (r[o], z[o], n[o]);
                        let hn = hpv[i * 3 * d + 2 * d + j];
                        let dn = gi * (1.0 - zj);
                        let dz = gi * (hv[o] - nj);
                        dh_direct[o] = gi * zj;
                        let dpre_n = dn * (1.0 - nj * nj);
                        let dr = dpre_n * hn;
                        let dpre_r = dr * rj * (1.0 - rj);
                        let dpre_z = dz * zj * (1.0 - zj);
                        let row = i * 3 * d;
                        dpre_x[row + j] = dpre_r;
                        dpre_x[row + d + j] = dpre_z;
                        dpre_x[row + 2 * d + j] = dpre_n;
                        dpre_hn[o] = dpre_n * rj;
                    }
                }
                if let Some(dxp) = self.slot(*xp, grads) {
                    axpy(dxp, 1.0, &dpre_x);
                }
                if let Some(dhp) = self.slot(*hp, grads) {
                    for i in 0..b {
                        let row = i * 3 * d;
                        for j in 0..d {
                            dhp[row + j] += dpre_x[row + j];
                            dhp[row + d + j] += dpre_x[row + d + j];
                            dhp[row + 2 * d + j] += dpre_hn[i * d + j];
                        }
                    }
                }
                if let Some(dh) = self.slot(*h, grads) {
                    axpy(dh, 1.0, &dh_direct);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(*x, grads) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1) as f64;
                if let Some(dx) = self.slot(*x, grads) {
                    dx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
        }
        Ok(())
    }

    /// Gradient accumulator for `v`, or `None` when `v` is not tracked.
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Numerically stable masked softmax over rows of width `cols`.
pub(crate) fn softmax_rows_into(x: &[f64], cols: usize, mask: Option<&[bool]>, out: &mut [f64]) -> Result<()> {
    for (r, (xrow, orow)) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
        let keep = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
        let mut max = f64::NEG_INFINITY;
        for (j, v) in xrow.iter().enumerate() {
            if keep(j) && *v > max {
                max = *v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::InvalidMask { row: r });
        }
        let mut total = 0.0;
        for j in 0..cols {
            orow[j] = if keep(j) { math::exp(xrow[j] - max) } else { 0.0 };
            total += orow[j];
        }
        for v in orow.iter_mut() {
            *v /= total;
        }
    }
    Ok(())
}
