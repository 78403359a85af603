//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records eagerly evaluated operations. Parameters live in a
//! [`ParamStore`] that the tape only borrows, so any number of forward passes
//! may share one model; [`Tape::backward`] returns gradients separately.
//! Values that should not receive gradient (ground truth, autoregressively fed
//! predictions) enter the tape through [`Tape::constant`].

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::rotation::{gram_schmidt_smooth, gram_schmidt_smooth_backward};
use crate::tensor::{gemm, MatRef, Tensor};

/// Epsilon inside the differentiable Gram-Schmidt norms.
pub const ROT6D_EPS: f64 = 1e-8;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param { name: name.into(), value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: store.iter().map(|p| Tensor::zeros(p.value.rows(), p.value.cols())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    Linear { x: Var, w: ParamId, b: Option<ParamId> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddTiled { x: Var, tile: Var },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
    Reshape(Var),
    GroupMax { x: Var, argmax: Vec<usize> },
    BlockMix { x: Var, mix: Arc<Tensor> },
    LayerNorm { x: Var, gamma: ParamId, beta: ParamId, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, seq: usize, heads: usize, probs: Vec<f64> },
    SoftmaxRows(Var),
    MoeLinear { x: Var, gate: Var, w: ParamId, b: ParamId, expert_out: Vec<Tensor> },
    JointLinear { x: Var, w: ParamId, b: ParamId, joints: usize },
    Rot6dToMatrix(Var),
    ForwardKinematics { rot: Var, offset: Var, parents: Arc<[isize]>, world_rot: Vec<f64> },
    L1(Var, Var),
    Sum(Var),
    KlDivergence { mu: Var, log_sigma: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Eager computation graph over a borrowed parameter store.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).clone();
        self.push(value, Op::Param(id), true)
    }

    /// `x * W + b` with `W: in x out` and `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let xv = self.value(x);
        let wv = self.params.get(w);
        assert_eq!(xv.cols(), wv.rows(), "linear input width");
        let mut out = Tensor::zeros(xv.rows(), wv.cols());
        if let Some(b) = b {
            let bv = self.params.get(b);
            for r in 0..out.rows() {
                out.row_mut(r).copy_from_slice(bv.data());
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(1.0, MatRef::new(xv.data(), xv.rows(), xv.cols()), MatRef::new(wv.data(), wv.rows(), wv.cols()), beta, out.data_mut());
        self.push(out, Op::Linear { x, w, b }, true)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_vec(xv.rows(), xv.cols(), xv.data().iter().map(|v| f(*v)).collect());
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    /// Adds `tile` (`k x c`) to every consecutive block of `k` rows of `x`.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Var {
        let (xv, tv) = (self.value(x), self.value(tile));
        assert_eq!(xv.cols(), tv.cols(), "tiled add width");
        assert_eq!(xv.rows() % tv.rows(), 0, "tiled add rows");
        let mut out = xv.clone();
        let k = tv.rows();
        for r in 0..out.rows() {
            let t = tv.row(r % k);
            for (o, a) in out.row_mut(r).iter_mut().zip(t) {
                *o += *a;
            }
        }
        let rg = self.rg(x) || self.rg(tile);
        self.push(out, Op::AddTiled { x, tile }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let xv = self.value(x);
        assert!(start + width <= xv.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(xv.rows(), width);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + width]);
        }
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in &index {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::from_vec(index.len(), cols, data);
        let rg = self.rg(x);
        self.push(out, Op::GatherRows { x, index }, rg)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(x).clone().reshaped(rows, cols);
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Column-wise max over consecutive groups of `group` rows.
    pub fn group_max(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        assert!(group > 0 && xv.rows() % group == 0, "group_max rows");
        let groups = xv.rows() / group;
        let cols = xv.cols();
        let mut out = Tensor::zeros(groups, cols);
        let mut argmax = vec![0usize; groups * cols];
        for g in 0..groups {
            let base = g * group;
            let orow = out.row_mut(g);
            orow.copy_from_slice(xv.row(base));
            let am = &mut argmax[g * cols..(g + 1) * cols];
            am.iter_mut().for_each(|a| *a = base);
            for r in base + 1..base + group {
                for (c, v) in xv.row(r).iter().enumerate() {
                    if *v > orow[c] {
                        orow[c] = *v;
                        am[c] = r;
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::GroupMax { x, argmax }, rg)
    }

    /// Applies the constant `m x n` matrix to every block of `n` rows of `x`.
    pub fn block_mix(&mut self, x: Var, mix: Arc<Tensor>) -> Var {
        let xv = self.value(x);
        let (m, n) = mix.shape();
        assert_eq!(xv.rows() % n, 0, "block_mix rows");
        let blocks = xv.rows() / n;
        let cols = xv.cols();
        let mut out = Tensor::zeros(blocks * m, cols);
        for b in 0..blocks {
            gemm(
                1.0,
                MatRef::new(mix.data(), m, n),
                MatRef::new(&xv.data()[b * n * cols..(b + 1) * n * cols], n, cols),
                0.0,
                &mut out.data_mut()[b * m * cols..(b + 1) * m * cols],
            );
        }
        let rg = self.rg(x);
        self.push(out, Op::BlockMix { x, mix }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (gv, bv) = (self.params.get(gamma), self.params.get(beta));
        let mut out = Tensor::zeros(rows, cols);
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            let orow = out.row_mut(r);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                orow[c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, true)
    }

    /// Scaled dot-product attention over blocks of `seq` rows with `heads` heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, cols) = qv.shape();
        assert_eq!(kv.shape(), (rows, cols));
        assert_eq!(vv.shape(), (rows, cols));
        assert!(rows % seq == 0 && cols % heads == 0, "attention shape");
        let batches = rows / seq;
        let d = cols / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut probs = vec![0.0; batches * heads * seq * seq];
        let mut out = Tensor::zeros(rows, cols);
        for b in 0..batches {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    let qi = &qv.row(b * seq + i)[h * d..(h + 1) * d];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..seq {
                        let kj = &kv.row(b * seq + j)[h * d..(h + 1) * d];
                        let s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                        p[i * seq + j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0;
                    for j in 0..seq {
                        let e = (p[i * seq + j] - mx).exp();
                        p[i * seq + j] = e;
                        z += e;
                    }
                    for j in 0..seq {
                        p[i * seq + j] /= z;
                    }
                    let orow = &mut out.row_mut(b * seq + i)[h * d..(h + 1) * d];
                    for j in 0..seq {
                        let w = p[i * seq + j];
                        let vj = &vv.row(b * seq + j)[h * d..(h + 1) * d];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::Attention { q, k, v, seq, heads, probs }, rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Gate-blended linear layer. `w` stacks `K` experts as `(K * in) x out`,
    /// `b` is `K x out`, `gate` is `rows x K`. Each row uses the weights
    /// `sum_k gate[r, k] * W_k`, which is evaluated as the same blend of the
    /// per-expert outputs.
    pub fn moe_linear(&mut self, x: Var, gate: Var, w: ParamId, b: ParamId) -> Var {
        let (xv, gv) = (self.value(x), self.value(gate));
        let (wv, bv) = (self.params.get(w), self.params.get(b));
        let experts = bv.rows();
        let (rows, input) = xv.shape();
        let out_w = wv.cols();
        assert_eq!(wv.rows(), experts * input, "moe weight rows");
        assert_eq!(gv.shape(), (rows, experts), "moe gate shape");
        let mut out = Tensor::zeros(rows, out_w);
        let mut expert_out = Vec::with_capacity(experts);
        for k in 0..experts {
            let mut y = Tensor::zeros(rows, out_w);
            for r in 0..rows {
                y.row_mut(r).copy_from_slice(bv.row(k));
            }
            gemm(
                1.0,
                MatRef::new(xv.data(), rows, input),
                MatRef::new(&wv.data()[k * input * out_w..(k + 1) * input * out_w], input, out_w),
                1.0,
                y.data_mut(),
            );
            for r in 0..rows {
                let g = gv.get(r, k);
                for (o, v) in out.row_mut(r).iter_mut().zip(y.row(r)) {
                    *o += g * v;
                }
            }
            expert_out.push(y);
        }
        self.push(out, Op::MoeLinear { x, gate, w, b, expert_out }, true)
    }

    /// Per-joint linear map: row `r` uses weights of joint `r % joints`.
    /// `w` is `(joints * in) x out`, `b` is `joints x out`.
    pub fn joint_linear(&mut self, x: Var, w: ParamId, b: ParamId, joints: usize) -> Var {
        let xv = self.value(x);
        let (wv, bv) = (self.params.get(w), self.params.get(b));
        let (rows, input) = xv.shape();
        let out_w = wv.cols();
        assert_eq!(wv.rows(), joints * input, "joint_linear weight rows");
        assert_eq!(rows % joints, 0, "joint_linear rows");
        let mut out = Tensor::zeros(rows, out_w);
        for r in 0..rows {
            let j = r % joints;
            out.row_mut(r).copy_from_slice(bv.row(j));
            gemm(
                1.0,
                MatRef::new(xv.row(r), 1, input),
                MatRef::new(&wv.data()[j * input * out_w..(j + 1) * input * out_w], input, out_w),
                1.0,
                out.row_mut(r),
            );
        }
        self.push(out, Op::JointLinear { x, w, b, joints }, true)
    }

    /// Decodes each 6-wide row into a row-major rotation matrix (9 wide).
    pub fn rot6d_to_matrix(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.cols(), 6, "rot6d width");
        let mut out = Tensor::zeros(xv.rows(), 9);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&gram_schmidt_smooth(xv.row(r), ROT6D_EPS));
        }
        let rg = self.rg(x);
        self.push(out, Op::Rot6dToMatrix(x), rg)
    }

    /// Root-relative forward kinematics. `rot` holds local rotation matrices
    /// (`B*J x 9`), `offset` local translations (`B*J x 3`). Returns joint
    /// positions `B*J x 3`.
    pub fn forward_kinematics(&mut self, rot: Var, offset: Var, parents: Arc<[isize]>) -> Var {
        let (rv, ov) = (self.value(rot), self.value(offset));
        let joints = parents.len();
        assert_eq!(rv.cols(), 9);
        assert_eq!(ov.cols(), 3);
        assert_eq!(rv.rows(), ov.rows());
        assert_eq!(rv.rows() % joints, 0, "fk rows");
        let rows = rv.rows();
        let mut world_rot = vec![0.0; rows * 9];
        let mut out = Tensor::zeros(rows, 3);
        for base in (0..rows).step_by(joints) {
            for j in 0..joints {
                let r = base + j;
                let local = rv.row(r);
                let t = ov.row(r);
                let (pr, pp) = match parents[j] {
                    p if p < 0 => (IDENT9, [0.0; 3]),
                    p => {
                        let pi = base + p as usize;
                        let mut m = [0.0; 9];
                        m.copy_from_slice(&world_rot[pi * 9..pi * 9 + 9]);
                        (m, [out.get(pi, 0), out.get(pi, 1), out.get(pi, 2)])
                    }
                };
                let wr = mat3_mul(&pr, local);
                world_rot[r * 9..r * 9 + 9].copy_from_slice(&wr);
                let rt = mat3_vec(&pr, t);
                out.row_mut(r).copy_from_slice(&[pp[0] + rt[0], pp[1] + rt[1], pp[2] + rt[2]]);
            }
        }
        let rg = self.rg(rot) || self.rg(offset);
        self.push(out, Op::ForwardKinematics { rot, offset, parents, world_rot }, rg)
    }

    /// Sum of absolute differences, `||a - b||_1`.
    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "l1 shape mismatch");
        let s = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y).abs()).sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(s), Op::L1(a, b), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `sum 0.5 * (mu^2 + sigma^2 - 1 - ln sigma^2)` with `sigma = exp(log_sigma)`.
    pub fn kl_divergence(&mut self, mu: Var, log_sigma: Var) -> Var {
        let (mv, lv) = (self.value(mu), self.value(log_sigma));
        assert_eq!(mv.shape(), lv.shape());
        let s = mv.data().iter().zip(lv.data()).map(|(m, l)| 0.5 * (m * m + (2.0 * l).exp() - 1.0 - 2.0 * l)).sum();
        let rg = self.rg(mu) || self.rg(log_sigma);
        self.push(Tensor::scalar(s), Op::KlDivergence { mu, log_sigma }, rg)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Backward {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut params = Gradients::zeros_like(self.params);
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads, &mut params);
            grads[i] = Some(g);
        }
        Backward { params, nodes: grads }
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        let (r, c) = self.shape(v);
        grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c))
    }

    fn acc_map(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor, f: impl Fn(usize, f64) -> f64) {
        if !self.rg(v) {
            return;
        }
        let buf = self.buf(grads, v);
        for (i, (b, gv)) in buf.data_mut().iter_mut().zip(g.data()).enumerate() {
            *b += f(i, *gv);
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>], pg: &mut Gradients) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => pg.grads[id.0].add_assign(g),
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.params.get(*w);
                let (rows, input) = xv.shape();
                let out_w = wv.cols();
                gemm(1.0, MatRef::new(xv.data(), rows, input).t(), MatRef::new(g.data(), rows, out_w), 1.0, pg.grads[w.0].data_mut());
                if let Some(b) = b {
                    let gb = pg.grads[b.0].data_mut();
                    for r in 0..rows {
                        for (a, v) in gb.iter_mut().zip(g.row(r)) {
                            *a += *v;
                        }
                    }
                }
                if self.rg(*x) {
                    let buf = self.buf(grads, *x);
                    gemm(1.0, MatRef::new(g.data(), rows, out_w), MatRef::new(wv.data(), input, out_w).t(), 1.0, buf.data_mut());
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, *a, g, |_, v| v);
                self.acc_map(grads, *b, g, |_, v| v);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, g, |_, v| v);
                self.acc_map(grads, *b, g, |_, v| -v);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc_map(grads, *a, g, |k, v| v * bv[k]);
                self.acc_map(grads, *b, g, |k, v| v * av[k]);
            }
            Op::Scale(x, s) => self.acc_map(grads, *x, g, |_, v| v * s),
            Op::AddTiled { x, tile } => {
                self.acc_map(grads, *x, g, |_, v| v);
                if self.rg(*tile) {
                    let k = self.shape(*tile).0;
                    let buf = self.buf(grads, *tile);
                    for r in 0..g.rows() {
                        for (a, v) in buf.row_mut(r % k).iter_mut().zip(g.row(r)) {
                            *a += *v;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, g, |k, v| if xv[k] > 0.0 { v } else { 0.0 });
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                self.acc_map(grads, *x, g, |k, v| v * yv[k] * (1.0 - yv[k]));
            }
            Op::Exp(x) => {
                let yv = node.value.data();
                self.acc_map(grads, *x, g, |k, v| v * yv[k]);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, g, |k, v| if xv[k] >= *lo && xv[k] <= *hi { v } else { 0.0 });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if self.rg(*p) {
                        let buf = self.buf(grads, *p);
                        for r in 0..g.rows() {
                            for (a, v) in buf.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *a += *v;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                if self.rg(*x) {
                    let w = g.cols();
                    let buf = self.buf(grads, *x);
                    for r in 0..g.rows() {
                        for (a, v) in buf.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                            *a += *v;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.rg(*p) {
                        let buf = self.buf(grads, *p);
                        for (a, v) in buf.data_mut().iter_mut().zip(&g.data()[off..off + n]) {
                            *a += *v;
                        }
                    }
                    off += n;
                }
            }
            Op::GatherRows { x, index } => {
                if self.rg(*x) {
                    let buf = self.buf(grads, *x);
                    for (r, &src) in index.iter().enumerate() {
                        for (a, v) in buf.row_mut(src).iter_mut().zip(g.row(r)) {
                            *a += *v;
                        }
                    }
                }
            }
            Op::Reshape(x) => self.acc_map(grads, *x, g, |_, v| v),
            Op::GroupMax { x, argmax } => {
                if self.rg(*x) {
                    let cols = g.cols();
                    let buf = self.buf(grads, *x);
                    for (k, &src) in argmax.iter().enumerate() {
                        let c = k % cols;
                        buf.data_mut()[src * cols + c] += g.data()[k];
                    }
                }
            }
            Op::BlockMix { x, mix } => {
                if self.rg(*x) {
                    let (m, n) = mix.shape();
                    let cols = g.cols();
                    let blocks = g.rows() / m;
                    let buf = self.buf(grads, *x);
                    for b in 0..blocks {
                        gemm(
                            1.0,
                            MatRef::new(mix.data(), m, n).t(),
                            MatRef::new(&g.data()[b * m * cols..(b + 1) * m * cols], m, cols),
                            1.0,
                            &mut buf.data_mut()[b * n * cols..(b + 1) * n * cols],
                        );
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (rows, cols) = g.shape();
                let gv = self.params.get(*gamma).data();
                {
                    let gg = pg.grads[gamma.0].data_mut();
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g.get(r, c) * xhat[r * cols + c];
                        }
                    }
                }
                {
                    let gb = pg.grads[beta.0].data_mut();
                    for r in 0..rows {
                        for (a, v) in gb.iter_mut().zip(g.row(r)) {
                            *a += *v;
                        }
                    }
                }
                if self.rg(*x) {
                    let buf = self.buf(grads, *x);
                    let n = cols as f64;
                    for r in 0..rows {
                        let gh: Vec<f64> = (0..cols).map(|c| g.get(r, c) * gv[c]).collect();
                        let s1: f64 = gh.iter().sum();
                        let s2: f64 = (0..cols).map(|c| gh[c] * xhat[r * cols + c]).sum();
                        let brow = buf.row_mut(r);
                        for c in 0..cols {
                            brow[c] += inv_std[r] / n * (n * gh[c] - s1 - xhat[r * cols + c] * s2);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, seq, heads, probs } => {
                let (seq, heads) = (*seq, *heads);
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, cols) = qv.shape();
                let d = cols / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let batches = rows / seq;
                let mut gq = Tensor::zeros(rows, cols);
                let mut gk = Tensor::zeros(rows, cols);
                let mut gvv = Tensor::zeros(rows, cols);
                let mut gp = vec![0.0; seq * seq];
                for b in 0..batches {
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        let hs = h * d..(h + 1) * d;
                        for i in 0..seq {
                            let go = &g.row(b * seq + i)[hs.clone()];
                            for j in 0..seq {
                                let w = p[i * seq + j];
                                let vj = &vv.row(b * seq + j)[hs.clone()];
                                gp[i * seq + j] = go.iter().zip(vj).map(|(a, c)| a * c).sum();
                                for (a, c) in gvv.row_mut(b * seq + j)[hs.clone()].iter_mut().zip(go) {
                                    *a += w * c;
                                }
                            }
                        }
                        for i in 0..seq {
                            let dot: f64 = (0..seq).map(|j| gp[i * seq + j] * p[i * seq + j]).sum();
                            for j in 0..seq {
                                let gs = p[i * seq + j] * (gp[i * seq + j] - dot) * scale;
                                if gs == 0.0 {
                                    continue;
                                }
                                let (qi, kj) = (b * seq + i, b * seq + j);
                                for c in hs.clone() {
                                    gq.data_mut()[qi * cols + c] += gs * kv.get(kj, c);
                                    gk.data_mut()[kj * cols + c] += gs * qv.get(qi, c);
                                }
                            }
                        }
                    }
                }
                self.acc_map(grads, *q, &gq, |_, v| v);
                self.acc_map(grads, *k, &gk, |_, v| v);
                self.acc_map(grads, *v, &gvv, |_, v| v);
            }
            Op::SoftmaxRows(x) => {
                if self.rg(*x) {
                    let y = &node.value;
                    let buf = self.buf(grads, *x);
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, a) in buf.row_mut(r).iter_mut().enumerate() {
                            *a += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::MoeLinear { x, gate, w, b, expert_out } => {
                let (xv, gv) = (self.value(*x), self.value(*gate));
                let wv = self.params.get(*w);
                let experts = expert_out.len();
                let (rows, input) = xv.shape();
                let out_w = g.cols();
                let mut gy = Tensor::zeros(rows, out_w);
                let mut ggate = Tensor::zeros(rows, experts);
                let mut gx = if self.rg(*x) { Some(Tensor::zeros(rows, input)) } else { None };
                for (k, y) in expert_out.iter().enumerate() {
                    for r in 0..rows {
                        let gk = gv.get(r, k);
                        let gr = g.row(r);
                        ggate.set(r, k, gr.iter().zip(y.row(r)).map(|(a, c)| a * c).sum());
                        for (o, a) in gy.row_mut(r).iter_mut().zip(gr) {
                            *o = gk * a;
                        }
                    }
                    let wk = &wv.data()[k * input * out_w..(k + 1) * input * out_w];
                    gemm(
                        1.0,
                        MatRef::new(xv.data(), rows, input).t(),
                        MatRef::new(gy.data(), rows, out_w),
                        1.0,
                        &mut pg.grads[w.0].data_mut()[k * input * out_w..(k + 1) * input * out_w],
                    );
                    let gb = pg.grads[b.0].row_mut(k);
                    for r in 0..rows {
                        for (a, v) in gb.iter_mut().zip(gy.row(r)) {
                            *a += *v;
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(1.0, MatRef::new(gy.data(), rows, out_w), MatRef::new(wk, input, out_w).t(), 1.0, gx.data_mut());
                    }
                }
                if let Some(gx) = gx {
                    self.acc_map(grads, *x, &gx, |_, v| v);
                }
                self.acc_map(grads, *gate, &ggate, |_, v| v);
            }
            Op::JointLinear { x, w, b, joints } => {
                let xv = self.value(*x);
                let wv = self.params.get(*w);
                let (rows, input) = xv.shape();
                let out_w = g.cols();
                for r in 0..rows {
                    let j = r % joints;
                    let span = j * input * out_w..(j + 1) * input * out_w;
                    gemm(
                        1.0,
                        MatRef::new(xv.row(r), 1, input).t(),
                        MatRef::new(g.row(r), 1, out_w),
                        1.0,
                        &mut pg.grads[w.0].data_mut()[span.clone()],
                    );
                    for (a, v) in pg.grads[b.0].row_mut(j).iter_mut().zip(g.row(r)) {
                        *a += *v;
                    }
                }
                if self.rg(*x) {
                    let buf = self.buf(grads, *x);
                    for r in 0..rows {
                        let j = r % joints;
                        let span = j * input * out_w..(j + 1) * input * out_w;
                        gemm(1.0, MatRef::new(g.row(r), 1, out_w), MatRef::new(&wv.data()[span], input, out_w).t(), 1.0, buf.row_mut(r));
                    }
                }
            }
            Op::Rot6dToMatrix(x) => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let buf = self.buf(grads, *x);
                    for r in 0..xv.rows() {
                        let d = gram_schmidt_smooth_backward(xv.row(r), ROT6D_EPS, g.row(r));
                        for (a, v) in buf.row_mut(r).iter_mut().zip(&d) {
                            *a += *v;
                        }
                    }
                }
            }
            Op::ForwardKinematics { rot, offset, parents, world_rot } => {
                let (rv, ov) = (self.value(*rot), self.value(*offset));
                let joints = parents.len();
                let rows = rv.rows();
                let mut g_pos = g.clone();
                let mut g_wrot = vec![0.0; rows * 9];
                let mut g_local = Tensor::zeros(rows, 9);
                let mut g_off = Tensor::zeros(rows, 3);
                for base in (0..rows).step_by(joints) {
                    for j in (0..joints).rev() {
                        let r = base + j;
                        let gp = [g_pos.get(r, 0), g_pos.get(r, 1), g_pos.get(r, 2)];
                        let mut gw = [0.0; 9];
                        gw.copy_from_slice(&g_wrot[r * 9..r * 9 + 9]);
                        let parent = parents[j];
                        let pr = if parent < 0 {
                            IDENT9
                        } else {
                            let pi = base + parent as usize;
                            let mut m = [0.0; 9];
                            m.copy_from_slice(&world_rot[pi * 9..pi * 9 + 9]);
                            m
                        };
                        // world_rot[r] = pr * local[r]; pos[r] = ppos + pr * t[r]
                        let gl = mat3_tmul(&pr, &gw);
                        g_local.row_mut(r).copy_from_slice(&gl);
                        let gt = mat3_tvec(&pr, &gp);
                        g_off.row_mut(r).copy_from_slice(&gt);
                        if parent >= 0 {
                            let pi = base + parent as usize;
                            for c in 0..3 {
                                g_pos.data_mut()[pi * 3 + c] += gp[c];
                            }
                            let local = rv.row(r);
                            let t = ov.row(r);
                            let gpr = &mut g_wrot[pi * 9..pi * 9 + 9];
                            for a in 0..3 {
                                for b in 0..3 {
                                    // d/dpr of pr*local: gw * local^T; of pr*t: gp t^T
                                    let mut s = gp[a] * t[b];
                                    for c in 0..3 {
                                        s += gw[a * 3 + c] * local[b * 3 + c];
                                    }
                                    gpr[a * 3 + b] += s;
                                }
                            }
                        }
                    }
                }
                self.acc_map(grads, *rot, &g_local, |_, v| v);
                self.acc_map(grads, *offset, &g_off, |_, v| v);
            }
            Op::L1(a, b) => {
                let s = g.scalar_value();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let sign = |k: usize| {
                    let d = av[k] - bv[k];
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                let shape_grad = Tensor::zeros(self.shape(*a).0, self.shape(*a).1);
                self.acc_map(grads, *a, &shape_grad, |k, _| s * sign(k));
                self.acc_map(grads, *b, &shape_grad, |k, _| -s * sign(k));
            }
            Op::Sum(x) => {
                let s = g.scalar_value();
                let (r, c) = self.shape(*x);
                self.acc_map(grads, *x, &Tensor::zeros(r, c), |_, _| s);
            }
            Op::KlDivergence { mu, log_sigma } => {
                let s = g.scalar_value();
                let (mv, lv) = (self.value(*mu).data(), self.value(*log_sigma).data());
                let (r, c) = self.shape(*mu);
                let z = Tensor::zeros(r, c);
                self.acc_map(grads, *mu, &z, |k, _| s * mv[k]);
                self.acc_map(grads, *log_sigma, &z, |k, _| s * ((2.0 * lv[k]).exp() - 1.0));
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Backward {
    pub params: Gradients,
    nodes: Vec<Option<Tensor>>,
}

impl Backward {
    /// Gradient of the loss with respect to a recorded value, if any flowed.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

const IDENT9: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

#[inline]
fn mat3_mul(a: &[f64], b: &[f64]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] = a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
        }
    }
    out
}

/// `a^T * b`
#[inline]
fn mat3_tmul(a: &[f64], b: &[f64]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] = a[i] * b[j] + a[3 + i] * b[3 + j] + a[6 + i] * b[6 + j];
        }
    }
    out
}

#[inline]
fn mat3_vec(a: &[f64], v: &[f64]) -> [f64; 3] {
    [a[0] * v[0] + a[1] * v[1] + a[2] * v[2], a[3] * v[0] + a[4] * v[1] + a[5] * v[2], a[6] * v[0] + a[7] * v[1] + a[8] * v[2]]
}

#[inline]
fn mat3_tvec(a: &[f64], v: &[f64]) -> [f64; 3] {
    [a[0] * v[0] + a[3] * v[1] + a[6] * v[2], a[1] * v[0] + a[4] * v[1] + a[7] * v[2], a[2] * v[0] + a[5] * v[1] + a[8] * v[2]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of every parameter entry against the tape.
    fn check(store: &mut ParamStore, build: &dyn Fn(&mut Tape<'_>) -> Var, tol: f64) {
        let analytic = {
            let mut tape = Tape::new(store);
            let loss = build(&mut tape);
            tape.backward(loss).params
        };
        let eval = |s: &ParamStore| {
            let mut tape = Tape::new(s);
            let loss = build(&mut tape);
            tape.value(loss).scalar_value()
        };
        let h = 1e-6;
        for p in 0..store.len() {
            for k in 0..store.get(ParamId(p)).len() {
                let orig = store.get(ParamId(p)).data()[k];
                store.get_mut(ParamId(p)).data_mut()[k] = orig + h;
                let up = eval(store);
                store.get_mut(ParamId(p)).data_mut()[k] = orig - h;
                let down = eval(store);
                store.get_mut(ParamId(p)).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.get(ParamId(p)).data()[k];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < tol, "param {p}[{k}]: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn linear_relu_l1_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&mut rng, 4, 3));
        let b = store.add("b", rand_tensor(&mut rng, 1, 3));
        let x = rand_tensor(&mut rng, 5, 4);
        let target = rand_tensor(&mut rng, 5, 3);
        check(
            &mut store,
            &|t| {
                let xv = t.constant(x.clone());
                let y = t.linear(xv, w, Some(b));
                let y = t.sigmoid(y);
                let tv = t.constant(target.clone());
                t.l1(y, tv)
            },
            1e-6,
        );
    }

    #[test]
    fn attention_layer_norm_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let wq = store.add("wq", rand_tensor(&mut rng, 4, 4));
        let wk = store.add("wk", rand_tensor(&mut rng, 4, 4));
        let wv = store.add("wv", rand_tensor(&mut rng, 4, 4));
        let tok = store.add("tok", rand_tensor(&mut rng, 3, 4));
        let gamma = store.add("g", rand_tensor(&mut rng, 1, 4));
        let beta = store.add("be", rand_tensor(&mut rng, 1, 4));
        let x = rand_tensor(&mut rng, 6, 4);
        let weights = rand_tensor(&mut rng, 6, 4);
        check(
            &mut store,
            &|t| {
                let xv = t.constant(x.clone());
                let tv = t.param(tok);
                let xv = t.add_tiled(xv, tv);
                let q = t.linear(xv, wq, None);
                let k = t.linear(xv, wk, None);
                let v = t.linear(xv, wv, None);
                let a = t.attention(q, k, v, 3, 2);
                let n = t.layer_norm(a, gamma, beta);
                let s = t.softmax_rows(n);
                let wv2 = t.constant(weights.clone());
                let m = t.mul(s, wv2);
                t.sum(m)
            },
            1e-5,
        );
    }

    #[test]
    fn moe_and_joint_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let gw = store.add("gw", rand_tensor(&mut rng, 3, 4));
        let ew = store.add("ew", rand_tensor(&mut rng, 4 * 3, 2));
        let eb = store.add("eb", rand_tensor(&mut rng, 4, 2));
        let jw = store.add("jw", rand_tensor(&mut rng, 2 * 2, 3));
        let jb = store.add("jb", rand_tensor(&mut rng, 2, 3));
        let x = rand_tensor(&mut rng, 2, 3);
        let target = rand_tensor(&mut rng, 4, 3);
        check(
            &mut store,
            &|t| {
                let xv = t.constant(x.clone());
                let logits = t.linear(xv, gw, None);
                let gate = t.softmax_rows(logits);
                let y = t.moe_linear(xv, gate, ew, eb);
                let y = t.reshape(y, 4, 1);
                let y = t.concat_cols(&[y, y]);
                let z = t.joint_linear(y, jw, jb, 2);
                let tv = t.constant(target.clone());
                t.l1(z, tv)
            },
            1e-5,
        );
    }

    #[test]
    fn gather_group_max_block_mix_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&mut rng, 2, 3));
        let x = rand_tensor(&mut rng, 6, 2);
        let mix = Arc::new(rand_tensor(&mut rng, 2, 3));
        check(
            &mut store,
            &|t| {
                let xv = t.constant(x.clone());
                let h = t.linear(xv, w, None);
                let h = t.gather_rows(h, vec![0, 2, 1, 5, 4, 3, 3, 1, 0]);
                let m = t.group_max(h, 3);
                let mixed = t.block_mix(m, mix.clone());
                let e = t.exp(mixed);
                let c = t.clamp(e, 0.0, 50.0);
                let s = t.slice_cols(c, 1, 2);
                let r = t.concat_rows(&[s, s]);
                t.sum(r)
            },
            1e-5,
        );
    }

    #[test]
    fn rotation_decode_and_fk_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let r6 = store.add("r6", rand_tensor(&mut rng, 6, 6));
        let off = store.add("off", rand_tensor(&mut rng, 6, 3));
        let parents: Arc<[isize]> = Arc::from(vec![-1isize, 0, 1]);
        let target = rand_tensor(&mut rng, 6, 3);
        check(
            &mut store,
            &|t| {
                let r = t.param(r6);
                let m = t.rot6d_to_matrix(r);
                let o = t.param(off);
                let p = t.forward_kinematics(m, o, parents.clone());
                let tv = t.constant(target.clone());
                t.l1(p, tv)
            },
            1e-5,
        );
    }

    #[test]
    fn kl_gradients_and_value() {
        let mut store = ParamStore::new();
        let mu = store.add("mu", Tensor::row_vector(vec![0.3, -0.7]));
        let ls = store.add("ls", Tensor::row_vector(vec![0.1, -0.4]));
        check(
            &mut store,
            &|t| {
                let m = t.param(mu);
                let l = t.param(ls);
                t.kl_divergence(m, l)
            },
            1e-6,
        );
        let empty = ParamStore::new();
        let mut t = Tape::new(&empty);
        let m = t.constant(Tensor::row_vector(vec![1.0]));
        let l = t.constant(Tensor::row_vector(vec![0.0]));
        let kl = t.kl_divergence(m, l);
        assert_eq!(t.value(kl).scalar_value(), 0.5);
    }

    #[test]
    fn constants_receive_no_parameter_gradient() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let a = t.constant(Tensor::row_vector(vec![1.0, 2.0]));
        let s = t.sum(a);
        let back = t.backward(s);
        assert_eq!(back.params.iter().count(), 0);
    }
}
