//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so walking the tape backwards is a valid
//! topological order for [`Graph::backward`].

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::mask::AttentionMask;
use super::params::{ParamId, ParameterSet};
use super::tensor::{gemm, MatMut, MatRef, Scalar, Tensor};
use crate::error::{invalid_arg, Result};
use crate::loss::{chamfer_kernel, ChamferForm};

/// Additive logit applied to blocked attention entries.
pub const BLOCKED_LOGIT: f64 = -1e9;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Input,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    Attention {
        qkv: Var,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    GroupMean {
        x: Var,
        group: usize,
    },
    ConcatBroadcast {
        global: Var,
        local: Var,
        group: usize,
    },
    ConcatCols(Var, Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Chamfer {
        pred: Var,
        target: Var,
        pred_group: usize,
        target_group: usize,
        form: ChamferForm,
        pred_witness: Vec<usize>,
        target_witness: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Dropout {
        x: Var,
        keep: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// One recorded forward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    /// Test hook: scales the analytic gradient of one op kind.
    corrupt: Option<(&'static str, T)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

fn dims<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    t.dims2()
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

/// Numerically stable in-place softmax of one row, honouring an optional mask.
fn softmax_row<T: Scalar>(row: &mut [T], allowed: Option<&[bool]>) {
    if let Some(allowed) = allowed {
        let blocked = T::c(BLOCKED_LOGIT);
        for (x, &a) in row.iter_mut().zip(allowed) {
            if !a {
                *x += blocked;
            }
        }
    }
    let max = row.iter().fold(T::neg_infinity(), |m, &x| if x > m { x } else { m });
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            corrupt: None,
        }
    }

    /// Multiplies the analytic input gradient of every `op` node by `factor`.
    pub fn corrupt_gradient(&mut self, op: &'static str, factor: f64) {
        self.corrupt = Some((op, T::c(factor)));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input that does not receive gradients.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Input leaf whose gradient is tracked (for checks on inputs).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, params: &ParameterSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = params.get(id);
        let v = self.push(p.value.clone(), Op::Param, !p.frozen);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// Adds a length-`c` bias vector to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (r, c) = dims(self.value(x));
        assert_eq!(self.value(bias).len(), c, "bias width");
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(c.max(1)).take(r) {
            for (y, &bb) in row.iter_mut().zip(&b) {
                *y += bb;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddBias(x, bias), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "add shapes");
        let mut out = self.value(a).clone();
        for (y, &x) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *y += x;
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "mul shapes");
        let mut out = self.value(a).clone();
        for (y, &x) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *y *= x;
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::c(factor);
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|y| *y *= f);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, f), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        let ng = self.ng(x);
        self.push(out, Op::Reshape(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|y| {
            if *y < T::zero() {
                *y = T::zero()
            }
        });
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|y| *y = T::c(gelu_parts(y.f64()).0));
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Row-wise layer normalization with affine gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (r, c) = dims(self.value(x));
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        assert_eq!(g.len(), c, "layer norm gain width");
        let eps = T::c(LAYER_NORM_EPS);
        let inv_c = T::one() / T::c(c as f64);
        let xs = self.value(x).data();
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::new(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Row softmax; with a mask, blocked entries receive [`BLOCKED_LOGIT`].
    pub fn softmax(&mut self, x: Var, mask: Option<&AttentionMask>) -> Var {
        let (r, c) = dims(self.value(x));
        if let Some(m) = mask {
            assert_eq!(m.size(), c, "softmax mask width");
        }
        let mut out = self.value(x).clone();
        for (i, row) in out.data_mut().chunks_mut(c).enumerate().take(r) {
            let allowed = mask.map(|m| m.row(i % m.size()));
            softmax_row(row, allowed);
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax { x }, ng)
    }

    /// Multi-head masked self-attention over a fused `[Q | K | V]` projection.
    ///
    /// `qkv` has `batch * seq` rows and `3 * d` columns. Each consecutive
    /// block of `seq` rows is an independent sequence sharing `mask`.
    pub fn attention(&mut self, qkv: Var, seq: usize, heads: usize, mask: &Arc<AttentionMask>) -> Var {
        let (rows, c3) = dims(self.value(qkv));
        assert_eq!(c3 % 3, 0, "qkv width");
        let d = c3 / 3;
        assert_eq!(d % heads, 0, "heads must divide the channel count");
        assert_eq!(rows % seq, 0, "rows must be a multiple of seq");
        assert_eq!(mask.size(), seq, "mask size");
        let dh = d / heads;
        let batch = rows / seq;
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let data = self.value(qkv).data();
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * d];
        for s in 0..batch {
            for h in 0..heads {
                let base = s * seq * c3 + h * dh;
                let q = MatRef {
                    data,
                    offset: base,
                    rows: seq,
                    cols: dh,
                    rs: c3,
                    cs: 1,
                };
                let k = MatRef { offset: base + d, ..q };
                let v = MatRef {
                    offset: base + 2 * d,
                    ..q
                };
                let p_off = (s * heads + h) * seq * seq;
                let p = &mut probs[p_off..p_off + seq * seq];
                gemm(scale, q, k.t(), T::zero(), MatMut::dense(p, seq, seq));
                for (i, row) in p.chunks_mut(seq).enumerate() {
                    softmax_row(row, Some(mask.row(i)));
                }
                let p = &probs[p_off..p_off + seq * seq];
                gemm(
                    T::one(),
                    MatRef::dense(p, seq, seq),
                    v,
                    T::zero(),
                    MatMut {
                        data: &mut out,
                        offset: s * seq * d + h * dh,
                        rows: seq,
                        cols: dh,
                        rs: d,
                        cs: 1,
                    },
                );
            }
        }
        let ng = self.ng(qkv);
        self.push(
            Tensor::new(vec![rows, d], out),
            Op::Attention { qkv, seq, heads, probs },
            ng,
        )
    }

    /// Channel-wise max over consecutive groups of `group` rows.
    pub fn group_max(&mut self, x: Var, group: usize) -> Var {
        let (r, c) = dims(self.value(x));
        assert_eq!(r % group, 0, "rows must be a multiple of the group");
        let g = r / group;
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); g * c];
        let mut argmax = vec![0usize; g * c];
        for gi in 0..g {
            for j in 0..c {
                let mut best = gi * group;
                let mut bv = xs[best * c + j];
                for row in gi * group + 1..(gi + 1) * group {
                    let v = xs[row * c + j];
                    if v > bv {
                        bv = v;
                        best = row;
                    }
                }
                out[gi * c + j] = bv;
                argmax[gi * c + j] = best;
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![g, c], out), Op::GroupMax { x, argmax }, ng)
    }

    /// Channel-wise mean over consecutive groups of `group` rows.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Var {
        let (r, c) = dims(self.value(x));
        assert_eq!(r % group, 0, "rows must be a multiple of the group");
        let g = r / group;
        let xs = self.value(x).data();
        let inv = T::one() / T::c(group as f64);
        let mut out = vec![T::zero(); g * c];
        for row in 0..r {
            let gi = row / group;
            for j in 0..c {
                out[gi * c + j] += xs[row * c + j];
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let ng = self.ng(x);
        self.push(Tensor::new(vec![g, c], out), Op::GroupMean { x, group }, ng)
    }

    /// Row `r` of the output is `[global[r / group], local[r]]`.
    pub fn concat_broadcast(&mut self, global: Var, local: Var, group: usize) -> Var {
        let (gr, gc) = dims(self.value(global));
        let (lr, lc) = dims(self.value(local));
        assert_eq!(gr * group, lr, "concat_broadcast rows");
        let gs = self.value(global).data();
        let ls = self.value(local).data();
        let w = gc + lc;
        let mut out = vec![T::zero(); lr * w];
        for r in 0..lr {
            out[r * w..r * w + gc].copy_from_slice(&gs[(r / group) * gc..(r / group + 1) * gc]);
            out[r * w + gc..(r + 1) * w].copy_from_slice(&ls[r * lc..(r + 1) * lc]);
        }
        let ng = self.ng(global) || self.ng(local);
        self.push(
            Tensor::new(vec![lr, w], out),
            Op::ConcatBroadcast { global, local, group },
            ng,
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = dims(self.value(a));
        let (br, bc) = dims(self.value(b));
        assert_eq!(ar, br, "concat_cols rows");
        let w = ac + bc;
        let mut out = vec![T::zero(); ar * w];
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        for r in 0..ar {
            out[r * w..r * w + ac].copy_from_slice(&xa[r * ac..(r + 1) * ac]);
            out[r * w + ac..(r + 1) * w].copy_from_slice(&xb[r * bc..(r + 1) * bc]);
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![ar, w], out), Op::ConcatCols(a, b), ng)
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let (r, c) = dims(self.value(x));
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in &rows {
            assert!(i < r, "gather row out of range");
            out.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![rows.len(), c], out), Op::GatherRows { x, rows }, ng)
    }

    /// Mean over groups of the Chamfer distance between matching groups.
    ///
    /// `pred` holds `g * pred_group` points and `target` `g * target_group`
    /// points, both as rows of three coordinates.
    pub fn chamfer(
        &mut self,
        pred: Var,
        target: Var,
        pred_group: usize,
        target_group: usize,
        form: ChamferForm,
    ) -> Var {
        let pd = self.value(pred).data();
        let td = self.value(target).data();
        assert_eq!(pd.len() % (3 * pred_group), 0, "pred rows");
        let g = pd.len() / (3 * pred_group);
        assert_eq!(td.len(), g * 3 * target_group, "target rows");
        let mut total = T::zero();
        let mut pred_witness = Vec::with_capacity(g * pred_group);
        let mut target_witness = Vec::with_capacity(g * target_group);
        for gi in 0..g {
            let a = &pd[gi * 3 * pred_group..(gi + 1) * 3 * pred_group];
            let b = &td[gi * 3 * target_group..(gi + 1) * 3 * target_group];
            let (v, wa, wb) = chamfer_kernel(a, b, form);
            total += v;
            pred_witness.extend(wa.into_iter().map(|j| gi * target_group + j));
            target_witness.extend(wb.into_iter().map(|j| gi * pred_group + j));
        }
        let value = if g == 0 { T::zero() } else { total / T::c(g as f64) };
        let ng = self.ng(pred) || self.ng(target);
        self.push(
            Tensor::scalar(value),
            Op::Chamfer {
                pred,
                target,
                pred_group,
                target_group,
                form,
                pred_witness,
                target_witness,
            },
            ng,
        )
    }

    /// Mean softmax cross-entropy of `logits` rows against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = dims(self.value(logits));
        if labels.len() != r {
            return Err(invalid_arg(format!("{} labels for {r} logit rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(invalid_arg(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        let xs = self.value(logits).data();
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| if x > m { x } else { m });
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            loss += lse - xs[i * c + labels[i]];
            softmax_row(row, None);
        }
        let value = loss / T::c(r.max(1) as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Inverted dropout with drop probability `p`; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let scale = T::c(1.0 / (1.0 - p));
        let keep: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { scale })
            .collect();
        let mut out = self.value(x).clone();
        for (y, &k) in out.data_mut().iter_mut().zip(&keep) {
            *y *= k;
        }
        let ng = self.ng(x);
        self.push(out, Op::Dropout { x, keep }, ng)
    }

    fn corrupt_factor(&self, op: &str) -> Option<T> {
        match self.corrupt {
            Some((name, f)) if name == op => Some(f),
            _ => None,
        }
    }

    /// Reverse-mode gradients of a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(invalid_arg(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape().to_vec(), T::one()));

        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(dy);
                continue;
            }
            let mut contribs = self.local_grads(node, &dy);
            if let Some(f) = self.corrupt_factor(op_name(&node.op)) {
                for (_, g) in contribs.iter_mut() {
                    g.data_mut().iter_mut().for_each(|x| *x *= f);
                }
            }
            for (v, g) in contribs {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and stores parameter gradients in `params`.
    ///
    /// Every parameter not reached from `root` ends with a zero gradient.
    pub fn backward_into(&self, root: Var, params: &mut ParameterSet<T>) -> Result<Gradients<T>> {
        let grads = self.backward(root)?;
        params.zero_grad();
        for (&id, &v) in &self.bound {
            if let Some(g) = grads.get(v) {
                let p = params.get_mut(id);
                if !p.frozen {
                    p.grad.data_mut().copy_from_slice(g.data());
                }
            }
        }
        Ok(grads)
    }

    #[allow(clippy::needless_range_loop)]
    fn local_grads(&self, node: &Node<T>, dy: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Input | Op::Param => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = dims(av);
                let (_, n) = dims(bv);
                let mut out = Vec::new();
                if want(*a) {
                    let mut da = Tensor::zeros(av.shape().to_vec());
                    gemm(
                        T::one(),
                        dy.view(),
                        bv.view().t(),
                        T::zero(),
                        MatMut::dense(da.data_mut(), m, k),
                    );
                    out.push((*a, da));
                }
                if want(*b) {
                    let mut db = Tensor::zeros(bv.shape().to_vec());
                    gemm(
                        T::one(),
                        av.view().t(),
                        dy.view(),
                        T::zero(),
                        MatMut::dense(db.data_mut(), k, n),
                    );
                    out.push((*b, db));
                }
                out
            }
            Op::AddBias(x, b) => {
                let (_, c) = dims(dy);
                let mut db = Tensor::zeros(val(*b).shape().to_vec());
                for row in dy.data().chunks(c) {
                    for (a, &g) in db.data_mut().iter_mut().zip(row) {
                        *a += g;
                    }
                }
                vec![(*x, dy.clone()), (*b, db)]
            }
            Op::Add(a, b) => vec![
                (*a, dy.clone().reshaped(val(*a).shape().to_vec())),
                (*b, dy.clone().reshaped(val(*b).shape().to_vec())),
            ],
            Op::Mul(a, b) => {
                let mut da = val(*b).clone().reshaped(val(*a).shape().to_vec());
                for (x, &g) in da.data_mut().iter_mut().zip(dy.data()) {
                    *x *= g;
                }
                let mut db = val(*a).clone().reshaped(val(*b).shape().to_vec());
                for (x, &g) in db.data_mut().iter_mut().zip(dy.data()) {
                    *x *= g;
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(x, f) => {
                let mut dx = dy.clone();
                dx.data_mut().iter_mut().for_each(|g| *g *= *f);
                vec![(*x, dx)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape().to_vec(), dy.data()[0]))],
            Op::Reshape(x) => vec![(*x, dy.clone().reshaped(val(*x).shape().to_vec()))],
            Op::Relu(x) => {
                let mut dx = dy.clone();
                for (g, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= T::zero() {
                        *g = T::zero();
                    }
                }
                vec![(*x, dx)]
            }
            Op::Gelu(x) => {
                let mut dx = dy.clone();
                for (g, &xi) in dx.data_mut().iter_mut().zip(val(*x).data()) {
                    *g *= T::c(gelu_parts(xi.f64()).1);
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, c) = dims(dy);
                let g = val(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); r * c];
                let inv_c = T::one() / T::c(c as f64);
                let dys = dy.data();
                for i in 0..r {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..c {
                        let t = i * c + j;
                        dgamma[j] += dys[t] * xhat[t];
                        dbeta[j] += dys[t];
                        let dh = dys[t] * g[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[t];
                    }
                    mean_dh *= inv_c;
                    mean_dh_h *= inv_c;
                    for j in 0..c {
                        let t = i * c + j;
                        let dh = dys[t] * g[j];
                        dx[t] = rstd[i] * (dh - mean_dh - xhat[t] * mean_dh_h);
                    }
                }
                vec![
                    (*x, Tensor::new(val(*x).shape().to_vec(), dx)),
                    (*gamma, Tensor::new(val(*gamma).shape().to_vec(), dgamma)),
                    (*beta, Tensor::new(val(*beta).shape().to_vec(), dbeta)),
                ]
            }
            Op::Softmax { x } => {
                let (_, c) = dims(dy);
                let mut dx = dy.clone();
                for (grow, prow) in dx.data_mut().chunks_mut(c).zip(node.value.data().chunks(c)) {
                    let dot: T = grow.iter().zip(prow).map(|(&g, &p)| g * p).sum();
                    for (g, &p) in grow.iter_mut().zip(prow) {
                        *g = p * (*g - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Attention { qkv, seq, heads, probs } => {
                let (seq, heads) = (*seq, *heads);
                let qv = val(*qkv);
                let (rows, c3) = dims(qv);
                let d = c3 / 3;
                let dh = d / heads;
                let batch = rows / seq;
                let scale = T::c(1.0 / (dh as f64).sqrt());
                let data = qv.data();
                let dys = dy.data();
                let mut dqkv = vec![T::zero(); rows * c3];
                let mut dp = vec![T::zero(); seq * seq];
                for s in 0..batch {
                    for h in 0..heads {
                        let base = s * seq * c3 + h * dh;
                        let q = MatRef {
                            data,
                            offset: base,
                            rows: seq,
                            cols: dh,
                            rs: c3,
                            cs: 1,
                        };
                        let k = MatRef { offset: base + d, ..q };
                        let v = MatRef {
                            offset: base + 2 * d,
                            ..q
                        };
                        let dout = MatRef {
                            data: dys,
                            offset: s * seq * d + h * dh,
                            rows: seq,
                            cols: dh,
                            rs: d,
                            cs: 1,
                        };
                        let p_off = (s * heads + h) * seq * seq;
                        let p = &probs[p_off..p_off + seq * seq];
                        let pm = MatRef::dense(p, seq, seq);
                        // dV = P^T dO
                        gemm(
                            T::one(),
                            pm.t(),
                            dout,
                            T::zero(),
                            MatMut {
                                data: &mut dqkv,
                                offset: base + 2 * d,
                                rows: seq,
                                cols: dh,
                                rs: c3,
                                cs: 1,
                            },
                        );
                        // dP = dO V^T, then through the softmax
                        gemm(T::one(), dout, v.t(), T::zero(), MatMut::dense(&mut dp, seq, seq));
                        for (grow, prow) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                            let dot: T = grow.iter().zip(prow).map(|(&g, &p)| g * p).sum();
                            for (g, &pp) in grow.iter_mut().zip(prow) {
                                *g = pp * (*g - dot);
                            }
                        }
                        let ds = MatRef::dense(&dp, seq, seq);
                        gemm(
                            scale,
                            ds,
                            k,
                            T::zero(),
                            MatMut {
                                data: &mut dqkv,
                                offset: base,
                                rows: seq,
                                cols: dh,
                                rs: c3,
                                cs: 1,
                            },
                        );
                        gemm(
                            scale,
                            ds.t(),
                            q,
                            T::zero(),
                            MatMut {
                                data: &mut dqkv,
                                offset: base + d,
                                rows: seq,
                                cols: dh,
                                rs: c3,
                                cs: 1,
                            },
                        );
                    }
                }
                vec![(*qkv, Tensor::new(qv.shape().to_vec(), dqkv))]
            }
            Op::GroupMax { x, argmax, .. } => {
                let (_, c) = dims(dy);
                let mut dx = Tensor::zeros(val(*x).shape().to_vec());
                let d = dx.data_mut();
                for (t, &g) in dy.data().iter().enumerate() {
                    d[argmax[t] * c + t % c] += g;
                }
                vec![(*x, dx)]
            }
            Op::GroupMean { x, group } => {
                let (r, c) = dims(val(*x));
                let inv = T::one() / T::c(*group as f64);
                let mut dx = vec![T::zero(); r * c];
                for row in 0..r {
                    let gi = row / group;
                    for j in 0..c {
                        dx[row * c + j] = dy.data()[gi * c + j] * inv;
                    }
                }
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), dx))]
            }
            Op::ConcatBroadcast { global, local, group } => {
                let (_, gc) = dims(val(*global));
                let (lr, lc) = dims(val(*local));
                let w = gc + lc;
                let mut dg = Tensor::zeros(val(*global).shape().to_vec());
                let mut dl = vec![T::zero(); lr * lc];
                let dys = dy.data();
                {
                    let dgd = dg.data_mut();
                    for r in 0..lr {
                        let gi = r / group;
                        for j in 0..gc {
                            dgd[gi * gc + j] += dys[r * w + j];
                        }
                        dl[r * lc..(r + 1) * lc].copy_from_slice(&dys[r * w + gc..(r + 1) * w]);
                    }
                }
                vec![(*global, dg), (*local, Tensor::new(val(*local).shape().to_vec(), dl))]
            }
            Op::ConcatCols(a, b) => {
                let (ar, ac) = dims(val(*a));
                let (_, bc) = dims(val(*b));
                let w = ac + bc;
                let mut da = Vec::with_capacity(ar * ac);
                let mut db = Vec::with_capacity(ar * bc);
                for row in dy.data().chunks(w) {
                    da.extend_from_slice(&row[..ac]);
                    db.extend_from_slice(&row[ac..]);
                }
                vec![
                    (*a, Tensor::new(val(*a).shape().to_vec(), da)),
                    (*b, Tensor::new(val(*b).shape().to_vec(), db)),
                ]
            }
            Op::GatherRows { x, rows } => {
                let (_, c) = dims(val(*x));
                let mut dx = Tensor::zeros(val(*x).shape().to_vec());
                let d = dx.data_mut();
                for (o, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += dy.data()[o * c + j];
                    }
                }
                vec![(*x, dx)]
            }
            Op::Chamfer {
                pred,
                target,
                pred_group,
                target_group,
                form,
                pred_witness,
                target_witness,
            } => {
                let pd = val(*pred).data();
                let td = val(*target).data();
                let g = pd.len() / (3 * pred_group);
                let up = dy.data()[0] / T::c(g.max(1) as f64);
                let wa = up / T::c(*pred_group as f64);
                let wb = up / T::c(*target_group as f64);
                let mut dp = vec![T::zero(); pd.len()];
                let mut dt = vec![T::zero(); td.len()];
                let two = T::c(2.0);
                let deriv = |diff: T| match form {
                    ChamferForm::L1 => {
                        if diff > T::zero() {
                            T::one()
                        } else if diff < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    }
                    ChamferForm::L2 => two * diff,
                };
                for (ai, &bi) in pred_witness.iter().enumerate() {
                    for ax in 0..3 {
                        let s = deriv(pd[3 * ai + ax] - td[3 * bi + ax]) * wa;
                        dp[3 * ai + ax] += s;
                        dt[3 * bi + ax] -= s;
                    }
                }
                for (bi, &ai) in target_witness.iter().enumerate() {
                    for ax in 0..3 {
                        let s = deriv(pd[3 * ai + ax] - td[3 * bi + ax]) * wb;
                        dp[3 * ai + ax] += s;
                        dt[3 * bi + ax] -= s;
                    }
                }
                vec![
                    (*pred, Tensor::new(val(*pred).shape().to_vec(), dp)),
                    (*target, Tensor::new(val(*target).shape().to_vec(), dt)),
                ]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (r, c) = dims(val(*logits));
                let up = dy.data()[0] / T::c(r.max(1) as f64);
                let mut dl = probs.clone();
                for (i, row) in dl.chunks_mut(c).enumerate() {
                    row[labels[i]] -= T::one();
                    row.iter_mut().for_each(|g| *g *= up);
                }
                vec![(*logits, Tensor::new(val(*logits).shape().to_vec(), dl))]
            }
            Op::Dropout { x, keep } => {
                let mut dx = dy.clone();
                for (g, &k) in dx.data_mut().iter_mut().zip(keep) {
                    *g *= k;
                }
                vec![(*x, dx)]
            }
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param => "param",
        Op::MatMul(..) => "matmul",
        Op::AddBias(..) => "add_bias",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Sum(..) => "sum",
        Op::Reshape(..) => "reshape",
        Op::Relu(..) => "relu",
        Op::Gelu(..) => "gelu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax { .. } => "softmax",
        Op::Attention { .. } => "attention",
        Op::GroupMax { .. } => "group_max",
        Op::GroupMean { .. } => "group_mean",
        Op::ConcatBroadcast { .. } => "concat_broadcast",
        Op::ConcatCols(..) => "concat_cols",
        Op::GatherRows { .. } => "gather_rows",
        Op::Chamfer { .. } => "chamfer",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Dropout { .. } => "dropout",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x);
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn unreached_params_get_zero_grad() {
        let mut ps = ParameterSet::<f64>::new();
        let a = ps.insert("a", Tensor::from_f64(vec![1], &[2.0]), true).unwrap();
        let b = ps.insert("b", Tensor::from_f64(vec![1], &[3.0]), true).unwrap();
        ps.get_mut(b).grad.fill(7.0);
        let mut g = Graph::new();
        let av = g.param(&ps, a);
        let s = g.sum(av);
        g.backward_into(s, &mut ps).unwrap();
        assert_eq!(ps.get(a).grad.data(), &[1.0]);
        assert_eq!(ps.get(b).grad.data(), &[0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_mask_leaks_nothing() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(
            vec![3, 3],
            &[1.0, 50.0, -3.0, 0.0, 0.0, 0.0, -20.0, 4.0, 9.0],
        ));
        let m = AttentionMask::causal(3);
        let y = g.softmax(x, Some(&m));
        let v = g.value(y);
        for i in 0..3 {
            let row = v.row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in i + 1..3 {
                assert!(row[j] <= 1e-12 * row.iter().sum::<f64>());
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(vec![2, 5]));
        let l = g.cross_entropy(x, &[0, 4]).unwrap();
        assert!((g.value(l).data()[0] - 5f64.ln()).abs() < 1e-14);
        assert!(g.cross_entropy(x, &[0, 5]).is_err());
    }
}
