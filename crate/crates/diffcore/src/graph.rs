//! Dynamic differentiation graph.
//!
//! Every primitive appends a node holding its forward value; nodes are
//! therefore stored in topological order and `backward` is a single reverse
//! sweep. Gradients persist on the nodes and accumulate across sweeps until
//! [`Graph::zero_grad`] is called.

use crate::element::Element;
use crate::error::{DiffError, Result};
use crate::strided::{
    broadcast_shapes, broadcast_strides, contiguous_strides, gather, is_suffix, scatter, split_axis, visit2,
};
use crate::tensor::{check_shape, numel, DTensor};

/// Variance floor used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<E> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
    AddScalar(Var),
    Square(Var),
    MatMul(Var, Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<E>,
        rstd: Vec<E>,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    BroadcastTo(Var),
    SumAll(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
}

#[derive(Debug)]
struct Node<E> {
    shape: Vec<usize>,
    value: Vec<E>,
    op: Op<E>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
}

#[derive(Debug, Default)]
pub struct Graph<E> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<E>, op: Op<E>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<E> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor as a leaf, honouring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &DTensor<E>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<E>, requires_grad: bool) -> Result<Var> {
        check_shape(shape)?;
        if numel(shape) != data.len() {
            return Err(DiffError::BadBuffer {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<E>) -> Result<Var> {
        self.input(shape, data, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<Var> {
        self.input(shape, vec![E::zero(); numel(shape)], false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[E] {
        &self.node(v).value
    }

    /// Accumulated gradient of a leaf; `None` for intermediates and for
    /// leaves the loss has not reached.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.node(v).grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Snapshot of a node as a standalone tensor (value and gradient).
    pub fn tensor(&self, v: Var) -> DTensor<E> {
        let n = self.node(v);
        let mut t = DTensor::new(&n.shape, n.value.clone()).expect("node shape is valid");
        t.requires_grad = n.requires_grad;
        t.set_grad(n.grad.clone()).expect("grad shape matches");
        t
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ----------------------------------------------------------------- ops

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(E, E) -> E) -> Result<(Vec<usize>, Vec<E>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shapes(sa, sb).ok_or_else(|| DiffError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let (va, vb) = (self.value(a), self.value(b));
        let value = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else if sa == out.as_slice() && is_suffix(sb, &out) {
            va.chunks_exact(vb.len())
                .flat_map(|row| row.iter().zip(vb).map(|(&x, &y)| f(x, y)))
                .collect()
        } else if sb == out.as_slice() && is_suffix(sa, &out) {
            vb.chunks_exact(va.len())
                .flat_map(|row| va.iter().zip(row).map(|(&x, &y)| f(x, y)))
                .collect()
        } else {
            let (ta, tb) = (broadcast_strides(sa, &out), broadcast_strides(sb, &out));
            let mut v = Vec::with_capacity(numel(&out));
            visit2(&out, &ta, &tb, |_, i, j| v.push(f(va[i], vb[j])));
            v
        };
        Ok((out, value))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: E) -> Var {
        let value = self.value(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, value, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: E) -> Var {
        let value = self.value(x).iter().map(|&v| v + s).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, value, Op::AddScalar(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v * v).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, value, Op::Square(x), rg)
    }

    /// Batched matrix product over the trailing two axes; leading axes
    /// broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || DiffError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let plan = MatmulPlan::new(&sa[..sa.len() - 2], &sb[..sb.len() - 2], m, k, n).ok_or_else(mismatch)?;
        let mut out = vec![E::zero(); plan.batch_len() * m * n];
        plan.forward(self.value(a), self.value(b), &mut out);
        let mut shape = plan.batch.clone();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul(a, b), rg))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(DiffError::InvalidAxis { op, axis, rank });
        }
        Ok(())
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let xv = self.value(x);
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFiniteInput { op: "softmax" });
        }
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut y = vec![E::zero(); xv.len()];
        if inner == 1 {
            for (xr, yr) in xv.chunks_exact(n).zip(y.chunks_exact_mut(n)) {
                let max = xr.iter().copied().fold(E::neg_infinity(), E::max);
                let mut sum = E::zero();
                for (o, &v) in yr.iter_mut().zip(xr) {
                    *o = (v - max).exp();
                    sum = sum + *o;
                }
                let inv = sum.recip();
                yr.iter_mut().for_each(|o| *o = *o * inv);
            }
            let rg = self.rg(&[x]);
            return Ok(self.push(shape, y, Op::Softmax { x, axis }, rg));
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| xv[at(j)]).fold(E::neg_infinity(), E::max);
                let mut sum = E::zero();
                for j in 0..n {
                    let e = (xv[at(j)] - max).exp();
                    y[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..n {
                    y[at(j)] = y[at(j)] / sum;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape, y, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes along `axis` to zero mean and unit variance, then applies
    /// `gain` and `bias` (both shaped `[extent]`).
    pub fn layer_norm(&mut self, x: Var, axis: usize, gain: Var, bias: Var) -> Result<Var> {
        self.check_axis("layer_norm", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        if n < 1 {
            return Err(DiffError::ZeroExtent(shape));
        }
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(DiffError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let eps = E::from_f64(LAYER_NORM_EPS);
        let nf = E::from_f64(n as f64);
        let mut xhat = vec![E::zero(); xv.len()];
        let mut rstd = vec![E::zero(); outer * inner];
        let mut y = vec![E::zero(); xv.len()];
        if inner == 1 {
            for (r, ((xr, hr), yr)) in xv
                .chunks_exact(n)
                .zip(xhat.chunks_exact_mut(n))
                .zip(y.chunks_exact_mut(n))
                .enumerate()
            {
                let mean = xr.iter().fold(E::zero(), |s, &v| s + v) / nf;
                let var = xr.iter().fold(E::zero(), |s, &v| s + (v - mean) * (v - mean)) / nf;
                let rs = (var + eps).sqrt().recip();
                rstd[r] = rs;
                for j in 0..n {
                    let h = (xr[j] - mean) * rs;
                    hr[j] = h;
                    yr[j] = h * gv[j] + bv[j];
                }
            }
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let mean = (0..n).fold(E::zero(), |s, j| s + xv[at(j)]) / nf;
                    let var = (0..n).fold(E::zero(), |s, j| {
                        let d = xv[at(j)] - mean;
                        s + d * d
                    }) / nf;
                    let r = (var + eps).sqrt().recip();
                    rstd[o * inner + i] = r;
                    for j in 0..n {
                        let h = (xv[at(j)] - mean) * r;
                        xhat[at(j)] = h;
                        y[at(j)] = h * gv[j] + bv[j];
                    }
                }
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            shape,
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(DiffError::InvalidPermutation {
                op: "permute",
                perm: perm.to_vec(),
                rank,
            });
        }
        let src_strides = contiguous_strides(shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let value = gather(self.value(x), &out_shape, &strides);
        let rg = self.rg(&[x]);
        Ok(self.push(out_shape, value, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    /// Swaps the trailing two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(DiffError::InvalidAxis {
                op: "transpose_last",
                axis: 1,
                rank,
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        if numel(shape) != self.value(x).len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x);
        if broadcast_shapes(src, shape).as_deref() != Some(shape) {
            return Err(DiffError::ShapeMismatch {
                op: "broadcast_to",
                lhs: src.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let strides = broadcast_strides(src, shape);
        let value = gather(self.value(x), shape, &strides);
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), value, Op::BroadcastTo(x), rg))
    }

    /// Sum of all elements, as a shape-`[]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().fold(E::zero(), |a, &b| a + b);
        let rg = self.rg(&[x]);
        self.push(Vec::new(), vec![s], Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, E::from_f64(1.0 / n as f64))
    }

    /// Mean along `axis`; the axis is kept with extent 1 when `keepdim`.
    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let inv = E::from_f64(1.0 / n as f64);
        let mut out = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &xv[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut out_shape = shape;
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out_shape, out, Op::MeanAxis { x, axis }, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(DiffError::InvalidAxis {
            op: "concat",
            axis,
            rank: 0,
        })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let w = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * w..(o + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            out_shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `x @ w + b` over the trailing axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a scalar `loss`, accumulating into every reachable
    /// leaf that requires a gradient. Intermediate results do not keep their
    /// gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.node(loss);
        if n.value.len() != 1 {
            return Err(DiffError::NonScalarLoss(n.shape.clone()));
        }
        if !n.requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<E>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                continue;
            }
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[E], adj: &mut [Option<Vec<E>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.reduce_into(*a, &node.shape, g, adj, |x| x);
                self.reduce_into(*b, &node.shape, g, adj, |x| x);
            }
            Op::Sub(a, b) => {
                self.reduce_into(*a, &node.shape, g, adj, |x| x);
                self.reduce_into(*b, &node.shape, g, adj, |x| -x);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (
                    broadcast_strides(self.shape(*a), &node.shape),
                    broadcast_strides(self.shape(*b), &node.shape),
                );
                if self.requires_grad(*a) {
                    let mut ga = vec![E::zero(); va.len()];
                    visit2(&node.shape, &sa, &sb, |o, ia, ib| ga[ia] = ga[ia] + g[o] * vb[ib]);
                    add_adj(adj, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![E::zero(); vb.len()];
                    visit2(&node.shape, &sa, &sb, |o, ia, ib| gb[ib] = gb[ib] + g[o] * va[ia]);
                    add_adj(adj, *b, gb);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                add_adj(adj, *x, g.iter().map(|&v| v * s).collect());
            }
            Op::AddScalar(x) | Op::Reshape(x) => add_adj(adj, *x, g.to_vec()),
            Op::Square(x) => {
                let two = E::from_f64(2.0);
                let xv = self.value(*x);
                add_adj(adj, *x, g.iter().zip(xv).map(|(&d, &v)| two * v * d).collect());
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, adj),
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                let mut gx = vec![E::zero(); y.len()];
                if inner == 1 {
                    for ((gr, yr), xr) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                        let dot = gr.iter().zip(yr).fold(E::zero(), |s, (&a, &b)| s + a * b);
                        for j in 0..n {
                            xr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    add_adj(adj, *x, gx);
                    return;
                }
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + k;
                        let dot = (0..n).fold(E::zero(), |s, j| s + g[at(j)] * y[at(j)]);
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                add_adj(adj, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                rstd,
            } => {
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                let gv = self.value(*gain);
                let nf = E::from_f64(n as f64);
                let mut gx = vec![E::zero(); xhat.len()];
                let mut ggain = vec![E::zero(); n];
                let mut gbias = vec![E::zero(); n];
                if inner == 1 {
                    for (r, ((gr, hr), xr)) in g
                        .chunks_exact(n)
                        .zip(xhat.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                        .enumerate()
                    {
                        let (mut m1, mut m2) = (E::zero(), E::zero());
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * hr[j];
                            ggain[j] = ggain[j] + gr[j] * hr[j];
                            gbias[j] = gbias[j] + gr[j];
                        }
                        let (m1, m2) = (m1 / nf, m2 / nf);
                        let rs = rstd[r];
                        for j in 0..n {
                            xr[j] = rs * (gr[j] * gv[j] - m1 - hr[j] * m2);
                        }
                    }
                } else {
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + k;
                            let (mut m1, mut m2) = (E::zero(), E::zero());
                            for j in 0..n {
                                let dh = g[at(j)] * gv[j];
                                m1 = m1 + dh;
                                m2 = m2 + dh * xhat[at(j)];
                                ggain[j] = ggain[j] + g[at(j)] * xhat[at(j)];
                                gbias[j] = gbias[j] + g[at(j)];
                            }
                            let (m1, m2) = (m1 / nf, m2 / nf);
                            let r = rstd[o * inner + k];
                            for j in 0..n {
                                let dh = g[at(j)] * gv[j];
                                gx[at(j)] = r * (dh - m1 - xhat[at(j)] * m2);
                            }
                        }
                    }
                }
                if self.requires_grad(*x) {
                    add_adj(adj, *x, gx);
                }
                if self.requires_grad(*gain) {
                    add_adj(adj, *gain, ggain);
                }
                if self.requires_grad(*bias) {
                    add_adj(adj, *bias, gbias);
                }
            }
            Op::Permute { x, perm } => {
                let src_strides = contiguous_strides(self.shape(*x));
                let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
                let mut gx = vec![E::zero(); g.len()];
                scatter(g, &mut gx, &node.shape, &strides);
                add_adj(adj, *x, gx);
            }
            Op::BroadcastTo(x) => self.reduce_into(*x, &node.shape, g, adj, |v| v),
            Op::SumAll(x) => add_adj(adj, *x, vec![g[0]; self.value(*x).len()]),
            Op::MeanAxis { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let inv = E::from_f64(1.0 / n as f64);
                let mut gx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        gx.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v * inv));
                    }
                }
                add_adj(adj, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                let mut grads: Vec<Vec<E>> = parts.iter().map(|p| Vec::with_capacity(self.value(*p).len())).collect();
                for _ in 0..outer {
                    for (p, buf) in parts.iter().zip(grads.iter_mut()) {
                        let w = self.shape(*p)[*axis] * inner;
                        buf.extend_from_slice(&g[offset..offset + w]);
                        offset += w;
                    }
                }
                for (p, buf) in parts.iter().zip(grads) {
                    if self.requires_grad(*p) {
                        add_adj(adj, *p, buf);
                    }
                }
            }
        }
    }

    /// Sums an upstream gradient of shape `out` down to the (possibly
    /// broadcast) shape of `x`.
    fn reduce_into(&self, x: Var, out: &[usize], g: &[E], adj: &mut [Option<Vec<E>>], f: impl Fn(E) -> E) {
        if !self.requires_grad(x) {
            return;
        }
        let sx = self.shape(x);
        if sx == out {
            add_adj(adj, x, g.iter().map(|&v| f(v)).collect());
            return;
        }
        let mut gx = vec![E::zero(); numel(sx)];
        if is_suffix(sx, out) {
            for row in g.chunks_exact(gx.len()) {
                gx.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + f(v));
            }
        } else {
            let strides = broadcast_strides(sx, out);
            visit2(out, &strides, &strides, |o, ix, _| gx[ix] = gx[ix] + f(g[o]));
        }
        add_adj(adj, x, gx);
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &[E], adj: &mut [Option<Vec<E>>]) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let plan = MatmulPlan::new(&sa[..sa.len() - 2], &sb[..sb.len() - 2], m, k, n).expect("validated in forward");
        if self.requires_grad(a) {
            let mut ga = vec![E::zero(); self.value(a).len()];
            plan.grad_lhs(g, self.value(b), &mut ga);
            add_adj(adj, a, ga);
        }
        if self.requires_grad(b) {
            let mut gb = vec![E::zero(); self.value(b).len()];
            plan.grad_rhs(self.value(a), g, &mut gb);
            add_adj(adj, b, gb);
        }
    }
}

fn add_adj<E: Element>(adj: &mut [Option<Vec<E>>], v: Var, g: Vec<E>) {
    match &mut adj[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
        slot @ None => *slot = Some(g),
    }
}

/// Batch layout of a broadcast matrix product.
struct MatmulPlan {
    batch: Vec<usize>,
    /// Matrix index pairs `(out, lhs, rhs)`, one per output matrix.
    pairs: Vec<(usize, usize, usize)>,
    /// The rhs is a single matrix and the lhs batch is dense, so all rows of
    /// the lhs can be folded into one product.
    fold: bool,
    m: usize,
    k: usize,
    n: usize,
}

/// Products below this many multiply-adds skip the packed kernel, whose
/// setup dominates for the tiny per-head attention matrices.
const SMALL_GEMM: usize = 16 * 1024;

/// `c = alpha * a @ b + beta * c` over strided operands.
///
/// # Safety
/// Pointers and strides must address valid `m x k`, `k x n` and `m x n`
/// matrices, with `c` not aliasing `a` or `b`.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
    a: *const E,
    rsa: isize,
    csa: isize,
    b: *const E,
    rsb: isize,
    csb: isize,
    beta: E,
    c: *mut E,
    rsc: isize,
    csc: isize,
) {
    if m * k * n > SMALL_GEMM {
        return E::gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
    for i in 0..m as isize {
        for j in 0..n as isize {
            let cij = c.offset(i * rsc + j * csc);
            *cij = if beta == E::zero() { E::zero() } else { beta * *cij };
        }
        for p in 0..k as isize {
            let aip = alpha * *a.offset(i * rsa + p * csa);
            let brow = b.offset(p * rsb);
            let crow = c.offset(i * rsc);
            for j in 0..n as isize {
                let cij = crow.offset(j * csc);
                *cij = *cij + aip * *brow.offset(j * csb);
            }
        }
    }
}

impl MatmulPlan {
    fn new(ba: &[usize], bb: &[usize], m: usize, k: usize, n: usize) -> Option<Self> {
        let batch = broadcast_shapes(ba, bb)?;
        let (ta, tb) = (broadcast_strides(ba, &batch), broadcast_strides(bb, &batch));
        let mut pairs = Vec::with_capacity(numel(&batch));
        visit2(&batch, &ta, &tb, |o, i, j| pairs.push((o, i, j)));
        let fold = numel(bb) == 1 && numel(ba) == numel(&batch);
        Some(Self {
            batch,
            pairs,
            fold,
            m,
            k,
            n,
        })
    }

    fn batch_len(&self) -> usize {
        self.pairs.len()
    }

    fn forward<E: Element>(&self, a: &[E], b: &[E], c: &mut [E]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.fold {
            let rows = self.pairs.len() * m;
            // SAFETY: a is rows x k, b is k x n, c is rows x n, all contiguous.
            unsafe {
                gemm::<E>(
                    rows,
                    k,
                    n,
                    E::one(),
                    a.as_ptr(),
                    k as isize,
                    1,
                    b.as_ptr(),
                    n as isize,
                    1,
                    E::zero(),
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            return;
        }
        for &(o, i, j) in &self.pairs {
            // SAFETY: offsets index whole matrices inside the checked buffers.
            unsafe {
                gemm::<E>(
                    m,
                    k,
                    n,
                    E::one(),
                    a[i * m * k..].as_ptr(),
                    k as isize,
                    1,
                    b[j * k * n..].as_ptr(),
                    n as isize,
                    1,
                    E::zero(),
                    c[o * m * n..].as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    }

    /// `ga += g @ b^T`, summed over broadcast batches.
    fn grad_lhs<E: Element>(&self, g: &[E], b: &[E], ga: &mut [E]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.fold {
            let rows = self.pairs.len() * m;
            // SAFETY: g is rows x n, b^T is n x k via swapped strides.
            unsafe {
                gemm::<E>(
                    rows,
                    n,
                    k,
                    E::one(),
                    g.as_ptr(),
                    n as isize,
                    1,
                    b.as_ptr(),
                    1,
                    n as isize,
                    E::one(),
                    ga.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
            return;
        }
        for &(o, i, j) in &self.pairs {
            // SAFETY: as in forward.
            unsafe {
                gemm::<E>(
                    m,
                    n,
                    k,
                    E::one(),
                    g[o * m * n..].as_ptr(),
                    n as isize,
                    1,
                    b[j * k * n..].as_ptr(),
                    1,
                    n as isize,
                    E::one(),
                    ga[i * m * k..].as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
        }
    }

    /// `gb += a^T @ g`, summed over broadcast batches.
    fn grad_rhs<E: Element>(&self, a: &[E], g: &[E], gb: &mut [E]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.fold {
            let rows = self.pairs.len() * m;
            // SAFETY: a^T is k x rows via swapped strides, g is rows x n.
            unsafe {
                gemm::<E>(
                    k,
                    rows,
                    n,
                    E::one(),
                    a.as_ptr(),
                    1,
                    k as isize,
                    g.as_ptr(),
                    n as isize,
                    1,
                    E::one(),
                    gb.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            return;
        }
        for &(o, i, j) in &self.pairs {
            // SAFETY: as in forward.
            unsafe {
                gemm::<E>(
                    k,
                    m,
                    n,
                    E::one(),
                    a[i * m * k..].as_ptr(),
                    1,
                    k as isize,
                    g[o * m * n..].as_ptr(),
                    n as isize,
                    1,
                    E::one(),
                    gb[j * k * n..].as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = g.constant(&[2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c), &[2.0, 3.0, 4.0, 5.0]);

        let r = g.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let col = g.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
        let d = g.matmul(r, col).unwrap();
        assert_eq!(g.shape(d), &[1, 1]);
        assert_eq!(g.value(d), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.zeros(&[2, 3]).unwrap();
        let b = g.zeros(&[2, 3]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            DiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"));
    }

    #[test]
    fn matmul_grad_of_sum_is_row_sums_of_rhs() {
        // d/dA sum(A B) = 1 B^T, i.e. every row equals the row sums of B.
        let mut g = Graph::<f64>::new();
        let a = g.input(&[3, 2], vec![0.3, -1.0, 2.0, 0.5, 1.5, -0.7], true).unwrap();
        let b = g
            .input(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.25, 2.0], true)
            .unwrap();
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        let row = [10.0, 1.75];
        let expected: Vec<f64> = (0..3).flat_map(|_| row).collect();
        assert!(close(g.grad(a).unwrap(), &expected, 1e-12));
    }

    #[test]
    fn batched_matmul_broadcasts_lhs_and_rhs() {
        let mut g = Graph::<f64>::new();
        // lhs [2,1,1,2], rhs [3,2,1] -> [2,3,1,1]
        let a = g.constant(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.constant(&[3, 2, 1], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 1, 1]);
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 3.0, 4.0, 7.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[2], vec![0.0, 0.0]).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5]);

        let x = g.constant(&[2], vec![2f64.ln(), 0.0]).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert!(close(g.value(y), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));

        let x = g.constant(&[2], vec![1000.0, 0.0]).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert!(g.value(y).iter().all(|v| v.is_finite()));
        assert!((g.value(y)[0] - 1.0).abs() < 1e-12 && g.value(y)[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&[2], vec![f32::NAN, 0.0]).unwrap();
        assert_eq!(
            g.softmax(x, 0).unwrap_err(),
            DiffError::NonFiniteInput { op: "softmax" }
        );
        let x = g.constant(&[2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(g.softmax(x, 1), Err(DiffError::InvalidAxis { .. })));
    }

    #[test]
    fn softmax_along_middle_axis() {
        let mut g = Graph::<f64>::new();
        let x = g
            .constant(&[2, 3, 2], (0..12).map(|v| v as f64 * 0.37).collect())
            .unwrap();
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y);
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|j| v[(o * 3 + j) * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let one = g.constant(&[2], vec![1.0, 1.0]).unwrap();
        let zero = g.constant(&[2], vec![0.0, 0.0]).unwrap();

        let x = g.constant(&[2], vec![5.0, 5.0]).unwrap();
        let y = g.layer_norm(x, 0, one, zero).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0]);

        let x = g.constant(&[2], vec![1.0, 3.0]).unwrap();
        let y = g.layer_norm(x, 0, one, zero).unwrap();
        // var = 1, so the epsilon shifts the result by ~5e-6
        assert!(close(g.value(y), &[-1.0, 1.0], 1e-5));

        let nil = g.constant(&[2], vec![0.0, 0.0]).unwrap();
        let c = g.constant(&[2], vec![0.7, 0.7]).unwrap();
        let y = g.layer_norm(x, 0, nil, c).unwrap();
        assert_eq!(g.value(y), &[0.7, 0.7]);
    }

    #[test]
    fn layer_norm_rejects_mismatched_gain() {
        let mut g = Graph::<f32>::new();
        let x = g.zeros(&[3, 4]).unwrap();
        let gain = g.zeros(&[3]).unwrap();
        let bias = g.zeros(&[4]).unwrap();
        assert!(g.layer_norm(x, 1, gain, bias).is_err());
    }

    #[test]
    fn backward_linear_and_square() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&[3], vec![1.0, -2.0, 0.5], true).unwrap();
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.input(&[2], vec![1.0, 2.0], true).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&[2], vec![1.0, 2.0], true).unwrap();
        assert_eq!(g.backward(x).unwrap_err(), DiffError::NonScalarLoss(vec![2]));
    }

    #[test]
    fn backward_twice_doubles() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&[2, 2], vec![0.1, 0.2, -0.3, 0.4], true).unwrap();
        let y = g.softmax(x, 1).unwrap();
        let z = g.square(y);
        let l = g.sum(z);
        g.backward(l).unwrap();
        let once = g.grad(x).unwrap().to_vec();
        g.backward(l).unwrap();
        let twice = g.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn permute_and_concat_roundtrip() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = g.permute(x, &[1, 0]).unwrap();
        assert_eq!(g.value(t), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(g.permute(x, &[0, 0]).is_err());

        let y = g.constant(&[2, 1], vec![7.0, 8.0]).unwrap();
        let c = g.concat(&[x, y], 1).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 7.0, 4.0, 5.0, 6.0, 8.0]);
        let m = g.mean_axis(x, 0, true).unwrap();
        assert_eq!(g.shape(m), &[1, 3]);
        assert_eq!(g.value(m), &[2.5, 3.5, 4.5]);
    }

    #[test]
    fn constants_do_not_receive_grad() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(&[2], vec![1.0, 2.0]).unwrap();
        let x = g.input(&[2], vec![3.0, 4.0], true).unwrap();
        let p = g.mul(c, x).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
    }
}
