use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, Bcast, ConvGeom, LayerNormCache};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Operation kinds recorded on the tape. Used for diagnostics and for the
/// gradient-check fault injection hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Matmul,
    Reshape,
    Permute,
    Concat,
    Narrow,
    Softmax,
    LayerNorm,
    Gelu,
    AdaptivePool,
    Conv,
    ConvTranspose,
    Repeat,
    Dropout,
    Sum,
    SumAxis,
    Norm,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Matmul => "matmul",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::AdaptivePool => "adaptive_avg_pool_seq",
            OpKind::Conv => "strided_conv_seq",
            OpKind::ConvTranspose => "transposed_conv_seq",
            OpKind::Repeat => "repeat_seq",
            OpKind::Dropout => "dropout",
            OpKind::Sum => "sum",
            OpKind::SumAxis => "sum_axis",
            OpKind::Norm => "norm",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }

    pub const ALL: [OpKind; 22] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Matmul,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::AdaptivePool,
        OpKind::Conv,
        OpKind::ConvTranspose,
        OpKind::Repeat,
        OpKind::Dropout,
        OpKind::Sum,
        OpKind::SumAxis,
        OpKind::Norm,
    ];
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Matmul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Softmax(usize, usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        cache: LayerNormCache<T>,
    },
    /// Caches the normal CDF of the input.
    Gelu {
        x: usize,
        cdf: Vec<T>,
    },
    AdaptivePool {
        x: usize,
        target: usize,
    },
    Conv {
        x: usize,
        kernel: usize,
        bias: usize,
        geo: ConvGeom,
    },
    ConvTranspose {
        x: usize,
        kernel: usize,
        bias: usize,
        geo: ConvGeom,
    },
    Repeat {
        x: usize,
        factor: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
    Sum(usize),
    SumAxis(usize, usize),
    Norm(usize),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Permute(..) => OpKind::Permute,
            Op::Concat(..) => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::AdaptivePool { .. } => OpKind::AdaptivePool,
            Op::Conv { .. } => OpKind::Conv,
            Op::ConvTranspose { .. } => OpKind::ConvTranspose,
            Op::Repeat { .. } => OpKind::Repeat,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Sum(..) => OpKind::Sum,
            Op::SumAxis(..) => OpKind::SumAxis,
            Op::Norm(..) => OpKind::Norm,
        }
    }
}

pub(crate) struct Node<T> {
    pub shape: Vec<usize>,
    pub data: Rc<Vec<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Ordered record of executed operations. One tape per logical execution
/// context; a tape is not `Sync`.
pub struct Tape<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    recorded_ops: Cell<usize>,
    corrupt: Cell<Option<OpKind>>,
    non_finite: Cell<Option<(usize, OpKind)>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Float> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Float> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recorded_ops: Cell::new(0),
            corrupt: Cell::new(None),
            non_finite: Cell::new(None),
        }
    }

    /// Records a value. Gradients are collected for it iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn param(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Number of non-leaf operations recorded and not yet differentiated.
    pub fn recorded_ops(&self) -> usize {
        self.recorded_ops.get()
    }

    /// Test hook: the backward rule of `kind` is deliberately perturbed so
    /// that gradient checks can demonstrate they catch broken rules.
    pub fn corrupt_backward(&self, kind: Option<OpKind>) {
        self.corrupt.set(kind);
    }

    /// Non-finite value detection (debug builds only).
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite.get() {
            Some((id, kind)) => Err(Error::Numerical(format!(
                "non-finite value produced by {kind} (node {id})"
            ))),
            None => Ok(()),
        }
    }

    pub(crate) fn push(&self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        debug_assert_eq!(super::numel(&shape), data.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if cfg!(debug_assertions) && self.non_finite.get().is_none() && !data.iter().all(|v| v.is_finite()) {
            self.non_finite.set(Some((id, op.kind())));
        }
        if !matches!(op, Op::Leaf) {
            self.recorded_ops.set(self.recorded_ops.get() + 1);
        }
        nodes.push(Node {
            shape,
            data: Rc::new(data),
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    pub(crate) fn node_data(&self, id: usize) -> Rc<Vec<T>> {
        Rc::clone(&self.nodes.borrow()[id].data)
    }

    pub(crate) fn node_shape(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    pub(crate) fn node_requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a scalar `loss`. Visits every recorded
    /// operation exactly once in reverse order, then clears the operation
    /// record (values stay readable).
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        assert!(std::ptr::eq(loss.tape, self), "loss recorded on another tape");
        self.check_finite()?;
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].data.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        if self.recorded_ops.get() == 0 {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        let mut visited = 0;
        let corrupt = self.corrupt.get();
        for id in (0..n).rev() {
            if matches!(nodes[id].op, Op::Leaf) {
                continue;
            }
            visited += 1;
            let Some(g) = grads[id].take() else { continue };
            let nodes_ref: &Vec<Node<T>> = &nodes;
            let mut contribs = backward_node(nodes_ref, id, &g)?;
            if corrupt == Some(nodes_ref[id].op.kind()) {
                for (_, c) in contribs.iter_mut() {
                    c.iter_mut().for_each(|v| *v *= T::lit(1.5));
                }
            }
            for (input, c) in contribs {
                if !nodes_ref[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        for node in nodes.iter_mut() {
            node.op = Op::Leaf;
        }
        self.recorded_ops.set(0);
        let leaf_grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| g.filter(|_| nodes[id].requires_grad))
            .collect();
        Ok(Gradients {
            grads: leaf_grads,
            visited,
        })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    visited: usize,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the loss with respect to `v`. Leaves unreachable from the
    /// loss get zeros.
    pub fn get(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        let node = v.tape.node_shape(v.id);
        if !v.tape.node_requires_grad(v.id) {
            return None;
        }
        let data = match self.grads.get(v.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![T::zero(); super::numel(&node)],
        };
        Tensor::new(node, data).ok()
    }

    /// Adds the gradient of `v` into `target.grad`.
    pub fn accumulate_into(&self, v: Var<'_, T>, target: &mut Tensor<T>) -> Result<()> {
        match self.grads.get(v.id).and_then(|g| g.as_ref()) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![T::zero(); target.numel()]),
        }
    }

    /// Number of operations traversed by the sweep.
    pub fn visited_ops(&self) -> usize {
        self.visited
    }
}

fn reduce_broadcast<T: Float>(g: &[T], out_shape: &[usize], in_shape: &[usize]) -> Vec<T> {
    let map = Bcast::new(out_shape, in_shape);
    let mut acc = vec![T::zero(); super::numel(in_shape)];
    match map {
        Bcast::Same => return g.to_vec(),
        Bcast::Cycle(n) => {
            for chunk in g.chunks_exact(n) {
                acc.iter_mut().zip(chunk).for_each(|(a, &v)| *a += v);
            }
            return acc;
        }
        Bcast::Map(_) => {}
    }
    for (i, &v) in g.iter().enumerate() {
        acc[map.at(i)] += v;
    }
    acc
}

type Contribs<T> = Vec<(usize, Vec<T>)>;

fn backward_node<T: Float>(nodes: &[Node<T>], id: usize, g: &[T]) -> Result<Contribs<T>> {
    let node = &nodes[id];
    let out_shape = &node.shape;
    let needs = |i: usize| nodes[i].requires_grad;
    let mut out: Contribs<T> = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -T::one()
            } else {
                T::one()
            };
            if needs(*a) {
                out.push((*a, reduce_broadcast(g, out_shape, &nodes[*a].shape)));
            }
            if needs(*b) {
                let mut gb = reduce_broadcast(g, out_shape, &nodes[*b].shape);
                if sign < T::zero() {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                out.push((*b, gb));
            }
        }
        Op::Mul(a, b) => {
            for (this, other) in [(*a, *b), (*b, *a)] {
                if !needs(this) {
                    continue;
                }
                let map = Bcast::new(out_shape, &nodes[other].shape);
                let od = &nodes[other].data;
                let prod: Vec<T> = g.iter().enumerate().map(|(i, &v)| v * od[map.at(i)]).collect();
                out.push((this, reduce_broadcast(&prod, out_shape, &nodes[this].shape)));
            }
        }
        Op::Scale(x, c) => out.push((*x, g.iter().map(|&v| v * *c).collect())),
        Op::AddScalar(x) | Op::Reshape(x) => out.push((*x, g.to_vec())),
        Op::Matmul(a, b) => {
            let (ga, gb) = matmul_backward(g, &nodes[*a], &nodes[*b], needs(*a), needs(*b));
            if let Some(ga) = ga {
                out.push((*a, ga));
            }
            if let Some(gb) = gb {
                out.push((*b, gb));
            }
        }
        Op::Permute(x, perm) => {
            let inv = kernels::inverse_perm(perm);
            out.push((*x, kernels::permute(g, out_shape, &inv)));
        }
        Op::Concat(parts, axis) => {
            let outer = super::numel(&out_shape[..*axis]);
            let inner = super::numel(&out_shape[*axis + 1..]);
            let total = out_shape[*axis];
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].shape[*axis];
                if needs(p) {
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[s..s + len * inner]);
                    }
                    out.push((p, gp));
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let in_shape = &nodes[*x].shape;
            let (outer, full, inner) = kernels::split_axis(in_shape, *axis);
            let len = out_shape[*axis];
            let mut gx = vec![T::zero(); outer * full * inner];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            out.push((*x, gx));
        }
        Op::Softmax(x, axis) => {
            let dims = kernels::split_axis(out_shape, *axis);
            out.push((*x, kernels::softmax_backward(&node.data, g, dims)));
        }
        Op::LayerNorm { x, gamma, beta, cache } => {
            let d = *out_shape.last().expect("layer_norm on rank-0");
            let (dx, dg, db) = kernels::layer_norm_backward(g, d, &nodes[*gamma].data, cache);
            out.push((*x, dx));
            out.push((*gamma, dg));
            out.push((*beta, db));
        }
        Op::Gelu { x, cdf } => {
            let xd = &nodes[*x].data;
            let dx = g
                .iter()
                .zip(xd.iter().zip(cdf))
                .map(|(&v, (&xi, &c))| v * kernels::gelu_grad_from_cdf(xi, c))
                .collect();
            out.push((*x, dx));
        }
        Op::AdaptivePool { x, target } => {
            let s = &nodes[*x].shape;
            let r = s.len();
            let (n, d) = (s[r - 2], s[r - 1]);
            let batch = super::numel(&s[..r - 2]);
            out.push((*x, kernels::adaptive_pool_backward(g, batch, n, d, *target)));
        }
        Op::Conv { x, kernel, bias, geo } | Op::ConvTranspose { x, kernel, bias, geo } => {
            let xd = &nodes[*x].data;
            let kd = &nodes[*kernel].data;
            let (dx, dk, db) = if matches!(node.op, Op::Conv { .. }) {
                kernels::conv_seq_backward(g, xd, kd, *geo)
            } else {
                kernels::conv_t_seq_backward(g, xd, kd, *geo)
            };
            out.push((*x, dx));
            out.push((*kernel, dk));
            out.push((*bias, db));
        }
        Op::Repeat { x, factor } => {
            let s = &nodes[*x].shape;
            let r = s.len();
            let (n, d) = (s[r - 2], s[r - 1]);
            let batch = super::numel(&s[..r - 2]);
            out.push((*x, kernels::repeat_seq_backward(g, batch, n, d, *factor)));
        }
        Op::Dropout { x, mask } => out.push((*x, g.iter().zip(mask).map(|(&v, &m)| v * m).collect())),
        Op::Sum(x) => out.push((*x, vec![g[0]; nodes[*x].data.len()])),
        Op::SumAxis(x, axis) => {
            let dims = kernels::split_axis(&nodes[*x].shape, *axis);
            out.push((*x, kernels::sum_axis_backward(g, dims)));
        }
        Op::Norm(x) => {
            let xd = &nodes[*x].data;
            let d = *nodes[*x].shape.last().expect("norm on rank-0");
            let mut gx = vec![T::zero(); xd.len()];
            for (r, (&gr, &nr)) in g.iter().zip(node.data.iter()).enumerate() {
                if nr > T::zero() {
                    for j in 0..d {
                        gx[r * d + j] = gr * xd[r * d + j] / nr;
                    }
                }
            }
            out.push((*x, gx));
        }
    }
    Ok(out)
}

fn matmul_backward<T: Float>(
    g: &[T],
    a: &Node<T>,
    b: &Node<T>,
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let ra = a.shape.len();
    let rb = b.shape.len();
    let (p, q) = (a.shape[ra - 2], a.shape[ra - 1]);
    let s = b.shape[rb - 1];
    let a_batch = &a.shape[..ra - 2];
    let b_batch = &b.shape[..rb - 2];
    let out_batch = kernels::broadcast_shape(a_batch, b_batch).expect("validated at forward");
    let nbo = super::numel(&out_batch);
    let mut ga = need_a.then(|| vec![T::zero(); a.data.len()]);
    let mut gb = need_b.then(|| vec![T::zero(); b.data.len()]);
    if b_batch.iter().product::<usize>() == 1 && a_batch == out_batch.as_slice() {
        let m = nbo * p;
        if let Some(ga) = ga.as_mut() {
            kernels::gemm((m, s, q), g, (s, 1), &b.data, (1, s), ga, (q, 1), true);
        }
        if let Some(gb) = gb.as_mut() {
            kernels::gemm((q, m, s), &a.data, (1, q), g, (s, 1), gb, (s, 1), true);
        }
        return (ga, gb);
    }
    let map_a = Bcast::new(&out_batch, a_batch);
    let map_b = Bcast::new(&out_batch, b_batch);
    for o in 0..nbo {
        let ia = map_a.at(o);
        let ib = map_b.at(o);
        let go = &g[o * p * s..(o + 1) * p * s];
        if let Some(ga) = ga.as_mut() {
            kernels::gemm(
                (p, s, q),
                go,
                (s, 1),
                &b.data[ib * q * s..(ib + 1) * q * s],
                (1, s),
                &mut ga[ia * p * q..(ia + 1) * p * q],
                (q, 1),
                true,
            );
        }
        if let Some(gb) = gb.as_mut() {
            kernels::gemm(
                (q, p, s),
                &a.data[ia * p * q..(ia + 1) * p * q],
                (1, q),
                go,
                (s, 1),
                &mut gb[ib * q * s..(ib + 1) * q * s],
                (s, 1),
                true,
            );
        }
    }
    (ga, gb)
}
