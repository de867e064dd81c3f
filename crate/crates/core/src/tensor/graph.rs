use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, around_axis, check_axis};
use super::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Gelu { x: usize, slope: Vec<f64> },
    Sigmoid(usize),
    Relu(usize),
    AddTiled(usize, usize),
    MulTiled(usize, usize),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    BatchMatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, axis: usize, normalized: Vec<f64>, inv_std: Vec<f64> },
    L2Normalize { x: usize, axis: usize, eps: f64, norms: Vec<f64> },
    Reshape(usize),
    Permute { x: usize, axes: Vec<usize> },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    MeanAxis { x: usize, axis: usize },
    SumAxis { x: usize, axis: usize },
    Sum(usize),
    Gather { x: usize, index: Rc<Vec<usize>> },
    BinaryCrossEntropy { pred: usize, target: Vec<f64>, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    /// Whether any parameter can receive gradient through this node.
    tracked: bool,
}

enum StopLog {
    Record(Vec<Tensor>),
    Replay { values: Vec<Tensor>, cursor: usize },
}

/// Operation record of one forward pass.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    stops: RefCell<StopLog>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: usize,
    graph: &'g Graph,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Per-node gradients of one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, zeros when it was not reached.
    pub fn of(&self, var: Var<'_>) -> Tensor {
        let shape = self.shapes[var.id].clone();
        match &self.grads[var.id] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn reached(&self, var: Var<'_>) -> bool {
        self.grads[var.id].is_some()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            stops: RefCell::new(StopLog::Record(Vec::new())),
        }
    }

    /// A graph whose `stop_gradient` calls return `values` in call order
    /// instead of their argument. Used by finite-difference checks to hold
    /// stop-gradient targets fixed at the unperturbed point.
    pub fn replaying(values: Vec<Tensor>) -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            stops: RefCell::new(StopLog::Replay { values, cursor: 0 }),
        }
    }

    /// Values produced by `stop_gradient` so far, in call order.
    pub fn stop_values(&self) -> Vec<Tensor> {
        match &*self.stops.borrow() {
            StopLog::Record(v) => v.clone(),
            StopLog::Replay { values, .. } => values.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added to
    /// the store's accumulators; nothing is zeroed here.
    pub fn backward(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<Gradients> {
        self.sweep(loss, Some(store))
    }

    /// Backward sweep that leaves parameter accumulators untouched; node
    /// gradients are still returned.
    pub fn gradients(&self, loss: Var<'_>) -> Result<Gradients> {
        self.sweep(loss, None)
    }

    fn sweep(&self, loss: Var<'_>, mut store: Option<&mut ParamStore>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if root.tracked {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            propagate(&nodes, node, &g, &mut grads, store.as_deref_mut());
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    if !nodes[id].tracked {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(
    nodes: &[Node],
    node: &Node,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    store: Option<&mut ParamStore>,
) {
    let val = |id: usize| nodes[id].value.data();
    let mut acc = |id: usize, grad: Vec<f64>| accumulate(nodes, grads, id, grad);
    match &node.op {
        Op::Leaf => {}
        Op::Param(pid) => {
            if let Some(store) = store {
                store.accumulate_grad(*pid, g);
            }
        }
        Op::Add(a, b) => {
            acc(*a, g.to_vec());
            acc(*b, g.to_vec());
        }
        Op::Sub(a, b) => {
            acc(*a, g.to_vec());
            acc(*b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            acc(*a, g.iter().zip(vb).map(|(g, b)| g * b).collect());
            acc(*b, g.iter().zip(va).map(|(g, a)| g * a).collect());
        }
        Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
        Op::Gelu { x, slope } => acc(*x, g.iter().zip(slope).map(|(g, d)| g * d).collect()),
        Op::Sigmoid(x) => {
            let y = node.value.data();
            acc(*x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
        }
        Op::Relu(x) => {
            let vx = val(*x);
            acc(*x, g.iter().zip(vx).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect());
        }
        Op::AddTiled(a, b) => {
            let nb = nodes[*b].value.numel();
            let mut gb = vec![0.0; nb];
            for chunk in g.chunks_exact(nb) {
                gb.iter_mut().zip(chunk).for_each(|(s, v)| *s += v);
            }
            acc(*a, g.to_vec());
            acc(*b, gb);
        }
        Op::MulTiled(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let nb = vb.len();
            let mut gb = vec![0.0; nb];
            let mut ga = Vec::with_capacity(g.len());
            for (gc, ac) in g.chunks_exact(nb).zip(va.chunks_exact(nb)) {
                for j in 0..nb {
                    ga.push(gc[j] * vb[j]);
                    gb[j] += gc[j] * ac[j];
                }
            }
            acc(*a, ga);
            acc(*b, gb);
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if nodes[*a].tracked {
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, g, false, val(*b), true, &mut ga, 0.0);
                acc(*a, ga);
            }
            if nodes[*b].tracked {
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, val(*a), true, g, false, &mut gb, 0.0);
                acc(*b, gb);
            }
        }
        Op::BatchMatMul { a, b, batch, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (va, vb) = (val(*a), val(*b));
            if nodes[*a].tracked {
                let mut ga = vec![0.0; batch * m * k];
                for i in 0..*batch {
                    kernels::gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &vb[i * k * n..(i + 1) * k * n],
                        true,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        0.0,
                    );
                }
                acc(*a, ga);
            }
            if nodes[*b].tracked {
                let mut gb = vec![0.0; batch * k * n];
                for i in 0..*batch {
                    kernels::gemm(
                        k,
                        m,
                        n,
                        &va[i * m * k..(i + 1) * m * k],
                        true,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &mut gb[i * k * n..(i + 1) * k * n],
                        0.0,
                    );
                }
                acc(*b, gb);
            }
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = around_axis(node.value.shape(), *axis);
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for r in 0..inner {
                    let base = o * len * inner + r;
                    let dot: f64 = (0..len)
                        .map(|i| g[base + i * inner] * y[base + i * inner])
                        .sum();
                    for i in 0..len {
                        let p = base + i * inner;
                        gx[p] = y[p] * (g[p] - dot);
                    }
                }
            }
            acc(*x, gx);
        }
        Op::LayerNorm { x, axis, normalized, inv_std } => {
            let (outer, len, inner) = around_axis(node.value.shape(), *axis);
            let mut gx = vec![0.0; g.len()];
            let nf = len as f64;
            for o in 0..outer {
                for r in 0..inner {
                    let base = o * len * inner + r;
                    let s = inv_std[o * inner + r];
                    let mut mg = 0.0;
                    let mut mgx = 0.0;
                    for i in 0..len {
                        let p = base + i * inner;
                        mg += g[p];
                        mgx += g[p] * normalized[p];
                    }
                    mg /= nf;
                    mgx /= nf;
                    for i in 0..len {
                        let p = base + i * inner;
                        gx[p] = s * (g[p] - mg - normalized[p] * mgx);
                    }
                }
            }
            acc(*x, gx);
        }
        Op::L2Normalize { x, axis, eps, norms } => {
            let y = node.value.data();
            let (outer, len, inner) = around_axis(node.value.shape(), *axis);
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for r in 0..inner {
                    let base = o * len * inner + r;
                    let norm = norms[o * inner + r];
                    if norm >= *eps {
                        let dot: f64 = (0..len)
                            .map(|i| g[base + i * inner] * y[base + i * inner])
                            .sum();
                        for i in 0..len {
                            let p = base + i * inner;
                            gx[p] = (g[p] - y[p] * dot) / norm;
                        }
                    } else {
                        for i in 0..len {
                            let p = base + i * inner;
                            gx[p] = g[p] / eps;
                        }
                    }
                }
            }
            acc(*x, gx);
        }
        Op::Reshape(x) => acc(*x, g.to_vec()),
        Op::Permute { x, axes } => {
            let inv = kernels::inverse_axes(axes);
            let (_, gx) = kernels::permute(g, node.value.shape(), &inv);
            acc(*x, gx);
        }
        Op::Concat { inputs, axis } => {
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis];
            let mut offset = 0;
            for &inp in inputs {
                let len = nodes[inp].value.shape()[*axis];
                let mut gi = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    gi.extend_from_slice(&g[start..start + len * inner]);
                }
                offset += len;
                acc(inp, gi);
            }
        }
        Op::Slice { x, axis, start } => {
            let in_shape = nodes[*x].value.shape();
            let (outer, total, inner) = around_axis(in_shape, *axis);
            let len = node.value.shape()[*axis];
            let mut gx = vec![0.0; outer * total * inner];
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            acc(*x, gx);
        }
        Op::MeanAxis { x, axis } | Op::SumAxis { x, axis } => {
            let in_shape = nodes[*x].value.shape();
            let (outer, len, inner) = around_axis(in_shape, *axis);
            let scale = match node.op {
                Op::MeanAxis { .. } => 1.0 / len as f64,
                _ => 1.0,
            };
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for i in 0..len {
                    for r in 0..inner {
                        gx[(o * len + i) * inner + r] = g[o * inner + r] * scale;
                    }
                }
            }
            acc(*x, gx);
        }
        Op::Sum(x) => acc(*x, vec![g[0]; nodes[*x].value.numel()]),
        Op::Gather { x, index } => {
            let mut gx = vec![0.0; nodes[*x].value.numel()];
            for (gv, &src) in g.iter().zip(index.iter()) {
                gx[src] += gv;
            }
            acc(*x, gx);
        }
        Op::BinaryCrossEntropy { pred, target, eps } => {
            let p = val(*pred);
            let gx = p
                .iter()
                .zip(target)
                .map(|(&p, &y)| {
                    if p > *eps && p < 1.0 - eps {
                        g[0] * (-y / p + (1.0 - y) / (1.0 - p))
                    } else {
                        0.0
                    }
                })
                .collect();
            acc(*pred, gx);
        }
    }
}

/// Concatenates `parts` along `axis`; all other extents must agree.
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat", "no inputs"))?;
    let graph = first.graph;
    let (shape, data, tracked) = {
        let nodes = graph.nodes.borrow();
        let base = nodes[first.id].value.shape().to_vec();
        check_axis("concat", &base, axis)?;
        let mut shape = base.clone();
        shape[axis] = 0;
        for p in parts {
            let s = nodes[p.id].value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shapes("concat", &base, s));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let v = &nodes[p.id].value;
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let tracked = parts.iter().any(|p| nodes[p.id].tracked);
        (shape, data, tracked)
    };
    let op = Op::Concat {
        inputs: parts.iter().map(|p| p.id).collect(),
        axis,
    };
    Ok(graph.push(Tensor::from_parts(shape, data), op, tracked))
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.graph.nodes.borrow()[self.id].value.item()
    }

    fn with<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.graph.nodes.borrow()[self.id].value)
    }

    fn with2<R>(&self, other: &Var<'g>, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.graph.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    fn tracked(&self) -> bool {
        self.graph.tracked(self.id)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let value = self.with(|t| {
            Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        });
        self.graph.push(value, op, self.tracked())
    }

    fn binary(
        &self,
        other: Var<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        let value = self.with2(&other, |a, b| {
            if a.shape() != b.shape() {
                return Err(Error::shapes(name, a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        })?;
        let tracked = self.tracked() || other.tracked();
        Ok(self.graph.push(value, op, tracked))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn gelu(self) -> Var<'g> {
        let (value, slope) = self.with(|t| {
            let (y, d): (Vec<f64>, Vec<f64>) = t.data().iter().map(|&x| kernels::gelu_with_grad(x)).unzip();
            (Tensor::from_parts(t.shape().to_vec(), y), d)
        });
        let op = Op::Gelu { x: self.id, slope };
        self.graph.push(value, op, self.tracked())
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), kernels::sigmoid)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |v| v.max(0.0))
    }

    fn tiled(
        self,
        other: Var<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        let value = self.with2(&other, |a, b| {
            let (sa, sb) = (a.shape(), b.shape());
            if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
                return Err(Error::shapes(name, sa, sb));
            }
            let data = a
                .data()
                .chunks_exact(b.numel())
                .flat_map(|chunk| chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)))
                .collect();
            Ok(Tensor::from_parts(sa.to_vec(), data))
        })?;
        let tracked = self.tracked() || other.tracked();
        Ok(self.graph.push(value, op, tracked))
    }

    /// Adds `other`, whose shape must equal a trailing suffix of this shape,
    /// repeated over the leading axes.
    pub fn add_tiled(self, other: Var<'g>) -> Result<Var<'g>> {
        self.tiled(other, "add_tiled", Op::AddTiled(self.id, other.id), |a, b| a + b)
    }

    /// Multiplies by `other` repeated over the leading axes (see [`Var::add_tiled`]).
    pub fn mul_tiled(self, other: Var<'g>) -> Result<Var<'g>> {
        self.tiled(other, "mul_tiled", Op::MulTiled(self.id, other.id), |a, b| a * b)
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (value, m, k, n) = self.with2(&other, |a, b| {
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::shapes("matmul", sa, sb));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut c = vec![0.0; m * n];
            kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut c, 0.0);
            Ok((Tensor::from_parts(vec![m, n], c), m, k, n))
        })?;
        let tracked = self.tracked() || other.tracked();
        let op = Op::MatMul { a: self.id, b: other.id, m, k, n };
        Ok(self.graph.push(value, op, tracked))
    }

    /// Batched product of [batch, m, k] and [batch, k, n].
    pub fn bmm(self, other: Var<'g>) -> Result<Var<'g>> {
        let (value, batch, m, k, n) = self.with2(&other, |a, b| {
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(Error::shapes("bmm", sa, sb));
            }
            let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut c = vec![0.0; batch * m * n];
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    false,
                    &mut c[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
            Ok((Tensor::from_parts(vec![batch, m, n], c), batch, m, k, n))
        })?;
        let tracked = self.tracked() || other.tracked();
        let op = Op::BatchMatMul { a: self.id, b: other.id, batch, m, k, n };
        Ok(self.graph.push(value, op, tracked))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let value = self.with(|t| {
            check_axis("softmax", t.shape(), axis)?;
            let (outer, len, inner) = around_axis(t.shape(), axis);
            let x = t.data();
            let mut y = vec![0.0; x.len()];
            for o in 0..outer {
                for r in 0..inner {
                    let base = o * len * inner + r;
                    let max = (0..len)
                        .map(|i| x[base + i * inner])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for i in 0..len {
                        let e = (x[base + i * inner] - max).exp();
                        y[base + i * inner] = e;
                        sum += e;
                    }
                    for i in 0..len {
                        y[base + i * inner] /= sum;
                    }
                }
            }
            Ok::<_, Error>(Tensor::from_parts(t.shape().to_vec(), y))
        })?;
        Ok(self.graph.push(value, Op::Softmax { x: self.id, axis }, self.tracked()))
    }

    /// Zero-mean, unit-variance normalization along `axis` (no affine).
    pub fn layer_norm(self, axis: usize, eps: f64) -> Result<Var<'g>> {
        let (value, inv_std) = self.with(|t| {
            check_axis("layer_norm", t.shape(), axis)?;
            let (outer, len, inner) = around_axis(t.shape(), axis);
            let x = t.data();
            let nf = len as f64;
            let mut y = vec![0.0; x.len()];
            let mut inv_std = vec![0.0; outer * inner];
            for o in 0..outer {
                for r in 0..inner {
                    let base = o * len * inner + r;
                    let mean = (0..len).map(|i| x[base + i * inner]).sum::<f64>() / nf;
                    let var = (0..len)
                        .map(|i| {
                            let d = x[base + i * inner] - mean;
                            d * d
                        })
                        .sum::<f64>()
                        / nf;
                    let s = 1.0 / (var + eps).sqrt();
                    inv_std[o * inner + r] = s;
                    for i in 0..len {
                        let p = base + i * inner;
                        y[p] = (x[p] - mean) * s;
                    }
                }
            }
            Ok::<_, Error>((Tensor::from_parts(t.shape().to_vec(), y), inv_std))
        })?;
        let op = Op::LayerNorm {
            x: self.id,
            axis,
            normalized: value.data().to_vec(),
            inv_std,
        };
        Ok(self.graph.push(value, op, self.tracked()))
    }

    /// `x / max(‖x‖₂, eps)` along `axis`.
    pub fn l2_normalize(self, axis: usize, eps: f64) -> Result<Var<'g>> {
        let (value, norms) = self.with(|t| {
            check_axis("l2_normalize", t.shape(), axis)?;
            let (outer, len, inner) = around_axis(t.shape(), axis);
            let x = t.data();
            let mut y = vec![0.0; x.len()];
            let mut norms = vec![0.0; outer * inner];
            for o in 0..outer {
                for r in 0..inner {
                    let base = o * len * inner + r;
                    let norm = (0..len)
                        .map(|i| x[base + i * inner] * x[base + i * inner])
                        .sum::<f64>()
                        .sqrt();
                    norms[o * inner + r] = norm;
                    let d = norm.max(eps);
                    for i in 0..len {
                        y[base + i * inner] = x[base + i * inner] / d;
                    }
                }
            }
            Ok::<_, Error>((Tensor::from_parts(t.shape().to_vec(), y), norms))
        })?;
        let op = Op::L2Normalize { x: self.id, axis, eps, norms };
        Ok(self.graph.push(value, op, self.tracked()))
    }

    /// Forward identity that blocks all gradient flow to its argument.
    pub fn stop_gradient(self) -> Var<'g> {
        let forward = self.value();
        let value = {
            let mut stops = self.graph.stops.borrow_mut();
            match &mut *stops {
                StopLog::Record(log) => {
                    log.push(forward.clone());
                    forward
                }
                StopLog::Replay { values, cursor } => {
                    let v = values
                        .get(*cursor)
                        .cloned()
                        .filter(|v| v.shape() == forward.shape())
                        .unwrap_or(forward);
                    *cursor += 1;
                    v
                }
            }
        };
        self.graph.push(value, Op::Leaf, false)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.with(|t| t.clone().reshaped(shape))?;
        Ok(self.graph.push(value, Op::Reshape(self.id), self.tracked()))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'g>> {
        let value = self.with(|t| t.permuted(axes))?;
        let op = Op::Permute { x: self.id, axes: axes.to_vec() };
        Ok(self.graph.push(value, op, self.tracked()))
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let value = self.with(|t| {
            check_axis("slice", t.shape(), axis)?;
            let (outer, total, inner) = around_axis(t.shape(), axis);
            if len == 0 || start + len > total {
                return Err(Error::dim(
                    "slice",
                    format!("range {start}..{} exceeds extent {total}", start + len),
                ));
            }
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = (o * total + start) * inner;
                data.extend_from_slice(&t.data()[s..s + len * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            Ok(Tensor::from_parts(shape, data))
        })?;
        let op = Op::Slice { x: self.id, axis, start };
        Ok(self.graph.push(value, op, self.tracked()))
    }

    /// Splits along `axis` into consecutive pieces of the given extents.
    pub fn split(self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'g>>> {
        let shape = self.shape();
        check_axis("split", &shape, axis)?;
        if sizes.iter().sum::<usize>() != shape[axis] {
            return Err(Error::dim(
                "split",
                format!("sizes {sizes:?} do not cover extent {}", shape[axis]),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'g>> {
        let name = if mean { "mean_axis" } else { "sum_axis" };
        let value = self.with(|t| {
            check_axis(name, t.shape(), axis)?;
            let (outer, len, inner) = around_axis(t.shape(), axis);
            let x = t.data();
            let mut y = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..len {
                    for r in 0..inner {
                        y[o * inner + r] += x[(o * len + i) * inner + r];
                    }
                }
            }
            if mean {
                y.iter_mut().for_each(|v| *v /= len as f64);
            }
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            Ok::<_, Error>(Tensor::from_parts(shape, y))
        })?;
        let op = if mean {
            Op::MeanAxis { x: self.id, axis }
        } else {
            Op::SumAxis { x: self.id, axis }
        };
        Ok(self.graph.push(value, op, self.tracked()))
    }

    /// Arithmetic mean over `axis`, removing it.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'g>> {
        self.reduce_axis(axis, true)
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        self.reduce_axis(axis, false)
    }

    pub fn sum(self) -> Var<'g> {
        let value = self.with(|t| Tensor::scalar(t.data().iter().sum()));
        self.graph.push(value, Op::Sum(self.id), self.tracked())
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.with(|t| t.numel()) as f64;
        self.sum().scale(1.0 / n)
    }

    /// `out.flat[i] = self.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.with(|t| {
            let n: usize = shape.iter().product();
            if n != index.len() {
                return Err(Error::dim(
                    "gather",
                    format!("{} indices for shape {shape:?}", index.len()),
                ));
            }
            if let Some(&bad) = index.iter().find(|&&i| i >= t.numel()) {
                return Err(Error::dim(
                    "gather",
                    format!("index {bad} out of range for {} values", t.numel()),
                ));
            }
            let data = index.iter().map(|&i| t.data()[i]).collect();
            Ok(Tensor::from_parts(shape.to_vec(), data))
        })?;
        let op = Op::Gather { x: self.id, index };
        Ok(self.graph.push(value, op, self.tracked()))
    }

    /// `−Σ [y ln p + (1−y) ln(1−p)]` with `p` clamped to `[eps, 1−eps]`.
    pub fn binary_cross_entropy_sum(self, target: &[f64], eps: f64) -> Result<Var<'g>> {
        let value = self.with(|t| {
            if t.numel() != target.len() {
                return Err(Error::shapes("bce", t.shape(), &[target.len()]));
            }
            let s: f64 = t
                .data()
                .iter()
                .zip(target)
                .map(|(&p, &y)| {
                    let p = p.clamp(eps, 1.0 - eps);
                    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                })
                .sum();
            Ok(Tensor::scalar(s))
        })?;
        let op = Op::BinaryCrossEntropy {
            pred: self.id,
            target: target.to_vec(),
            eps,
        };
        Ok(self.graph.push(value, op, self.tracked()))
    }
}
