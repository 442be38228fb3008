//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op on a [`Var`] evaluates eagerly and appends a node to its
//! [`Graph`]. [`Graph::backward`] walks the nodes in reverse creation order,
//! which is a valid topological order because a node can only reference
//! nodes created before it.

use crate::kernels::broadcast::{self, broadcast_shape};
use crate::kernels::conv::{conv2d_backward, conv2d_forward, Conv2dSpec};
use crate::kernels::gemm::{gemm, MatRef};
use crate::kernels::resize::{resize_backward, resize_forward};
use crate::params::{ParamId, ParamStore};
use crate::Tensor;
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, scale: f64 },
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Permute { x: usize, perm: Vec<usize> },
    Reshape { x: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Relu(usize),
    Sigmoid(usize),
    Gelu(usize),
    Prelu { x: usize, slope: usize },
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, mean: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: usize, w: usize, b: Option<usize>, spec: Conv2dSpec },
    Resize(usize),
    AvgPool(usize),
    MaxPool { x: usize, argmax: Vec<usize> },
    Sum(usize),
    Mean(usize),
    CrossEntropy { logits: usize, probs: Tensor, targets: Arc<[u8]>, ignore: u8, valid: usize },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A tape of evaluated ops.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// A value that takes no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A value whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let value = Arc::clone(store.value(id));
        let var = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
            Var { graph: self, id: nodes.len() - 1 }
        };
        self.params.borrow_mut().insert(id, var.id);
        var
    }

    pub fn cat<'g>(&'g self, xs: &[Var<'g>], axis: usize) -> Var<'g> {
        let values: Vec<Arc<Tensor>> = xs.iter().map(|v| v.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::cat(&refs, axis);
        let ids: Vec<usize> = xs.iter().map(|v| v.id).collect();
        let rg = self.requires(&ids);
        self.push(out, Op::Concat { xs: ids, axis }, rg)
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every
    /// gradient-requiring leaf it depends on.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape().to_vec()));
        let mut leaves = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(id, g);
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
        }
        Gradients { leaves, params: self.params.borrow().clone() }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    /// Gradient of a bound parameter, or `None` if the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|node| self.leaves.get(node))
    }

    /// Gradient of a leaf created with [`Graph::leaf`] or [`Graph::param`].
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(&var.id)
    }

    /// Ids of bound parameters that received a gradient.
    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.iter().filter(|(_, node)| self.leaves.contains_key(node)).map(|(&id, _)| id)
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: usize| nodes[id].value.as_ref();
    let rg = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, broadcast::reduce_to(g, val(*a).shape()));
            accumulate(nodes, grads, *b, broadcast::reduce_to(g, val(*b).shape()));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, broadcast::reduce_to(g, val(*a).shape()));
            if rg(*b) {
                accumulate(nodes, grads, *b, broadcast::reduce_to(g, val(*b).shape()).scale(-1.0));
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if va.shape() == vb.shape() {
                if rg(*a) {
                    accumulate(nodes, grads, *a, g.zip_map(vb, |x, y| x * y));
                }
                if rg(*b) {
                    accumulate(nodes, grads, *b, g.zip_map(va, |x, y| x * y));
                }
            } else {
                let (_, ia, ib) = broadcast::index_pairs(va.shape(), vb.shape());
                let mut ga = vec![0.0; va.numel()];
                let mut gb = vec![0.0; vb.numel()];
                for ((&gv, &i), &j) in g.data().iter().zip(&ia).zip(&ib) {
                    ga[i] += gv * vb.data()[j];
                    gb[j] += gv * va.data()[i];
                }
                accumulate(nodes, grads, *a, Tensor::new(va.shape().to_vec(), ga));
                accumulate(nodes, grads, *b, Tensor::new(vb.shape().to_vec(), gb));
            }
        }
        Op::Affine { x, scale } => accumulate(nodes, grads, *x, g.scale(*scale)),
        Op::MatMul { a, b, ta, tb } => {
            let (da, db) = matmul_backward(val(*a), val(*b), *ta, *tb, g, rg(*a), rg(*b));
            if let Some(da) = da {
                accumulate(nodes, grads, *a, da);
            }
            if let Some(db) = db {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            accumulate(nodes, grads, *x, g.permute(&inv));
        }
        Op::Reshape { x } => {
            accumulate(nodes, grads, *x, g.clone().reshape(val(*x).shape().to_vec()));
        }
        Op::Concat { xs, axis } => {
            let mut start = 0;
            for &x in xs {
                let len = val(x).shape()[*axis];
                if rg(x) {
                    accumulate(nodes, grads, x, g.narrow(*axis, start, len));
                }
                start += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let shape = val(*x).shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let (dim, len) = (shape[*axis], g.shape()[*axis]);
            let mut dx = vec![0.0; val(*x).numel()];
            for o in 0..outer {
                let src = &g.data()[o * len * inner..][..len * inner];
                dx[(o * dim + start) * inner..][..len * inner].copy_from_slice(src);
            }
            accumulate(nodes, grads, *x, Tensor::new(shape.to_vec(), dx));
        }
        Op::Relu(x) => {
            accumulate(nodes, grads, *x, g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
        }
        Op::Sigmoid(x) => {
            accumulate(nodes, grads, *x, g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y)));
        }
        Op::Gelu(x) => {
            accumulate(nodes, grads, *x, g.zip_map(val(*x), |gv, xv| gv * gelu_grad(xv)));
        }
        Op::Prelu { x, slope } => {
            let (vx, vs) = (val(*x), val(*slope));
            let (per_channel, plane) = prelu_layout(vx, vs);
            let mut dx = vec![0.0; vx.numel()];
            let mut ds = vec![0.0; vs.numel()];
            for (i, (&gv, &xv)) in g.data().iter().zip(vx.data()).enumerate() {
                let c = if per_channel { (i / plane) % vs.numel() } else { 0 };
                if xv > 0.0 {
                    dx[i] = gv;
                } else {
                    dx[i] = gv * vs.data()[c];
                    ds[c] += gv * xv;
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(vx.shape().to_vec(), dx));
            accumulate(nodes, grads, *slope, Tensor::new(vs.shape().to_vec(), ds));
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let d = *y.shape().last().unwrap();
            let mut dx = vec![0.0; y.numel()];
            for ((gr, yr), dr) in g.data().chunks(d).zip(y.data().chunks(d)).zip(dx.chunks_mut(d)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(y.shape().to_vec(), dx));
        }
        Op::LayerNorm { x, gamma, beta, mean, rstd } => {
            let vx = val(*x);
            let gm = val(*gamma).data();
            let d = gm.len();
            let mut dx = vec![0.0; vx.numel()];
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for (r, ((xr, gr), dr)) in vx.data().chunks(d).zip(g.data().chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                let (mu, rs) = (mean[r], rstd[r]);
                let mut sum_dxh = 0.0;
                let mut sum_dxh_xh = 0.0;
                for j in 0..d {
                    let xh = (xr[j] - mu) * rs;
                    dgamma[j] += gr[j] * xh;
                    dbeta[j] += gr[j];
                    let dxh = gr[j] * gm[j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                }
                let (m1, m2) = (sum_dxh / d as f64, sum_dxh_xh / d as f64);
                for j in 0..d {
                    let xh = (xr[j] - mu) * rs;
                    dr[j] = rs * (gr[j] * gm[j] - m1 - xh * m2);
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(vx.shape().to_vec(), dx));
            accumulate(nodes, grads, *gamma, Tensor::new(vec![d], dgamma));
            accumulate(nodes, grads, *beta, Tensor::new(vec![d], dbeta));
        }
        Op::Conv2d { x, w, b, spec } => {
            let (dx, dw, db) = conv2d_backward(g, val(*x), val(*w), *spec, rg(*x));
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, dx);
            }
            accumulate(nodes, grads, *w, dw);
            if let Some(b) = b {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Resize(x) => {
            let (_, _, h, w) = val(*x).dims4();
            accumulate(nodes, grads, *x, resize_backward(g, h, w));
        }
        Op::AvgPool(x) => {
            let vx = val(*x);
            let (_, _, h, w) = vx.dims4();
            let plane = h * w;
            let dx = Tensor::from_fn(vx.shape().to_vec(), |i| g.data()[i / plane] / plane as f64);
            accumulate(nodes, grads, *x, dx);
        }
        Op::MaxPool { x, argmax } => {
            let vx = val(*x);
            let mut dx = vec![0.0; vx.numel()];
            for (&gv, &i) in g.data().iter().zip(argmax) {
                dx[i] += gv;
            }
            accumulate(nodes, grads, *x, Tensor::new(vx.shape().to_vec(), dx));
        }
        Op::Sum(x) => {
            let gv = g.item();
            accumulate(nodes, grads, *x, Tensor::full(val(*x).shape().to_vec(), gv));
        }
        Op::Mean(x) => {
            let vx = val(*x);
            let gv = g.item() / vx.numel() as f64;
            accumulate(nodes, grads, *x, Tensor::full(vx.shape().to_vec(), gv));
        }
        Op::CrossEntropy { logits, probs, targets, ignore, valid } => {
            let (n, c, h, w) = probs.dims4();
            let plane = h * w;
            let mut dx = vec![0.0; probs.numel()];
            if *valid > 0 {
                let k = g.item() / *valid as f64;
                for b in 0..n {
                    for p in 0..plane {
                        let t = targets[b * plane + p];
                        if t == *ignore {
                            continue;
                        }
                        for ch in 0..c {
                            let i = (b * c + ch) * plane + p;
                            let onehot = if ch == t as usize { 1.0 } else { 0.0 };
                            dx[i] = k * (probs.data()[i] - onehot);
                        }
                    }
                }
            }
            accumulate(nodes, grads, *logits, Tensor::new(probs.shape().to_vec(), dx));
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// `(per_channel, plane)` for a PReLU over axis 1 of `x`.
fn prelu_layout(x: &Tensor, slope: &Tensor) -> (bool, usize) {
    let plane: usize = x.shape()[2..].iter().product();
    if slope.numel() == 1 {
        (false, plane)
    } else {
        assert_eq!(slope.numel(), x.shape()[1], "prelu slope must be per-channel or scalar");
        (true, plane)
    }
}

/// Splits a matmul operand into `(batch, rows, cols)`.
fn mat_dims(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    assert!(s.len() >= 2, "matmul operand must have rank >= 2, got {s:?}");
    let rows = s[s.len() - 2];
    let cols = s[s.len() - 1];
    (s[..s.len() - 2].iter().product(), rows, cols)
}

fn matmul_forward(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (ba, ar, ac) = mat_dims(a);
    let (bb, br, bc) = mat_dims(b);
    assert!(bb == ba || bb == 1, "matmul batch mismatch {:?} x {:?}", a.shape(), b.shape());
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, kb, "matmul inner mismatch {:?} x {:?} (ta={ta}, tb={tb})", a.shape(), b.shape());
    let mut out = vec![0.0; ba * m * n];
    for i in 0..ba {
        let am = MatRef::new(&a.data()[i * ar * ac..][..ar * ac], ar, ac);
        let bi = if bb == 1 { 0 } else { i };
        let bm = MatRef::new(&b.data()[bi * br * bc..][..br * bc], br, bc);
        let am = if ta { am.t() } else { am };
        let bm = if tb { bm.t() } else { bm };
        gemm(am, bm, &mut out[i * m * n..][..m * n], 0.0);
    }
    let mut shape = a.shape()[..a.rank() - 2].to_vec();
    shape.extend([m, n]);
    Tensor::new(shape, out)
}

fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    ta: bool,
    tb: bool,
    g: &Tensor,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (ba, ar, ac) = mat_dims(a);
    let (bb, br, bc) = mat_dims(b);
    let (m, n) = (if ta { ac } else { ar }, if tb { br } else { bc });
    let mut da = need_a.then(|| vec![0.0; a.numel()]);
    let mut db = need_b.then(|| vec![0.0; b.numel()]);
    for i in 0..ba {
        let am = MatRef::new(&a.data()[i * ar * ac..][..ar * ac], ar, ac);
        let bi = if bb == 1 { 0 } else { i };
        let bm = MatRef::new(&b.data()[bi * br * bc..][..br * bc], br, bc);
        let gm = MatRef::new(&g.data()[i * m * n..][..m * n], m, n);
        let op_a = if ta { am.t() } else { am };
        let op_b = if tb { bm.t() } else { bm };
        if let Some(da) = da.as_mut() {
            let dst = &mut da[i * ar * ac..][..ar * ac];
            if ta {
                gemm(op_b, gm.t(), dst, 0.0);
            } else {
                gemm(gm, op_b.t(), dst, 0.0);
            }
        }
        if let Some(db) = db.as_mut() {
            let dst = &mut db[bi * br * bc..][..br * bc];
            let beta = if bb == 1 && i > 0 { 1.0 } else { 0.0 };
            if tb {
                gemm(gm.t(), op_a, dst, beta);
            } else {
                gemm(op_a.t(), gm, dst, beta);
            }
        }
    }
    (da.map(|d| Tensor::new(a.shape().to_vec(), d)), db.map(|d| Tensor::new(b.shape().to_vec(), d)))
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn binary_op(self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.graph.requires(&[self.id, other.id]);
        self.graph.push(value, op, rg)
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let v = broadcast::binary(&self.value(), &other.value(), |a, b| a + b);
        self.binary_op(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let v = broadcast::binary(&self.value(), &other.value(), |a, b| a - b);
        self.binary_op(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let v = broadcast::binary(&self.value(), &other.value(), |a, b| a * b);
        self.binary_op(other, v, Op::Mul(self.id, other.id))
    }

    /// `x * scale + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'g> {
        let v = self.value().map(|x| x * scale + shift);
        self.unary(v, Op::Affine { x: self.id, scale })
    }

    pub fn scale(self, k: f64) -> Var<'g> {
        self.affine(k, 0.0)
    }

    pub fn square(self) -> Var<'g> {
        self.mul(self)
    }

    /// Batched matrix product over the last two axes. A rank-2 right operand
    /// is shared across the batch.
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.matmul_t(other, false, false)
    }

    /// Like [`Var::matmul`] with either operand's last two axes transposed.
    pub fn matmul_t(self, other: Var<'g>, ta: bool, tb: bool) -> Var<'g> {
        let v = matmul_forward(&self.value(), &other.value(), ta, tb);
        self.binary_op(other, v, Op::MatMul { a: self.id, b: other.id, ta, tb })
    }

    pub fn permute(self, perm: &[usize]) -> Var<'g> {
        let v = self.value().permute(perm);
        self.unary(v, Op::Permute { x: self.id, perm: perm.to_vec() })
    }

    pub fn transpose(self, a: usize, b: usize) -> Var<'g> {
        let mut perm: Vec<usize> = (0..self.shape().len()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'g> {
        let v = self.value().as_ref().clone().reshape(shape);
        self.unary(v, Op::Reshape { x: self.id })
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let v = self.value().narrow(axis, start, len);
        self.unary(v, Op::Narrow { x: self.id, axis, start })
    }

    /// Splits `axis` into `parts` equal pieces.
    pub fn chunk(self, parts: usize, axis: usize) -> Vec<Var<'g>> {
        let dim = self.shape()[axis];
        assert_eq!(dim % parts, 0, "cannot chunk {dim} into {parts}");
        let len = dim / parts;
        (0..parts).map(|i| self.narrow(axis, i * len, len)).collect()
    }

    pub fn relu(self) -> Var<'g> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Var<'g> {
        let v = self.value().map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn gelu(self) -> Var<'g> {
        let v = self.value().map(gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    /// Parametric ReLU over axis 1 with a per-channel or single shared slope.
    pub fn prelu(self, slope: Var<'g>) -> Var<'g> {
        let (x, s) = (self.value(), slope.value());
        let (per_channel, plane) = prelu_layout(&x, &s);
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &xv)| {
                let a = if per_channel { s.data()[(i / plane) % s.numel()] } else { s.data()[0] };
                if xv > 0.0 {
                    xv
                } else {
                    a * xv
                }
            })
            .collect();
        let v = Tensor::new(x.shape().to_vec(), data);
        self.binary_op(slope, v, Op::Prelu { x: self.id, slope: slope.id })
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'g> {
        let x = self.value();
        let d = *x.shape().last().expect("softmax of a scalar");
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let v = Tensor::new(x.shape().to_vec(), out);
        self.unary(v, Op::Softmax(self.id))
    }

    /// Layer normalisation over the last axis with affine `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Var<'g> {
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let d = *x.shape().last().expect("layer_norm of a scalar");
        assert_eq!(gv.numel(), d, "layer_norm gamma size");
        assert_eq!(bv.numel(), d, "layer_norm beta size");
        let rows = x.numel() / d.max(1);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![0.0; x.numel()];
        for (xr, or) in x.data().chunks(d).zip(out.chunks_mut(d)) {
            let mu = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                or[j] = (xr[j] - mu) * rs * gv.data()[j] + bv.data()[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let v = Tensor::new(x.shape().to_vec(), out);
        let rg = self.graph.requires(&[self.id, gamma.id, beta.id]);
        self.graph.push(v, Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, mean, rstd }, rg)
    }

    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, spec: Conv2dSpec) -> Var<'g> {
        let bval = bias.map(|b| b.value());
        let v = conv2d_forward(&self.value(), &weight.value(), bval.as_deref(), spec);
        let mut ids = vec![self.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        let rg = self.graph.requires(&ids);
        self.graph.push(v, Op::Conv2d { x: self.id, w: weight.id, b: bias.map(|b| b.id), spec }, rg)
    }

    /// Bilinear resize of an `(n, c, h, w)` tensor.
    pub fn resize_bilinear(self, height: usize, width: usize) -> Var<'g> {
        let x = self.value();
        let (_, _, h, w) = x.dims4();
        if (h, w) == (height, width) {
            return self;
        }
        let v = resize_forward(&x, height, width);
        self.unary(v, Op::Resize(self.id))
    }

    /// Mean over the spatial axes: `(n, c, h, w)` to `(n, c)`.
    pub fn avg_pool_global(self) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let data = x.data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
        self.unary(Tensor::new(vec![n, c], data), Op::AvgPool(self.id))
    }

    /// Max over the spatial axes: `(n, c, h, w)` to `(n, c)`; ties go to the first position.
    pub fn max_pool_global(self) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let mut argmax = Vec::with_capacity(n * c);
        let mut data = Vec::with_capacity(n * c);
        for (k, p) in x.data().chunks(plane).enumerate() {
            let (best, &m) = p
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
            argmax.push(k * plane + best);
            data.push(m);
        }
        self.unary(Tensor::new(vec![n, c], data), Op::MaxPool { x: self.id, argmax })
    }

    pub fn sum(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().mean());
        self.unary(v, Op::Mean(self.id))
    }

    /// Mean cross-entropy of `(n, c, h, w)` logits against `(n, h, w)` class
    /// ids, skipping pixels labelled `ignore`. Zero when every pixel is ignored.
    pub fn cross_entropy(self, targets: &[u8], ignore: u8) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        assert_eq!(targets.len(), n * plane, "cross_entropy target size");
        let mut probs = vec![0.0; x.numel()];
        let mut loss = 0.0;
        let mut valid = 0usize;
        for b in 0..n {
            for p in 0..plane {
                let at = |ch: usize| (b * c + ch) * plane + p;
                let max = (0..c).map(|ch| x.data()[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for ch in 0..c {
                    let e = (x.data()[at(ch)] - max).exp();
                    probs[at(ch)] = e;
                    sum += e;
                }
                for ch in 0..c {
                    probs[at(ch)] /= sum;
                }
                let t = targets[b * plane + p];
                if t == ignore {
                    continue;
                }
                assert!((t as usize) < c, "class id {t} out of range for {c} classes");
                loss += -(x.data()[at(t as usize)] - max - sum.ln());
                valid += 1;
            }
        }
        let value = if valid == 0 { 0.0 } else { loss / valid as f64 };
        self.unary(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits: self.id,
                probs: Tensor::new(x.shape().to_vec(), probs),
                targets: targets.into(),
                ignore,
                valid,
            },
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Shapes of `a` and `b` broadcast together.
pub fn broadcast_dims(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    broadcast_shape(a, b)
}
