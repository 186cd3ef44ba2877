use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use rand::Rng;

use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::{ParamId, ParamStore, Result, Tensor, TensorError};

/// Additive logit applied to disallowed attention positions. After row-max
/// subtraction `exp(MASKED_LOGIT)` underflows to exactly `0.0` in `f64`.
pub const MASKED_LOGIT: f64 = -1e9;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    MulConst {
        x: usize,
        factor: Rc<Vec<f64>>,
    },
    Scale {
        x: usize,
        c: f64,
    },
    Softmax {
        x: usize,
        // rows that fell back to uniform; constant, so no gradient flows
        constant_rows: Vec<usize>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        map: Rc<Vec<usize>>,
    },
    Concat {
        parts: Vec<usize>,
    },
    Gather {
        x: usize,
        index: Rc<Vec<usize>>,
    },
    Sum {
        x: usize,
    },
    BceWithLogits {
        logits: usize,
        targets: Rc<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so every node's parents precede it and
/// [`Tape::backward`] can visit nodes once each in reverse append order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fully_masked_rows: Cell<usize>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Softmax rows that had no allowed position and fell back to uniform.
    pub fn fully_masked_rows(&self) -> usize {
        self.fully_masked_rows.get()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input that is not tied to a stored parameter.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Binds a stored parameter onto the tape. The current value is copied, so
    /// later mutation of the store does not affect this forward pass.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let p = store.get(id);
        let var = self.leaf(p.value.clone(), p.requires_grad);
        self.nodes.borrow_mut()[var.id].param = Some(id);
        var
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[loss.id].value;
        if out.numel() != 1 {
            return Err(TensorError::NonScalarLoss(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params = nodes[..=loss.id]
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Result of one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it was reachable.
    pub fn wrt(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        store.ensure_grad_buffers();
        for &(node, pid) in &self.params {
            if let Some(g) = &self.grads[node] {
                let p = store.get_mut(pid);
                for (acc, v) in p.grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }
}

fn grad_slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_rhs,
        } => {
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            if let Some(ga) = grad_slot(nodes, grads, a) {
                if shared_rhs {
                    gemm_nt(g, bv, ga, batch * m, n, k);
                } else {
                    for i in 0..batch {
                        gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &bv[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, b) {
                if shared_rhs {
                    gemm_tn(av, g, gb, batch * m, k, n);
                } else {
                    for i in 0..batch {
                        gemm_tn(
                            &av[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
        }
        &Op::Add { a, b } => {
            if let Some(ga) = grad_slot(nodes, grads, a) {
                add_into(ga, g);
            }
            if let Some(gb) = grad_slot(nodes, grads, b) {
                reduce_broadcast(gb, g, 1.0);
            }
        }
        &Op::Sub { a, b } => {
            if let Some(ga) = grad_slot(nodes, grads, a) {
                add_into(ga, g);
            }
            if let Some(gb) = grad_slot(nodes, grads, b) {
                reduce_broadcast(gb, g, -1.0);
            }
        }
        &Op::Mul { a, b } => {
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            let inner = bv.len();
            if let Some(ga) = grad_slot(nodes, grads, a) {
                for (i, (acc, gi)) in ga.iter_mut().zip(g).enumerate() {
                    *acc += gi * bv[i % inner];
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, b) {
                for (i, (gi, ai)) in g.iter().zip(av).enumerate() {
                    gb[i % inner] += gi * ai;
                }
            }
        }
        Op::MulConst { x, factor } => {
            let inner = factor.len();
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for (i, (acc, gi)) in gx.iter_mut().zip(g).enumerate() {
                    *acc += gi * factor[i % inner];
                }
            }
        }
        &Op::Scale { x, c } => {
            if let Some(gx) = grad_slot(nodes, grads, x) {
                for (acc, gi) in gx.iter_mut().zip(g) {
                    *acc += c * gi;
                }
            }
        }
        Op::Softmax { x, constant_rows } => {
            let y = nodes[id].value.data();
            let s = nodes[id].value.last_dim();
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                let mut skip = constant_rows.iter().peekable();
                for (r, ((yr, gr), out)) in y
                    .chunks_exact(s)
                    .zip(g.chunks_exact(s))
                    .zip(gx.chunks_exact_mut(s))
                    .enumerate()
                {
                    if skip.peek() == Some(&&r) {
                        skip.next();
                        continue;
                    }
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..s {
                        out[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = nodes[*gain].value.numel();
            let gv = nodes[*gain].value.data();
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for (r, ((gr, xr), out)) in g
                    .chunks_exact(d)
                    .zip(xhat.chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                    .enumerate()
                {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xr[j];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        out[j] += rstd[r] * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
                    }
                }
            }
            if let Some(gg) = grad_slot(nodes, grads, *gain) {
                for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * xr[j];
                    }
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, *bias) {
                reduce_broadcast(gb, g, 1.0);
            }
        }
        &Op::Gelu { x } => {
            let xv = nodes[x].value.data();
            if let Some(gx) = grad_slot(nodes, grads, x) {
                for ((acc, gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    *acc += gi * gelu_grad(xi);
                }
            }
        }
        &Op::Reshape { x } => {
            if let Some(gx) = grad_slot(nodes, grads, x) {
                add_into(gx, g);
            }
        }
        Op::Permute { x, map } => {
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for (o, &src) in map.iter().enumerate() {
                    gx[src] += g[o];
                }
            }
        }
        Op::Concat { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.numel();
                if let Some(gp) = grad_slot(nodes, grads, p) {
                    add_into(gp, &g[offset..offset + len]);
                }
                offset += len;
            }
        }
        Op::Gather { x, index } => {
            let xv = &nodes[*x].value;
            let rows = xv.shape()[0];
            let width = xv.numel() / rows.max(1);
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for (o, &src) in index.iter().enumerate() {
                    let dst = &mut gx[src * width..(src + 1) * width];
                    add_into(dst, &g[o * width..(o + 1) * width]);
                }
            }
        }
        &Op::Sum { x } => {
            if let Some(gx) = grad_slot(nodes, grads, x) {
                for acc in gx.iter_mut() {
                    *acc += g[0];
                }
            }
        }
        Op::BceWithLogits { logits, targets } => {
            let z = nodes[*logits].value.data();
            let n = z.len() as f64;
            if let Some(gz) = grad_slot(nodes, grads, *logits) {
                for ((acc, &zi), &yi) in gz.iter_mut().zip(z).zip(targets.iter()) {
                    *acc += g[0] * (sigmoid(zi) - yi) / n;
                }
            }
        }
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Sums `g` (full shape) down to the suffix-broadcast shape of `acc`.
fn reduce_broadcast(acc: &mut [f64], g: &[f64], sign: f64) {
    let inner = acc.len();
    for (i, gi) in g.iter().enumerate() {
        acc[i % inner] += sign * gi;
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// `true` when `small` equals `big` or is a trailing suffix of it.
fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        map.push(idx.iter().zip(axes).map(|(&i, &a)| i * strides[a]).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_ref(self.id).clone()
    }

    /// Borrowed view of the data. Do not hold it across further tape pushes.
    pub fn data(&self) -> Ref<'t, [f64]> {
        Ref::map(self.tape.value_ref(self.id), |t| t.data())
    }

    pub fn item(&self) -> Option<f64> {
        self.tape.value_ref(self.id).item()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    /// Matrix product over the last two axes.
    ///
    /// `other` is either a plain matrix `[k, n]` shared by every leading index
    /// of `self`, or carries the same leading (batch) axes as `self`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (value, op) = {
            let a = self.tape.value_ref(self.id);
            let b = other.tape.value_ref(other.id);
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() < 2 || sb.len() < 2 {
                return Err(TensorError::shapes("matmul", sa, sb));
            }
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
            if k != k2 {
                return Err(TensorError::shapes("matmul", sa, sb));
            }
            let lead_a = &sa[..sa.len() - 2];
            let batch: usize = lead_a.iter().product();
            let shared_rhs = sb.len() == 2;
            if !shared_rhs && *lead_a != sb[..sb.len() - 2] {
                return Err(TensorError::shapes("matmul", sa, sb));
            }
            let mut out = vec![0.0; batch * m * n];
            if shared_rhs {
                gemm_nn(a.data(), b.data(), &mut out, batch * m, k, n);
            } else {
                for i in 0..batch {
                    gemm_nn(
                        &a.data()[i * m * k..(i + 1) * m * k],
                        &b.data()[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            let mut shape = lead_a.to_vec();
            shape.extend([m, n]);
            (
                Tensor::new(shape, out)?,
                Op::MatMul {
                    a: self.id,
                    b: other.id,
                    batch,
                    m,
                    k,
                    n,
                    shared_rhs,
                },
            )
        };
        let rg = self.tape.requires_grad(&[self.id, other.id]);
        Ok(self.tape.push(value, op, rg))
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let a = self.tape.value_ref(self.id);
            let b = other.tape.value_ref(other.id);
            if !is_suffix(a.shape(), b.shape()) {
                return Err(TensorError::shapes(name, a.shape(), b.shape()));
            }
            let inner = b.numel();
            let bd = b.data();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % inner]))
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        let rg = self.tape.requires_grad(&[self.id, other.id]);
        Ok(self.tape.push(value, op(self.id, other.id), rg))
    }

    /// Elementwise sum; `other` may be a trailing-suffix broadcast of `self`.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (big, small) = {
            let (sa, sb) = (self.shape(), other.shape());
            if sa.len() < sb.len() {
                (other, self)
            } else {
                (self, other)
            }
        };
        big.binary(small, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    /// Elementwise product with a non-differentiable factor (same shape or
    /// trailing-suffix broadcast).
    pub fn mul_const(self, factor: Vec<f64>) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value_ref(self.id);
            let inner = factor.len();
            if inner == 0 || !x.numel().is_multiple_of(inner) {
                return Err(TensorError::shapes("mul_const", x.shape(), &[inner]));
            }
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * factor[i % inner])
                .collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        let rg = self.tape.requires_grad(&[self.id]);
        Ok(self.tape.push(
            value,
            Op::MulConst {
                x: self.id,
                factor: Rc::new(factor),
            },
            rg,
        ))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = {
            let x = self.tape.value_ref(self.id);
            let data = x.data().iter().map(|v| v * c).collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        };
        let rg = self.tape.requires_grad(&[self.id]);
        self.tape.push(value, Op::Scale { x: self.id, c }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        self.softmax_impl(None).expect("unmasked softmax cannot fail")
    }

    /// Softmax over the last axis where positions with `mask == 0` receive an
    /// additive [`MASKED_LOGIT`] and therefore exactly zero weight.
    ///
    /// `mask` may have the full shape of `self`, the trailing `[T, S]` shape,
    /// or `[B, T, S]` when `self` is `[B, H, T, S]` (per-sample masks shared
    /// across heads). A row with no allowed position falls back to a uniform
    /// distribution and is counted in [`Tape::fully_masked_rows`].
    pub fn softmax_masked(self, mask: &Tensor) -> Result<Var<'t>> {
        self.softmax_impl(Some(mask))
    }

    fn softmax_impl(self, mask: Option<&Tensor>) -> Result<Var<'t>> {
        let mut constant_rows = Vec::new();
        let value = {
            let x = self.tape.value_ref(self.id);
            let shape = x.shape();
            let s = x.last_dim();
            let rows = x.numel() / s.max(1);
            let mask_row: Box<dyn Fn(usize) -> usize> = match mask {
                None => Box::new(|_| 0),
                Some(m) if m.shape() == shape => Box::new(|r| r),
                Some(m) if m.rank() == 2 && is_suffix(shape, m.shape()) => {
                    let t = m.shape()[0];
                    Box::new(move |r| r % t)
                }
                Some(m)
                    if shape.len() == 4
                        && m.rank() == 3
                        && m.shape() == [shape[0], shape[2], shape[3]] =>
                {
                    let (h, t) = (shape[1], shape[2]);
                    Box::new(move |r| (r / (h * t)) * t + r % t)
                }
                Some(m) => return Err(TensorError::shapes("softmax_masked", shape, m.shape())),
            };
            let mut out = vec![0.0; x.numel()];
            for r in 0..rows {
                let xr = &x.data()[r * s..(r + 1) * s];
                let or = &mut out[r * s..(r + 1) * s];
                let allowed: Option<&[f64]> = mask.map(|m| {
                    let mr = mask_row(r);
                    &m.data()[mr * s..(mr + 1) * s]
                });
                if let Some(al) = allowed {
                    if al.iter().all(|&v| v == 0.0) {
                        constant_rows.push(r);
                        or.fill(1.0 / s as f64);
                        continue;
                    }
                }
                let shifted = |j: usize| match allowed {
                    Some(al) if al[j] == 0.0 => xr[j] + MASKED_LOGIT,
                    _ => xr[j],
                };
                let max = (0..s).map(shifted).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (j, o) in or.iter_mut().enumerate() {
                    *o = (shifted(j) - max).exp();
                    total += *o;
                }
                for o in or.iter_mut() {
                    *o /= total;
                }
            }
            Tensor::new(shape.to_vec(), out)?
        };
        self.tape
            .fully_masked_rows
            .set(self.tape.fully_masked_rows.get() + constant_rows.len());
        let rg = self.tape.requires_grad(&[self.id]);
        Ok(self.tape.push(
            value,
            Op::Softmax {
                x: self.id,
                constant_rows,
            },
            rg,
        ))
    }

    /// Layer normalization over the last axis followed by an affine map.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (value, xhat, rstd) = {
            let x = self.tape.value_ref(self.id);
            let gv = self.tape.value_ref(gain.id);
            let bv = self.tape.value_ref(bias.id);
            let d = x.last_dim();
            if gv.shape() != [d] || bv.shape() != [d] {
                return Err(TensorError::shapes("layer_norm", x.shape(), gv.shape()));
            }
            let rows = x.numel() / d;
            let mut out = vec![0.0; x.numel()];
            let mut xhat = vec![0.0; x.numel()];
            let mut rstd = vec![0.0; rows];
            for r in 0..rows {
                let xr = &x.data()[r * d..(r + 1) * d];
                let mean = xr.iter().sum::<f64>() / d as f64;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (xr[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, rstd)
        };
        let rg = self.tape.requires_grad(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        let value = {
            let x = self.tape.value_ref(self.id);
            let data = x.data().iter().map(|&v| gelu(v)).collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        };
        let rg = self.tape.requires_grad(&[self.id]);
        self.tape.push(value, Op::Gelu { x: self.id }, rg)
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, train: bool, rng: &mut R) -> Result<Var<'t>> {
        if !train || p == 0.0 {
            return Ok(self);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::invalid("dropout", format!("p={p} not in [0,1)")));
        }
        let n = self.tape.value_ref(self.id).numel();
        let keep = 1.0 / (1.0 - p);
        let factor = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.mul_const(factor)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.tape.value_ref(self.id).clone().reshaped(shape.to_vec())?;
        let rg = self.tape.requires_grad(&[self.id]);
        Ok(self.tape.push(value, Op::Reshape { x: self.id }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let (value, map) = {
            let x = self.tape.value_ref(self.id);
            let shape = x.shape();
            let mut seen = vec![false; shape.len()];
            if axes.len() != shape.len()
                || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
            {
                return Err(TensorError::shapes("permute", shape, axes));
            }
            let map = permute_map(shape, axes);
            let data = map.iter().map(|&i| x.data()[i]).collect();
            let out_shape = axes.iter().map(|&a| shape[a]).collect();
            (Tensor::new(out_shape, data)?, map)
        };
        let rg = self.tape.requires_grad(&[self.id]);
        Ok(self.tape.push(
            value,
            Op::Permute {
                x: self.id,
                map: Rc::new(map),
            },
            rg,
        ))
    }

    /// Selects rows (entries of axis 0) by index; indices may repeat.
    pub fn gather_rows(self, index: Vec<usize>) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value_ref(self.id);
            let shape = x.shape();
            let Some(&rows) = shape.first() else {
                return Err(TensorError::invalid("gather_rows", "scalar input"));
            };
            if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
                return Err(TensorError::invalid(
                    "gather_rows",
                    format!("row {bad} out of range for {rows} rows"),
                ));
            }
            let width = x.numel() / rows.max(1);
            let mut data = Vec::with_capacity(index.len() * width);
            for &i in &index {
                data.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
            }
            let mut out_shape = shape.to_vec();
            out_shape[0] = index.len();
            Tensor::new(out_shape, data)?
        };
        let rg = self.tape.requires_grad(&[self.id]);
        Ok(self.tape.push(
            value,
            Op::Gather {
                x: self.id,
                index: Rc::new(index),
            },
            rg,
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Var<'t> {
        let total = self.tape.value_ref(self.id).data().iter().sum();
        let rg = self.tape.requires_grad(&[self.id]);
        self.tape.push(Tensor::scalar(total), Op::Sum { x: self.id }, rg)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.tape.value_ref(self.id).numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean binary cross-entropy of logits against 0/1 targets, computed as
    /// `max(z,0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(self, targets: &[f64]) -> Result<Var<'t>> {
        let value = {
            let z = self.tape.value_ref(self.id);
            if z.numel() != targets.len() || targets.is_empty() {
                return Err(TensorError::shapes("bce_with_logits", z.shape(), &[targets.len()]));
            }
            let total: f64 = z
                .data()
                .iter()
                .zip(targets)
                .map(|(&zi, &yi)| zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p())
                .sum();
            Tensor::scalar(total / targets.len() as f64)
        };
        let rg = self.tape.requires_grad(&[self.id]);
        Ok(self.tape.push(
            value,
            Op::BceWithLogits {
                logits: self.id,
                targets: Rc::new(targets.to_vec()),
            },
            rg,
        ))
    }
}

impl Tape {
    /// Stacks tensors along axis 0; trailing shapes must agree.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let value = {
            let first = parts
                .first()
                .ok_or_else(|| TensorError::invalid("concat_rows", "no inputs"))?;
            let base = self.value_ref(first.id).shape().to_vec();
            if base.is_empty() {
                return Err(TensorError::invalid("concat_rows", "scalar input"));
            }
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let v = self.value_ref(p.id);
                if v.rank() != base.len() || v.shape()[1..] != base[1..] {
                    return Err(TensorError::shapes("concat_rows", &base, v.shape()));
                }
                rows += v.shape()[0];
                data.extend_from_slice(v.data());
            }
            let mut shape = base;
            shape[0] = rows;
            Tensor::new(shape, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.requires_grad(&ids);
        Ok(self.push(value, Op::Concat { parts: ids }, rg))
    }
}
