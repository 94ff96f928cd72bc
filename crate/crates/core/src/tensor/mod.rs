//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Tensors are immutable nodes in a dynamically built computation graph.
//! Calling an op on tensors records a graph node (unless inside [`no_grad`]
//! or no input requires gradients); [`Tensor::backward`] walks the graph in
//! reverse topological order and accumulates gradients into leaf tensors.

mod kernels;

pub use kernels::{adaptive_bin, conv2d_out_dim, pool_out_dim};

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid attributes: {detail}")]
    BadAttrs { op: &'static str, detail: String },
    #[error("tensor data length {data_len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, data_len: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward root is not attached to a computation graph")]
    DetachedRoot,
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Every differentiable operation the engine supports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Conv1d,
    Conv2d,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Silu,
    Sigmoid,
    Tanh,
    Abs,
    AvgPool2d,
    MaxPool2d,
    UpsampleNearest,
    ReplicatePad2d,
    GroupNorm,
    Flatten,
    Reshape,
    Concat,
    Sum,
    Mean,
    BroadcastAdd,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::MatMul,
        OpKind::Conv1d,
        OpKind::Conv2d,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Silu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Abs,
        OpKind::AvgPool2d,
        OpKind::MaxPool2d,
        OpKind::UpsampleNearest,
        OpKind::ReplicatePad2d,
        OpKind::GroupNorm,
        OpKind::Flatten,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::BroadcastAdd,
    ];

    pub fn token(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Conv1d => "conv1d",
            OpKind::Conv2d => "conv2d",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Silu => "silu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Abs => "abs",
            OpKind::AvgPool2d => "avgpool2d",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::UpsampleNearest => "upsample-nearest",
            OpKind::ReplicatePad2d => "replicate-pad2d",
            OpKind::GroupNorm => "groupnorm",
            OpKind::Flatten => "flatten",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::BroadcastAdd => "broadcast-add",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Static attributes of an op (strides, pads, target shapes, ...).
#[derive(Clone, Debug, PartialEq)]
pub enum Attrs {
    None,
    Scale { factor: f64 },
    Conv1d { stride: usize, pad: usize },
    Conv2d { stride: (usize, usize), pad: (usize, usize) },
    Pool { kernel: (usize, usize), stride: (usize, usize) },
    AdaptivePool { out: (usize, usize) },
    Upsample { scale: (usize, usize) },
    Pad { pad: (usize, usize) },
    GroupNorm { groups: usize, eps: f64 },
    Reshape { shape: Vec<usize> },
    Concat { axis: usize },
}

/// Forward-pass byproducts kept for the backward pass.
enum Saved {
    None,
    /// silu: sigmoid(x); conv: im2col buffer.
    Buf(Vec<f64>),
    /// maxpool: flat input index of each output's argmax.
    Indices(Vec<u32>),
    /// groupnorm: per-group 1/sqrt(var + eps).
    InvStd(Vec<f64>),
}

struct Node {
    kind: OpKind,
    attrs: Attrs,
    inputs: Vec<Tensor>,
    saved: Saved,
}

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: Option<Node>,
}

/// A dense f64 tensor; cheap to clone (shared graph node).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.shape(),
            self.requires_grad()
        )
    }
}

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with graph recording disabled (inference mode).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    NO_GRAD.with(|c| {
        let prev = c.replace(true);
        let out = f();
        c.set(prev);
        out
    })
}

fn grad_enabled() -> bool {
    NO_GRAD.with(|c| !c.get())
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_parts(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, node: Option<Node>) -> Tensor {
        debug_assert_eq!(data.len(), numel_of(&shape));
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                node,
            }),
        }
    }

    /// Plain tensor (no gradient tracking).
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel_of(shape) {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                data_len: data.len(),
            });
        }
        Ok(Tensor::from_parts(data, shape.to_vec(), false, None))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn leaf(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel_of(shape) {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                data_len: data.len(),
            });
        }
        Ok(Tensor::from_parts(data, shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_parts(vec![0.0; numel_of(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::from_parts(vec![value; numel_of(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_parts(vec![value], vec![1], false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    /// Borrow the underlying buffer. Do not hold across op calls that
    /// mutate this tensor's data (optimizer updates).
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    /// In-place data update for leaf parameters (optimizer steps). Must not
    /// be called while a graph referencing this tensor is still alive.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// True if this tensor is a gradient leaf or depends on one.
    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad || self.inner.node.is_some()
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Copy of the data as a fresh non-tracking leaf.
    pub fn detach(&self) -> Tensor {
        Tensor::from_parts(self.to_vec(), self.shape().to_vec(), false, None)
    }

    fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar root. Gradients accumulate (+=)
    /// into every reachable leaf created with [`Tensor::leaf`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape().to_vec()));
        }
        if self.inner.node.is_none() {
            return Err(TensorError::DetachedRoot);
        }
        let order = topo_order(self);
        let mut adj: HashMap<usize, Vec<f64>> = HashMap::new();
        adj.insert(self.ptr_id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = adj.remove(&t.ptr_id()) else {
                continue;
            };
            if t.inner.requires_grad {
                t.accumulate_grad(&g);
            }
            if let Some(node) = &t.inner.node {
                backward_op(t, node, &g, &mut adj);
            }
        }
        Ok(())
    }
}

/// Post-order over the subgraph that requires gradients.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.ptr_id());
    while let Some((t, child)) = stack.last_mut() {
        let next = t
            .inner
            .node
            .as_ref()
            .and_then(|n| n.inputs.get(*child).cloned());
        match next {
            Some(input) => {
                *child += 1;
                if input.requires_grad() && visited.insert(input.ptr_id()) {
                    stack.push((input, 0));
                }
            }
            None => {
                order.push(t.clone());
                stack.pop();
            }
        }
    }
    order
}

fn err_shape(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn err_attrs(op: &'static str, detail: String) -> TensorError {
    TensorError::BadAttrs { op, detail }
}

/// Generic op entry point: validates shapes, computes the forward pass, and
/// records a graph node when gradient tracking is active.
pub fn apply(kind: OpKind, inputs: &[&Tensor], attrs: &Attrs) -> Result<Tensor> {
    let op = kind.token();
    let expect_arity = |n: usize| -> Result<()> {
        if inputs.len() != n {
            Err(err_shape(
                kind.token(),
                format!("expects {} input(s), got {}", n, inputs.len()),
            ))
        } else {
            Ok(())
        }
    };

    let (data, shape, saved) = match kind {
        OpKind::MatMul => {
            expect_arity(2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(err_shape(op, format!("cannot multiply {:?} by {:?}", sa, sb)));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![0.0; m * n];
            kernels::gemm(m, k, n, &a.data(), &b.data(), 0.0, &mut out);
            (out, vec![m, n], Saved::None)
        }
        OpKind::Conv1d => {
            expect_arity(2)?;
            let Attrs::Conv1d { stride, pad } = *attrs else {
                return Err(err_attrs(op, format!("expected conv1d attrs, got {:?}", attrs)));
            };
            if stride == 0 {
                return Err(err_attrs(op, "stride must be positive".into()));
            }
            let (x, w) = (inputs[0], inputs[1]);
            let (sx, sw_) = (x.shape(), w.shape());
            if sx.len() != 2 || sw_.len() != 3 || sx[0] != sw_[1] {
                return Err(err_shape(
                    op,
                    format!("input {:?} incompatible with kernel {:?}", sx, sw_),
                ));
            }
            let (c_in, l) = (sx[0], sx[1]);
            let (c_out, k) = (sw_[0], sw_[2]);
            if l + 2 * pad < k {
                return Err(err_shape(
                    op,
                    format!("length {} + 2*pad {} shorter than kernel {}", l, pad, k),
                ));
            }
            let l_out = kernels::conv2d_out_dim(l, k, stride, pad);
            let mut cols = vec![0.0; c_in * k * l_out];
            kernels::im2col(&x.data(), c_in, l, 1, k, 1, stride, 1, pad, 0, &mut cols);
            let mut out = vec![0.0; c_out * l_out];
            kernels::gemm(c_out, c_in * k, l_out, &w.data(), &cols, 0.0, &mut out);
            (out, vec![c_out, l_out], Saved::Buf(cols))
        }
        OpKind::Conv2d => {
            expect_arity(2)?;
            let Attrs::Conv2d { stride, pad } = *attrs else {
                return Err(err_attrs(op, format!("expected conv2d attrs, got {:?}", attrs)));
            };
            if stride.0 == 0 || stride.1 == 0 {
                return Err(err_attrs(op, "stride must be positive".into()));
            }
            let (x, w) = (inputs[0], inputs[1]);
            let (sx, sw_) = (x.shape(), w.shape());
            if sx.len() != 3 || sw_.len() != 4 || sx[0] != sw_[1] {
                return Err(err_shape(
                    op,
                    format!("input {:?} incompatible with kernel {:?}", sx, sw_),
                ));
            }
            let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
            let (c_out, kh, kw) = (sw_[0], sw_[2], sw_[3]);
            if h + 2 * pad.0 < kh || wd + 2 * pad.1 < kw {
                return Err(err_shape(
                    op,
                    format!("padded input {:?} smaller than kernel {:?}", sx, sw_),
                ));
            }
            let h_out = kernels::conv2d_out_dim(h, kh, stride.0, pad.0);
            let w_out = kernels::conv2d_out_dim(wd, kw, stride.1, pad.1);
            let n = h_out * w_out;
            let mut cols = vec![0.0; c_in * kh * kw * n];
            kernels::im2col(
                &x.data(),
                c_in,
                h,
                wd,
                kh,
                kw,
                stride.0,
                stride.1,
                pad.0,
                pad.1,
                &mut cols,
            );
            let mut out = vec![0.0; c_out * n];
            kernels::gemm(c_out, c_in * kh * kw, n, &w.data(), &cols, 0.0, &mut out);
            (out, vec![c_out, h_out, w_out], Saved::Buf(cols))
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            expect_arity(2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(err_shape(
                    op,
                    format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
                ));
            }
            let (da, db) = (a.data(), b.data());
            let out: Vec<f64> = match kind {
                OpKind::Add => da.iter().zip(db.iter()).map(|(x, y)| x + y).collect(),
                OpKind::Sub => da.iter().zip(db.iter()).map(|(x, y)| x - y).collect(),
                _ => da.iter().zip(db.iter()).map(|(x, y)| x * y).collect(),
            };
            (out, a.shape().to_vec(), Saved::None)
        }
        OpKind::Scale => {
            expect_arity(1)?;
            let Attrs::Scale { factor } = *attrs else {
                return Err(err_attrs(op, format!("expected scale attrs, got {:?}", attrs)));
            };
            let x = inputs[0];
            let out: Vec<f64> = x.data().iter().map(|v| v * factor).collect();
            (out, x.shape().to_vec(), Saved::None)
        }
        OpKind::Relu => {
            expect_arity(1)?;
            let x = inputs[0];
            let out: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            (out, x.shape().to_vec(), Saved::None)
        }
        OpKind::Silu => {
            expect_arity(1)?;
            let x = inputs[0];
            let sig: Vec<f64> = x.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
            let out: Vec<f64> = x.data().iter().zip(&sig).map(|(&v, &s)| v * s).collect();
            (out, x.shape().to_vec(), Saved::Buf(sig))
        }
        OpKind::Sigmoid => {
            expect_arity(1)?;
            let x = inputs[0];
            let out: Vec<f64> = x.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
            (out, x.shape().to_vec(), Saved::None)
        }
        OpKind::Tanh => {
            expect_arity(1)?;
            let x = inputs[0];
            let out: Vec<f64> = x.data().iter().map(|&v| v.tanh()).collect();
            (out, x.shape().to_vec(), Saved::None)
        }
        OpKind::Abs => {
            expect_arity(1)?;
            let x = inputs[0];
            let out: Vec<f64> = x.data().iter().map(|&v| v.abs()).collect();
            (out, x.shape().to_vec(), Saved::None)
        }
        OpKind::AvgPool2d => {
            expect_arity(1)?;
            let x = inputs[0];
            let sx = x.shape();
            if sx.len() != 3 {
                return Err(err_shape(op, format!("expects (C, H, W), got {:?}", sx)));
            }
            let (c, h, w) = (sx[0], sx[1], sx[2]);
            match *attrs {
                Attrs::Pool { kernel, stride } => {
                    if stride.0 == 0 || stride.1 == 0 || kernel.0 == 0 || kernel.1 == 0 {
                        return Err(err_attrs(op, "kernel and stride must be positive".into()));
                    }
                    if kernel.0 > h || kernel.1 > w {
                        return Err(err_shape(
                            op,
                            format!("kernel {:?} larger than input {:?}", kernel, sx),
                        ));
                    }
                    let h_out = kernels::pool_out_dim(h, kernel.0, stride.0);
                    let w_out = kernels::pool_out_dim(w, kernel.1, stride.1);
                    let xd = x.data();
                    let inv = 1.0 / (kernel.0 * kernel.1) as f64;
                    let mut out = vec![0.0; c * h_out * w_out];
                    for ci in 0..c {
                        for oy in 0..h_out {
                            for ox in 0..w_out {
                                let mut acc = 0.0;
                                for ky in 0..kernel.0 {
                                    let iy = oy * stride.0 + ky;
                                    for kx in 0..kernel.1 {
                                        acc += xd[(ci * h + iy) * w + ox * stride.1 + kx];
                                    }
                                }
                                out[(ci * h_out + oy) * w_out + ox] = acc * inv;
                            }
                        }
                    }
                    (out, vec![c, h_out, w_out], Saved::None)
                }
                Attrs::AdaptivePool { out: (oh, ow) } => {
                    if oh == 0 || ow == 0 {
                        return Err(err_attrs(op, "output size must be positive".into()));
                    }
                    let xd = x.data();
                    let mut out = vec![0.0; c * oh * ow];
                    for ci in 0..c {
                        for oy in 0..oh {
                            let (y0, y1) = kernels::adaptive_bin(oy, h, oh);
                            for ox in 0..ow {
                                let (x0, x1) = kernels::adaptive_bin(ox, w, ow);
                                let mut acc = 0.0;
                                for iy in y0..y1 {
                                    for ix in x0..x1 {
                                        acc += xd[(ci * h + iy) * w + ix];
                                    }
                                }
                                out[(ci * oh + oy) * ow + ox] =
                                    acc / ((y1 - y0) * (x1 - x0)) as f64;
                            }
                        }
                    }
                    (out, vec![c, oh, ow], Saved::None)
                }
                _ => {
                    return Err(err_attrs(
                        op,
                        format!("expected pool or adaptive-pool attrs, got {:?}", attrs),
                    ))
                }
            }
        }
        OpKind::MaxPool2d => {
            expect_arity(1)?;
            let Attrs::Pool { kernel, stride } = *attrs else {
                return Err(err_attrs(op, format!("expected pool attrs, got {:?}", attrs)));
            };
            if stride.0 == 0 || stride.1 == 0 || kernel.0 == 0 || kernel.1 == 0 {
                return Err(err_attrs(op, "kernel and stride must be positive".into()));
            }
            let x = inputs[0];
            let sx = x.shape();
            if sx.len() != 3 {
                return Err(err_shape(op, format!("expects (C, H, W), got {:?}", sx)));
            }
            let (c, h, w) = (sx[0], sx[1], sx[2]);
            if kernel.0 > h || kernel.1 > w {
                return Err(err_shape(
                    op,
                    format!("kernel {:?} larger than input {:?}", kernel, sx),
                ));
            }
            let h_out = kernels::pool_out_dim(h, kernel.0, stride.0);
            let w_out = kernels::pool_out_dim(w, kernel.1, stride.1);
            let xd = x.data();
            let mut out = vec![0.0; c * h_out * w_out];
            let mut idx = vec![0u32; c * h_out * w_out];
            for ci in 0..c {
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0u32;
                        for ky in 0..kernel.0 {
                            let iy = oy * stride.0 + ky;
                            for kx in 0..kernel.1 {
                                let flat = (ci * h + iy) * w + ox * stride.1 + kx;
                                // Strict > keeps the first (row-major) argmax on ties.
                                if xd[flat] > best {
                                    best = xd[flat];
                                    best_i = flat as u32;
                                }
                            }
                        }
                        let o = (ci * h_out + oy) * w_out + ox;
                        out[o] = best;
                        idx[o] = best_i;
                    }
                }
            }
            (out, vec![c, h_out, w_out], Saved::Indices(idx))
        }
        OpKind::UpsampleNearest => {
            expect_arity(1)?;
            let Attrs::Upsample { scale } = *attrs else {
                return Err(err_attrs(op, format!("expected upsample attrs, got {:?}", attrs)));
            };
            if scale.0 == 0 || scale.1 == 0 {
                return Err(err_attrs(op, "scale must be positive".into()));
            }
            let x = inputs[0];
            let sx = x.shape();
            if sx.len() != 3 {
                return Err(err_shape(op, format!("expects (C, H, W), got {:?}", sx)));
            }
            let (c, h, w) = (sx[0], sx[1], sx[2]);
            let (oh, ow) = (h * scale.0, w * scale.1);
            let xd = x.data();
            let mut out = vec![0.0; c * oh * ow];
            for ci in 0..c {
                for oy in 0..oh {
                    let iy = oy / scale.0;
                    for ox in 0..ow {
                        out[(ci * oh + oy) * ow + ox] = xd[(ci * h + iy) * w + ox / scale.1];
                    }
                }
            }
            (out, vec![c, oh, ow], Saved::None)
        }
        OpKind::ReplicatePad2d => {
            expect_arity(1)?;
            let Attrs::Pad { pad } = *attrs else {
                return Err(err_attrs(op, format!("expected pad attrs, got {:?}", attrs)));
            };
            let x = inputs[0];
            let sx = x.shape();
            if sx.len() != 3 {
                return Err(err_shape(op, format!("expects (C, H, W), got {:?}", sx)));
            }
            let (c, h, w) = (sx[0], sx[1], sx[2]);
            if h == 0 || w == 0 {
                return Err(err_shape(op, "cannot pad an empty image".into()));
            }
            let (ph, pw) = pad;
            let (oh, ow) = (h + 2 * ph, w + 2 * pw);
            let xd = x.data();
            let mut out = vec![0.0; c * oh * ow];
            for ci in 0..c {
                for oy in 0..oh {
                    let iy = oy.saturating_sub(ph).min(h - 1);
                    for ox in 0..ow {
                        let ix = ox.saturating_sub(pw).min(w - 1);
                        out[(ci * oh + oy) * ow + ox] = xd[(ci * h + iy) * w + ix];
                    }
                }
            }
            (out, vec![c, oh, ow], Saved::None)
        }
        OpKind::GroupNorm => {
            expect_arity(1)?;
            let Attrs::GroupNorm { groups, eps } = *attrs else {
                return Err(err_attrs(op, format!("expected groupnorm attrs, got {:?}", attrs)));
            };
            let x = inputs[0];
            let sx = x.shape();
            if sx.is_empty() {
                return Err(err_shape(op, "expects at least 1 dimension".into()));
            }
            let c = sx[0];
            if groups == 0 || c % groups != 0 {
                return Err(err_attrs(
                    op,
                    format!("channels {} not divisible by groups {}", c, groups),
                ));
            }
            if !(eps > 0.0) {
                return Err(err_attrs(op, "eps must be positive".into()));
            }
            let spatial: usize = sx[1..].iter().product::<usize>().max(1);
            let gs = (c / groups) * spatial;
            let xd = x.data();
            let mut out = vec![0.0; xd.len()];
            let mut inv_stds = vec![0.0; groups];
            for g in 0..groups {
                let block = &xd[g * gs..(g + 1) * gs];
                let mean = block.iter().sum::<f64>() / gs as f64;
                let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gs as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                for (o, v) in out[g * gs..(g + 1) * gs].iter_mut().zip(block) {
                    *o = (v - mean) * inv_std;
                }
                inv_stds[g] = inv_std;
            }
            (out, sx.to_vec(), Saved::InvStd(inv_stds))
        }
        OpKind::Flatten => {
            expect_arity(1)?;
            let x = inputs[0];
            (x.to_vec(), vec![x.numel()], Saved::None)
        }
        OpKind::Reshape => {
            expect_arity(1)?;
            let Attrs::Reshape { shape } = attrs else {
                return Err(err_attrs(op, format!("expected reshape attrs, got {:?}", attrs)));
            };
            let x = inputs[0];
            if numel_of(shape) != x.numel() {
                return Err(err_shape(
                    op,
                    format!("cannot reshape {:?} into {:?}", x.shape(), shape),
                ));
            }
            (x.to_vec(), shape.clone(), Saved::None)
        }
        OpKind::Concat => {
            if inputs.is_empty() {
                return Err(err_shape(op, "expects at least one input".into()));
            }
            let Attrs::Concat { axis } = *attrs else {
                return Err(err_attrs(op, format!("expected concat attrs, got {:?}", attrs)));
            };
            let first = inputs[0].shape();
            if axis >= first.len() {
                return Err(err_attrs(
                    op,
                    format!("axis {} out of range for {:?}", axis, first),
                ));
            }
            let mut axis_total = 0;
            for t in inputs {
                let s = t.shape();
                let compatible = s.len() == first.len()
                    && s.iter()
                        .zip(first)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(err_shape(
                        op,
                        format!("shape {:?} incompatible with {:?} along axis {}", s, first, axis),
                    ));
                }
                axis_total += s[axis];
            }
            let mut shape = first.to_vec();
            shape[axis] = axis_total;
            let outer: usize = first[..axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let mut out = vec![0.0; numel_of(&shape)];
            let out_stride = axis_total * inner;
            let mut offset = 0;
            for t in inputs {
                let rows = t.shape()[axis];
                let td = t.data();
                for o in 0..outer {
                    let src = &td[o * rows * inner..(o + 1) * rows * inner];
                    let dst = &mut out[o * out_stride + offset..o * out_stride + offset + rows * inner];
                    dst.copy_from_slice(src);
                }
                offset += rows * inner;
            }
            (out, shape, Saved::None)
        }
        OpKind::Sum => {
            expect_arity(1)?;
            (vec![inputs[0].data().iter().sum()], vec![1], Saved::None)
        }
        OpKind::Mean => {
            expect_arity(1)?;
            let x = inputs[0];
            (
                vec![x.data().iter().sum::<f64>() / x.numel() as f64],
                vec![1],
                Saved::None,
            )
        }
        OpKind::BroadcastAdd => {
            expect_arity(2)?;
            let (x, b) = (inputs[0], inputs[1]);
            let (sx, sb) = (x.shape(), b.shape());
            if sb.len() != 1 || sx.is_empty() || sx[0] != sb[0] {
                return Err(err_shape(
                    op,
                    format!("cannot broadcast {:?} over {:?} (leading dim must match)", sb, sx),
                ));
            }
            let inner: usize = sx[1..].iter().product::<usize>().max(1);
            let (xd, bd) = (x.data(), b.data());
            let mut out = vec![0.0; xd.len()];
            for c in 0..sx[0] {
                let bias = bd[c];
                for (o, v) in out[c * inner..(c + 1) * inner]
                    .iter_mut()
                    .zip(&xd[c * inner..(c + 1) * inner])
                {
                    *o = v + bias;
                }
            }
            (out, sx.to_vec(), Saved::None)
        }
    };

    let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
    let node = track.then(|| Node {
        kind,
        attrs: attrs.clone(),
        inputs: inputs.iter().map(|t| (*t).clone()).collect(),
        saved,
    });
    Ok(Tensor::from_parts(data, shape, false, node))
}

/// Add `delta`-producing contribution into the adjoint slot of `t`, if `t`
/// participates in differentiation.
fn with_slot(adj: &mut HashMap<usize, Vec<f64>>, t: &Tensor, f: impl FnOnce(&mut [f64])) {
    if t.requires_grad() {
        let slot = adj
            .entry(t.ptr_id())
            .or_insert_with(|| vec![0.0; t.numel()]);
        f(slot);
    }
}

fn backward_op(out: &Tensor, node: &Node, g: &[f64], adj: &mut HashMap<usize, Vec<f64>>) {
    let ins = &node.inputs;
    match node.kind {
        OpKind::MatMul => {
            let (a, b) = (&ins[0], &ins[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            with_slot(adj, a, |da| kernels::gemm_nt(m, n, k, g, &b.data(), 1.0, da));
            with_slot(adj, b, |db| kernels::gemm_tn(k, m, n, &a.data(), g, 1.0, db));
        }
        OpKind::Conv1d => {
            let Attrs::Conv1d { stride, pad } = node.attrs else { unreachable!() };
            let Saved::Buf(cols) = &node.saved else { unreachable!() };
            let (x, w) = (&ins[0], &ins[1]);
            let (c_in, l) = (x.shape()[0], x.shape()[1]);
            let (c_out, k) = (w.shape()[0], w.shape()[2]);
            let l_out = out.shape()[1];
            with_slot(adj, w, |dw| {
                kernels::gemm_nt(c_out, l_out, c_in * k, g, cols, 1.0, dw);
            });
            with_slot(adj, x, |dx| {
                let mut dcols = vec![0.0; c_in * k * l_out];
                kernels::gemm_tn(c_in * k, c_out, l_out, &w.data(), g, 0.0, &mut dcols);
                kernels::col2im(&dcols, c_in, l, 1, k, 1, stride, 1, pad, 0, dx);
            });
        }
        OpKind::Conv2d => {
            let Attrs::Conv2d { stride, pad } = node.attrs else { unreachable!() };
            let Saved::Buf(cols) = &node.saved else { unreachable!() };
            let (x, w) = (&ins[0], &ins[1]);
            let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
            let n = out.shape()[1] * out.shape()[2];
            with_slot(adj, w, |dw| {
                kernels::gemm_nt(c_out, n, c_in * kh * kw, g, cols, 1.0, dw);
            });
            with_slot(adj, x, |dx| {
                let mut dcols = vec![0.0; c_in * kh * kw * n];
                kernels::gemm_tn(c_in * kh * kw, c_out, n, &w.data(), g, 0.0, &mut dcols);
                kernels::col2im(
                    &dcols, c_in, h, wd, kh, kw, stride.0, stride.1, pad.0, pad.1, dx,
                );
            });
        }
        OpKind::Add => {
            with_slot(adj, &ins[0], |da| {
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += gi;
                }
            });
            with_slot(adj, &ins[1], |db| {
                for (d, gi) in db.iter_mut().zip(g) {
                    *d += gi;
                }
            });
        }
        OpKind::Sub => {
            with_slot(adj, &ins[0], |da| {
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += gi;
                }
            });
            with_slot(adj, &ins[1], |db| {
                for (d, gi) in db.iter_mut().zip(g) {
                    *d -= gi;
                }
            });
        }
        OpKind::Mul => {
            let (a, b) = (&ins[0], &ins[1]);
            with_slot(adj, a, |da| {
                for ((d, gi), bi) in da.iter_mut().zip(g).zip(b.data().iter()) {
                    *d += gi * bi;
                }
            });
            with_slot(adj, b, |db| {
                for ((d, gi), ai) in db.iter_mut().zip(g).zip(a.data().iter()) {
                    *d += gi * ai;
                }
            });
        }
        OpKind::Scale => {
            let Attrs::Scale { factor } = node.attrs else { unreachable!() };
            with_slot(adj, &ins[0], |da| {
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += factor * gi;
                }
            });
        }
        OpKind::Relu => {
            let x = &ins[0];
            with_slot(adj, x, |dx| {
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(x.data().iter()) {
                    if *xi > 0.0 {
                        *d += gi;
                    }
                }
            });
        }
        OpKind::Silu => {
            let Saved::Buf(sig) = &node.saved else { unreachable!() };
            let x = &ins[0];
            with_slot(adj, x, |dx| {
                for (((d, gi), &s), &xi) in dx.iter_mut().zip(g).zip(sig).zip(x.data().iter()) {
                    *d += gi * s * (1.0 + xi * (1.0 - s));
                }
            });
        }
        OpKind::Sigmoid => {
            let y = out.data();
            with_slot(adj, &ins[0], |dx| {
                for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y.iter()) {
                    *d += gi * yi * (1.0 - yi);
                }
            });
        }
        OpKind::Tanh => {
            let y = out.data();
            with_slot(adj, &ins[0], |dx| {
                for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y.iter()) {
                    *d += gi * (1.0 - yi * yi);
                }
            });
        }
        OpKind::Abs => {
            let x = &ins[0];
            with_slot(adj, x, |dx| {
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(x.data().iter()) {
                    *d += gi * xi.signum() * if *xi == 0.0 { 0.0 } else { 1.0 };
                }
            });
        }
        OpKind::AvgPool2d => {
            let x = &ins[0];
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (oh, ow) = (out.shape()[1], out.shape()[2]);
            match node.attrs {
                Attrs::Pool { kernel, stride } => {
                    let inv = 1.0 / (kernel.0 * kernel.1) as f64;
                    with_slot(adj, x, |dx| {
                        for ci in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gi = g[(ci * oh + oy) * ow + ox] * inv;
                                    for ky in 0..kernel.0 {
                                        let iy = oy * stride.0 + ky;
                                        for kx in 0..kernel.1 {
                                            dx[(ci * h + iy) * w + ox * stride.1 + kx] += gi;
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                Attrs::AdaptivePool { .. } => {
                    with_slot(adj, x, |dx| {
                        for ci in 0..c {
                            for oy in 0..oh {
                                let (y0, y1) = kernels::adaptive_bin(oy, h, oh);
                                for ox in 0..ow {
                                    let (x0, x1) = kernels::adaptive_bin(ox, w, ow);
                                    let gi = g[(ci * oh + oy) * ow + ox]
                                        / ((y1 - y0) * (x1 - x0)) as f64;
                                    for iy in y0..y1 {
                                        for ix in x0..x1 {
                                            dx[(ci * h + iy) * w + ix] += gi;
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                _ => unreachable!(),
            }
        }
        OpKind::MaxPool2d => {
            let Saved::Indices(idx) = &node.saved else { unreachable!() };
            with_slot(adj, &ins[0], |dx| {
                for (gi, &i) in g.iter().zip(idx) {
                    dx[i as usize] += gi;
                }
            });
        }
        OpKind::UpsampleNearest => {
            let Attrs::Upsample { scale } = node.attrs else { unreachable!() };
            let x = &ins[0];
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (oh, ow) = (h * scale.0, w * scale.1);
            with_slot(adj, x, |dx| {
                for ci in 0..c {
                    for oy in 0..oh {
                        let iy = oy / scale.0;
                        for ox in 0..ow {
                            dx[(ci * h + iy) * w + ox / scale.1] += g[(ci * oh + oy) * ow + ox];
                        }
                    }
                }
            });
        }
        OpKind::ReplicatePad2d => {
            let Attrs::Pad { pad } = node.attrs else { unreachable!() };
            let x = &ins[0];
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (ph, pw) = pad;
            let (oh, ow) = (h + 2 * ph, w + 2 * pw);
            with_slot(adj, x, |dx| {
                for ci in 0..c {
                    for oy in 0..oh {
                        let iy = oy.saturating_sub(ph).min(h - 1);
                        for ox in 0..ow {
                            let ix = ox.saturating_sub(pw).min(w - 1);
                            dx[(ci * h + iy) * w + ix] += g[(ci * oh + oy) * ow + ox];
                        }
                    }
                }
            });
        }
        OpKind::GroupNorm => {
            let Attrs::GroupNorm { groups, .. } = node.attrs else { unreachable!() };
            let Saved::InvStd(inv_std) = &node.saved else { unreachable!() };
            let x = &ins[0];
            let gs = x.numel() / groups;
            let y = out.data();
            with_slot(adj, x, |dx| {
                for gi in 0..groups {
                    let r = inv_std[gi];
                    let gb = &g[gi * gs..(gi + 1) * gs];
                    let yb = &y[gi * gs..(gi + 1) * gs];
                    let m = gs as f64;
                    let s1: f64 = gb.iter().sum::<f64>() / m;
                    let s2: f64 = gb.iter().zip(yb).map(|(a, b)| a * b).sum::<f64>() / m;
                    for ((d, &gv), &yv) in dx[gi * gs..(gi + 1) * gs]
                        .iter_mut()
                        .zip(gb)
                        .zip(yb)
                    {
                        *d += r * (gv - s1 - yv * s2);
                    }
                }
            });
        }
        OpKind::Flatten | OpKind::Reshape => {
            with_slot(adj, &ins[0], |dx| {
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d += gi;
                }
            });
        }
        OpKind::Concat => {
            let Attrs::Concat { axis } = node.attrs else { unreachable!() };
            let first = ins[0].shape();
            let outer: usize = first[..axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let total_axis = out.shape()[axis];
            let out_stride = total_axis * inner;
            let mut offset = 0;
            for t in ins {
                let rows = t.shape()[axis];
                with_slot(adj, t, |dt| {
                    for o in 0..outer {
                        let src = &g[o * out_stride + offset..o * out_stride + offset + rows * inner];
                        for (d, gi) in dt[o * rows * inner..(o + 1) * rows * inner]
                            .iter_mut()
                            .zip(src)
                        {
                            *d += gi;
                        }
                    }
                });
                offset += rows * inner;
            }
        }
        OpKind::Sum => {
            with_slot(adj, &ins[0], |dx| {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            });
        }
        OpKind::Mean => {
            let n = ins[0].numel() as f64;
            with_slot(adj, &ins[0], |dx| {
                for d in dx.iter_mut() {
                    *d += g[0] / n;
                }
            });
        }
        OpKind::BroadcastAdd => {
            let (x, b) = (&ins[0], &ins[1]);
            let inner: usize = x.shape()[1..].iter().product::<usize>().max(1);
            with_slot(adj, x, |dx| {
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d += gi;
                }
            });
            with_slot(adj, b, |db| {
                for (c, d) in db.iter_mut().enumerate() {
                    *d += g[c * inner..(c + 1) * inner].iter().sum::<f64>();
                }
            });
        }
    }
}

// --- convenience wrappers -------------------------------------------------

impl Tensor {
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        apply(OpKind::MatMul, &[self, rhs], &Attrs::None)
    }

    pub fn conv1d(&self, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        apply(OpKind::Conv1d, &[self, kernel], &Attrs::Conv1d { stride, pad })
    }

    pub fn conv2d(
        &self,
        kernel: &Tensor,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Tensor> {
        apply(OpKind::Conv2d, &[self, kernel], &Attrs::Conv2d { stride, pad })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        apply(OpKind::Add, &[self, rhs], &Attrs::None)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        apply(OpKind::Sub, &[self, rhs], &Attrs::None)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        apply(OpKind::Mul, &[self, rhs], &Attrs::None)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        apply(OpKind::Scale, &[self], &Attrs::Scale { factor }).expect("scale is infallible")
    }

    pub fn relu(&self) -> Tensor {
        apply(OpKind::Relu, &[self], &Attrs::None).expect("relu is infallible")
    }

    pub fn silu(&self) -> Tensor {
        apply(OpKind::Silu, &[self], &Attrs::None).expect("silu is infallible")
    }

    pub fn sigmoid(&self) -> Tensor {
        apply(OpKind::Sigmoid, &[self], &Attrs::None).expect("sigmoid is infallible")
    }

    pub fn tanh_op(&self) -> Tensor {
        apply(OpKind::Tanh, &[self], &Attrs::None).expect("tanh is infallible")
    }

    pub fn abs_op(&self) -> Tensor {
        apply(OpKind::Abs, &[self], &Attrs::None).expect("abs is infallible")
    }

    pub fn avg_pool2d(&self, kernel: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
        apply(OpKind::AvgPool2d, &[self], &Attrs::Pool { kernel, stride })
    }

    pub fn adaptive_avg_pool2d(&self, out: (usize, usize)) -> Result<Tensor> {
        apply(OpKind::AvgPool2d, &[self], &Attrs::AdaptivePool { out })
    }

    pub fn max_pool2d(&self, kernel: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
        apply(OpKind::MaxPool2d, &[self], &Attrs::Pool { kernel, stride })
    }

    pub fn upsample_nearest(&self, scale: (usize, usize)) -> Result<Tensor> {
        apply(OpKind::UpsampleNearest, &[self], &Attrs::Upsample { scale })
    }

    /// Edge-replicating pad of a (C, H, W) image by (ph, pw) on each side.
    pub fn replicate_pad2d(&self, pad: (usize, usize)) -> Result<Tensor> {
        apply(OpKind::ReplicatePad2d, &[self], &Attrs::Pad { pad })
    }

    pub fn group_norm(&self, groups: usize, eps: f64) -> Result<Tensor> {
        apply(OpKind::GroupNorm, &[self], &Attrs::GroupNorm { groups, eps })
    }

    pub fn flatten(&self) -> Tensor {
        apply(OpKind::Flatten, &[self], &Attrs::None).expect("flatten is infallible")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        apply(OpKind::Reshape, &[self], &Attrs::Reshape { shape: shape.to_vec() })
    }

    pub fn sum_all(&self) -> Tensor {
        apply(OpKind::Sum, &[self], &Attrs::None).expect("sum is infallible")
    }

    pub fn mean_all(&self) -> Tensor {
        apply(OpKind::Mean, &[self], &Attrs::None).expect("mean is infallible")
    }

    pub fn broadcast_add(&self, bias: &Tensor) -> Result<Tensor> {
        apply(OpKind::BroadcastAdd, &[self, bias], &Attrs::None)
    }
}

pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
    apply(OpKind::Concat, tensors, &Attrs::Concat { axis })
}

/// Compare reverse-mode gradients of a scalar-valued function against
/// central finite differences.
///
/// Returns max over all parameter entries of
/// |autodiff − central| / max(1, |central|).
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    // Reverse-mode gradients on fresh leaves.
    let leaves: Vec<Tensor> = params
        .iter()
        .map(|p| Tensor::leaf(p.to_vec(), p.shape()).expect("shape matches data"))
        .collect();
    let out = f(&leaves)?;
    if out.numel() != 1 {
        return Err(TensorError::NonScalarRoot(out.shape().to_vec()));
    }
    if !out.item().is_finite() {
        return Err(TensorError::NonFinite { op: "grad-check" });
    }
    out.backward()?;
    let grads: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    // Central differences, one entry at a time.
    let mut max_rel = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let base = p.to_vec();
        for j in 0..base.len() {
            let eval = |delta: f64| -> Result<f64> {
                let probes: Vec<Tensor> = params
                    .iter()
                    .enumerate()
                    .map(|(qi, q)| {
                        if qi == pi {
                            let mut d = base.clone();
                            d[j] += delta;
                            Tensor::from_vec(d, q.shape()).expect("shape matches data")
                        } else {
                            Tensor::from_vec(q.to_vec(), q.shape()).expect("shape matches data")
                        }
                    })
                    .collect();
                let v = f(&probes)?;
                if v.numel() != 1 {
                    return Err(TensorError::NonScalarRoot(v.shape().to_vec()));
                }
                let x = v.item();
                if !x.is_finite() {
                    return Err(TensorError::NonFinite { op: "grad-check" });
                }
                Ok(x)
            };
            let fd = (eval(step)? - eval(-step)?) / (2.0 * step);
            let rel = (grads[pi][j] - fd).abs() / fd.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
