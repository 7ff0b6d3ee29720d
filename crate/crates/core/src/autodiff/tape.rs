//! Reverse-mode automatic differentiation over dense n-dimensional arrays.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Tape::backward`] then walks the record in reverse and
//! accumulates gradients into the tracked leaves. A tape is built once per
//! training step and thrown away afterwards; parameters live outside it (see
//! [`crate::autodiff::ParamStore`]).

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;

use ndarray::{concatenate, ArrayView2, Axis, Ix2, IxDyn, Slice};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Dense row-major array of 64-bit floats.
pub type Array = ndarray::ArrayD<f64>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("function value is not finite ({0})")]
    NonFinite(f64),
}

pub type TensorResult<T> = Result<T, TensorError>;

/// Storage precision of forward values.
///
/// `F32` rounds every forward result through single precision; the gradient
/// arithmetic itself stays in 64-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat { parents: Vec<usize>, axis: usize },
    Slice { parent: usize, axis: usize, start: usize, end: usize },
    Gather { parent: usize, indices: Vec<usize> },
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Gelu(usize),
    Softmax { parent: usize, axis: usize },
    Sum { parent: usize, axis: Option<usize> },
    Mean { parent: usize, axis: Option<usize> },
    RowNorm { parent: usize },
    SquaredError(usize, usize),
    Dropout { parent: usize, mask: Array },
    Clamp { parent: usize, lo: f64, hi: f64 },
    Affine { parent: usize, scale: f64 },
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<HashMap<usize, Array>>,
    precision: Precision,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("precision", &self.precision)
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, mut value: Array, op: Op, requires_grad: bool) -> Var<'_> {
        if !value.is_standard_layout() {
            value = value.as_standard_layout().into_owned();
        }
        if self.precision == Precision::F32 {
            value.mapv_inplace(|x| x as f32 as f64);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives gradient.
    pub fn leaf(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.constant(Array::from_elem(IxDyn(&[]), x))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> TensorResult<Var<'t>> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].id].value;
            if axis >= first.ndim() {
                return Err(TensorError::InvalidAxis {
                    op: "concat",
                    axis,
                    shape: first.shape().to_vec(),
                });
            }
            for p in &parts[1..] {
                let v = &nodes[p.id].value;
                let compatible = v.ndim() == first.ndim()
                    && v.shape()
                        .iter()
                        .zip(first.shape())
                        .enumerate()
                        .all(|(ax, (a, b))| ax == axis || a == b);
                if !compatible {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: first.shape().to_vec(),
                        rhs: v.shape().to_vec(),
                    });
                }
            }
            let views: Vec<_> = parts.iter().map(|p| nodes[p.id].value.view()).collect();
            concatenate(Axis(axis), &views).expect("shapes checked")
        };
        let requires = parts.iter().any(|p| p.requires_grad());
        Ok(self.push(
            value,
            Op::Concat {
                parents: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            requires,
        ))
    }

    /// Gradient accumulated into a tracked leaf by previous backward calls.
    pub fn grad(&self, var: Var<'_>) -> Option<Array> {
        self.leaf_grads.borrow().get(&var.id).cloned()
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Propagate d(root)/d(leaf) into every tracked leaf reachable from `root`.
    /// Calling it again without [`Tape::zero_grad`] accumulates.
    pub fn backward(&self, root: Var<'_>) -> TensorResult<()> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        if !root_node.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Array>> = vec![None; root.id + 1];
        grads[root.id] = Some(Array::ones(root_node.value.raw_dim()));
        let mut leaf_grads = self.leaf_grads.borrow_mut();

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut send = |target: usize, grad: Array| {
                if nodes[target].requires_grad {
                    accumulate(&mut grads[target], grad);
                }
            };
            match &node.op {
                Op::Leaf => {
                    accumulate_map(&mut leaf_grads, id, g);
                }
                Op::Add(a, b) => {
                    send(*a, reduce_to(&g, nodes[*a].value.shape()));
                    send(*b, reduce_to(&g, nodes[*b].value.shape()));
                }
                Op::Sub(a, b) => {
                    send(*a, reduce_to(&g, nodes[*a].value.shape()));
                    send(*b, reduce_to(&g.mapv(|x| -x), nodes[*b].value.shape()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].requires_grad {
                        send(*a, reduce_to(&(&g * vb), va.shape()));
                    }
                    if nodes[*b].requires_grad {
                        send(*b, reduce_to(&(&g * va), vb.shape()));
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].requires_grad {
                        send(*a, reduce_to(&(&g / vb), va.shape()));
                    }
                    if nodes[*b].requires_grad {
                        let gb = -(&g * &node.value) / vb;
                        send(*b, reduce_to(&gb, vb.shape()));
                    }
                }
                Op::MatMul(a, b) => {
                    let g2 = as2(&g);
                    let va = as2(&nodes[*a].value);
                    let vb = as2(&nodes[*b].value);
                    if nodes[*a].requires_grad {
                        send(*a, g2.dot(&vb.t()).into_dyn());
                    }
                    if nodes[*b].requires_grad {
                        send(*b, va.t().dot(&g2).into_dyn());
                    }
                }
                Op::Transpose(a) => {
                    send(*a, g.reversed_axes().as_standard_layout().into_owned());
                }
                Op::Reshape(a) => {
                    let shape = nodes[*a].value.raw_dim();
                    // matmul gradients can arrive column-major
                    let g = g.as_standard_layout().into_owned();
                    send(*a, g.into_shape_with_order(shape).expect("same length"));
                }
                Op::Concat { parents, axis } => {
                    let mut offset = 0;
                    for &p in parents {
                        let len = nodes[p].value.shape()[*axis];
                        let part = g
                            .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                            .to_owned();
                        offset += len;
                        send(p, part);
                    }
                }
                Op::Slice {
                    parent,
                    axis,
                    start,
                    end,
                } => {
                    let mut full = Array::zeros(nodes[*parent].value.raw_dim());
                    full.slice_axis_mut(Axis(*axis), Slice::from(*start..*end))
                        .assign(&g);
                    send(*parent, full);
                }
                Op::Gather { parent, indices } => {
                    let mut full = Array::zeros(nodes[*parent].value.raw_dim());
                    for (k, &i) in indices.iter().enumerate() {
                        let mut row = full.index_axis_mut(Axis(0), i);
                        row += &g.index_axis(Axis(0), k);
                    }
                    send(*parent, full);
                }
                Op::Exp(a) => send(*a, &g * &node.value),
                Op::Log(a) => send(*a, &g / &nodes[*a].value),
                Op::Sigmoid(a) => {
                    let d = node.value.mapv(|y| y * (1.0 - y));
                    send(*a, &g * &d);
                }
                Op::Gelu(a) => {
                    let d = nodes[*a].value.mapv(gelu_grad);
                    send(*a, &g * &d);
                }
                Op::Softmax { parent, axis } => {
                    let y = &node.value;
                    let gy = &g * y;
                    let dot = gy.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                    send(*parent, y * &(&g - &dot));
                }
                Op::Sum { parent, axis } | Op::Mean { parent, axis } => {
                    let shape = nodes[*parent].value.raw_dim();
                    let n = match (&node.op, axis) {
                        (Op::Mean { .. }, Some(ax)) => shape[*ax] as f64,
                        (Op::Mean { .. }, None) => nodes[*parent].value.len() as f64,
                        _ => 1.0,
                    };
                    let expanded = g
                        .broadcast(shape.clone())
                        .expect("reduced shape broadcasts back")
                        .mapv(|x| x / n);
                    send(*parent, expanded);
                }
                Op::RowNorm { parent } => {
                    let x = &nodes[*parent].value;
                    send(*parent, x * &(&g / &node.value));
                }
                Op::SquaredError(a, b) => {
                    let gs = g.first().copied().unwrap_or(0.0);
                    let diff = &nodes[*a].value - &nodes[*b].value;
                    if nodes[*a].requires_grad {
                        send(*a, diff.mapv(|d| 2.0 * d * gs));
                    }
                    if nodes[*b].requires_grad {
                        send(*b, diff.mapv(|d| -2.0 * d * gs));
                    }
                }
                Op::Dropout { parent, mask } => send(*parent, &g * mask),
                Op::Clamp { parent, lo, hi } => {
                    let x = &nodes[*parent].value;
                    let mut out = g;
                    ndarray::Zip::from(&mut out).and(x).for_each(|o, &xv| {
                        if xv < *lo || xv > *hi {
                            *o = 0.0;
                        }
                    });
                    send(*parent, out);
                }
                Op::Affine { parent, scale } => send(*parent, g.mapv(|x| x * scale)),
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Array>, grad: Array) {
    match slot {
        Some(existing) => *existing += &grad,
        None => *slot = Some(grad),
    }
}

fn accumulate_map(map: &mut HashMap<usize, Array>, id: usize, grad: Array) {
    match map.get_mut(&id) {
        Some(existing) => *existing += &grad,
        None => {
            map.insert(id, grad);
        }
    }
}

fn as2(a: &Array) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("checked 2-d")
}

/// Sum a broadcast gradient back down to `shape`.
fn reduce_to(grad: &Array, shape: &[usize]) -> Array {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

/// Right-aligned broadcast of two shapes, numpy rules.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of a plain array along `axis`.
pub fn softmax_array(x: &Array, axis: usize) -> Array {
    let max = x
        .map_axis(Axis(axis), |v| v.fold(f64::NEG_INFINITY, |m, &y| m.max(y)))
        .insert_axis(Axis(axis));
    let e = (x - &max).mapv(f64::exp);
    let s = e.sum_axis(Axis(axis)).insert_axis(Axis(axis));
    e / s
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Borrow the forward value.
    pub fn value_ref(&self) -> Ref<'t, Array> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value(&self) -> Array {
        self.value_ref().clone()
    }

    /// The single element of a size-1 value.
    pub fn item(&self) -> f64 {
        let v = self.value_ref();
        debug_assert_eq!(v.len(), 1, "item() on shape {:?}", v.shape());
        v.iter().next().copied().unwrap_or(f64::NAN)
    }

    pub fn grad(&self) -> Option<Array> {
        self.tape.grad(*self)
    }

    /// Same value, cut out of the graph.
    pub fn detach(&self) -> Var<'t> {
        let v = self.value();
        self.tape.constant(v)
    }

    fn unary(&self, f: impl Fn(&Array) -> Array, op: Op) -> Var<'t> {
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (f(&n.value), n.requires_grad)
        };
        self.tape.push(value, op, requires)
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(&Array, &Array) -> Array,
        op: Op,
    ) -> TensorResult<Var<'t>> {
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if broadcast_shape(a.value.shape(), b.value.shape()).is_none() {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    lhs: a.value.shape().to_vec(),
                    rhs: b.value.shape().to_vec(),
                });
            }
            (f(&a.value, &b.value), a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(value, op, requires))
    }

    pub fn add(&self, other: &Var<'t>) -> TensorResult<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> TensorResult<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t>) -> TensorResult<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: &Var<'t>) -> TensorResult<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn matmul(&self, other: &Var<'t>) -> TensorResult<Var<'t>> {
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            (
                as2(a).dot(&as2(b)).into_dyn(),
                nodes[self.id].requires_grad || nodes[other.id].requires_grad,
            )
        };
        Ok(self
            .tape
            .push(value, Op::MatMul(self.id, other.id), requires))
    }

    /// Matrix transpose (2-d only).
    pub fn t(&self) -> TensorResult<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected a matrix, got shape {shape:?}"),
            });
        }
        Ok(self.unary(|a| a.t().to_owned(), Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> TensorResult<Var<'t>> {
        let cur = self.shape();
        if cur.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: cur,
                rhs: shape.to_vec(),
            });
        }
        let target = IxDyn(shape);
        Ok(self.unary(
            |a| {
                a.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(target.clone())
                    .expect("length checked")
            },
            Op::Reshape(self.id),
        ))
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> TensorResult<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "slice",
                axis,
                shape,
            });
        }
        if start > end || end > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} outside axis of length {}", shape[axis]),
            });
        }
        Ok(self.unary(
            |a| a.slice_axis(Axis(axis), Slice::from(start..end)).to_owned(),
            Op::Slice {
                parent: self.id,
                axis,
                start,
                end,
            },
        ))
    }

    /// Select rows (axis 0) by index; indices may repeat.
    pub fn gather_rows(&self, indices: &[usize]) -> TensorResult<Var<'t>> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(TensorError::InvalidAxis {
                op: "gather",
                axis: 0,
                shape,
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("row {bad} out of range for {} rows", shape[0]),
            });
        }
        Ok(self.unary(
            |a| a.select(Axis(0), indices),
            Op::Gather {
                parent: self.id,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Reorder rows by a permutation; `perm[i]` is the source row of output row `i`.
    pub fn shuffle_rows(&self, perm: &[usize]) -> TensorResult<Var<'t>> {
        let n = self.shape().first().copied().unwrap_or(0);
        let mut seen = vec![false; n];
        let valid = perm.len() == n
            && perm
                .iter()
                .all(|&p| p < n && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::Invalid {
                op: "shuffle_rows",
                msg: format!("not a permutation of {n} rows"),
            });
        }
        self.gather_rows(perm)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(|a| a.mapv(f64::exp), Op::Exp(self.id))
    }

    pub fn log(&self) -> Var<'t> {
        self.unary(|a| a.mapv(f64::ln), Op::Log(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(|a| a.mapv(sigmoid), Op::Sigmoid(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(|a| a.mapv(gelu), Op::Gelu(self.id))
    }

    pub fn softmax(&self, axis: usize) -> TensorResult<Var<'t>> {
        self.check_axis("softmax", axis)?;
        Ok(self.unary(
            |a| softmax_array(a, axis),
            Op::Softmax {
                parent: self.id,
                axis,
            },
        ))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> TensorResult<()> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { op, axis, shape });
        }
        Ok(())
    }

    /// Sum along `axis`, keeping it as a singleton dimension.
    pub fn sum(&self, axis: usize) -> TensorResult<Var<'t>> {
        self.check_axis("sum", axis)?;
        Ok(self.unary(
            |a| a.sum_axis(Axis(axis)).insert_axis(Axis(axis)),
            Op::Sum {
                parent: self.id,
                axis: Some(axis),
            },
        ))
    }

    /// Mean along `axis`, keeping it as a singleton dimension.
    pub fn mean(&self, axis: usize) -> TensorResult<Var<'t>> {
        self.check_axis("mean", axis)?;
        Ok(self.unary(
            |a| a.mean_axis(Axis(axis)).expect("non-empty").insert_axis(Axis(axis)),
            Op::Mean {
                parent: self.id,
                axis: Some(axis),
            },
        ))
    }

    pub fn sum_all(&self) -> Var<'t> {
        self.unary(
            |a| Array::from_elem(IxDyn(&[]), a.sum()),
            Op::Sum {
                parent: self.id,
                axis: None,
            },
        )
    }

    pub fn mean_all(&self) -> Var<'t> {
        self.unary(
            |a| Array::from_elem(IxDyn(&[]), a.sum() / a.len() as f64),
            Op::Mean {
                parent: self.id,
                axis: None,
            },
        )
    }

    /// Euclidean norm of each row of a matrix, `sqrt(sum x^2 + eps)`, as an N×1 column.
    pub fn row_norm(&self, eps: f64) -> TensorResult<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "row_norm",
                msg: format!("expected a matrix, got shape {shape:?}"),
            });
        }
        Ok(self.unary(
            |a| {
                a.map_axis(Axis(1), |r| (r.dot(&r) + eps).sqrt())
                    .insert_axis(Axis(1))
            },
            Op::RowNorm { parent: self.id },
        ))
    }

    /// Sum of squared differences, as a scalar.
    pub fn squared_error(&self, other: &Var<'t>) -> TensorResult<Var<'t>> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(TensorError::ShapeMismatch {
                op: "squared_error",
                lhs: a,
                rhs: b,
            });
        }
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let d = &nodes[self.id].value - &nodes[other.id].value;
            (
                Array::from_elem(IxDyn(&[]), d.iter().map(|x| x * x).sum()),
                nodes[self.id].requires_grad || nodes[other.id].requires_grad,
            )
        };
        Ok(self
            .tape
            .push(value, Op::SquaredError(self.id, other.id), requires))
    }

    /// Inverted dropout. In eval mode (`train == false`) this is the identity.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, train: bool, rng: &mut R) -> Var<'t> {
        if !train || p <= 0.0 {
            return *self;
        }
        let keep = 1.0 - p;
        let shape = self.shape();
        let mask = Array::from_shape_fn(IxDyn(&shape), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = mask.clone();
        self.unary(
            move |a| a * &m,
            Op::Dropout {
                parent: self.id,
                mask,
            },
        )
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            |a| a.mapv(|x| x.clamp(lo, hi)),
            Op::Clamp {
                parent: self.id,
                lo,
                hi,
            },
        )
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&self, scale: f64, shift: f64) -> Var<'t> {
        self.unary(
            |a| a.mapv(|x| scale * x + shift),
            Op::Affine {
                parent: self.id,
                scale,
            },
        )
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.affine(s, 0.0)
    }

    pub fn neg(&self) -> Var<'t> {
        self.affine(-1.0, 0.0)
    }

    /// `1 - x`
    pub fn one_minus(&self) -> Var<'t> {
        self.affine(-1.0, 1.0)
    }
}
