//! Define-by-run reverse-mode tape.
//!
//! Every operation on a [`Var`] appends a node holding its forward value and
//! the handles of its inputs. [`Tape::backward`] walks the nodes once in
//! reverse recording order, which is a valid reverse topological order
//! because a node can only reference nodes recorded before it.

use std::cell::{Ref, RefCell};

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_at_into, matmul_bt_into, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { src: usize, axis: usize, start: usize },
    GatherRows { src: usize, idx: Vec<usize> },
    GatherElems { src: usize, idx: Vec<usize> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Sum { src: usize, axis: Option<usize> },
    Mean(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Clamp { src: usize, lo: f64, hi: f64 },
    Softmax { src: usize, axis: usize },
    LayerNorm { src: usize, axis: usize, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
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

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
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

    /// Leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, None, false)
    }

    /// Leaf that receives gradient but is not tied to a stored parameter.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, None, true)
    }

    /// Binds a stored parameter as a differentiable leaf.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push(store.value(id).clone(), Op::Leaf, Some(id), true)
    }

    /// Branch taken at every non-smooth element recorded so far: the sign of
    /// each `relu` input and the region of each `clamp` input. Two
    /// evaluations with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<u8> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for node in nodes.iter() {
            match node.op {
                Op::Relu(a) => out.extend(nodes[a].value.data().iter().map(|&x| u8::from(x > 0.0))),
                Op::Clamp { src, lo, hi } => out.extend(nodes[src].value.data().iter().map(|&x| {
                    if x < lo {
                        0
                    } else if x > hi {
                        2
                    } else {
                        1
                    }
                })),
                _ => {}
            }
        }
        out
    }

    fn push(&self, value: Tensor, op: Op, param: Option<ParamId>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            param,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(value, op, None, requires_grad)
    }

    /// Reverse pass from a `1 x 1` loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape();
        if shape != [1, 1] {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                backprop(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds the parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        let nodes = self.nodes.borrow();
        for (node, g) in nodes.iter().zip(&grads.grads) {
            if let (Some(pid), Some(g)) = (node.param, g) {
                store.accumulate_grad(pid, g);
            }
        }
        Ok(())
    }
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        let [r, c] = var.shape();
        self.grads
            .get(var.id)
            .and_then(Option::as_ref)
            .map(|g| Tensor::new(r, c, g.clone()).expect("gradient shape"))
    }
}

fn add_grad(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

/// Iterates the 1-D lanes of a `rows x cols` buffer along `axis`
/// as `(start, stride, len)`.
fn lanes(rows: usize, cols: usize, axis: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    let (count, start_step, stride, len) = if axis == 1 {
        (rows, cols, 1, cols)
    } else {
        (cols, 1, cols, rows)
    };
    (0..count).map(move |l| (l * start_step, stride, len))
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    let needs = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if needs(*a) {
                add_grad(grads, *a, m * k, |ga| matmul_bt_into(g, bv.data(), m, n, k, ga));
            }
            if needs(*b) {
                add_grad(grads, *b, k * n, |gb| matmul_at_into(av.data(), g, m, k, n, gb));
            }
        }
        Op::Transpose(a) => {
            if needs(*a) {
                let gt = Tensor::new(out.rows(), out.cols(), g.to_vec())
                    .expect("grad shape")
                    .transpose();
                add_grad(grads, *a, gt.len(), |ga| {
                    ga.iter_mut().zip(gt.data()).for_each(|(x, y)| *x += y)
                });
            }
        }
        Op::Concat { parts, axis } => {
            let cols = out.cols();
            let mut offset = 0;
            for &p in parts {
                let pv = &nodes[p].value;
                let (pr, pc) = (pv.rows(), pv.cols());
                if needs(p) {
                    add_grad(grads, p, pr * pc, |gp| {
                        for r in 0..pr {
                            for c in 0..pc {
                                let (or, oc) = if *axis == 0 { (offset + r, c) } else { (r, offset + c) };
                                gp[r * pc + c] += g[or * cols + oc];
                            }
                        }
                    });
                }
                offset += if *axis == 0 { pr } else { pc };
            }
        }
        Op::Slice { src, axis, start } => {
            if needs(*src) {
                let sv = &nodes[*src].value;
                let scols = sv.cols();
                add_grad(grads, *src, sv.len(), |gs| {
                    for r in 0..out.rows() {
                        for c in 0..out.cols() {
                            let (sr, sc) = if *axis == 0 { (start + r, c) } else { (r, start + c) };
                            gs[sr * scols + sc] += g[r * out.cols() + c];
                        }
                    }
                });
            }
        }
        Op::GatherRows { src, idx } => {
            if needs(*src) {
                let sv = &nodes[*src].value;
                let cols = sv.cols();
                add_grad(grads, *src, sv.len(), |gs| {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            gs[i * cols + c] += g[r * cols + c];
                        }
                    }
                });
            }
        }
        Op::GatherElems { src, idx } => {
            if needs(*src) {
                let len = nodes[*src].value.len();
                add_grad(grads, *src, len, |gs| {
                    for (k, &i) in idx.iter().enumerate() {
                        gs[i] += g[k];
                    }
                });
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if needs(*a) {
                add_grad(grads, *a, g.len(), |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            if needs(*b) {
                add_grad(grads, *b, g.len(), |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y)
                });
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if needs(*a) {
                add_grad(grads, *a, g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
            }
            if needs(*b) {
                add_grad(grads, *b, g.len(), |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
        }
        Op::Scale(a, s) => {
            if needs(*a) {
                add_grad(grads, *a, g.len(), |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
        }
        Op::Shift(a) => {
            if needs(*a) {
                add_grad(grads, *a, g.len(), |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
        }
        Op::Sum { src, axis } => {
            if needs(*src) {
                let sv = &nodes[*src].value;
                let (rows, cols) = (sv.rows(), sv.cols());
                add_grad(grads, *src, sv.len(), |gs| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gs[r * cols + c] += match axis {
                                None => g[0],
                                Some(0) => g[c],
                                Some(_) => g[r],
                            };
                        }
                    }
                });
            }
        }
        Op::Mean(src) => {
            if needs(*src) {
                let len = nodes[*src].value.len();
                let share = g[0] / len as f64;
                add_grad(grads, *src, len, |gs| gs.iter_mut().for_each(|x| *x += share));
            }
        }
        Op::Relu(a) => {
            if needs(*a) {
                let av = nodes[*a].value.data();
                add_grad(grads, *a, g.len(), |ga| {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
        }
        Op::Sigmoid(a) => {
            if needs(*a) {
                let y = out.data();
                add_grad(grads, *a, g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
        }
        Op::Exp(a) => {
            if needs(*a) {
                let y = out.data();
                add_grad(grads, *a, g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i];
                    }
                });
            }
        }
        Op::Log(a) => {
            if needs(*a) {
                let x = nodes[*a].value.data();
                add_grad(grads, *a, g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / x[i];
                    }
                });
            }
        }
        Op::Softplus(a) => {
            if needs(*a) {
                let x = nodes[*a].value.data();
                add_grad(grads, *a, g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * sigmoid(x[i]);
                    }
                });
            }
        }
        Op::Clamp { src, lo, hi } => {
            if needs(*src) {
                let x = nodes[*src].value.data();
                add_grad(grads, *src, g.len(), |gs| {
                    for i in 0..g.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            gs[i] += g[i];
                        }
                    }
                });
            }
        }
        Op::Softmax { src, axis } => {
            if needs(*src) {
                let y = out.data();
                add_grad(grads, *src, g.len(), |gs| {
                    for (start, stride, len) in lanes(out.rows(), out.cols(), *axis) {
                        let dot: f64 = (0..len).map(|k| g[start + k * stride] * y[start + k * stride]).sum();
                        for k in 0..len {
                            let i = start + k * stride;
                            gs[i] += y[i] * (g[i] - dot);
                        }
                    }
                });
            }
        }
        Op::LayerNorm { src, axis, eps } => {
            if needs(*src) {
                let x = nodes[*src].value.data();
                let y = out.data();
                add_grad(grads, *src, g.len(), |gs| {
                    for (start, stride, len) in lanes(out.rows(), out.cols(), *axis) {
                        let n = len as f64;
                        let mean = (0..len).map(|k| x[start + k * stride]).sum::<f64>() / n;
                        let var = (0..len)
                            .map(|k| (x[start + k * stride] - mean).powi(2))
                            .sum::<f64>()
                            / n;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let g_mean = (0..len).map(|k| g[start + k * stride]).sum::<f64>() / n;
                        let gy_mean = (0..len)
                            .map(|k| g[start + k * stride] * y[start + k * stride])
                            .sum::<f64>()
                            / n;
                        for k in 0..len {
                            let i = start + k * stride;
                            gs[i] += inv_std * (g[i] - g_mean - y[i] * gy_mean);
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_axis(op: &'static str, axis: usize, shape: [usize; 2]) -> Result<()> {
    if axis > 1 {
        return Err(Error::shape(op, shape, [axis, 0]));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> [usize; 2] {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    /// Borrow of the forward value.
    pub fn value_ref(&self) -> Ref<'_, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value(&self) -> Tensor {
        self.value_ref().clone()
    }

    /// Forward value of a `1 x 1` result.
    pub fn item(&self) -> f64 {
        self.value_ref().item()
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = {
            let v = self.value_ref();
            let data = v.data().iter().map(|&x| f(x)).collect();
            Tensor::new(v.rows(), v.cols(), data).expect("unary shape")
        };
        self.tape.record(value, op, &[self.id])
    }

    fn binary(self, other: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value_ref(), other.value_ref());
            if a.shape() != b.shape() {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.rows(), a.cols(), data).expect("binary shape")
        };
        Ok(self.tape.record(value, op, &[self.id, other.id]))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.value_ref().matmul(&other.value_ref())?;
        Ok(self.tape.record(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn transpose(self) -> Var<'t> {
        let value = self.value_ref().transpose();
        self.tape.record(value, Op::Transpose(self.id), &[self.id])
    }

    /// Joins along `axis` (0 stacks rows, 1 stacks columns).
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", [0, 0], [0, 0]))?;
        let tape = first.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let shapes: Vec<[usize; 2]> = parts.iter().map(|p| nodes[p.id].value.shape()).collect();
            check_axis("concat", axis, shapes[0])?;
            let keep = 1 - axis;
            for s in &shapes[1..] {
                if s[keep] != shapes[0][keep] {
                    return Err(Error::shape("concat", shapes[0], *s));
                }
            }
            let total: usize = shapes.iter().map(|s| s[axis]).sum();
            if axis == 0 {
                let cols = shapes[0][1];
                let mut data = Vec::with_capacity(total * cols);
                for p in parts {
                    data.extend_from_slice(nodes[p.id].value.data());
                }
                Tensor::new(total, cols, data)?
            } else {
                let rows = shapes[0][0];
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(nodes[p.id].value.row(r));
                    }
                }
                Tensor::new(rows, total, data)?
            }
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.record(value, Op::Concat { parts: ids.clone(), axis }, &ids))
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let v = self.value_ref();
            check_axis("slice", axis, v.shape())?;
            if start + len > v.shape()[axis] {
                return Err(Error::shape("slice", v.shape(), [start, start + len]));
            }
            if axis == 0 {
                Tensor::new(len, v.cols(), v.data()[start * v.cols()..(start + len) * v.cols()].to_vec())?
            } else {
                Tensor::from_fn(v.rows(), len, |r, c| v.get(r, start + c))
            }
        };
        Ok(self.tape.record(value, Op::Slice { src: self.id, axis, start }, &[self.id]))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let value = {
            let v = self.value_ref();
            if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
                return Err(Error::shape("gather_rows", v.shape(), [bad, 0]));
            }
            let mut data = Vec::with_capacity(idx.len() * v.cols());
            for &i in idx {
                data.extend_from_slice(v.row(i));
            }
            Tensor::new(idx.len(), v.cols(), data)?
        };
        Ok(self.tape.record(value, Op::GatherRows { src: self.id, idx: idx.to_vec() }, &[self.id]))
    }

    /// Selects elements by `(row, col)` into an `n x 1` column.
    pub fn gather(self, coords: &[(usize, usize)]) -> Result<Var<'t>> {
        let (value, flat) = {
            let v = self.value_ref();
            let mut flat = Vec::with_capacity(coords.len());
            for &(r, c) in coords {
                if r >= v.rows() || c >= v.cols() {
                    return Err(Error::shape("gather", v.shape(), [r, c]));
                }
                flat.push(r * v.cols() + c);
            }
            (Tensor::column(flat.iter().map(|&i| v.data()[i]).collect()), flat)
        };
        Ok(self.tape.record(value, Op::GatherElems { src: self.id, idx: flat }, &[self.id]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |x| s * x)
    }

    /// Adds a scalar to every element.
    pub fn shift(self, s: f64) -> Var<'t> {
        self.unary(Op::Shift(self.id), |x| x + s)
    }

    /// Sum over all elements (`None`, result `1 x 1`), over rows (`Some(0)`,
    /// result `1 x cols`) or over columns (`Some(1)`, result `rows x 1`).
    pub fn sum(self, axis: Option<usize>) -> Result<Var<'t>> {
        let value = {
            let v = self.value_ref();
            match axis {
                None => Tensor::scalar(v.data().iter().sum()),
                Some(0) => Tensor::from_fn(1, v.cols(), |_, c| (0..v.rows()).map(|r| v.get(r, c)).sum()),
                Some(1) => Tensor::from_fn(v.rows(), 1, |r, _| v.row(r).iter().sum()),
                Some(a) => return Err(Error::shape("sum", v.shape(), [a, 0])),
            }
        };
        Ok(self.tape.record(value, Op::Sum { src: self.id, axis }, &[self.id]))
    }

    /// Mean over all elements; `1 x 1`. Empty input yields 0.
    pub fn mean(self) -> Var<'t> {
        let value = {
            let v = self.value_ref();
            let n = v.len().max(1) as f64;
            Tensor::scalar(v.data().iter().sum::<f64>() / n)
        };
        self.tape.record(value, Op::Mean(self.id), &[self.id])
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp { src: self.id, lo, hi }, move |x| x.clamp(lo, hi))
    }

    /// Softmax along `axis`, shifted by the lane maximum.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let v = self.value_ref();
            check_axis("softmax", axis, v.shape())?;
            let mut out = v.clone();
            let x = v.data();
            let y = out.data_mut();
            for (start, stride, len) in lanes(v.rows(), v.cols(), axis) {
                let max = (0..len).map(|k| x[start + k * stride]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (x[start + k * stride] - max).exp();
                    y[start + k * stride] = e;
                    total += e;
                }
                for k in 0..len {
                    y[start + k * stride] /= total;
                }
            }
            out
        };
        Ok(self.tape.record(value, Op::Softmax { src: self.id, axis }, &[self.id]))
    }

    /// Normalizes each lane along `axis` to zero mean and unit variance.
    pub fn layer_norm(self, axis: usize, eps: f64) -> Result<Var<'t>> {
        let value = {
            let v = self.value_ref();
            check_axis("layer_norm", axis, v.shape())?;
            let mut out = v.clone();
            let x = v.data();
            let y = out.data_mut();
            for (start, stride, len) in lanes(v.rows(), v.cols(), axis) {
                let n = len as f64;
                let mean = (0..len).map(|k| x[start + k * stride]).sum::<f64>() / n;
                let var = (0..len).map(|k| (x[start + k * stride] - mean).powi(2)).sum::<f64>() / n;
                let inv_std = 1.0 / (var + eps).sqrt();
                for k in 0..len {
                    let i = start + k * stride;
                    y[i] = (x[i] - mean) * inv_std;
                }
            }
            out
        };
        Ok(self.tape.record(value, Op::LayerNorm { src: self.id, axis, eps }, &[self.id]))
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'t> {
        self.scale(-1.0).shift(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(1, 3));
        let y = x.softmax(1).unwrap().value();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        assert_eq!(tape.constant(Tensor::scalar(0.0)).sigmoid().item(), 0.5);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let tape = Tape::new();
        let p = tape.variable(Tensor::from_fn(3, 4, |r, c| (r + c) as f64));
        let loss = p.sum(None).unwrap();
        let g = tape.backward(loss).unwrap().get(p).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sigmoid_times_constant_gradient() {
        let tape = Tape::new();
        let w = tape.variable(Tensor::scalar(0.0));
        let x = tape.constant(Tensor::scalar(2.0));
        let loss = w.sigmoid().mul(x).unwrap();
        let g = tape.backward(loss).unwrap().get(w).unwrap();
        assert!((g.item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::zeros(2, 1));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(3, 2));
        let err = a.add(b).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "add", .. }));
        assert!(a.matmul(a).is_err());
        assert!(a.softmax(2).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(3.0));
        let v = tape.variable(Tensor::scalar(2.0));
        let loss = c.mul(v).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(v).unwrap().item(), 3.0);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(1, 3, vec![1000.0, 1000.0, -1000.0]).unwrap());
        let y = x.softmax(1).unwrap().value();
        assert!((y.get(0, 0) - 0.5).abs() < 1e-12);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }
}
