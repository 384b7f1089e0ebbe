//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! Every backward rule is written with `Var` operations, so gradients can
//! themselves be differentiated (`create_graph = true`). That is what the
//! gradient-penalty term of a critic loss needs. Graphs are per-thread
//! (`Rc`); model weights stay in `Tensor`s and are bound fresh per call.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::tensor::{self, ConvGeom, Tensor};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastTo(Var),
    SumTo(Var),
    Narrow { x: Var, axis: usize, start: usize },
    PadAxis { x: Var, axis: usize, start: usize },
    Concat(Vec<Var>, usize),
    IndexSelect(Var, Rc<Vec<usize>>),
    IndexAdd(Var, Rc<Vec<usize>>),
    Unfold(Var, ConvGeom),
    Fold(Var, ConvGeom),
}

struct Node {
    id: usize,
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// A node in a differentiable computation.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?}, grad={})", self.0.id, self.0.value, self.0.requires_grad)
    }
}

fn fresh(value: Tensor, requires_grad: bool, op: Op) -> Var {
    Var(Rc::new(Node {
        id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
        value,
        requires_grad,
        op: if requires_grad { op } else { Op::Leaf },
    }))
}

fn any_grad(vs: &[&Var]) -> bool {
    vs.iter().any(|v| v.0.requires_grad)
}

impl Var {
    /// A value that gradients do not flow into.
    pub fn constant(t: Tensor) -> Var {
        fresh(t, false, Op::Leaf)
    }

    /// A leaf that gradients are computed for.
    pub fn leaf(t: Tensor) -> Var {
        fresh(t, true, Op::Leaf)
    }

    pub fn scalar(v: f64) -> Var {
        Var::constant(Tensor::scalar(v))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    fn inputs(&self) -> Vec<&Var> {
        match &self.0.op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Neg(a)
            | Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::LeakyRelu(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::BroadcastTo(a)
            | Op::SumTo(a)
            | Op::IndexSelect(a, _)
            | Op::IndexAdd(a, _)
            | Op::Unfold(a, _)
            | Op::Fold(a, _) => vec![a],
            Op::Narrow { x, .. } | Op::PadAxis { x, .. } => vec![x],
            Op::Concat(xs, _) => xs.iter().collect(),
        }
    }

    // ----- elementwise -----

    pub fn add(&self, o: &Var) -> Var {
        let v = self.value().add(o.value());
        fresh(v, any_grad(&[self, o]), Op::Add(self.clone(), o.clone()))
    }

    pub fn sub(&self, o: &Var) -> Var {
        let v = self.value().sub(o.value());
        fresh(v, any_grad(&[self, o]), Op::Sub(self.clone(), o.clone()))
    }

    pub fn mul(&self, o: &Var) -> Var {
        let v = self.value().mul(o.value());
        fresh(v, any_grad(&[self, o]), Op::Mul(self.clone(), o.clone()))
    }

    pub fn div(&self, o: &Var) -> Var {
        let v = tensor::broadcast_binary(self.value(), o.value(), |a, b| a / b);
        fresh(v, any_grad(&[self, o]), Op::Div(self.clone(), o.clone()))
    }

    pub fn neg(&self) -> Var {
        fresh(self.value().scale(-1.0), self.requires_grad(), Op::Neg(self.clone()))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        fresh(self.value().map(|x| x + c), self.requires_grad(), Op::AddScalar(self.clone()))
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        fresh(self.value().scale(c), self.requires_grad(), Op::MulScalar(self.clone(), c))
    }

    /// `c - self`
    pub fn rsub_scalar(&self, c: f64) -> Var {
        self.neg().add_scalar(c)
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn exp(&self) -> Var {
        fresh(self.value().map(f64::exp), self.requires_grad(), Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Var {
        fresh(self.value().map(f64::ln), self.requires_grad(), Op::Log(self.clone()))
    }

    pub fn sqrt(&self) -> Var {
        fresh(self.value().map(f64::sqrt), self.requires_grad(), Op::Sqrt(self.clone()))
    }

    pub fn sigmoid(&self) -> Var {
        fresh(self.value().map(sigmoid), self.requires_grad(), Op::Sigmoid(self.clone()))
    }

    pub fn tanh(&self) -> Var {
        fresh(self.value().map(f64::tanh), self.requires_grad(), Op::Tanh(self.clone()))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let v = self.value().map(|x| if x > 0.0 { x } else { slope * x });
        fresh(v, self.requires_grad(), Op::LeakyRelu(self.clone(), slope))
    }

    pub fn relu(&self) -> Var {
        self.leaky_relu(0.0)
    }

    /// `x * sigmoid(x)`; smooth, so finite-difference checks are reliable.
    pub fn silu(&self) -> Var {
        self.mul(&self.sigmoid())
    }

    // ----- linear algebra & shape -----

    pub fn matmul(&self, o: &Var) -> Var {
        self.matmul_t(o, false, false)
    }

    pub fn matmul_t(&self, o: &Var, ta: bool, tb: bool) -> Var {
        let v = tensor::matmul(self.value(), o.value(), ta, tb);
        fresh(
            v,
            any_grad(&[self, o]),
            Op::MatMul { a: self.clone(), b: o.clone(), ta, tb },
        )
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var {
        let shape = shape.into();
        if shape == self.shape() {
            return self.clone();
        }
        fresh(self.value().reshape(shape), self.requires_grad(), Op::Reshape(self.clone()))
    }

    pub fn flatten(&self) -> Var {
        let n = self.value().numel();
        self.reshape(vec![n])
    }

    pub fn permute(&self, axes: &[usize]) -> Var {
        let v = tensor::permute(self.value(), axes);
        fresh(v, self.requires_grad(), Op::Permute(self.clone(), axes.to_vec()))
    }

    pub fn transpose(&self) -> Var {
        assert_eq!(self.shape().len(), 2);
        self.permute(&[1, 0])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if shape == self.shape() {
            return self.clone();
        }
        let v = tensor::broadcast_to(self.value(), shape);
        fresh(v, self.requires_grad(), Op::BroadcastTo(self.clone()))
    }

    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if shape == self.shape() {
            return self.clone();
        }
        let v = tensor::sum_to(self.value(), shape);
        fresh(v, self.requires_grad(), Op::SumTo(self.clone()))
    }

    pub fn sum(&self) -> Var {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis_keep(&self, axis: usize) -> Var {
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        self.sum_to(&shape)
    }

    /// Sum over `axis`, dropping it.
    pub fn sum_axis(&self, axis: usize) -> Var {
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        self.sum_axis_keep(axis).reshape(shape)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        if start == 0 && len == self.shape()[axis] {
            return self.clone();
        }
        let v = tensor::narrow(self.value(), axis, start, len);
        fresh(v, self.requires_grad(), Op::Narrow { x: self.clone(), axis, start })
    }

    fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Var {
        let v = tensor::pad_axis(self.value(), axis, start, full);
        fresh(v, self.requires_grad(), Op::PadAxis { x: self.clone(), axis, start })
    }

    pub fn concat(xs: &[Var], axis: usize) -> Var {
        let vals: Vec<Tensor> = xs.iter().map(|x| x.value().clone()).collect();
        let v = tensor::concat(&vals, axis);
        let rg = xs.iter().any(|x| x.requires_grad());
        fresh(v, rg, Op::Concat(xs.to_vec(), axis))
    }

    pub fn index_select(&self, rows: &[usize]) -> Var {
        let v = tensor::index_select(self.value(), rows);
        fresh(v, self.requires_grad(), Op::IndexSelect(self.clone(), Rc::new(rows.to_vec())))
    }

    fn index_add(&self, rows: Rc<Vec<usize>>, n_rows: usize) -> Var {
        let v = tensor::index_add(self.value(), &rows, n_rows);
        fresh(v, self.requires_grad(), Op::IndexAdd(self.clone(), rows))
    }

    pub fn unfold(&self, g: ConvGeom) -> Var {
        let v = tensor::unfold(self.value(), &g);
        fresh(v, self.requires_grad(), Op::Unfold(self.clone(), g))
    }

    fn fold(&self, g: ConvGeom) -> Var {
        let v = tensor::fold(self.value(), &g);
        fresh(v, self.requires_grad(), Op::Fold(self.clone(), g))
    }

    // ----- composites -----

    /// Log-softmax along the last axis; the shift is a detached row max.
    pub fn log_softmax(&self) -> Var {
        let shape = self.shape().to_vec();
        let last = *shape.last().expect("log_softmax on scalar");
        let rows = self.value().numel() / last;
        let mut maxes = Vec::with_capacity(rows);
        for r in self.value().data().chunks(last) {
            maxes.push(r.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
        let mut kshape = shape.clone();
        *kshape.last_mut().unwrap() = 1;
        let m = Var::constant(Tensor::new(kshape.clone(), maxes));
        let shifted = self.sub(&m);
        let lse = shifted.exp().sum_to(&kshape).ln();
        shifted.sub(&lse)
    }

    pub fn softmax(&self) -> Var {
        self.log_softmax().exp()
    }

    pub fn sq_norm(&self) -> Var {
        self.square().sum()
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

fn backward_rule(node: &Var, g: &Var, create_graph: bool) -> Vec<Option<Var>> {
    let d = |v: &Var| if create_graph { v.clone() } else { v.detach() };
    let out = d(node);
    match &node.0.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![Some(g.sum_to(a.shape())), Some(g.sum_to(b.shape()))],
        Op::Sub(a, b) => vec![Some(g.sum_to(a.shape())), Some(g.neg().sum_to(b.shape()))],
        Op::Mul(a, b) => {
            let (a_, b_) = (d(a), d(b));
            vec![
                Some(g.mul(&b_).sum_to(a.shape())),
                Some(g.mul(&a_).sum_to(b.shape())),
            ]
        }
        Op::Div(a, b) => {
            let b_ = d(b);
            let ga = g.div(&b_);
            let gb = ga.mul(&out).neg();
            vec![Some(ga.sum_to(a.shape())), Some(gb.sum_to(b.shape()))]
        }
        Op::Neg(_) => vec![Some(g.neg())],
        Op::AddScalar(_) => vec![Some(g.clone())],
        Op::MulScalar(_, c) => vec![Some(g.mul_scalar(*c))],
        Op::Exp(_) => vec![Some(g.mul(&out))],
        Op::Log(a) => vec![Some(g.div(&d(a)))],
        Op::Sqrt(_) => vec![Some(g.mul_scalar(0.5).div(&out))],
        Op::Sigmoid(_) => vec![Some(g.mul(&out).mul(&out.rsub_scalar(1.0)))],
        Op::Tanh(_) => vec![Some(g.mul(&out.square().rsub_scalar(1.0)))],
        Op::LeakyRelu(a, slope) => {
            let s = *slope;
            let mask = a.value().map(|x| if x > 0.0 { 1.0 } else { s });
            vec![Some(g.mul(&Var::constant(mask)))]
        }
        Op::MatMul { a, b, ta, tb } => {
            let (a_, b_) = (d(a), d(b));
            let ga = if !*ta {
                g.matmul_t(&b_, false, !*tb)
            } else {
                b_.matmul_t(g, *tb, true)
            };
            let gb = if !*tb {
                a_.matmul_t(g, !*ta, false)
            } else {
                g.matmul_t(&a_, true, *ta)
            };
            vec![Some(ga), Some(gb)]
        }
        Op::Reshape(a) => vec![Some(g.reshape(a.shape().to_vec()))],
        Op::Permute(_, axes) => {
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            vec![Some(g.permute(&inv))]
        }
        Op::BroadcastTo(a) => vec![Some(g.sum_to(a.shape()))],
        Op::SumTo(a) => vec![Some(g.broadcast_to(a.shape()))],
        Op::Narrow { x, axis, start } => {
            vec![Some(g.pad_axis(*axis, *start, x.shape()[*axis]))]
        }
        Op::PadAxis { x, axis, start } => {
            vec![Some(g.narrow(*axis, *start, x.shape()[*axis]))]
        }
        Op::Concat(xs, axis) => {
            let mut off = 0;
            xs.iter()
                .map(|x| {
                    let len = x.shape()[*axis];
                    let r = g.narrow(*axis, off, len);
                    off += len;
                    Some(r)
                })
                .collect()
        }
        Op::IndexSelect(t, rows) => vec![Some(g.index_add(rows.clone(), t.shape()[0]))],
        Op::IndexAdd(_, rows) => vec![Some(g.index_select(rows))],
        Op::Unfold(_, geom) => vec![Some(g.fold(*geom))],
        Op::Fold(_, geom) => vec![Some(g.unfold(*geom))],
    }
}

/// Gradients of a scalar `output` with respect to each of `wrt`.
///
/// Leaves that `output` does not depend on get zeros. With
/// `create_graph`, the returned gradients are themselves differentiable.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(output.value().numel(), 1, "grad of non-scalar {:?}", output.shape());
    // iterative post-order DFS over nodes that require grad
    let mut order: Vec<Var> = Vec::new();
    let mut seen: HashMap<usize, ()> = HashMap::new();
    let mut stack: Vec<(Var, bool)> = vec![(output.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !v.requires_grad() || seen.contains_key(&v.id()) {
            continue;
        }
        seen.insert(v.id(), ());
        stack.push((v.clone(), true));
        for inp in v.inputs().into_iter().rev() {
            if inp.requires_grad() && !seen.contains_key(&inp.id()) {
                stack.push((inp.clone(), false));
            }
        }
    }
    let targets: HashMap<usize, ()> = wrt.iter().map(|v| (v.id(), ())).collect();
    let mut grads: HashMap<usize, Var> = HashMap::new();
    if output.requires_grad() {
        grads.insert(output.id(), Var::constant(Tensor::ones(output.shape().to_vec())));
    }
    for node in order.iter().rev() {
        let Some(g) = (if targets.contains_key(&node.id()) {
            grads.get(&node.id()).cloned()
        } else {
            grads.remove(&node.id())
        }) else {
            continue;
        };
        let ins = node.inputs();
        if ins.is_empty() {
            continue;
        }
        let contribs = backward_rule(node, &g, create_graph);
        for (inp, c) in ins.into_iter().zip(contribs) {
            let Some(c) = c else { continue };
            if !inp.requires_grad() {
                continue;
            }
            let c = if create_graph { c } else { c.detach() };
            let e = grads.remove(&inp.id());
            grads.insert(inp.id(), match e {
                Some(prev) => prev.add(&c),
                None => c,
            });
        }
    }
    wrt.iter()
        .map(|v| {
            grads
                .get(&v.id())
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape().to_vec())))
        })
        .collect()
}
