//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every backward rule is itself written in terms of [`Var`] operations, so
//! a gradient computed with `create_graph = true` is an ordinary node of the
//! graph and can be differentiated again. The gradient penalty of the critic
//! relies on this: it differentiates the norm of an input gradient with
//! respect to the critic parameters.
//!
//! Shape manipulation (broadcasting, reductions, transposes, im2col) is
//! expressed through one pair of mutually adjoint linear operators,
//! [`Var::gather`] and [`Var::scatter_add`], which keeps the set of
//! primitive backward rules small.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::Tensor;

/// Index value meaning "no source element": gather yields 0, scatter drops.
pub const NONE: usize = usize::MAX;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static INDEX_CACHE: RefCell<HashMap<IndexKey, Rc<Vec<usize>>>> = RefCell::new(HashMap::new());
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub(crate) enum IndexKey {
    BroadcastRows(usize, usize),
    BroadcastCols(usize, usize),
    SumCols(usize, usize),
    Custom(&'static str, Vec<usize>),
}

/// Returns a cached index vector, building it on first use.
pub(crate) fn cached_index(key: IndexKey, build: impl FnOnce() -> Vec<usize>) -> Rc<Vec<usize>> {
    if let Some(hit) = INDEX_CACHE.with(|c| c.borrow().get(&key).cloned()) {
        return hit;
    }
    let idx = Rc::new(build());
    INDEX_CACHE.with(|c| {
        let mut cache = c.borrow_mut();
        if cache.len() > 512 {
            cache.clear();
        }
        cache.insert(key, Rc::clone(&idx));
    });
    idx
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gather(Var, Rc<Vec<usize>>),
    ScatterAdd(Var, Rc<Vec<usize>>),
    MulConst(Var, Tensor),
    Tanh(Var),
    Exp(Var),
    Sqrt(Var),
    /// Forward value supplied externally, gradient routed to the surrogate.
    StraightThrough(Var),
}

struct Node {
    id: u64,
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A node of the computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.0.id, self.0.value)
    }
}

impl Var {
    fn from_op(value: Tensor, op: Op, parents: &[&Var]) -> Var {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let op = if requires_grad { op } else { Op::Leaf };
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op,
            requires_grad,
        }))
    }

    /// A trainable leaf.
    pub fn param(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op: Op::Leaf,
            requires_grad: true,
        }))
    }

    /// A leaf that never receives gradients.
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op: Op::Leaf,
            requires_grad: false,
        }))
    }

    pub fn scalar(value: f64) -> Var {
        Var::constant(Tensor::scalar(value))
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

    pub fn add(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a + b);
        Var::from_op(v, Op::Add(self.clone(), other.clone()), &[self, other])
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a - b);
        Var::from_op(v, Op::Sub(self.clone(), other.clone()), &[self, other])
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a * b);
        Var::from_op(v, Op::Mul(self.clone(), other.clone()), &[self, other])
    }

    pub fn div(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a / b);
        Var::from_op(v, Op::Div(self.clone(), other.clone()), &[self, other])
    }

    pub fn scale(&self, c: f64) -> Var {
        let v = self.value().map(|a| a * c);
        Var::from_op(v, Op::Scale(self.clone(), c), &[self])
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let v = self.value().map(|a| a + c);
        Var::from_op(v, Op::AddScalar(self.clone()), &[self])
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    /// `[r, n] x [n, c] -> [r, c]`.
    pub fn matmul(&self, other: &Var) -> Var {
        let v = self.value().matmul(other.value());
        Var::from_op(v, Op::MatMul(self.clone(), other.clone()), &[self, other])
    }

    pub fn transpose(&self) -> Var {
        let v = self.value().transpose();
        Var::from_op(v, Op::Transpose(self.clone()), &[self])
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let v = self.value().reshape(shape);
        Var::from_op(v, Op::Reshape(self.clone()), &[self])
    }

    /// `out[i] = self[index[i]]` (or 0 for [`NONE`]); output has `shape`.
    pub fn gather(&self, index: Rc<Vec<usize>>, shape: &[usize]) -> Var {
        assert_eq!(index.len(), shape.iter().product::<usize>());
        let src = self.value().data();
        let data = index
            .iter()
            .map(|&i| if i == NONE { 0.0 } else { src[i] })
            .collect();
        let v = Tensor::new(shape.to_vec(), data);
        Var::from_op(v, Op::Gather(self.clone(), index), &[self])
    }

    /// `out[index[i]] += self[i]` (entries with [`NONE`] are dropped).
    pub fn scatter_add(&self, index: Rc<Vec<usize>>, shape: &[usize]) -> Var {
        assert_eq!(index.len(), self.value().len());
        let mut data = vec![0.0; shape.iter().product()];
        for (&i, &x) in index.iter().zip(self.value().data()) {
            if i != NONE {
                data[i] += x;
            }
        }
        let v = Tensor::new(shape.to_vec(), data);
        Var::from_op(v, Op::ScatterAdd(self.clone(), index), &[self])
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&self, c: &Tensor) -> Var {
        let v = self.value().zip_map(c, |a, b| a * b);
        Var::from_op(v, Op::MulConst(self.clone(), c.clone()), &[self])
    }

    pub fn tanh(&self) -> Var {
        let v = self.value().map(f64::tanh);
        Var::from_op(v, Op::Tanh(self.clone()), &[self])
    }

    pub fn exp(&self) -> Var {
        let v = self.value().map(f64::exp);
        Var::from_op(v, Op::Exp(self.clone()), &[self])
    }

    pub fn sqrt(&self) -> Var {
        let v = self.value().map(f64::sqrt);
        Var::from_op(v, Op::Sqrt(self.clone()), &[self])
    }

    pub fn relu(&self) -> Var {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let mask = self.value().map(|x| if x > 0.0 { 1.0 } else { slope });
        self.mul_const(&mask)
    }

    /// Node whose forward value is `value` but whose gradient flows into
    /// `surrogate` unchanged (straight-through estimator).
    pub fn straight_through(value: Tensor, surrogate: &Var) -> Var {
        assert_eq!(value.shape(), surrogate.shape());
        Var::from_op(value, Op::StraightThrough(surrogate.clone()), &[surrogate])
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&self) -> Var {
        let idx = vec![0; self.value().len()];
        self.scatter_add(Rc::new(idx), &[1])
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// `[r, c] -> [c]`, summing over rows.
    pub fn sum_rows(&self) -> Var {
        let (r, c) = dims2(self.shape());
        let idx = cached_index(IndexKey::BroadcastRows(r, c), || {
            (0..r * c).map(|i| i % c).collect()
        });
        self.scatter_add(idx, &[c])
    }

    /// `[c] -> [r, c]`, repeating the vector on every row.
    pub fn broadcast_rows(&self, r: usize) -> Var {
        let c = self.value().len();
        let idx = cached_index(IndexKey::BroadcastRows(r, c), || {
            (0..r * c).map(|i| i % c).collect()
        });
        self.gather(idx, &[r, c])
    }

    /// `[r, c] -> [r, 1]`, summing each row.
    pub fn sum_cols(&self) -> Var {
        let (r, c) = dims2(self.shape());
        let idx = cached_index(IndexKey::SumCols(r, c), || (0..r * c).map(|i| i / c).collect());
        self.scatter_add(idx, &[r, 1])
    }

    /// `[r, 1] -> [r, c]`, repeating each row value across columns.
    pub fn broadcast_cols(&self, c: usize) -> Var {
        let r = self.value().len();
        let idx = cached_index(IndexKey::BroadcastCols(r, c), || {
            (0..r * c).map(|i| i / c).collect()
        });
        self.gather(idx, &[r, c])
    }

    /// Scalar `[1]` broadcast to an arbitrary shape.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Var {
        assert_eq!(self.value().len(), 1);
        let n = shape.iter().product();
        self.gather(Rc::new(vec![0; n]), shape)
    }

    /// Per-row Euclidean norm of a batch `[b, ...] -> [b, 1]`.
    pub fn row_norms(&self) -> Var {
        let b = self.value().rows();
        let flat = self.reshape(&[b, self.value().row_len()]);
        flat.square().sum_cols().sqrt()
    }

    /// Concatenates `[r, a]` and `[r, b]` into `[r, a + b]`.
    pub fn concat_cols(&self, other: &Var) -> Var {
        let (r, a) = dims2(self.shape());
        let (r2, b) = dims2(other.shape());
        assert_eq!(r, r2);
        let w = a + b;
        let left = cached_index(IndexKey::Custom("concat_l", vec![r, a, b]), || {
            (0..r * a).map(|i| (i / a) * w + i % a).collect()
        });
        let right = cached_index(IndexKey::Custom("concat_r", vec![r, a, b]), || {
            (0..r * b).map(|i| (i / b) * w + a + i % b).collect()
        });
        self.scatter_add(left, &[r, w])
            .add(&other.scatter_add(right, &[r, w]))
    }

    /// Columns `[start, start + len)` of a `[r, c]` tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Var {
        let (r, c) = dims2(self.shape());
        assert!(start + len <= c);
        let idx = cached_index(IndexKey::Custom("slice_cols", vec![r, c, start, len]), || {
            (0..r * len).map(|i| (i / len) * c + start + i % len).collect()
        });
        self.gather(idx, &[r, len])
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected a matrix, got shape {shape:?}");
    (shape[0], shape[1])
}

/// Adjoint of a gather: scatter the output gradient back to the source.
fn scatter_back(g: &Var, index: &Rc<Vec<usize>>, src_shape: &[usize]) -> Var {
    g.scatter_add(Rc::clone(index), src_shape)
}

/// Computes `d output / d wrt[i]` for a scalar `output`.
///
/// With `create_graph` the returned gradients are differentiable nodes;
/// otherwise they are constants. Inputs that do not influence `output`
/// receive zero gradients.
pub fn grad(output: &Var, wrt: &[Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(output.value().len(), 1, "grad() needs a scalar output");
    let seed = Var::constant(Tensor::full(output.shape(), 1.0));
    grad_with_seed(output, seed, wrt, create_graph)
}

/// Vector-Jacobian product with an explicit output cotangent.
pub fn grad_with_seed(output: &Var, seed: Var, wrt: &[Var], create_graph: bool) -> Vec<Var> {
    // Topological order: children always carry larger ids than parents.
    let mut nodes: Vec<Var> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut stack = vec![output.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.0.id) {
            continue;
        }
        for p in parents(&v) {
            stack.push(p.clone());
        }
        nodes.push(v);
    }
    nodes.sort_by(|a, b| b.0.id.cmp(&a.0.id));

    let mut grads: HashMap<u64, Var> = HashMap::new();
    grads.insert(output.0.id, seed);
    for node in &nodes {
        let Some(g) = grads.get(&node.0.id).cloned() else {
            continue;
        };
        for (parent, contrib) in backward(node, &g, create_graph) {
            if !parent.requires_grad() {
                continue;
            }
            let contrib = if create_graph { contrib } else { contrib.detach() };
            match grads.remove(&parent.0.id) {
                Some(acc) => {
                    let sum = acc.add(&contrib);
                    grads.insert(parent.0.id, if create_graph { sum } else { sum.detach() });
                }
                None => {
                    grads.insert(parent.0.id, contrib);
                }
            }
        }
    }

    wrt.iter()
        .map(|w| {
            grads
                .get(&w.0.id)
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(w.shape())))
        })
        .collect()
}

fn parents(v: &Var) -> Vec<&Var> {
    match &v.0.op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
            vec![a, b]
        }
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Transpose(a)
        | Op::Reshape(a)
        | Op::Gather(a, _)
        | Op::ScatterAdd(a, _)
        | Op::MulConst(a, _)
        | Op::Tanh(a)
        | Op::Exp(a)
        | Op::Sqrt(a)
        | Op::StraightThrough(a) => vec![a],
    }
}

fn backward(node: &Var, g: &Var, create_graph: bool) -> Vec<(Var, Var)> {
    let arg = |v: &Var| if create_graph { v.clone() } else { v.detach() };
    let out = || arg(node);
    match &node.0.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.clone())],
        Op::Sub(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.neg())],
        Op::Mul(a, b) => vec![(a.clone(), g.mul(&arg(b))), (b.clone(), g.mul(&arg(a)))],
        Op::Div(a, b) => {
            let bb = arg(b);
            let ga = g.div(&bb);
            // d(a/b)/db = -(a/b)/b
            let gb = g.mul(&out()).div(&bb).neg();
            vec![(a.clone(), ga), (b.clone(), gb)]
        }
        Op::Scale(a, c) => vec![(a.clone(), g.scale(*c))],
        Op::AddScalar(a) => vec![(a.clone(), g.clone())],
        Op::MatMul(a, b) => {
            let mut res = Vec::with_capacity(2);
            if a.requires_grad() {
                res.push((a.clone(), g.matmul(&arg(b).transpose())));
            }
            if b.requires_grad() {
                res.push((b.clone(), arg(a).transpose().matmul(g)));
            }
            res
        }
        Op::Transpose(a) => vec![(a.clone(), g.transpose())],
        Op::Reshape(a) => vec![(a.clone(), g.reshape(a.shape()))],
        Op::Gather(a, idx) => vec![(a.clone(), scatter_back(g, idx, a.shape()))],
        Op::ScatterAdd(a, idx) => vec![(a.clone(), g.gather(Rc::clone(idx), a.shape()))],
        Op::MulConst(a, c) => vec![(a.clone(), g.mul_const(c))],
        Op::Tanh(a) => {
            let y = out();
            let one_minus = y.square().neg().add_scalar(1.0);
            vec![(a.clone(), g.mul(&one_minus))]
        }
        Op::Exp(a) => vec![(a.clone(), g.mul(&out()))],
        Op::Sqrt(a) => {
            let y = out();
            vec![(a.clone(), g.div(&y).scale(0.5))]
        }
        Op::StraightThrough(a) => vec![(a.clone(), g.clone())],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&Var) -> Var, x0: &[f64]) {
        let x = Var::param(Tensor::new(vec![x0.len()], x0.to_vec()));
        let y = f(&x);
        let g = grad(&y, std::slice::from_ref(&x), false)[0].value().clone();
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut p = x0.to_vec();
            p[i] += h;
            let mut m = x0.to_vec();
            m[i] -= h;
            let fp = f(&Var::constant(Tensor::new(vec![p.len()], p))).item();
            let fm = f(&Var::constant(Tensor::new(vec![m.len()], m))).item();
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - g.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "component {i}: fd {fd} vs ad {}",
                g.data()[i]
            );
        }
    }

    #[test]
    fn elementwise_gradients() {
        let x0 = [0.3, -1.2, 2.0, 0.7];
        fd_check(|x| x.tanh().mul(x).sum(), &x0);
        fd_check(|x| x.exp().div(&x.square().add_scalar(1.0)).sum(), &x0);
        fd_check(|x| x.square().add_scalar(0.5).sqrt().sum(), &x0);
        fd_check(|x| x.leaky_relu(0.2).scale(3.0).sum(), &x0);
    }

    #[test]
    fn matmul_and_reductions() {
        let x0 = [0.1, 0.2, -0.3, 0.4, 0.5, -0.6];
        fd_check(
            |x| {
                let a = x.reshape(&[2, 3]);
                let b = Var::constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, -1.0, 0.5, 0.3, 0.0]));
                a.matmul(&b).tanh().sum_rows().square().sum()
            },
            &x0,
        );
        fd_check(
            |x| {
                let a = x.reshape(&[3, 2]);
                a.transpose().matmul(&a).sum_cols().broadcast_cols(2).mean()
            },
            &x0,
        );
        fd_check(
            |x| {
                let a = x.reshape(&[3, 2]);
                a.concat_cols(&a.slice_cols(1, 1)).row_norms().sum()
            },
            &x0,
        );
    }

    #[test]
    fn second_order_through_create_graph() {
        // f(x) = sum x^3, grad = 3x^2, d/dx sum(grad^2) = sum 36 x^3
        let x = Var::param(Tensor::new(vec![2], vec![0.5, -2.0]));
        let y = x.square().mul(&x).sum();
        let g = grad(&y, std::slice::from_ref(&x), true)[0].clone();
        let gg = grad(&g.square().sum(), std::slice::from_ref(&x), false)[0].clone();
        assert!((gg.value().data()[0] - 36.0 * 0.125).abs() < 1e-12);
        assert!((gg.value().data()[1] - 36.0 * -8.0).abs() < 1e-12);
    }

    #[test]
    fn straight_through_keeps_forward_value() {
        let x = Var::param(Tensor::new(vec![2], vec![0.3, -0.2]));
        let soft = x.scale(2.0).tanh();
        let hard = Tensor::new(vec![2], vec![1.0, -1.0]);
        let st = Var::straight_through(hard.clone(), &soft);
        assert_eq!(st.value(), &hard);
        let g = grad(&st.sum(), std::slice::from_ref(&x), false)[0].clone();
        let expect = 2.0 * (1.0 - (0.6f64).tanh().powi(2));
        assert!((g.value().data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn unused_inputs_get_zero_gradient() {
        let x = Var::param(Tensor::new(vec![2], vec![1.0, 2.0]));
        let z = Var::param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
        let g = grad(&x.sum(), &[x.clone(), z.clone()], false);
        assert_eq!(g[1].value(), &Tensor::zeros(&[3]));
    }
}
