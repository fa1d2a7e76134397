//! Batched automatic differentiation over 2-D arrays.
//!
//! Every value on a [`Tape`] is an `n × m` matrix; a batch of points is stored
//! one point per row. Operations are evaluated eagerly and recorded, and both
//! derivative transforms emit ordinary tape operations:
//!
//! * [`Tape::grad`] is reverse mode. The returned gradients are themselves
//!   differentiable, so `grad(grad(..))` yields second derivatives.
//! * [`Tape::jvp`] is forward mode, built by replaying the recorded graph with
//!   tangent rules. A JVP can be differentiated by `grad` and vice versa.
//!
//! This is exactly what the score and log-likelihood residuals need: a
//! Hutchinson probe is pushed forward with `jvp`, the resulting scalar is
//! differentiated in `x` with `grad`, and the whole expression is finally
//! differentiated in the network parameters.
//!
//! Broadcasting follows the row/column convention used throughout the crate:
//! a binary operation accepts equal shapes, a `1 × m` row, an `n × 1` column
//! or a `1 × 1` scalar on either side.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize, f64),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Tanh(usize),
    /// `1 - x²`, the derivative of `tanh` expressed through its output.
    OneMinusSq(usize),
    Exp(usize),
    Ln(usize),
    Recip(usize),
    SumTo(usize),
    BroadcastTo(usize),
    Concat(usize, usize),
    Slice { src: usize, start: usize },
    Pad { src: usize, start: usize },
    /// Row-wise product with a per-row constant matrix: `y[b] = M[b] x[b]`.
    RowMatVec { src: usize, mats: Rc<Vec<Array2<f64>>>, transpose: bool },
}

impl Op {
    fn operands(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => [Some(a), Some(b)],
            Op::MatMul { a, b, .. } => [Some(a), Some(b)],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Tanh(a)
            | Op::OneMinusSq(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Recip(a)
            | Op::SumTo(a)
            | Op::BroadcastTo(a) => [Some(a), None],
            Op::Slice { src, .. } | Op::Pad { src, .. } | Op::RowMatVec { src, .. } => [Some(src), None],
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Recording of a computation. Dropping the tape frees every intermediate.
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

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({}x{})", self.id, r, c)
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn shape_of(a: &Array2<f64>) -> (usize, usize) {
    (a.nrows(), a.ncols())
}

fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(a.ncols(), b.nrows(), "matmul inner dimension mismatch");
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, &a, &b, 0.0, &mut out);
    out
}

fn sum_to_shape(x: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut cur = x.clone();
    if shape.0 == 1 && cur.nrows() != 1 {
        cur = cur.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && cur.ncols() != 1 {
        cur = cur.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    assert_eq!(shape_of(&cur), shape, "cannot reduce to requested shape");
    cur
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn shape_id(&self, id: usize) -> (usize, usize) {
        shape_of(&self.nodes.borrow()[id].value)
    }

    /// Records an input or parameter.
    pub fn leaf(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Records a column vector (`n × 1`).
    pub fn column(&self, values: &[f64]) -> Var<'_> {
        self.leaf(Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape"))
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn zeros(&self, shape: (usize, usize)) -> Var<'_> {
        self.leaf(Array2::zeros(shape))
    }

    pub fn full(&self, shape: (usize, usize), value: f64) -> Var<'_> {
        self.leaf(Array2::from_elem(shape, value))
    }

    fn binary(&self, a: usize, b: usize, op: Op) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a].value, &nodes[b].value);
            let shape = broadcast_shape(shape_of(x), shape_of(y));
            let xb = x.broadcast(shape).expect("broadcast");
            let yb = y.broadcast(shape).expect("broadcast");
            match op {
                Op::Add(..) => Zip::from(&xb).and(&yb).map_collect(|p, q| p + q),
                Op::Sub(..) => Zip::from(&xb).and(&yb).map_collect(|p, q| p - q),
                Op::Mul(..) => Zip::from(&xb).and(&yb).map_collect(|p, q| p * q),
                _ => unreachable!(),
            }
        };
        self.push(value, op)
    }

    fn unary(&self, a: usize, op: Op) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a].value;
            match &op {
                Op::Neg(_) => x.mapv(|v| -v),
                Op::Scale(_, c) => x.mapv(|v| v * c),
                Op::Offset(_, c) => x.mapv(|v| v + c),
                Op::Tanh(_) => x.mapv(f64::tanh),
                Op::OneMinusSq(_) => x.mapv(|v| 1.0 - v * v),
                Op::Exp(_) => x.mapv(f64::exp),
                Op::Ln(_) => x.mapv(f64::ln),
                Op::Recip(_) => x.mapv(f64::recip),
                _ => unreachable!(),
            }
        };
        self.push(value, op)
    }

    fn matmul_ids(&self, a: usize, b: usize, ta: bool, tb: bool) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = nodes[a].value.view();
            let y = nodes[b].value.view();
            let x = if ta { x.reversed_axes() } else { x };
            let y = if tb { y.reversed_axes() } else { y };
            matmul(x, y)
        };
        self.push(value, Op::MatMul { a, b, ta, tb })
    }

    fn sum_to_id(&self, a: usize, shape: (usize, usize)) -> Var<'_> {
        if self.shape_id(a) == shape {
            return Var { tape: self, id: a };
        }
        let value = sum_to_shape(&self.nodes.borrow()[a].value, shape);
        self.push(value, Op::SumTo(a))
    }

    fn broadcast_to_id(&self, a: usize, shape: (usize, usize)) -> Var<'_> {
        if self.shape_id(a) == shape {
            return Var { tape: self, id: a };
        }
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a].value.broadcast(shape).expect("broadcast").to_owned()
        };
        self.push(value, Op::BroadcastTo(a))
    }

    fn slice_id(&self, src: usize, start: usize, end: usize) -> Var<'_> {
        let value = self.nodes.borrow()[src].value.slice(s![.., start..end]).to_owned();
        self.push(value, Op::Slice { src, start })
    }

    fn pad_id(&self, src: usize, start: usize, total: usize) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[src].value;
            let mut out = Array2::zeros((x.nrows(), total));
            out.slice_mut(s![.., start..start + x.ncols()]).assign(x);
            out
        };
        self.push(value, Op::Pad { src, start })
    }

    fn concat_ids(&self, a: usize, b: usize) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            ndarray::concatenate(Axis(1), &[nodes[a].value.view(), nodes[b].value.view()])
                .expect("concat requires equal row counts")
        };
        self.push(value, Op::Concat(a, b))
    }

    fn row_mat_vec_id(&self, src: usize, mats: Rc<Vec<Array2<f64>>>, transpose: bool) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[src].value;
            assert_eq!(mats.len(), x.nrows(), "one matrix per row required");
            let out_dim = if transpose { mats[0].ncols() } else { mats[0].nrows() };
            let mut out = Array2::zeros((x.nrows(), out_dim));
            for (b, (row, mut dst)) in x.outer_iter().zip(out.outer_iter_mut()).enumerate() {
                let m = &mats[b];
                if transpose {
                    dst.assign(&m.t().dot(&row));
                } else {
                    dst.assign(&m.dot(&row));
                }
            }
            out
        };
        self.push(value, Op::RowMatVec { src, mats, transpose })
    }

    /// Concatenates two matrices with equal row counts side by side.
    pub fn concat<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Var<'t> {
        self.concat_ids(a.id, b.id)
    }

    /// Applies a per-row constant matrix: row `b` of the result is `mats[b] · x[b]`
    /// (or `mats[b]ᵀ · x[b]` when `transpose`).
    pub fn row_mat_vec<'t>(&'t self, x: Var<'t>, mats: Rc<Vec<Array2<f64>>>, transpose: bool) -> Var<'t> {
        self.row_mat_vec_id(x.id, mats, transpose)
    }

    fn op_of(&self, id: usize) -> Op {
        self.nodes.borrow()[id].op.clone()
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Reverse-mode gradient of `sum(output)` with respect to each of `wrt`.
    ///
    /// The result lives on the tape and can be differentiated again.
    /// Inputs that do not influence `output` get a zero gradient.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Vec<Var<'t>> {
        let n = output.id + 1;
        let mut depends = vec![false; n];
        for w in wrt {
            if w.id < n {
                depends[w.id] = true;
            }
        }
        for i in 0..n {
            if depends[i] {
                continue;
            }
            let ops = self.nodes.borrow()[i].op.operands();
            depends[i] = ops.iter().flatten().any(|&j| depends[j]);
        }

        let mut grads: Vec<Option<usize>> = vec![None; n];
        if depends[output.id] {
            let seed = Array2::ones(output.shape());
            grads[output.id] = Some(self.leaf(seed).id);
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            let op = self.op_of(i);
            let acc = |target: usize, contrib: Var<'t>, grads: &mut Vec<Option<usize>>| {
                grads[target] = Some(match grads[target] {
                    Some(prev) => (self.var(prev) + contrib).id,
                    None => contrib.id,
                });
            };
            let gv = self.var(g);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if depends[a] {
                        acc(a, self.sum_to_id(g, self.shape_id(a)), &mut grads);
                    }
                    if depends[b] {
                        acc(b, self.sum_to_id(g, self.shape_id(b)), &mut grads);
                    }
                }
                Op::Sub(a, b) => {
                    if depends[a] {
                        acc(a, self.sum_to_id(g, self.shape_id(a)), &mut grads);
                    }
                    if depends[b] {
                        let r = self.sum_to_id(g, self.shape_id(b));
                        acc(b, -r, &mut grads);
                    }
                }
                Op::Mul(a, b) => {
                    if depends[a] {
                        let p = gv * self.var(b);
                        acc(a, self.sum_to_id(p.id, self.shape_id(a)), &mut grads);
                    }
                    if depends[b] {
                        let p = gv * self.var(a);
                        acc(b, self.sum_to_id(p.id, self.shape_id(b)), &mut grads);
                    }
                }
                Op::Neg(a) => acc(a, -gv, &mut grads),
                Op::Scale(a, c) => acc(a, gv * c, &mut grads),
                Op::Offset(a, _) => acc(a, gv, &mut grads),
                Op::MatMul { a, b, ta, tb } => {
                    // C = A'·B' with A' = op(A), B' = op(B).
                    if depends[a] {
                        let ga = if !ta {
                            self.matmul_ids(g, b, false, !tb)
                        } else {
                            self.matmul_ids(b, g, tb, true)
                        };
                        acc(a, ga, &mut grads);
                    }
                    if depends[b] {
                        let gb = if !tb {
                            self.matmul_ids(a, g, !ta, false)
                        } else {
                            self.matmul_ids(g, a, true, ta)
                        };
                        acc(b, gb, &mut grads);
                    }
                }
                Op::Tanh(a) => {
                    let d = self.var(i).one_minus_sq();
                    acc(a, gv * d, &mut grads);
                }
                Op::OneMinusSq(a) => {
                    let d = self.var(a) * (-2.0);
                    acc(a, gv * d, &mut grads);
                }
                Op::Exp(a) => acc(a, gv * self.var(i), &mut grads),
                Op::Ln(a) => {
                    let r = self.var(a).recip();
                    acc(a, gv * r, &mut grads);
                }
                Op::Recip(a) => {
                    let y = self.var(i);
                    acc(a, -(gv * (y * y)), &mut grads);
                }
                Op::SumTo(a) => acc(a, self.broadcast_to_id(g, self.shape_id(a)), &mut grads),
                Op::BroadcastTo(a) => acc(a, self.sum_to_id(g, self.shape_id(a)), &mut grads),
                Op::Concat(a, b) => {
                    let na = self.shape_id(a).1;
                    let nb = self.shape_id(b).1;
                    if depends[a] {
                        acc(a, self.slice_id(g, 0, na), &mut grads);
                    }
                    if depends[b] {
                        acc(b, self.slice_id(g, na, na + nb), &mut grads);
                    }
                }
                Op::Slice { src, start } => {
                    let total = self.shape_id(src).1;
                    acc(src, self.pad_id(g, start, total), &mut grads);
                }
                Op::Pad { src, start } => {
                    let width = self.shape_id(src).1;
                    acc(src, self.slice_id(g, start, start + width), &mut grads);
                }
                Op::RowMatVec { src, mats, transpose } => {
                    acc(src, self.row_mat_vec_id(g, mats, !transpose), &mut grads);
                }
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => self.var(g),
                None => self.zeros(w.shape()),
            })
            .collect()
    }

    /// Forward-mode directional derivative of `output` along `tangents`
    /// (one tangent per entry of `inputs`, same shapes).
    pub fn jvp<'t>(&'t self, output: Var<'t>, inputs: &[Var<'t>], tangents: &[Var<'t>]) -> Var<'t> {
        assert_eq!(inputs.len(), tangents.len(), "one tangent per input");
        let n = output.id + 1;
        let mut needed = vec![false; n];
        needed[output.id] = true;
        for i in (0..n).rev() {
            if !needed[i] {
                continue;
            }
            for j in self.nodes.borrow()[i].op.operands().into_iter().flatten() {
                needed[j] = true;
            }
        }

        let mut tan: Vec<Option<usize>> = vec![None; n];
        for (inp, t) in inputs.iter().zip(tangents) {
            assert_eq!(inp.shape(), t.shape(), "tangent shape must match input");
            if inp.id < n {
                tan[inp.id] = Some(t.id);
            }
        }
        let first = inputs.iter().map(|v| v.id).min().unwrap_or(n);

        for i in first..n {
            if !needed[i] || tan[i].is_some() {
                continue;
            }
            let op = self.op_of(i);
            let ops = op.operands();
            if !ops.iter().flatten().any(|&j| tan[j].is_some()) {
                continue;
            }
            let out_shape = self.shape_id(i);
            let t = |j: usize| tan[j].map(|k| self.var(k));
            let result: Var<'t> = match op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => match (t(a), t(b)) {
                    (Some(x), Some(y)) => self.broadcast_to_id((x + y).id, out_shape),
                    (Some(x), None) => self.broadcast_to_id(x.id, out_shape),
                    (None, Some(y)) => self.broadcast_to_id(y.id, out_shape),
                    (None, None) => unreachable!(),
                },
                Op::Sub(a, b) => match (t(a), t(b)) {
                    (Some(x), Some(y)) => self.broadcast_to_id((x - y).id, out_shape),
                    (Some(x), None) => self.broadcast_to_id(x.id, out_shape),
                    (None, Some(y)) => self.broadcast_to_id((-y).id, out_shape),
                    (None, None) => unreachable!(),
                },
                Op::Mul(a, b) => {
                    let terms: Vec<Var<'t>> = [t(a).map(|x| x * self.var(b)), t(b).map(|y| self.var(a) * y)]
                        .into_iter()
                        .flatten()
                        .collect();
                    let sum = terms.into_iter().reduce(|p, q| p + q).unwrap();
                    self.broadcast_to_id(sum.id, out_shape)
                }
                Op::Neg(a) => -t(a).unwrap(),
                Op::Scale(a, c) => t(a).unwrap() * c,
                Op::Offset(a, _) => t(a).unwrap(),
                Op::MatMul { a, b, ta, tb } => {
                    let terms: Vec<Var<'t>> = [
                        t(a).map(|x| self.matmul_ids(x.id, b, ta, tb)),
                        t(b).map(|y| self.matmul_ids(a, y.id, ta, tb)),
                    ]
                    .into_iter()
                    .flatten()
                    .collect();
                    terms.into_iter().reduce(|p, q| p + q).unwrap()
                }
                Op::Tanh(a) => t(a).unwrap() * self.var(i).one_minus_sq(),
                Op::OneMinusSq(a) => t(a).unwrap() * (self.var(a) * (-2.0)),
                Op::Exp(a) => t(a).unwrap() * self.var(i),
                Op::Ln(a) => t(a).unwrap() * self.var(a).recip(),
                Op::Recip(a) => {
                    let y = self.var(i);
                    -(t(a).unwrap() * (y * y))
                }
                Op::SumTo(a) => self.sum_to_id(t(a).unwrap().id, out_shape),
                Op::BroadcastTo(a) => self.broadcast_to_id(t(a).unwrap().id, out_shape),
                Op::Concat(a, b) => {
                    let x = t(a).unwrap_or_else(|| self.zeros(self.shape_id(a)));
                    let y = t(b).unwrap_or_else(|| self.zeros(self.shape_id(b)));
                    self.concat_ids(x.id, y.id)
                }
                Op::Slice { src, start } => self.slice_id(t(src).unwrap().id, start, start + out_shape.1),
                Op::Pad { src, start } => self.pad_id(t(src).unwrap().id, start, out_shape.1),
                Op::RowMatVec { src, mats, transpose } => self.row_mat_vec_id(t(src).unwrap().id, mats, transpose),
            };
            tan[i] = Some(result.id);
        }

        match tan[output.id] {
            Some(id) => self.var(id),
            None => self.zeros(output.shape()),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.shape_id(self.id)
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Array2<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Runs `f` on the recorded value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Array2<f64>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    /// The single entry of a `1 × 1` value.
    pub fn item(&self) -> f64 {
        self.with_value(|v| {
            assert_eq!(shape_of(v), (1, 1), "item() needs a 1x1 value");
            v[[0, 0]]
        })
    }

    /// `self · other`
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.tape.matmul_ids(self.id, other.id, false, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(self, other: Var<'t>) -> Var<'t> {
        self.tape.matmul_ids(self.id, other.id, false, true)
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Tanh(self.id))
    }

    pub fn one_minus_sq(self) -> Var<'t> {
        self.tape.unary(self.id, Op::OneMinusSq(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Ln(self.id))
    }

    pub fn recip(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Recip(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    /// Sum of every entry, as a `1 × 1` value.
    pub fn sum(self) -> Var<'t> {
        self.tape.sum_to_id(self.id, (1, 1))
    }

    /// Sum across columns: `n × m → n × 1`.
    pub fn row_sums(self) -> Var<'t> {
        let (r, _) = self.shape();
        self.tape.sum_to_id(self.id, (r, 1))
    }

    /// Sum down rows: `n × m → 1 × m`.
    pub fn col_sums(self) -> Var<'t> {
        let (_, c) = self.shape();
        self.tape.sum_to_id(self.id, (1, c))
    }

    /// Mean of every entry, as a `1 × 1` value.
    pub fn mean(self) -> Var<'t> {
        let (r, c) = self.shape();
        self.sum() * (1.0 / (r * c) as f64)
    }

    pub fn broadcast_to(self, shape: (usize, usize)) -> Var<'t> {
        self.tape.broadcast_to_id(self.id, shape)
    }

    /// Columns `start..end`.
    pub fn cols(self, start: usize, end: usize) -> Var<'t> {
        self.tape.slice_id(self.id, start, end)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, Op::Add(self.id, rhs.id))
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, Op::Sub(self.id, rhs.id))
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, Op::Mul(self.id, rhs.id))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Neg(self.id))
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Scale(self.id, rhs))
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Offset(self.id, rhs))
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self + (-rhs)
    }
}
