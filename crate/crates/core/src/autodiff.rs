//! Reverse-mode differentiation over dense arrays of rank 0, 1 or 2.
//!
//! Every value is stored as a two-dimensional array; a rank tag only affects
//! how shapes are reported (`[]`, `[n]`, `[r, c]`). Rank-1 values are row
//! vectors of shape `1 × n`, so a batch of samples is a rank-2 value whose
//! leading dimension is the batch.
//!
//! Binary operations broadcast any dimension of extent 1 against the other
//! operand. Gradients flowing back through a broadcast are summed over the
//! broadcast dimension.
//!
//! Graphs are built from [`Var`] handles (cheap `Rc` clones) and are confined to
//! the thread that built them.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;

/// Floor applied inside `log` and `div`.
pub const NUMERIC_FLOOR: f64 = 1e-12;

type BackwardFn<T> = Box<dyn Fn(&Array2<T>, &Array2<T>, &[Var<T>]) -> Vec<Array2<T>>>;

struct Node<T: Scalar> {
    value: Array2<T>,
    rank: u8,
    grad: RefCell<Array2<T>>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A node of the differentiation graph: a value plus an accumulated gradient.
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("value", &self.0.value)
            .finish()
    }
}

fn logical_shape(rank: u8, dims: (usize, usize)) -> Vec<usize> {
    match rank {
        0 => vec![],
        1 => vec![dims.1],
        _ => vec![dims.0, dims.1],
    }
}

fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let one = |x: usize, y: usize| match (x, y) {
        (x, y) if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    Some((one(a.0, b.0)?, one(a.1, b.1)?))
}

/// Sums `g` down to `dims`, undoing a broadcast.
fn unbroadcast<T: Scalar>(g: &Array2<T>, dims: (usize, usize)) -> Array2<T> {
    let mut out = g.clone();
    if dims.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if dims.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

impl<T: Scalar> Var<T> {
    fn leaf(value: Array2<T>, rank: u8, requires_grad: bool) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Var(Rc::new(Node {
            value,
            rank,
            grad: RefCell::new(grad),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    fn from_op(value: Array2<T>, rank: u8, parents: Vec<Var<T>>, backward: BackwardFn<T>) -> Self {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        let grad = Array2::zeros(value.raw_dim());
        Var(Rc::new(Node {
            value,
            rank,
            grad: RefCell::new(grad),
            requires_grad,
            parents: if requires_grad { parents } else { Vec::new() },
            backward: if requires_grad { Some(backward) } else { None },
        }))
    }

    /// A trainable leaf holding a rank-2 array.
    pub fn param(value: Array2<T>) -> Self {
        Self::leaf(value, 2, true)
    }

    /// A rank-2 constant (no gradient is propagated into it).
    pub fn constant(value: Array2<T>) -> Self {
        Self::leaf(value, 2, false)
    }

    /// A trainable rank-0 leaf.
    pub fn scalar(v: T) -> Self {
        Self::leaf(Array2::from_elem((1, 1), v), 0, true)
    }

    pub fn scalar_constant(v: T) -> Self {
        Self::leaf(Array2::from_elem((1, 1), v), 0, false)
    }

    /// A trainable rank-1 leaf.
    pub fn vector(values: &[T]) -> Self {
        Self::leaf(
            Array2::from_shape_vec((1, values.len()), values.to_vec()).unwrap(),
            1,
            true,
        )
    }

    pub fn vector_constant(values: &[T]) -> Self {
        Self::leaf(
            Array2::from_shape_vec((1, values.len()), values.to_vec()).unwrap(),
            1,
            false,
        )
    }

    /// A trainable rank-2 leaf from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        let n = data.len();
        let a = Array2::from_shape_vec((rows, cols), data).map_err(|_| Error::Shape {
            op: "matrix",
            lhs: vec![rows, cols],
            rhs: vec![n],
        })?;
        Ok(Self::param(a))
    }

    /// Copy of the value with no graph history.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.value.clone(), self.0.rank, false)
    }

    pub fn value(&self) -> &Array2<T> {
        &self.0.value
    }

    pub fn rank(&self) -> u8 {
        self.0.rank
    }

    /// Logical shape: `[]`, `[n]` or `[rows, cols]`.
    pub fn shape(&self) -> Vec<usize> {
        logical_shape(self.0.rank, self.0.value.dim())
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.value.dim()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// The single element of a one-element value.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1);
        self.0.value[[0, 0]]
    }

    /// Accumulated gradient (same dims as the value).
    pub fn grad(&self) -> Array2<T> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        self.0.grad.borrow_mut().fill(T::zero());
    }

    fn ptr(&self) -> *const Node<T> {
        Rc::as_ptr(&self.0)
    }

    /// Back-propagates from this scalar root.
    ///
    /// Gradients are added to every reachable node's gradient slot; calling it
    /// twice without [`Var::zero_grad`] accumulates twice.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape()
            ));
        }
        let order = self.topological_order();
        let mut pending: HashMap<*const Node<T>, Array2<T>> = HashMap::new();
        pending.insert(self.ptr(), Array2::ones((1, 1)));
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.ptr()) else {
                continue;
            };
            if let Some(backward) = &node.0.backward {
                let parent_grads = backward(&g, &node.0.value, &node.0.parents);
                for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                    if !parent.0.requires_grad {
                        continue;
                    }
                    debug_assert_eq!(pg.dim(), parent.dims());
                    pending
                        .entry(parent.ptr())
                        .and_modify(|acc| *acc += &pg)
                        .or_insert(pg);
                }
            }
            *node.0.grad.borrow_mut() += &g;
        }
        Ok(())
    }

    /// Nodes reachable from `self`, parents before children.
    fn topological_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node<T>> = HashSet::new();
        // (node, children expanded)
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.ptr()) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.0.parents {
                if !visited.contains(&p.ptr()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    // ---------------------------------------------------------------------
    // Linear algebra

    /// Matrix product. Rank-1 operands act as row vectors.
    pub fn matmul(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let (a, b) = (self.value(), rhs.value());
        if a.ncols() != b.nrows() {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let value = a.dot(b);
        let rank = if self.rank() == 1 && rhs.rank() == 2 {
            1
        } else {
            2
        };
        Ok(Var::from_op(
            value,
            rank,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, _, p| {
                let ga = g.dot(&p[1].value().t());
                let gb = p[0].value().t().dot(g);
                vec![ga, gb]
            }),
        ))
    }

    pub fn transpose(&self) -> Var<T> {
        Var::from_op(
            self.value().t().to_owned(),
            2,
            vec![self.clone()],
            Box::new(|g, _, _| vec![g.t().to_owned()]),
        )
    }

    /// Columns `start..end` as a rank-2 value.
    pub fn columns(&self, start: usize, end: usize) -> Result<Var<T>> {
        let cols = self.dims().1;
        if start >= end || end > cols {
            return contract(format!(
                "column range {start}..{end} invalid for shape {:?}",
                self.shape()
            ));
        }
        let dims = self.dims();
        Ok(Var::from_op(
            self.value().slice(s![.., start..end]).to_owned(),
            2,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut full = Array2::zeros(dims);
                full.slice_mut(s![.., start..end]).assign(g);
                vec![full]
            }),
        ))
    }

    // ---------------------------------------------------------------------
    // Broadcasting binary operations

    fn binary(
        &self,
        rhs: &Var<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        backward: BackwardFn<T>,
    ) -> Result<Var<T>> {
        let dims = broadcast_dims(self.dims(), rhs.dims()).ok_or_else(|| Error::Shape {
            op,
            lhs: self.shape(),
            rhs: rhs.shape(),
        })?;
        let a = self.value().broadcast(dims).unwrap();
        let b = rhs.value().broadcast(dims).unwrap();
        let mut value = Array2::zeros(dims);
        Zip::from(&mut value)
            .and(&a)
            .and(&b)
            .for_each(|o, &x, &y| *o = f(x, y));
        let rank = if dims == self.dims() && dims == rhs.dims() {
            self.rank().max(rhs.rank())
        } else {
            self.rank()
                .max(rhs.rank())
                .max(if dims.0 > 1 { 2 } else { 1 })
        };
        Ok(Var::from_op(
            value,
            rank,
            vec![self.clone(), rhs.clone()],
            backward,
        ))
    }

    pub fn add(&self, rhs: &Var<T>) -> Result<Var<T>> {
        self.binary(
            rhs,
            "add",
            |a, b| a + b,
            Box::new(|g, _, p| vec![unbroadcast(g, p[0].dims()), unbroadcast(g, p[1].dims())]),
        )
    }

    pub fn sub(&self, rhs: &Var<T>) -> Result<Var<T>> {
        self.binary(
            rhs,
            "sub",
            |a, b| a - b,
            Box::new(|g, _, p| {
                vec![
                    unbroadcast(g, p[0].dims()),
                    unbroadcast(&g.mapv(|x| -x), p[1].dims()),
                ]
            }),
        )
    }

    pub fn mul(&self, rhs: &Var<T>) -> Result<Var<T>> {
        self.binary(
            rhs,
            "mul",
            |a, b| a * b,
            Box::new(|g, _, p| {
                let dims = g.dim();
                let a = p[0].value().broadcast(dims).unwrap();
                let b = p[1].value().broadcast(dims).unwrap();
                let ga = g * &b;
                let gb = g * &a;
                vec![unbroadcast(&ga, p[0].dims()), unbroadcast(&gb, p[1].dims())]
            }),
        )
    }

    /// Division with the denominator pushed away from zero to `±NUMERIC_FLOOR`.
    pub fn div(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let floor = T::lit(NUMERIC_FLOOR);
        let guard = move |b: T| {
            if b.abs() >= floor {
                b
            } else if b < T::zero() {
                -floor
            } else {
                floor
            }
        };
        self.binary(
            rhs,
            "div",
            move |a, b| a / guard(b),
            Box::new(move |g, _, p| {
                let dims = g.dim();
                let a = p[0].value().broadcast(dims).unwrap();
                let b = p[1].value().broadcast(dims).unwrap();
                let mut ga = Array2::zeros(dims);
                let mut gb = Array2::zeros(dims);
                Zip::from(&mut ga)
                    .and(&mut gb)
                    .and(g)
                    .and(&a)
                    .and(&b)
                    .for_each(|ga, gb, &g, &a, &b| {
                        let bg = guard(b);
                        *ga = g / bg;
                        *gb = if b.abs() >= floor {
                            -g * a / (bg * bg)
                        } else {
                            T::zero()
                        };
                    });
                vec![unbroadcast(&ga, p[0].dims()), unbroadcast(&gb, p[1].dims())]
            }),
        )
    }

    pub fn add_scalar(&self, c: T) -> Var<T> {
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: T) -> Var<T> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Var<T> {
        self.mul_scalar(-T::one())
    }

    // ---------------------------------------------------------------------
    // Pointwise operations

    /// `f` maps input to output; `df(x, y)` is the local derivative given the
    /// input `x` and output `y`.
    fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<T> {
        let value = self.value().mapv(f);
        Var::from_op(
            value,
            self.rank(),
            vec![self.clone()],
            Box::new(move |g, y, p| {
                let mut out = g.clone();
                Zip::from(&mut out)
                    .and(p[0].value())
                    .and(y)
                    .for_each(|o, &x, &y| *o *= df(x, y));
                vec![out]
            }),
        )
    }

    pub fn exp(&self) -> Var<T> {
        self.unary(T::exp, |_, y| y)
    }

    /// Natural log with the default floor.
    pub fn log(&self) -> Result<Var<T>> {
        self.log_floor(T::lit(NUMERIC_FLOOR))
    }

    /// Natural log of `max(x, floor)`; negative inputs are a domain error.
    pub fn log_floor(&self, floor: T) -> Result<Var<T>> {
        if let Some(&bad) = self.value().iter().find(|&&x| x < T::zero() || x.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                value: bad.to_f64_lossy(),
            });
        }
        Ok(self.unary(
            move |x| x.max(floor).ln(),
            move |x, _| if x >= floor { T::one() / x } else { T::zero() },
        ))
    }

    pub fn relu(&self) -> Var<T> {
        self.unary(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn tanh(&self) -> Var<T> {
        self.unary(T::tanh, |_, y| T::one() - y * y)
    }

    /// Logistic function. The derivative is evaluated as `e^{-|x|}/(1+e^{-|x|})^2`
    /// so it stays nonzero where the output rounds to 0 or 1.
    pub fn sigmoid(&self) -> Var<T> {
        self.unary(
            |x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            |x, _| {
                let e = (-x.abs()).exp();
                e / ((T::one() + e) * (T::one() + e))
            },
        )
    }

    pub fn square(&self) -> Var<T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn abs(&self) -> Var<T> {
        self.unary(T::abs, |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    /// `max(x, c)` elementwise.
    pub fn max_scalar(&self, c: T) -> Var<T> {
        self.unary(
            move |x| x.max(c),
            move |x, _| if x > c { T::one() } else { T::zero() },
        )
    }

    // ---------------------------------------------------------------------
    // Reductions

    /// Maps a logical axis onto the stored 2-D layout.
    fn storage_axis(&self, axis: usize, op: &str) -> Result<usize> {
        match (self.rank(), axis) {
            (2, 0) => Ok(0),
            (2, 1) | (1, 0) => Ok(1),
            _ => contract(format!(
                "{op}: axis {axis} invalid for shape {:?}",
                self.shape()
            )),
        }
    }

    fn reduced_rank(&self) -> u8 {
        if self.rank() == 2 {
            2
        } else {
            0
        }
    }

    fn check_nonempty(&self, op: &str) -> Result<()> {
        if self.is_empty() {
            return contract(format!(
                "{op}: empty reduction over shape {:?}",
                self.shape()
            ));
        }
        Ok(())
    }

    /// Sum of all elements.
    pub fn sum(&self) -> Var<T> {
        let total = self.value().sum();
        Var::from_op(
            Array2::from_elem((1, 1), total),
            0,
            vec![self.clone()],
            Box::new(|g, _, p| vec![Array2::from_elem(p[0].dims(), g[[0, 0]])]),
        )
    }

    /// Sum along a logical axis, keeping the reduced dimension for rank 2.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<T>> {
        self.check_nonempty("sum")?;
        let ax = self.storage_axis(axis, "sum")?;
        let value = self.value().sum_axis(Axis(ax)).insert_axis(Axis(ax));
        Ok(Var::from_op(
            value,
            self.reduced_rank(),
            vec![self.clone()],
            Box::new(|g, _, p| vec![g.broadcast(p[0].dims()).unwrap().to_owned()]),
        ))
    }

    pub fn mean(&self) -> Result<Var<T>> {
        self.check_nonempty("mean")?;
        let n = T::from_usize_lossy(self.len());
        Ok(self.sum().mul_scalar(T::one() / n))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<T>> {
        let ax = self.storage_axis(axis, "mean")?;
        let n = T::from_usize_lossy(self.dims_along(ax));
        Ok(self.sum_axis(axis)?.mul_scalar(T::one() / n))
    }

    fn dims_along(&self, ax: usize) -> usize {
        if ax == 0 {
            self.dims().0
        } else {
            self.dims().1
        }
    }

    /// Sum of squares of all elements.
    pub fn l2_norm_sq(&self) -> Var<T> {
        self.square().sum()
    }

    pub fn l2_norm_sq_axis(&self, axis: usize) -> Result<Var<T>> {
        self.square().sum_axis(axis)
    }

    /// Max-shifted `log Σ exp` over all elements.
    pub fn logsumexp(&self) -> Result<Var<T>> {
        self.check_nonempty("logsumexp")?;
        let m = self.value().iter().copied().fold(T::neg_infinity(), T::max);
        let total = self
            .value()
            .iter()
            .map(|&x| (x - m).exp())
            .fold(T::zero(), |a, b| a + b);
        let value = Array2::from_elem((1, 1), m + total.ln());
        Ok(Var::from_op(
            value,
            0,
            vec![self.clone()],
            Box::new(|g, y, p| {
                let lse = y[[0, 0]];
                vec![p[0].value().mapv(|x| (x - lse).exp() * g[[0, 0]])]
            }),
        ))
    }

    /// Max-shifted `log Σ exp` along a logical axis (kept for rank 2).
    pub fn logsumexp_axis(&self, axis: usize) -> Result<Var<T>> {
        self.check_nonempty("logsumexp")?;
        let ax = self.storage_axis(axis, "logsumexp")?;
        let v = self.value();
        let lanes = v.lanes(Axis(ax));
        let reduced: Vec<T> = lanes
            .into_iter()
            .map(|lane| {
                let m = lane.iter().copied().fold(T::neg_infinity(), T::max);
                m + lane
                    .iter()
                    .map(|&x| (x - m).exp())
                    .fold(T::zero(), |a, b| a + b)
                    .ln()
            })
            .collect();
        let dims = if ax == 0 {
            (1, v.ncols())
        } else {
            (v.nrows(), 1)
        };
        let value = Array2::from_shape_vec(dims, reduced).unwrap();
        Ok(Var::from_op(
            value,
            self.reduced_rank(),
            vec![self.clone()],
            Box::new(|g, y, p| {
                let x = p[0].value();
                let dims = x.dim();
                let lse = y.broadcast(dims).unwrap();
                let gb = g.broadcast(dims).unwrap();
                let mut out = Array2::zeros(dims);
                Zip::from(&mut out)
                    .and(x)
                    .and(&lse)
                    .and(&gb)
                    .for_each(|o, &x, &l, &g| *o = (x - l).exp() * g);
                vec![out]
            }),
        ))
    }

    /// Row-wise log-softmax along the last logical axis.
    pub fn log_softmax(&self) -> Result<Var<T>> {
        let axis = if self.rank() == 2 { 1 } else { 0 };
        self.sub(&self.logsumexp_axis(axis)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn identity_matmul() {
        let i = Var::param(array![[1.0, 0.0], [0.0, 1.0]]);
        let v = Var::param(array![[3.0], [4.0]]);
        let out = i.matmul(&v).unwrap();
        assert_eq!(out.value(), &array![[3.0], [4.0]]);
    }

    #[test]
    fn row_times_column() {
        let a = Var::param(array![[1.0, 2.0]]);
        let b = Var::param(array![[3.0], [4.0]]);
        assert_eq!(a.matmul(&b).unwrap().item(), 11.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Var::<f64>::param(Array2::zeros((2, 3)));
        let b = Var::<f64>::param(Array2::zeros((2, 3)));
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn pointwise_basics() {
        assert_eq!(Var::scalar(0.0f64).exp().item(), 1.0);
        let x = Var::scalar(-2.0f64);
        let r = x.relu();
        assert_eq!(r.item(), 0.0);
        r.backward().unwrap();
        assert_eq!(x.grad()[[0, 0]], 0.0);
    }

    #[test]
    fn log_derivative_at_two() {
        let x = Var::scalar(2.0f64);
        x.log().unwrap().backward().unwrap();
        assert!((x.grad()[[0, 0]] - 0.5).abs() < 1e-12);
        let h = 1e-5;
        let fd = ((2.0f64 + h).ln() - (2.0f64 - h).ln()) / (2.0 * h);
        assert!((x.grad()[[0, 0]] - fd).abs() < 1e-6);
    }

    #[test]
    fn log_of_negative_is_domain_error() {
        let x = Var::vector(&[1.0f64, -0.5]);
        assert!(matches!(x.log(), Err(Error::Domain { .. })));
    }

    #[test]
    fn log_of_zero_is_floored() {
        let x = Var::scalar(0.0f64);
        let y = x.log().unwrap();
        assert!(close(y.item(), NUMERIC_FLOOR.ln(), 1e-12));
    }

    #[test]
    fn div_by_zero_is_floored() {
        let a = Var::scalar(1.0f64);
        let b = Var::scalar(0.0f64);
        let q = a.div(&b).unwrap();
        assert!(q.item().is_finite());
        assert!(close(q.item(), 1e12, 1e-12));
    }

    #[test]
    fn logsumexp_values() {
        let x = Var::vector(&[0.0f64, 0.0]);
        assert!((x.logsumexp().unwrap().item() - 2f64.ln()).abs() < 1e-15);
        let big = Var::vector(&[1000.0f64, 1000.0]);
        let v = big.logsumexp().unwrap().item();
        assert!(v.is_finite());
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn mean_gradient_is_one_over_n() {
        let x = Var::vector(&[1.0f64, 2.0, 3.0, 4.0]);
        x.mean().unwrap().backward().unwrap();
        assert!(x.grad().iter().all(|&g| (g - 0.25).abs() < 1e-15));
    }

    #[test]
    fn square_backward() {
        let x = Var::scalar(3.0f64);
        x.square().backward().unwrap();
        assert_eq!(x.grad()[[0, 0]], 6.0);
    }

    #[test]
    fn sum_of_matrix_vector_product() {
        let w = Var::param(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let v = Var::constant(array![[0.5], [-1.0], [2.0]]);
        w.matmul(&v).unwrap().sum().backward().unwrap();
        for row in w.grad().rows() {
            assert_eq!(row.to_vec(), vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let x = Var::vector(&[1.0f64, 2.0]);
        assert!(matches!(x.exp().backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Var::scalar(3.0f64);
        let y = x.square();
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad()[[0, 0]], 12.0);
        x.zero_grad();
        assert_eq!(x.grad()[[0, 0]], 0.0);
    }

    #[test]
    fn shared_subexpression_matches_unrolled_tree() {
        // f = (x*y) + exp(x*y), once sharing x*y and once recomputing it.
        let x = Var::scalar(0.7f64);
        let y = Var::scalar(-1.3f64);
        let xy = x.mul(&y).unwrap();
        xy.add(&xy.exp()).unwrap().backward().unwrap();
        let (gx, gy) = (x.grad()[[0, 0]], y.grad()[[0, 0]]);

        let x2 = Var::scalar(0.7f64);
        let y2 = Var::scalar(-1.3f64);
        let a = x2.mul(&y2).unwrap();
        let b = x2.mul(&y2).unwrap().exp();
        a.add(&b).unwrap().backward().unwrap();
        assert!((gx - x2.grad()[[0, 0]]).abs() < 1e-15);
        assert!((gy - y2.grad()[[0, 0]]).abs() < 1e-15);
    }

    #[test]
    fn broadcasting_column_against_matrix() {
        let m = Var::param(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let c = Var::param(array![[10.0], [20.0]]);
        let out = m.add(&c).unwrap();
        assert_eq!(out.value(), &array![[11.0, 12.0, 13.0], [24.0, 25.0, 26.0]]);
        out.sum().backward().unwrap();
        assert_eq!(c.grad(), array![[3.0], [3.0]]);
    }

    #[test]
    fn incompatible_broadcast_is_shape_error() {
        let a = Var::<f64>::param(Array2::zeros((2, 3)));
        let b = Var::<f64>::param(Array2::zeros((3, 2)));
        assert!(matches!(a.add(&b), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn reduction_axis_contracts() {
        let s = Var::scalar(1.0f64);
        assert!(s.sum_axis(0).is_err());
        let v = Var::vector(&[1.0f64, 2.0]);
        assert_eq!(v.sum_axis(0).unwrap().shape(), Vec::<usize>::new());
        assert!(v.sum_axis(1).is_err());
        let empty = Var::<f64>::param(Array2::zeros((0, 3)));
        assert!(empty.mean().is_err());
        assert!(empty.logsumexp_axis(1).is_err());
    }

    #[test]
    fn sigmoid_gradient_survives_saturation() {
        let x = Var::vector(&[100.0f64, -100.0]);
        x.sigmoid().sum().backward().unwrap();
        assert!(x.grad().iter().all(|&g| g > 0.0 && g.is_finite()));
    }

    #[test]
    fn columns_scatter_gradient() {
        let m = Var::param(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let c = m.columns(1, 2).unwrap();
        assert_eq!(c.value(), &array![[2.0], [5.0]]);
        c.sum().backward().unwrap();
        assert_eq!(m.grad(), array![[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]);
    }

    #[test]
    fn works_in_single_precision() {
        let x = Var::vector(&[1.0f32, 2.0, 3.0]);
        let lse = x.logsumexp().unwrap();
        lse.backward().unwrap();
        let total: f32 = x.grad().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}
