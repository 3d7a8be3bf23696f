//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Operations are recorded on a [`Tape`] as they execute. [`Tape::backward`]
//! walks the record in reverse and accumulates gradients for every node that
//! depends on a parameter leaf.
//!
//! ```
//! use nalgebra::DMatrix;
//! use specmatch::diffgraph::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.param(DMatrix::from_row_slice(1, 2, &[3.0, -1.0]));
//! let loss = x.frobenius_sq();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x)[(0, 0)], 6.0);
//! ```

mod adam;
mod mlp;

pub use adam::{cosine_lr, AdamState};
pub use mlp::{Activation, BoundMlp, MlpParams};

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Powf(usize, f64),
    AddConst(usize),
    Scale(usize, f64),
    ScaleRows(usize, Rc<[f64]>),
    Hadamard(usize, usize),
    HadamardConst(usize, Rc<DMatrix<f64>>),
    Transpose(usize),
    Abs(usize),
    Relu(usize),
    Gelu(usize),
    FrobeniusSq(usize),
    Sum(usize),
    DotConst(usize, Rc<DMatrix<f64>>),
    PsdSolve {
        a: usize,
        b: usize,
        chol: Box<Cholesky<f64, Dyn>>,
    },
    Column(usize, usize),
    HStack(Vec<usize>),
}

struct Node {
    value: DMatrix<f64>,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations. Not shared across threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    non_finite: Cell<Option<usize>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({r}x{c})", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: DMatrix<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.non_finite.get().is_none() && value.iter().any(|x| !x.is_finite()) {
            self.non_finite.set(Some(id));
        }
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&self, value: DMatrix<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: DMatrix<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Index of the first node that produced a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.non_finite.get()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite.get() {
            Some(id) => Err(Error::NonFinite(format!("tape node {id}"))),
            None => Ok(()),
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Gradients of a scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_finite()?;
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.shape() != (1, 1) {
            return Err(Error::shape("backward needs a 1x1 loss"));
        }
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(DMatrix::from_element(1, 1, 1.0));

        fn acc(grads: &mut [Option<DMatrix<f64>>], nodes: &[Node], id: usize, g: DMatrix<f64>) {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(existing) => *existing += g,
                slot => *slot = Some(g),
            }
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if nodes[*a].requires_grad {
                        acc(&mut grads, &nodes, *a, &g * val(*b).transpose());
                    }
                    if nodes[*b].requires_grad {
                        acc(&mut grads, &nodes, *b, val(*a).transpose() * &g);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *a, g.clone());
                    acc(&mut grads, &nodes, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *a, g.clone());
                    acc(&mut grads, &nodes, *b, -g);
                }
                Op::AddRow(a, row) => {
                    let summed = DMatrix::from_fn(1, g.ncols(), |_, j| g.column(j).sum());
                    acc(&mut grads, &nodes, *row, summed);
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::MulRow(a, row) => {
                    let x = val(*a);
                    let r = val(*row);
                    if nodes[*row].requires_grad {
                        let gr = DMatrix::from_fn(1, g.ncols(), |_, j| g.column(j).dot(&x.column(j)));
                        acc(&mut grads, &nodes, *row, gr);
                    }
                    let mut gx = g;
                    for (j, mut c) in gx.column_iter_mut().enumerate() {
                        c *= r[(0, j)];
                    }
                    acc(&mut grads, &nodes, *a, gx);
                }
                Op::Powf(a, p) => {
                    let gx = g.zip_map(val(*a), |gi, xi| gi * p * xi.powf(p - 1.0));
                    acc(&mut grads, &nodes, *a, gx);
                }
                Op::AddConst(a) => acc(&mut grads, &nodes, *a, g),
                Op::Scale(a, s) => acc(&mut grads, &nodes, *a, g * *s),
                Op::ScaleRows(a, w) => {
                    let mut g = g;
                    for (i, mut r) in g.row_iter_mut().enumerate() {
                        r *= w[i];
                    }
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Hadamard(a, b) => {
                    if nodes[*a].requires_grad {
                        acc(&mut grads, &nodes, *a, g.component_mul(val(*b)));
                    }
                    if nodes[*b].requires_grad {
                        acc(&mut grads, &nodes, *b, g.component_mul(val(*a)));
                    }
                }
                Op::HadamardConst(a, c) => acc(&mut grads, &nodes, *a, g.component_mul(c)),
                Op::Transpose(a) => acc(&mut grads, &nodes, *a, g.transpose()),
                Op::Abs(a) => {
                    let x = val(*a);
                    let gx = g.zip_map(x, |gi, xi| {
                        if xi > 0.0 {
                            gi
                        } else if xi < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, &nodes, *a, gx);
                }
                Op::Relu(a) => {
                    let gx = g.zip_map(val(*a), |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                    acc(&mut grads, &nodes, *a, gx);
                }
                Op::Gelu(a) => {
                    let gx = g.zip_map(val(*a), |gi, xi| gi * gelu_grad(xi));
                    acc(&mut grads, &nodes, *a, gx);
                }
                Op::FrobeniusSq(a) => {
                    let s = g[(0, 0)];
                    acc(&mut grads, &nodes, *a, val(*a) * (2.0 * s));
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(&mut grads, &nodes, *a, DMatrix::from_element(r, c, g[(0, 0)]));
                }
                Op::DotConst(a, c) => acc(&mut grads, &nodes, *a, c.as_ref() * g[(0, 0)]),
                Op::PsdSolve { a, b, chol } => {
                    // X = A^-1 B  =>  gB = A^-T gX,  gA = -gB X^T
                    let gb = chol.solve(&g);
                    if nodes[*a].requires_grad {
                        acc(&mut grads, &nodes, *a, -(&gb * node.value.transpose()));
                    }
                    acc(&mut grads, &nodes, *b, gb);
                }
                Op::Column(a, j) => {
                    let (r, c) = val(*a).shape();
                    let mut full = DMatrix::zeros(r, c);
                    full.set_column(*j, &g.column(0));
                    acc(&mut grads, &nodes, *a, full);
                }
                Op::HStack(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        acc(&mut grads, &nodes, p, g.columns(offset, w).into_owned());
                        offset += w;
                    }
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of `var`, zeros when the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> DMatrix<f64> {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.id];
                DMatrix::zeros(r, c)
            }
        }
    }

    pub fn try_get(&self, var: Var<'_>) -> Option<&DMatrix<f64>> {
        self.grads[var.id].as_ref()
    }
}

fn same_shape(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: {a:?} vs {b:?}")));
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

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    /// Borrow of the forward value.
    pub fn value(&self) -> Ref<'t, DMatrix<f64>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        self.value().clone()
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self) -> f64 {
        self.value()[(0, 0)]
    }

    fn unary(self, f: impl FnOnce(&DMatrix<f64>) -> DMatrix<f64>, op: Op) -> Var<'t> {
        let v = f(&self.value());
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(v, op, rg)
    }

    fn binary(self, other: Var<'t>, f: impl FnOnce(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64>, op: Op) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        self.tape.push(v, op, rg)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.shape(), other.shape());
        if a.1 != b.0 {
            return Err(Error::shape(format!("matmul {a:?} x {b:?}")));
        }
        Ok(self.binary(other, |x, y| x * y, Op::MatMul(self.id, other.id)))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        same_shape(self.shape(), other.shape(), "add")?;
        Ok(self.binary(other, |x, y| x + y, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        same_shape(self.shape(), other.shape(), "sub")?;
        Ok(self.binary(other, |x, y| x - y, Op::Sub(self.id, other.id)))
    }

    /// Adds a `1 x c` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, r) = (self.shape(), row.shape());
        if r.0 != 1 || r.1 != a.1 {
            return Err(Error::shape(format!("add_row {a:?} + {r:?}")));
        }
        Ok(self.binary(
            row,
            |x, b| {
                let mut out = x.clone();
                for mut rr in out.row_iter_mut() {
                    rr += b;
                }
                out
            },
            Op::AddRow(self.id, row.id),
        ))
    }

    /// Multiplies column `j` by `row[j]`.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, r) = (self.shape(), row.shape());
        if r.0 != 1 || r.1 != a.1 {
            return Err(Error::shape(format!("mul_row {a:?} * {r:?}")));
        }
        Ok(self.binary(
            row,
            |x, b| {
                let mut out = x.clone();
                for (j, mut c) in out.column_iter_mut().enumerate() {
                    c *= b[(0, j)];
                }
                out
            },
            Op::MulRow(self.id, row.id),
        ))
    }

    /// Elementwise `x^p`.
    pub fn powf(self, p: f64) -> Var<'t> {
        self.unary(|x| x.map(|v| v.powf(p)), Op::Powf(self.id, p))
    }

    pub fn add_const(self, c: &DMatrix<f64>) -> Result<Var<'t>> {
        same_shape(self.shape(), c.shape(), "add_const")?;
        Ok(self.unary(|x| x + c, Op::AddConst(self.id)))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(|x| x * s, Op::Scale(self.id, s))
    }

    /// Multiplies row `i` by the constant `w[i]`.
    pub fn scale_rows(self, w: &[f64]) -> Result<Var<'t>> {
        if w.len() != self.shape().0 {
            return Err(Error::shape("scale_rows weight length"));
        }
        let w: Rc<[f64]> = w.into();
        let w2 = w.clone();
        Ok(self.unary(
            move |x| {
                let mut out = x.clone();
                for (i, mut r) in out.row_iter_mut().enumerate() {
                    r *= w2[i];
                }
                out
            },
            Op::ScaleRows(self.id, w),
        ))
    }

    pub fn hadamard(self, other: Var<'t>) -> Result<Var<'t>> {
        same_shape(self.shape(), other.shape(), "hadamard")?;
        Ok(self.binary(other, |x, y| x.component_mul(y), Op::Hadamard(self.id, other.id)))
    }

    pub fn hadamard_const(self, c: &DMatrix<f64>) -> Result<Var<'t>> {
        same_shape(self.shape(), c.shape(), "hadamard_const")?;
        let c = Rc::new(c.clone());
        let c2 = c.clone();
        Ok(self.unary(move |x| x.component_mul(&c2), Op::HadamardConst(self.id, c)))
    }

    pub fn transpose(self) -> Var<'t> {
        self.unary(|x| x.transpose(), Op::Transpose(self.id))
    }

    /// Elementwise absolute value; the subgradient at zero is zero.
    pub fn abs(self) -> Var<'t> {
        self.unary(|x| x.abs(), Op::Abs(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.map(|v| v.max(0.0)), Op::Relu(self.id))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        self.unary(|x| x.map(gelu), Op::Gelu(self.id))
    }

    pub fn frobenius_sq(self) -> Var<'t> {
        self.unary(
            |x| DMatrix::from_element(1, 1, x.norm_squared()),
            Op::FrobeniusSq(self.id),
        )
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(|x| DMatrix::from_element(1, 1, x.sum()), Op::Sum(self.id))
    }

    /// `sum(self .* c)` for a constant `c`; injects `c` as the cotangent of `self`.
    pub fn dot_const(self, c: &DMatrix<f64>) -> Result<Var<'t>> {
        same_shape(self.shape(), c.shape(), "dot_const")?;
        let c = Rc::new(c.clone());
        let c2 = c.clone();
        Ok(self.unary(
            move |x| DMatrix::from_element(1, 1, x.dot(&c2)),
            Op::DotConst(self.id, c),
        ))
    }

    /// Solves `self * X = b` for symmetric positive-definite `self`.
    pub fn psd_solve(self, b: Var<'t>) -> Result<Var<'t>> {
        let (a, bs) = (self.shape(), b.shape());
        if a.0 != a.1 || a.1 != bs.0 {
            return Err(Error::shape(format!("psd_solve {a:?} \\ {bs:?}")));
        }
        let (x, chol) = {
            let nodes = self.tape.nodes.borrow();
            let chol = Cholesky::new(nodes[self.id].value.clone()).ok_or(Error::SingularSystem)?;
            (chol.solve(&nodes[b.id].value), chol)
        };
        let rg = self.tape.requires(&[self.id, b.id]);
        Ok(self.tape.push(
            x,
            Op::PsdSolve {
                a: self.id,
                b: b.id,
                chol: Box::new(chol),
            },
            rg,
        ))
    }

    pub fn column(self, j: usize) -> Result<Var<'t>> {
        if j >= self.shape().1 {
            return Err(Error::shape(format!("column {j} out of range")));
        }
        Ok(self.unary(|x| x.columns(j, 1).into_owned(), Op::Column(self.id, j)))
    }

    /// Copy of the current value with no gradient connection.
    pub fn detach(self) -> Var<'t> {
        let v = self.to_matrix();
        self.tape.constant(v)
    }
}

/// Concatenates columns `[a | b | ...]`.
pub fn hstack<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::shape("hstack of nothing"))?;
    let tape = first.tape;
    let rows = first.shape().0;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let v = {
        let nodes = tape.nodes.borrow();
        let cols: usize = ids.iter().map(|&i| nodes[i].value.ncols()).sum();
        let mut out = DMatrix::zeros(rows, cols);
        let mut off = 0;
        for &i in &ids {
            let m = &nodes[i].value;
            if m.nrows() != rows {
                return Err(Error::shape("hstack row counts differ"));
            }
            out.columns_mut(off, m.ncols()).copy_from(m);
            off += m.ncols();
        }
        out
    };
    let rg = tape.requires(&ids);
    Ok(tape.push(v, Op::HStack(ids), rg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` at `x`.
    fn fd<F: Fn(&DMatrix<f64>) -> f64>(f: F, x: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(x.nrows(), x.ncols());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax() / b.amax().max(1e-12)
    }

    #[test]
    fn quadratic_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_mat(&mut rng, 3, 4);
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let g = tape.backward(x.frobenius_sq()).unwrap().get(x);
        assert!(rel_err(&g, &(x0.clone() * 2.0)) < 1e-12);
        let num = fd(|m| m.norm_squared(), &x0, 1e-5);
        assert!(rel_err(&g, &num) < 1e-6);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let tape = Tape::new();
        let x = tape.param(DMatrix::from_element(2, 2, 1.0));
        let c = tape.constant(DMatrix::from_element(1, 1, 5.0));
        let grads = tape.backward(c.frobenius_sq()).unwrap();
        assert_eq!(grads.get(x), DMatrix::zeros(2, 2));
        assert!(grads.try_get(x).is_none());
    }

    #[test]
    fn two_paths_accumulate() {
        let tape = Tape::new();
        let x = tape.param(DMatrix::from_element(1, 1, 3.0));
        let y = x.scale(2.0).add(x.scale(5.0)).unwrap().sum();
        assert_eq!(tape.backward(y).unwrap().get(x)[(0, 0)], 7.0);
    }

    #[test]
    fn psd_solve_identity_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b0 = rand_mat(&mut rng, 3, 2);
        let g0 = rand_mat(&mut rng, 3, 2);
        let tape = Tape::new();
        let a = tape.constant(DMatrix::identity(3, 3));
        let b = tape.param(b0.clone());
        let x = a.psd_solve(b).unwrap();
        assert!((x.to_matrix() - &b0).amax() < 1e-15);
        let grads = tape.backward(x.dot_const(&g0).unwrap()).unwrap();
        assert!((grads.get(b) - g0).amax() < 1e-15);
    }

    #[test]
    fn psd_solve_rejects_indefinite() {
        let tape = Tape::new();
        let a = tape.constant(DMatrix::from_diagonal_element(2, 2, -1.0));
        let b = tape.constant(DMatrix::zeros(2, 1));
        assert!(matches!(a.psd_solve(b), Err(Error::SingularSystem)));
    }

    #[test]
    fn shape_errors() {
        let tape = Tape::new();
        let a = tape.param(DMatrix::zeros(2, 3));
        let b = tape.param(DMatrix::zeros(2, 3));
        assert!(matches!(a.matmul(b), Err(Error::ShapeMismatch(_))));
        assert!(a.add(b.transpose()).is_err());
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn nan_is_reported() {
        let tape = Tape::new();
        let a = tape.param(DMatrix::from_element(1, 1, f64::NAN));
        let l = a.frobenius_sq();
        assert!(matches!(tape.backward(l), Err(Error::NonFinite(_))));
    }

    #[test]
    fn abs_subgradient_zero_at_origin() {
        let tape = Tape::new();
        let x = tape.param(DMatrix::from_row_slice(1, 3, &[-2.0, 0.0, 3.0]));
        let g = tape.backward(x.abs().sum()).unwrap().get(x);
        assert_eq!(g.as_slice(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_chain_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mats: Vec<DMatrix<f64>> = (0..10).map(|_| rand_mat(&mut rng, 3, 3) * 0.9).collect();
        let x0 = rand_mat(&mut rng, 2, 3);
        let f = |x: &DMatrix<f64>| {
            let mut y = x.clone();
            for m in &mats {
                y = &y * m;
            }
            y.norm_squared()
        };
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let mut y = x;
        for m in &mats {
            y = y.matmul(tape.constant(m.clone())).unwrap();
        }
        let g = tape.backward(y.frobenius_sq()).unwrap().get(x);
        assert!(rel_err(&g, &fd(f, &x0, 1e-5)) < 1e-6);
    }

    #[test]
    fn composite_ops_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = rand_mat(&mut rng, 4, 3);
        let row = rand_mat(&mut rng, 1, 3);
        let c = rand_mat(&mut rng, 4, 3);
        let w = [0.5, -1.0, 2.0, 0.25];
        let f = |x: &DMatrix<f64>| {
            let tape = Tape::new();
            let v = tape.constant(x.clone());
            eval(&tape, v, &row, &c, &w).scalar()
        };
        fn eval<'t>(tape: &'t Tape, x: Var<'t>, row: &DMatrix<f64>, c: &DMatrix<f64>, w: &[f64]) -> Var<'t> {
            let h = x.add_row(tape.constant(row.clone())).unwrap().gelu();
            let h = h.scale_rows(w).unwrap().hadamard(x).unwrap();
            let r = x.relu().hadamard_const(c).unwrap();
            let s = hstack(&[h, r.abs()]).unwrap();
            let col = s.column(2).unwrap();
            let m = s.transpose().matmul(s).unwrap();
            m.frobenius_sq()
                .add(col.sum())
                .unwrap()
                .add(h.dot_const(c).unwrap())
                .unwrap()
        }
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let loss = eval(&tape, x, &row, &c, &w);
        let g = tape.backward(loss).unwrap().get(x);
        assert!(rel_err(&g, &fd(f, &x0, 1e-5)) < 1e-6);
    }

    #[test]
    fn psd_solve_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let l0 = rand_mat(&mut rng, 4, 6);
        let b0 = rand_mat(&mut rng, 4, 2);
        let f = |l: &DMatrix<f64>| {
            let a = l * l.transpose() + DMatrix::identity(4, 4) * 0.1;
            a.cholesky().unwrap().solve(&b0).norm_squared()
        };
        let tape = Tape::new();
        let l = tape.param(l0.clone());
        let a = l
            .matmul(l.transpose())
            .unwrap()
            .add_const(&(DMatrix::identity(4, 4) * 0.1))
            .unwrap();
        let x = a.psd_solve(tape.constant(b0.clone())).unwrap();
        let g = tape.backward(x.frobenius_sq()).unwrap().get(l);
        assert!(rel_err(&g, &fd(f, &l0, 1e-5)) < 1e-6);
    }

    #[test]
    fn standardization_ops_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_mat(&mut rng, 5, 3);
        let r0 = rand_mat(&mut rng, 1, 3);
        let c = rand_mat(&mut rng, 5, 3);
        fn eval<'t>(x: Var<'t>, r: Var<'t>, c: &DMatrix<f64>) -> Var<'t> {
            let ones = x.tape().constant(DMatrix::from_element(1, 5, 1.0));
            let var = ones
                .matmul(x.hadamard(x).unwrap())
                .unwrap()
                .add_const(&DMatrix::from_element(1, 3, 0.5))
                .unwrap();
            x.mul_row(var.powf(-0.5))
                .unwrap()
                .mul_row(r)
                .unwrap()
                .dot_const(c)
                .unwrap()
        }
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let r = tape.param(r0.clone());
        let grads = tape.backward(eval(x, r, &c)).unwrap();
        let fx = |m: &DMatrix<f64>| {
            let t = Tape::new();
            eval(t.constant(m.clone()), t.constant(r0.clone()), &c).scalar()
        };
        let fr = |m: &DMatrix<f64>| {
            let t = Tape::new();
            eval(t.constant(x0.clone()), t.constant(m.clone()), &c).scalar()
        };
        assert!(rel_err(&grads.get(x), &fd(fx, &x0, 1e-5)) < 1e-6);
        assert!(rel_err(&grads.get(r), &fd(fr, &r0, 1e-5)) < 1e-6);
    }

    #[test]
    fn mul_row_rejects_bad_shape() {
        let tape = Tape::new();
        let a = tape.param(DMatrix::zeros(2, 3));
        assert!(a.mul_row(tape.param(DMatrix::zeros(1, 2))).is_err());
        assert!(a.mul_row(tape.param(DMatrix::zeros(2, 3))).is_err());
    }
}
