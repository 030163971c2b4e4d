//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and the ids of its operands. Creation order is a topological order, so
//! [`Graph::backward`] walks the tape once from the end.
//!
//! Row vectors (`1 × n`) are the vector convention; batches are stacked as
//! rows.

use std::rc::Rc;

use nalgebra::DMatrix;
use thiserror::Error;

pub type Matrix = DMatrix<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("backward requires a scalar root, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("{op}: index {index} out of range for {len} columns")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which primitive produced a node.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// `a (m×n) + b (1×n)` broadcast over rows.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Multiply column `j` of the operand by a constant `c[j]`.
    ScaleCols(NodeId, Rc<Vec<f64>>),
    /// Multiply row `i` of `a` by the scalar `w[i]` (`w` is `m×1`).
    ScaleRows(NodeId, NodeId),
    Transpose(NodeId),
    GatherCols(NodeId, Rc<Vec<usize>>),
    Elu(NodeId),
    SoftmaxRows(NodeId),
    SumSq(NodeId),
    Sum(NodeId),
    /// Row `i` of the output is `(M_i · a_iᵀ)ᵀ` with constant matrices `M_i`.
    RowwiseLinear(NodeId, Rc<Vec<Matrix>>),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub value: Matrix,
    pub op: Op,
    grad: Option<Matrix>,
}

impl Node {
    pub fn grad(&self) -> Option<&Matrix> {
        self.grad.as_ref()
    }
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape(m: &Matrix) -> (usize, usize) {
    m.shape()
}

fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_deriv(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row /= total;
    }
    out
}

/// Elementwise ELU on a plain matrix.
pub fn elu_matrix(x: &Matrix) -> Matrix {
    x.map(elu)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Adds a leaf. Parameters and constants are both leaves; whether a
    /// leaf is trainable is decided by the caller reading its gradient.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[(0, 0)]
    }

    /// Gradient of the last backward root w.r.t. `id`; zeros if the node
    /// did not influence the root.
    pub fn grad(&self, id: NodeId) -> Matrix {
        let node = &self.nodes[id.0];
        match &node.grad {
            Some(g) => g.clone(),
            None => Matrix::zeros(node.value.nrows(), node.value.ncols()),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(AutodiffError::Shape {
                op: "matmul",
                lhs: shape(va),
                rhs: shape(vb),
            });
        }
        let v = va * vb;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(AutodiffError::Shape {
                op: "add",
                lhs: shape(va),
                rhs: shape(vb),
            });
        }
        let v = va + vb;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(AutodiffError::Shape {
                op: "sub",
                lhs: shape(va),
                rhs: shape(vb),
            });
        }
        let v = va - vb;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(AutodiffError::Shape {
                op: "add_row",
                lhs: shape(va),
                rhs: shape(vr),
            });
        }
        let mut v = va.clone();
        for mut r in v.row_iter_mut() {
            r += vr;
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn scale_cols(&mut self, a: NodeId, factors: Rc<Vec<f64>>) -> Result<NodeId> {
        let va = self.value(a);
        if factors.len() != va.ncols() {
            return Err(AutodiffError::Shape {
                op: "scale_cols",
                lhs: shape(va),
                rhs: (1, factors.len()),
            });
        }
        let mut v = va.clone();
        for (j, mut col) in v.column_iter_mut().enumerate() {
            col *= factors[j];
        }
        Ok(self.push(v, Op::ScaleCols(a, factors)))
    }

    pub fn scale_rows(&mut self, a: NodeId, weights: NodeId) -> Result<NodeId> {
        let (va, vw) = (self.value(a), self.value(weights));
        if vw.ncols() != 1 || vw.nrows() != va.nrows() {
            return Err(AutodiffError::Shape {
                op: "scale_rows",
                lhs: shape(va),
                rhs: shape(vw),
            });
        }
        let mut v = va.clone();
        for (i, mut row) in v.row_iter_mut().enumerate() {
            row *= vw[(i, 0)];
        }
        Ok(self.push(v, Op::ScaleRows(a, weights)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn gather_cols(&mut self, a: NodeId, cols: Rc<Vec<usize>>) -> Result<NodeId> {
        let va = self.value(a);
        if let Some(&bad) = cols.iter().find(|&&c| c >= va.ncols()) {
            return Err(AutodiffError::Index {
                op: "gather_cols",
                index: bad,
                len: va.ncols(),
            });
        }
        let v = va.select_columns(cols.iter());
        Ok(self.push(v, Op::GatherCols(a, cols)))
    }

    /// Contiguous column slice, expressed as a gather.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.gather_cols(a, Rc::new((start..start + len).collect()))
    }

    pub fn column(&mut self, a: NodeId, j: usize) -> Result<NodeId> {
        self.gather_cols(a, Rc::new(vec![j]))
    }

    pub fn elu(&mut self, x: NodeId) -> NodeId {
        let v = elu_matrix(self.value(x));
        self.push(v, Op::Elu(x))
    }

    /// Softmax along each row. A single vector is a `1×K` row.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.ncols() == 0 || vx.nrows() == 0 {
            return Err(AutodiffError::Empty { op: "softmax" });
        }
        let v = softmax_rows(vx);
        Ok(self.push(v, Op::SoftmaxRows(x)))
    }

    pub fn sum_sq(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().map(|v| v * v).sum::<f64>();
        self.push(Matrix::from_element(1, 1, s), Op::SumSq(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Matrix::from_element(1, 1, s), Op::Sum(x))
    }

    pub fn rowwise_linear(&mut self, a: NodeId, maps: Rc<Vec<Matrix>>) -> Result<NodeId> {
        let va = self.value(a);
        if maps.len() != va.nrows() {
            return Err(AutodiffError::Shape {
                op: "rowwise_linear",
                lhs: shape(va),
                rhs: (maps.len(), 0),
            });
        }
        let out_cols = maps.first().map(|m| m.nrows()).unwrap_or(0);
        let mut v = Matrix::zeros(va.nrows(), out_cols);
        for (i, m) in maps.iter().enumerate() {
            if m.ncols() != va.ncols() || m.nrows() != out_cols {
                return Err(AutodiffError::Shape {
                    op: "rowwise_linear",
                    lhs: shape(va),
                    rhs: shape(m),
                });
            }
            let r = m * va.row(i).transpose();
            v.row_mut(i).copy_from(&r.transpose());
        }
        Ok(self.push(v, Op::RowwiseLinear(a, maps)))
    }

    fn accumulate(&mut self, id: NodeId, g: Matrix) {
        let slot = &mut self.nodes[id.0].grad;
        match slot {
            Some(existing) => *existing += g,
            None => *slot = Some(g),
        }
    }

    /// Back-propagates from a scalar root. All gradient slots are cleared
    /// first, so repeated calls never accumulate across passes.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let (rows, cols) = self.value(root).shape();
        if rows != 1 || cols != 1 {
            return Err(AutodiffError::NonScalarRoot { rows, cols });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(Matrix::from_element(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = &g * self.value(b).transpose();
                    let gb = self.value(a).transpose() * &g;
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g.clone());
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, -&g);
                }
                Op::AddRow(a, row) => {
                    let gr = Matrix::from_fn(1, g.ncols(), |_, j| g.column(j).sum());
                    self.accumulate(a, g.clone());
                    self.accumulate(row, gr);
                }
                Op::Scale(a, c) => self.accumulate(a, &g * c),
                Op::ScaleCols(a, factors) => {
                    let mut ga = g.clone();
                    for (j, mut col) in ga.column_iter_mut().enumerate() {
                        col *= factors[j];
                    }
                    self.accumulate(a, ga);
                }
                Op::ScaleRows(a, w) => {
                    let va = self.value(a);
                    let vw = self.value(w);
                    let mut ga = g.clone();
                    let mut gw = Matrix::zeros(vw.nrows(), 1);
                    for i in 0..g.nrows() {
                        gw[(i, 0)] = g.row(i).dot(&va.row(i));
                        let mut r = ga.row_mut(i);
                        r *= vw[(i, 0)];
                    }
                    self.accumulate(a, ga);
                    self.accumulate(w, gw);
                }
                Op::Transpose(a) => self.accumulate(a, g.transpose()),
                Op::GatherCols(a, cols) => {
                    let va = self.value(a);
                    let mut ga = Matrix::zeros(va.nrows(), va.ncols());
                    for (k, &c) in cols.iter().enumerate() {
                        let mut dst = ga.column_mut(c);
                        dst += g.column(k);
                    }
                    self.accumulate(a, ga);
                }
                Op::Elu(x) => {
                    let dx = self.value(x).map(elu_deriv).component_mul(&g);
                    self.accumulate(x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.nodes[idx].value;
                    let mut gx = Matrix::zeros(y.nrows(), y.ncols());
                    for i in 0..y.nrows() {
                        let dot = g.row(i).dot(&y.row(i));
                        for j in 0..y.ncols() {
                            gx[(i, j)] = y[(i, j)] * (g[(i, j)] - dot);
                        }
                    }
                    self.accumulate(x, gx);
                }
                Op::SumSq(x) => {
                    let gx = self.value(x) * (2.0 * g[(0, 0)]);
                    self.accumulate(x, gx);
                }
                Op::Sum(x) => {
                    let vx = self.value(x);
                    let gx = Matrix::from_element(vx.nrows(), vx.ncols(), g[(0, 0)]);
                    self.accumulate(x, gx);
                }
                Op::RowwiseLinear(a, maps) => {
                    let va = self.value(a);
                    let mut ga = Matrix::zeros(va.nrows(), va.ncols());
                    for (i, m) in maps.iter().enumerate() {
                        let r = m.transpose() * g.row(i).transpose();
                        ga.row_mut(i).copy_from(&r.transpose());
                    }
                    self.accumulate(a, ga);
                }
            }
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference gradient of `f` at `x`.
    fn fd_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let eps = 1e-6;
        let mut g = Matrix::zeros(x.nrows(), x.ncols());
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += eps;
            xm[i] -= eps;
            g[i] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    fn max_rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let m = Matrix::from_row_slice(3, 3, &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let i = g.leaf(Matrix::identity(3, 3));
        let mm = g.leaf(m.clone());
        let p = g.matmul(i, mm).unwrap();
        assert_eq!(g.value(p), &m);

        let a = g.leaf(Matrix::from_row_slice(2, 2, &[1., 2., 3., 4.]));
        let b = g.leaf(Matrix::from_row_slice(2, 1, &[1., 1.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &Matrix::from_row_slice(2, 1, &[3., 7.]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Matrix::zeros(2, 3));
        let b = g.leaf(Matrix::zeros(2, 3));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::Shape {
                op: "matmul",
                lhs: (2, 3),
                rhs: (2, 3)
            }
        );
        assert!(err.to_string().contains("(2, 3)"));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 4, 5);
        let b = random(&mut rng, 5, 3);
        let mut g = Graph::new();
        let na = g.leaf(a.clone());
        let nb = g.leaf(b.clone());
        let p = g.matmul(na, nb).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        let fd_a = fd_grad(&a, |x| (x * &b).sum());
        let fd_b = fd_grad(&b, |x| (&a * x).sum());
        assert!(max_rel_err(&g.grad(na), &fd_a) < 1e-6);
        assert!(max_rel_err(&g.grad(nb), &fd_b) < 1e-6);
    }

    #[test]
    fn elu_values() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::from_row_slice(1, 3, &[0.0, 1.0, -2.0]));
        let y = g.elu(x);
        let v = g.value(y);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1.0);
        assert!((v[2] - ((-2.0f64).exp() - 1.0)).abs() < 1e-15);
        assert!((v[2] + 0.8647).abs() < 1e-4);
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::zeros(1, 4));
        let y = g.softmax(x).unwrap();
        for v in g.value(y).iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x = g.leaf(Matrix::from_row_slice(1, 3, &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let y = g.softmax(x).unwrap();
        let expect = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (v, e) in g.value(y).iter().zip(expect) {
            assert!((v - e).abs() < 1e-15);
        }
        let empty = g.leaf(Matrix::zeros(1, 0));
        assert_eq!(
            g.softmax(empty).unwrap_err(),
            AutodiffError::Empty { op: "softmax" }
        );
    }

    #[test]
    fn sum_sq_values_and_gradient() {
        let mut g = Graph::new();
        let z = g.leaf(Matrix::zeros(2, 2));
        let sz = g.sum_sq(z);
        assert_eq!(g.scalar(sz), 0.0);
        let x = g.leaf(Matrix::from_row_slice(1, 2, &[3.0, 4.0]));
        let s = g.sum_sq(x);
        assert_eq!(g.scalar(s), 25.0);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), Matrix::from_row_slice(1, 2, &[6.0, 8.0]));
    }

    #[test]
    fn backward_leaf_gradients_and_unused_parameter() {
        let mut g = Graph::new();
        let w = g.leaf(Matrix::from_row_slice(1, 2, &[1.0, -1.0]));
        let p = g.leaf(Matrix::from_row_slice(1, 2, &[5.0, 5.0]));
        let loss = g.sum_sq(w);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w), Matrix::from_row_slice(1, 2, &[2.0, -2.0]));
        assert_eq!(g.grad(p), Matrix::zeros(1, 2));
        // a second pass does not accumulate
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w), Matrix::from_row_slice(1, 2, &[2.0, -2.0]));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::zeros(2, 1));
        assert_eq!(
            g.backward(x).unwrap_err(),
            AutodiffError::NonScalarRoot { rows: 2, cols: 1 }
        );
    }

    #[test]
    fn reused_node_accumulates_both_paths() {
        // f = xᵀx + sum(x)  =>  ∇f = 2x + 1
        let x0 = Matrix::from_row_slice(3, 1, &[0.5, -1.5, 2.0]);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let xt = g.transpose(x);
        let quad = g.matmul(xt, x).unwrap();
        let lin = g.sum(x);
        let f = g.add(quad, lin).unwrap();
        g.backward(f).unwrap();
        let expect = x0.map(|v| 2.0 * v + 1.0);
        assert_eq!(g.grad(x), expect);
    }

    /// Every primitive's reverse-mode rule against central differences.
    #[test]
    fn primitive_vjps_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = random(&mut rng, 3, 4);
        let row = random(&mut rng, 1, 4);
        let w = random(&mut rng, 3, 1);
        let proj = random(&mut rng, 4, 2);
        let maps: Rc<Vec<Matrix>> = Rc::new((0..3).map(|_| random(&mut rng, 2, 4)).collect());
        let factors = Rc::new(vec![0.5, -2.0, 1.5, 3.0]);
        let cols = Rc::new(vec![3usize, 0, 3, 1]);

        type Build = Box<dyn Fn(&mut Graph, NodeId) -> NodeId>;
        let cases: Vec<(&str, Build)> = vec![
            ("elu", Box::new(|g: &mut Graph, x| g.elu(x))),
            ("softmax", Box::new(|g: &mut Graph, x| g.softmax(x).unwrap())),
            ("transpose", Box::new(|g: &mut Graph, x| g.transpose(x))),
            ("scale", Box::new(|g: &mut Graph, x| g.scale(x, -1.7))),
            ("add_self", Box::new(|g: &mut Graph, x| g.add(x, x).unwrap())),
            ("sub_self_scaled", {
                Box::new(|g: &mut Graph, x| {
                    let y = g.scale(x, 3.0);
                    g.sub(y, x).unwrap()
                })
            }),
            ("add_row", {
                let row = row.clone();
                Box::new(move |g: &mut Graph, x| {
                    let r = g.leaf(row.clone());
                    g.add_row(x, r).unwrap()
                })
            }),
            ("scale_cols", {
                let f = factors.clone();
                Box::new(move |g: &mut Graph, x| g.scale_cols(x, f.clone()).unwrap())
            }),
            ("scale_rows", {
                let w = w.clone();
                Box::new(move |g: &mut Graph, x| {
                    let wn = g.leaf(w.clone());
                    g.scale_rows(x, wn).unwrap()
                })
            }),
            ("scale_rows_by_column_of_self", {
                Box::new(|g: &mut Graph, x| {
                    let c = g.column(x, 2).unwrap();
                    g.scale_rows(x, c).unwrap()
                })
            }),
            ("gather_cols", {
                let c = cols.clone();
                Box::new(move |g: &mut Graph, x| g.gather_cols(x, c.clone()).unwrap())
            }),
            ("matmul_right", {
                let p = proj.clone();
                Box::new(move |g: &mut Graph, x| {
                    let pn = g.leaf(p.clone());
                    g.matmul(x, pn).unwrap()
                })
            }),
            ("rowwise_linear", {
                let m = maps.clone();
                Box::new(move |g: &mut Graph, x| g.rowwise_linear(x, m.clone()).unwrap())
            }),
            ("sum_sq", Box::new(|g: &mut Graph, x| g.sum_sq(x))),
        ];

        let probe_seed = random(&mut rng, 4, 4);
        for (name, build) in &cases {
            // Contract the output with a fixed random probe so every output
            // element contributes to the scalar.
            let eval = |x: &Matrix| {
                let mut g = Graph::new();
                let xn = g.leaf(x.clone());
                let y = build(&mut g, xn);
                let v = g.value(y);
                v.iter()
                    .enumerate()
                    .map(|(k, e)| e * probe_seed[k % probe_seed.len()])
                    .sum::<f64>()
            };
            let mut g = Graph::new();
            let xn = g.leaf(x0.clone());
            let y = build(&mut g, xn);
            let (r, c) = g.value(y).shape();
            let probe = Matrix::from_fn(r, c, |i, j| probe_seed[(i + j * r) % probe_seed.len()]);
            let pn = g.leaf(probe);
            let prod = g.scale_rows_elementwise_for_test(y, pn);
            g.backward(prod).unwrap();
            let fd = fd_grad(&x0, eval);
            let err = max_rel_err(&g.grad(xn), &fd);
            assert!(err < 1e-6, "{name}: rel err {err}");
        }
    }

    impl Graph {
        /// `sum(y ⊙ p)` built from primitives: diag of yᵀp summed.
        fn scale_rows_elementwise_for_test(&mut self, y: NodeId, p: NodeId) -> NodeId {
            let (r, c) = self.value(y).shape();
            let mut total = None;
            for j in 0..c {
                let yj = self.column(y, j).unwrap();
                let pj = self.column(p, j).unwrap();
                let yt = self.transpose(yj);
                let d = self.matmul(yt, pj).unwrap();
                total = Some(match total {
                    None => d,
                    Some(t) => self.add(t, d).unwrap(),
                });
            }
            let _ = r;
            total.unwrap()
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_is_convex_and_shift_invariant(
                xs in proptest::collection::vec(-30.0f64..30.0, 1..12),
                shift in -50.0f64..50.0,
            ) {
                let x = Matrix::from_row_slice(1, xs.len(), &xs);
                let y = softmax_rows(&x);
                let total: f64 = y.iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                prop_assert!(y.iter().all(|&v| v > 0.0 && v <= 1.0));
                let ys = softmax_rows(&x.map(|v| v + shift));
                for (a, b) in y.iter().zip(ys.iter()) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }
}
