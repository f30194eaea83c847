//! Reverse-mode differentiation over a fixed set of matrix primitives.
//!
//! Values are evaluated eagerly when an operation is recorded; the tape
//! keeps every node in creation order so that [`Tape::backward`] can walk
//! it once in reverse. Every value is a 2-D array: scalars are `1×1`,
//! vectors are single rows or columns.
//!
//! ```
//! use hydro_core::adgrad::Tape;
//! use ndarray::array;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(array![[1.0, -2.0, 3.0]]);
//! let sq = tape.mul(x, x).unwrap();
//! let half = tape.affine(sq, 0.5, 0.0);
//! let loss = tape.sum(half);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &array![[1.0, -2.0, 3.0]]);
//! ```

use ndarray::{s, Array1, Array2, Axis, Zip};

use crate::error::{HydroError, Result};
use crate::linalg;
use crate::manifold::PoincareBall;

/// Degrees at or below this value are treated as absorbing nodes by
/// [`Tape::sym_normalize`].
pub const ZERO_DEGREE: f64 = 1e-12;

/// Two eigenvalues closer than this are reported as a degenerate λ₂.
pub const LAMBDA2_DEGENERACY_TOL: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Ln(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    RowSqNorm(Var),
    SelectRows(Var, Vec<usize>),
    Column(Var, usize),
    RowRange(Var, usize),
    Reshape(Var),
    SoftmaxRows(Var),
    Symmetrize(Var),
    ZeroDiag(Var),
    AddIdentity(Var),
    PairConcat(Var),
    PairSum(Var, Var),
    SymNormalize {
        a: Var,
        inv_sqrt: Array1<f64>,
        absorbing: Vec<bool>,
    },
    Standardize {
        a: Var,
        std: Array1<f64>,
        floored: Vec<bool>,
    },
    Lambda2 {
        a: Var,
        v2: Array1<f64>,
    },
    Exp0Rows(Var, PoincareBall),
    Log0Rows(Var, PoincareBall),
    ProjectRows(Var, PoincareBall),
    MobiusAddRows(Var, Var, PoincareBall),
    ExpMapRows(Var, Var, PoincareBall),
    LogMapRows(Var, Var, PoincareBall),
    LiftScale(Var, PoincareBall),
    CosineMatch(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss (or is a constant).
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Self::get`] but returns zeros of the given shape when absent.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

/// Recording of primitive applications, evaluated eagerly.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    degenerate_lambda2: usize,
}

fn shape_of(a: &Array2<f64>) -> (usize, usize) {
    a.dim()
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(HydroError::shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of λ₂ evaluations that hit a repeated eigenvalue.
    pub fn degenerate_lambda2_events(&self) -> usize {
        self.degenerate_lambda2
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// The value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input; no gradient flows into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let v = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let v = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let v = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// `scale·a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).mapv(|x| scale * x + shift);
        let ng = self.needs(a);
        self.push(v, Op::Affine(a, scale), ng)
    }

    /// Adds a `1×d` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, d) = shape_of(self.value(a));
        if self.value(row).dim() != (1, d) {
            return Err(HydroError::shape(format!(
                "add_row: row {:?} for matrix with {d} columns",
                self.value(row).dim()
            )));
        }
        let v = self.value(a) + self.value(row);
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(v, Op::AddRow(a, row), ng))
    }

    /// Multiplies every row of `a` elementwise by a `1×d` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, d) = shape_of(self.value(a));
        if self.value(row).dim() != (1, d) {
            return Err(HydroError::shape(format!(
                "mul_row: row {:?} for matrix with {d} columns",
                self.value(row).dim()
            )));
        }
        let v = self.value(a) * self.value(row);
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(v, Op::MulRow(a, row), ng))
    }

    /// Scales row `i` of `a` by entry `i` of an `n×1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (n, _) = shape_of(self.value(a));
        if self.value(col).dim() != (n, 1) {
            return Err(HydroError::shape(format!(
                "mul_col: column {:?} for matrix with {n} rows",
                self.value(col).dim()
            )));
        }
        let v = self.value(a) * self.value(col);
        let ng = self.needs(a) || self.needs(col);
        Ok(self.push(v, Op::MulCol(a, col), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, k) = shape_of(self.value(a));
        let (k2, _) = shape_of(self.value(b));
        if k != k2 {
            return Err(HydroError::shape(format!(
                "matmul: {:?} × {:?}",
                self.value(a).dim(),
                self.value(b).dim()
            )));
        }
        let v = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let ng = self.needs(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), ng)
    }

    /// Natural logarithm; nonpositive entries give a domain error.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|x| !(**x > 0.0)) {
            return Err(HydroError::domain(format!("ln of {x}")));
        }
        let v = self.value(a).mapv(f64::ln);
        let ng = self.needs(a);
        Ok(self.push(v, Op::Ln(a), ng))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        let ng = self.needs(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.needs(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Array2::from_elem((1, 1), m.sum() / m.len().max(1) as f64);
        let ng = self.needs(a);
        self.push(v, Op::Mean(a), ng)
    }

    /// Squared Euclidean norm of every row, as an `n×1` column.
    pub fn row_sq_norm(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = m.map_axis(Axis(1), |r| r.dot(&r)).insert_axis(Axis(1));
        let ng = self.needs(a);
        self.push(v, Op::RowSqNorm(a), ng)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let m = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= m.nrows()) {
            return Err(HydroError::shape(format!(
                "select_rows: row {bad} out of range for {} rows",
                m.nrows()
            )));
        }
        let v = m.select(Axis(0), rows);
        let ng = self.needs(a);
        Ok(self.push(v, Op::SelectRows(a, rows.to_vec()), ng))
    }

    /// Column `j` as an `n×1` matrix.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let m = self.value(a);
        if j >= m.ncols() {
            return Err(HydroError::shape(format!(
                "column {j} out of range for {} columns",
                m.ncols()
            )));
        }
        let v = m.slice(s![.., j..j + 1]).to_owned();
        let ng = self.needs(a);
        Ok(self.push(v, Op::Column(a, j), ng))
    }

    /// Rows `lo..hi` of `a`.
    pub fn row_range(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let m = self.value(a);
        if lo > hi || hi > m.nrows() {
            return Err(HydroError::shape(format!(
                "row_range {lo}..{hi} out of range for {} rows",
                m.nrows()
            )));
        }
        let v = m.slice(s![lo..hi, ..]).to_owned();
        let ng = self.needs(a);
        Ok(self.push(v, Op::RowRange(a, lo), ng))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let m = self.value(a);
        if m.len() != rows * cols {
            return Err(HydroError::shape(format!(
                "reshape: {:?} into {rows}×{cols}",
                m.dim()
            )));
        }
        let flat: Vec<f64> = m.iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("length checked");
        let ng = self.needs(a);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).to_owned();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let total = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        let ng = self.needs(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    fn square(&self, a: Var, what: &str) -> Result<usize> {
        let (r, c) = self.value(a).dim();
        if r != c {
            return Err(HydroError::shape(format!(
                "{what}: expected square, got {r}×{c}"
            )));
        }
        Ok(r)
    }

    /// `(a + aᵀ)/2`.
    pub fn symmetrize(&mut self, a: Var) -> Result<Var> {
        self.square(a, "symmetrize")?;
        let m = self.value(a);
        let v = (m + &m.t()) * 0.5;
        let ng = self.needs(a);
        Ok(self.push(v, Op::Symmetrize(a), ng))
    }

    pub fn zero_diag(&mut self, a: Var) -> Result<Var> {
        let n = self.square(a, "zero_diag")?;
        let mut v = self.value(a).to_owned();
        for i in 0..n {
            v[[i, i]] = 0.0;
        }
        let ng = self.needs(a);
        Ok(self.push(v, Op::ZeroDiag(a), ng))
    }

    /// `a + alpha·I`.
    pub fn add_identity(&mut self, a: Var, alpha: f64) -> Result<Var> {
        let n = self.square(a, "add_identity")?;
        let mut v = self.value(a).to_owned();
        for i in 0..n {
            v[[i, i]] += alpha;
        }
        let ng = self.needs(a);
        Ok(self.push(v, Op::AddIdentity(a), ng))
    }

    /// For an `n×d` matrix, the `n²×2d` matrix whose row `i·n + j` is the
    /// concatenation of rows `i` and `j`.
    pub fn pair_concat(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let (n, d) = m.dim();
        let mut v = Array2::zeros((n * n, 2 * d));
        for i in 0..n {
            for j in 0..n {
                let mut row = v.row_mut(i * n + j);
                row.slice_mut(s![..d]).assign(&m.row(i));
                row.slice_mut(s![d..]).assign(&m.row(j));
            }
        }
        let ng = self.needs(a);
        self.push(v, Op::PairConcat(a), ng)
    }

    /// For `n×h` inputs `p` and `q`, the `n²×h` matrix with row
    /// `i·n + j` equal to `p_i + q_j`.
    pub fn pair_sum(&mut self, p: Var, q: Var) -> Result<Var> {
        same_shape(self.value(p), self.value(q), "pair_sum")?;
        let (n, h) = self.value(p).dim();
        let mut v = Array2::zeros((n * n, h));
        {
            let pm = self.value(p);
            let qm = self.value(q);
            for i in 0..n {
                for j in 0..n {
                    let mut row = v.row_mut(i * n + j);
                    Zip::from(&mut row)
                        .and(pm.row(i))
                        .and(qm.row(j))
                        .for_each(|o, &x, &y| *o = x + y);
                }
            }
        }
        let ng = self.needs(p) || self.needs(q);
        Ok(self.push(v, Op::PairSum(p, q), ng))
    }

    /// `D^{-1/2} A D^{-1/2}` with `D` the row sums of `A`. Rows whose degree
    /// is at most [`ZERO_DEGREE`] are absorbing: their diagonal entry is 1
    /// and every other entry in their row and column is 0.
    pub fn sym_normalize(&mut self, a: Var) -> Result<Var> {
        let n = self.square(a, "sym_normalize")?;
        let m = self.value(a);
        if m.iter().any(|&x| x < 0.0) {
            return Err(HydroError::domain("sym_normalize: negative entries"));
        }
        let deg = m.sum_axis(Axis(1));
        let absorbing: Vec<bool> = deg.iter().map(|&d| d <= ZERO_DEGREE).collect();
        let inv_sqrt: Array1<f64> = deg
            .iter()
            .zip(&absorbing)
            .map(|(&d, &z)| if z { 0.0 } else { 1.0 / d.sqrt() })
            .collect();
        let mut v = Array2::zeros((n, n));
        for i in 0..n {
            if absorbing[i] {
                v[[i, i]] = 1.0;
                continue;
            }
            for j in 0..n {
                if !absorbing[j] {
                    v[[i, j]] = inv_sqrt[i] * m[[i, j]] * inv_sqrt[j];
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(
            v,
            Op::SymNormalize {
                a,
                inv_sqrt,
                absorbing,
            },
            ng,
        ))
    }

    /// Per-column standardization `(x − mean)/σ` where the variance is
    /// floored at `var_floor`.
    pub fn standardize(&mut self, a: Var, var_floor: f64) -> Result<Var> {
        let m = self.value(a);
        let n = m.nrows();
        if n == 0 {
            return Err(HydroError::shape("standardize: empty batch"));
        }
        let mean = m.mean_axis(Axis(0)).expect("non-empty");
        let centered = m - &mean;
        let var = centered
            .mapv(|x| x * x)
            .mean_axis(Axis(0))
            .expect("non-empty");
        let floored: Vec<bool> = var.iter().map(|&v| v <= var_floor).collect();
        let std: Array1<f64> = var.mapv(|v| v.max(var_floor).sqrt());
        let v = centered / &std;
        let ng = self.needs(a);
        Ok(self.push(v, Op::Standardize { a, std, floored }, ng))
    }

    /// Second-largest eigenvalue of a symmetric matrix, as a `1×1` node.
    /// The adjoint is `v₂v₂ᵀ` for the unit eigenvector the solver returns;
    /// on a repeated eigenvalue this is a subgradient.
    pub fn lambda2(&mut self, a: Var) -> Result<Var> {
        let n = self.square(a, "lambda2")?;
        if n < 2 {
            return Err(HydroError::shape("lambda2: need at least a 2×2 matrix"));
        }
        let m = self.value(a);
        linalg::require_symmetric(m, 1e-9, "lambda2")?;
        let (vals, vecs) = linalg::sym_eigen(m);
        let l2 = vals[n - 2];
        let degenerate = (vals[n - 1] - l2).abs() < LAMBDA2_DEGENERACY_TOL
            || (n > 2 && (l2 - vals[n - 3]).abs() < LAMBDA2_DEGENERACY_TOL);
        if degenerate {
            self.degenerate_lambda2 += 1;
            log::debug!("lambda2: repeated eigenvalue {l2:.12}; using solver's eigenvector");
        }
        let v2 = vecs.column(n - 2).to_owned();
        let ng = self.needs(a);
        Ok(self.push(Array2::from_elem((1, 1), l2), Op::Lambda2 { a, v2 }, ng))
    }

    fn map_rows(&self, a: Var, f: impl Fn(ndarray::ArrayView1<f64>) -> Array1<f64>) -> Array2<f64> {
        let m = self.value(a);
        let mut out = Array2::zeros(m.dim());
        for (mut o, r) in out.rows_mut().into_iter().zip(m.rows()) {
            o.assign(&f(r));
        }
        out
    }

    /// Exponential map at the origin applied to every row.
    pub fn exp0_rows(&mut self, a: Var, ball: PoincareBall) -> Var {
        let v = self.map_rows(a, |r| ball.expmap0_raw(r));
        let ng = self.needs(a);
        self.push(v, Op::Exp0Rows(a, ball), ng)
    }

    /// Logarithmic map at the origin applied to every row.
    pub fn log0_rows(&mut self, a: Var, ball: PoincareBall) -> Var {
        let v = self.map_rows(a, |r| ball.logmap0_raw(r));
        let ng = self.needs(a);
        self.push(v, Op::Log0Rows(a, ball), ng)
    }

    /// Boundary projection applied to every row.
    pub fn project_rows(&mut self, a: Var, ball: PoincareBall) -> Var {
        let v = self.map_rows(a, |r| ball.project_raw(r));
        let ng = self.needs(a);
        self.push(v, Op::ProjectRows(a, ball), ng)
    }

    fn broadcast_pair(&self, x: Var, y: Var, what: &str) -> Result<()> {
        let (xr, xc) = self.value(x).dim();
        let (yr, yc) = self.value(y).dim();
        if xc != yc || !(xr == yr || xr == 1) {
            return Err(HydroError::shape(format!(
                "{what}: {:?} with {:?}",
                (xr, xc),
                (yr, yc)
            )));
        }
        Ok(())
    }

    fn zip_rows(
        &self,
        x: Var,
        y: Var,
        f: impl Fn(ndarray::ArrayView1<f64>, ndarray::ArrayView1<f64>) -> Array1<f64>,
    ) -> Array2<f64> {
        let xm = self.value(x);
        let ym = self.value(y);
        let mut out = Array2::zeros(ym.dim());
        for (i, mut o) in out.rows_mut().into_iter().enumerate() {
            let xi = if xm.nrows() == 1 { 0 } else { i };
            o.assign(&f(xm.row(xi), ym.row(i)));
        }
        out
    }

    /// Row-wise Möbius addition `x_i ⊕ y_i`; a single-row `x` is broadcast.
    pub fn mobius_add_rows(&mut self, x: Var, y: Var, ball: PoincareBall) -> Result<Var> {
        self.broadcast_pair(x, y, "mobius_add_rows")?;
        let v = self.zip_rows(x, y, |a, b| ball.mobius_add_raw(a, b));
        let ng = self.needs(x) || self.needs(y);
        Ok(self.push(v, Op::MobiusAddRows(x, y, ball), ng))
    }

    /// Row-wise `exp_{p_i}(u_i)`; a single-row `p` is broadcast.
    pub fn exp_map_rows(&mut self, p: Var, u: Var, ball: PoincareBall) -> Result<Var> {
        self.broadcast_pair(p, u, "exp_map_rows")?;
        let v = self.zip_rows(p, u, |a, b| ball.expmap_raw(a, b));
        let ng = self.needs(p) || self.needs(u);
        Ok(self.push(v, Op::ExpMapRows(p, u, ball), ng))
    }

    /// Row-wise `log_{p_i}(q_i)`; a single-row `p` is broadcast.
    pub fn log_map_rows(&mut self, p: Var, q: Var, ball: PoincareBall) -> Result<Var> {
        self.broadcast_pair(p, q, "log_map_rows")?;
        let v = self.zip_rows(p, q, |a, b| ball.logmap_raw(a, b));
        let ng = self.needs(p) || self.needs(q);
        Ok(self.push(v, Op::LogMapRows(p, q, ball), ng))
    }

    /// Given squared norms `‖e‖²`, the factor `f` with
    /// `log₀(project(exp₀(e))) = f·e`: 1 inside the representable radius and
    /// `R/‖e‖` beyond it, `R = artanh(√(1−ε))/√c`.
    pub fn lift_scale(&mut self, sq_norms: Var, ball: PoincareBall) -> Var {
        let r = lift_radius(&ball);
        let v = self.value(sq_norms).mapv(|q| {
            let n = q.max(0.0).sqrt();
            if n < r {
                1.0
            } else {
                r / n
            }
        });
        let ng = self.needs(sq_norms);
        self.push(v, Op::LiftScale(sq_norms, ball), ng)
    }

    /// `Σ_columns (1 − cos(a_col, b_col))`; a column where either side has
    /// zero norm contributes 0.
    pub fn cosine_match(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "cosine_match")?;
        let (am, bm) = (self.value(a), self.value(b));
        let mut total = 0.0;
        for (ca, cb) in am.columns().into_iter().zip(bm.columns()) {
            let na = ca.dot(&ca).sqrt();
            let nb = cb.dot(&cb).sqrt();
            if na > COS_ZERO && nb > COS_ZERO {
                total += 1.0 - ca.dot(&cb) / (na * nb);
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Array2::from_elem((1, 1), total), Op::CosineMatch(a, b), ng))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).dim() != (1, 1) {
            return Err(HydroError::contract(format!(
                "backward: loss must be 1×1, got {:?}",
                self.value(loss).dim()
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::Affine(a, scale) => self.accumulate(grads, *a, g * *scale),
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g * self.value(*row));
                }
                if self.needs(*row) {
                    let gr = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::MulCol(a, col) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g * self.value(*col));
                }
                if self.needs(*col) {
                    let gc = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.accumulate(grads, *col, gc);
                }
            }
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.t().to_owned()),
            Op::Sigmoid(a) => {
                let ga = Zip::from(g)
                    .and(out)
                    .map_collect(|&g, &y| g * y * (1.0 - y));
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga =
                    Zip::from(g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = Zip::from(g)
                    .and(out)
                    .map_collect(|&g, &y| g * (1.0 - y * y));
                self.accumulate(grads, *a, ga);
            }
            Op::Ln(a) => {
                let ga = Zip::from(g).and(self.value(*a)).map_collect(|&g, &x| g / x);
                self.accumulate(grads, *a, ga);
            }
            Op::Abs(a) => {
                let ga = Zip::from(g).and(self.value(*a)).map_collect(|&g, &x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                self.accumulate(grads, *a, ga);
            }
            Op::Mean(a) => {
                let m = self.value(*a);
                let ga = Array2::from_elem(m.dim(), g[[0, 0]] / m.len().max(1) as f64);
                self.accumulate(grads, *a, ga);
            }
            Op::RowSqNorm(a) => {
                let ga = self.value(*a) * g * 2.0;
                self.accumulate(grads, *a, ga);
            }
            Op::SelectRows(a, rows) => {
                let mut ga = Array2::zeros(self.value(*a).dim());
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = ga.row_mut(r);
                    dst += &g.row(k);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Column(a, j) => {
                let mut ga = Array2::zeros(self.value(*a).dim());
                ga.slice_mut(s![.., *j..*j + 1]).assign(g);
                self.accumulate(grads, *a, ga);
            }
            Op::RowRange(a, lo) => {
                let mut ga = Array2::zeros(self.value(*a).dim());
                ga.slice_mut(s![*lo..*lo + g.nrows(), ..]).assign(g);
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let flat: Vec<f64> = g.iter().copied().collect();
                let ga = Array2::from_shape_vec(self.value(*a).dim(), flat).expect("same length");
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Array2::zeros(out.dim());
                for ((mut o, y), gr) in ga.rows_mut().into_iter().zip(out.rows()).zip(g.rows()) {
                    let inner = y.dot(&gr);
                    Zip::from(&mut o)
                        .and(y)
                        .and(gr)
                        .for_each(|o, &y, &g| *o = y * (g - inner));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Symmetrize(a) => {
                let ga = (g + &g.t()) * 0.5;
                self.accumulate(grads, *a, ga);
            }
            Op::ZeroDiag(a) => {
                let mut ga = g.clone();
                for i in 0..ga.nrows() {
                    ga[[i, i]] = 0.0;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::AddIdentity(a) => self.accumulate(grads, *a, g.clone()),
            Op::PairConcat(a) => {
                let (n, d) = self.value(*a).dim();
                let mut ga = Array2::<f64>::zeros((n, d));
                for i in 0..n {
                    for j in 0..n {
                        let row = g.row(i * n + j);
                        {
                            let mut gi = ga.row_mut(i);
                            gi += &row.slice(s![..d]);
                        }
                        let mut gj = ga.row_mut(j);
                        gj += &row.slice(s![d..]);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::PairSum(p, q) => {
                let (n, h) = self.value(*p).dim();
                let mut gp = Array2::<f64>::zeros((n, h));
                let mut gq = Array2::<f64>::zeros((n, h));
                for i in 0..n {
                    for j in 0..n {
                        let row = g.row(i * n + j);
                        {
                            let mut r = gp.row_mut(i);
                            r += &row;
                        }
                        let mut r = gq.row_mut(j);
                        r += &row;
                    }
                }
                self.accumulate(grads, *p, gp);
                self.accumulate(grads, *q, gq);
            }
            Op::SymNormalize {
                a,
                inv_sqrt,
                absorbing,
            } => {
                let m = self.value(*a);
                let n = m.nrows();
                let mut ga = Array2::zeros((n, n));
                // d r_i accumulated from both the row and the column role of i
                let mut g_r = Array1::<f64>::zeros(n);
                for i in 0..n {
                    if absorbing[i] {
                        continue;
                    }
                    for j in 0..n {
                        if absorbing[j] {
                            continue;
                        }
                        let gij = g[[i, j]];
                        ga[[i, j]] = gij * inv_sqrt[i] * inv_sqrt[j];
                        let t = gij * m[[i, j]];
                        g_r[i] += t * inv_sqrt[j];
                        g_r[j] += t * inv_sqrt[i];
                    }
                }
                for i in 0..n {
                    if absorbing[i] {
                        continue;
                    }
                    // r = d^{-1/2}, dr/dd = -r³/2, dd_i/dA_ij = 1
                    let g_d = -0.5 * g_r[i] * inv_sqrt[i].powi(3);
                    for j in 0..n {
                        ga[[i, j]] += g_d;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Standardize { a, std, floored } => {
                let n = out.nrows() as f64;
                let mean_g = g.sum_axis(Axis(0)) / n;
                let mut mean_gy = (g * out).sum_axis(Axis(0)) / n;
                for (m, &f) in mean_gy.iter_mut().zip(floored) {
                    if f {
                        *m = 0.0;
                    }
                }
                let mut ga = g - &mean_g;
                Zip::from(ga.rows_mut())
                    .and(out.rows())
                    .for_each(|mut row, y| {
                        Zip::from(&mut row)
                            .and(y)
                            .and(&mean_gy)
                            .and(std)
                            .for_each(|o, &y, &m, &s| *o = (*o - y * m) / s);
                    });
                self.accumulate(grads, *a, ga);
            }
            Op::Lambda2 { a, v2 } => {
                let n = v2.len();
                let s = g[[0, 0]];
                let mut ga = Array2::zeros((n, n));
                for i in 0..n {
                    for j in 0..n {
                        ga[[i, j]] = s * v2[i] * v2[j];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Exp0Rows(a, ball) => {
                let ga = self.rows_vjp(*a, g, |x, g| ball.expmap0_vjp(x, g));
                self.accumulate(grads, *a, ga);
            }
            Op::Log0Rows(a, ball) => {
                let ga = self.rows_vjp(*a, g, |x, g| ball.logmap0_vjp(x, g));
                self.accumulate(grads, *a, ga);
            }
            Op::ProjectRows(a, ball) => {
                let ga = self.rows_vjp(*a, g, |x, g| ball.project_vjp(x, g));
                self.accumulate(grads, *a, ga);
            }
            Op::MobiusAddRows(x, y, ball) => {
                let (gx, gy) =
                    self.pair_rows_vjp(*x, *y, g, |a, b, g| ball.mobius_add_vjp(a, b, g));
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *y, gy);
            }
            Op::ExpMapRows(p, u, ball) => {
                let (gp, gu) = self.pair_rows_vjp(*p, *u, g, |a, b, g| ball.expmap_vjp(a, b, g));
                self.accumulate(grads, *p, gp);
                self.accumulate(grads, *u, gu);
            }
            Op::LogMapRows(p, q, ball) => {
                let (gp, gq) = self.pair_rows_vjp(*p, *q, g, |a, b, g| ball.logmap_vjp(a, b, g));
                self.accumulate(grads, *p, gp);
                self.accumulate(grads, *q, gq);
            }
            Op::LiftScale(a, ball) => {
                let r = lift_radius(ball);
                let ga = Zip::from(g).and(self.value(*a)).map_collect(|&g, &q| {
                    let n = q.max(0.0).sqrt();
                    if n < r {
                        0.0
                    } else {
                        // d(R q^{-1/2})/dq
                        -0.5 * g * r / (q * n)
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::CosineMatch(a, b) => {
                let s = g[[0, 0]];
                let (am, bm) = (self.value(*a), self.value(*b));
                let mut ga = Array2::zeros(am.dim());
                let mut gb = Array2::zeros(bm.dim());
                for j in 0..am.ncols() {
                    let ca = am.column(j);
                    let cb = bm.column(j);
                    let na = ca.dot(&ca).sqrt();
                    let nb = cb.dot(&cb).sqrt();
                    if na <= COS_ZERO || nb <= COS_ZERO {
                        continue;
                    }
                    let cos = ca.dot(&cb) / (na * nb);
                    for i in 0..am.nrows() {
                        ga[[i, j]] = -s * (cb[i] / (na * nb) - cos * ca[i] / (na * na));
                        gb[[i, j]] = -s * (ca[i] / (na * nb) - cos * cb[i] / (nb * nb));
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
        }
    }

    fn rows_vjp(
        &self,
        a: Var,
        g: &Array2<f64>,
        f: impl Fn(ndarray::ArrayView1<f64>, ndarray::ArrayView1<f64>) -> Array1<f64>,
    ) -> Array2<f64> {
        let m = self.value(a);
        let mut ga = Array2::zeros(m.dim());
        for ((mut o, x), gr) in ga.rows_mut().into_iter().zip(m.rows()).zip(g.rows()) {
            o.assign(&f(x, gr));
        }
        ga
    }

    fn pair_rows_vjp(
        &self,
        x: Var,
        y: Var,
        g: &Array2<f64>,
        f: impl Fn(
            ndarray::ArrayView1<f64>,
            ndarray::ArrayView1<f64>,
            ndarray::ArrayView1<f64>,
        ) -> (Array1<f64>, Array1<f64>),
    ) -> (Array2<f64>, Array2<f64>) {
        let xm = self.value(x);
        let ym = self.value(y);
        let mut gx = Array2::zeros(xm.dim());
        let mut gy = Array2::zeros(ym.dim());
        let broadcast = xm.nrows() == 1 && ym.nrows() != 1;
        for i in 0..ym.nrows() {
            let xi = if broadcast { 0 } else { i };
            let (a, b) = f(xm.row(xi), ym.row(i), g.row(i));
            let mut rx = gx.row_mut(xi);
            rx += &a;
            gy.row_mut(i).assign(&b);
        }
        (gx, gy)
    }
}

const COS_ZERO: f64 = 1e-12;

/// Largest tangent norm that survives `project(exp₀(·))` unchanged.
pub fn lift_radius(ball: &PoincareBall) -> f64 {
    (1.0 - crate::manifold::BOUNDARY_EPS).sqrt().atanh() / ball.curvature().sqrt()
}
