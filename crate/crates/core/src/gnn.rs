//! SGC (the inner model of gradient matching) and a two-layer GCN (the
//! evaluation model), both with hand-written backward passes.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use sprs::{CsMat, TriMat};

use crate::adgrad::{Tape, Var};
use crate::error::{HydroError, Result};
use crate::graphcore::{CondensedGraph, Graph};

/// Feature matrices are stored sparsely below this fill ratio.
const SPARSE_FILL: f64 = 0.1;

/// Node features, dense or CSR depending on fill.
#[derive(Clone, Debug)]
pub enum Features {
    Dense(Array2<f64>),
    Sparse(CsMat<f64>),
}

impl Features {
    pub fn new(x: &Array2<f64>) -> Self {
        let nnz = x.iter().filter(|&&v| v != 0.0).count();
        if (nnz as f64) < SPARSE_FILL * x.len() as f64 {
            let mut tri = TriMat::new(x.dim());
            for ((i, j), &v) in x.indexed_iter() {
                if v != 0.0 {
                    tri.add_triplet(i, j, v);
                }
            }
            Features::Sparse(tri.to_csr())
        } else {
            Features::Dense(x.clone())
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        match self {
            Features::Dense(x) => x.dim(),
            Features::Sparse(x) => x.shape(),
        }
    }

    /// `X·W`.
    pub fn dot(&self, w: &Array2<f64>) -> Array2<f64> {
        match self {
            Features::Dense(x) => x.dot(w),
            Features::Sparse(x) => spmm(x, w),
        }
    }

    /// `Xᵀ·G`.
    pub fn t_dot(&self, g: &Array2<f64>) -> Array2<f64> {
        match self {
            Features::Dense(x) => x.t().dot(g),
            Features::Sparse(x) => spmm_t(x, g),
        }
    }

    /// Inverted dropout on the stored entries.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Features {
        let keep = 1.0 - p;
        match self {
            Features::Dense(x) => Features::Dense(x.mapv(|v| {
                if rng.gen::<f64>() < keep {
                    v / keep
                } else {
                    0.0
                }
            })),
            Features::Sparse(x) => {
                let mut y = x.clone();
                for v in y.data_mut() {
                    *v = if rng.gen::<f64>() < keep {
                        *v / keep
                    } else {
                        0.0
                    };
                }
                Features::Sparse(y)
            }
        }
    }
}

/// `A·B` for CSR `A`, accumulating whole rows of `B`.
pub fn spmm(a: &CsMat<f64>, b: &Array2<f64>) -> Array2<f64> {
    assert!(a.is_csr(), "spmm expects CSR storage");
    assert_eq!(a.cols(), b.nrows(), "spmm shape mismatch");
    let k = b.ncols();
    let b = b.as_standard_layout();
    let src = b.as_slice().expect("standard layout");
    let mut out = vec![0.0; a.rows() * k];
    for (i, row) in a.outer_iterator().enumerate() {
        let o = &mut out[i * k..(i + 1) * k];
        for (j, &v) in row.iter() {
            axpy(o, v, &src[j * k..(j + 1) * k]);
        }
    }
    Array2::from_shape_vec((a.rows(), k), out).expect("sized above")
}

/// `Aᵀ·B` for CSR `A`, scattering rows of `B`.
pub fn spmm_t(a: &CsMat<f64>, b: &Array2<f64>) -> Array2<f64> {
    assert!(a.is_csr(), "spmm_t expects CSR storage");
    assert_eq!(a.rows(), b.nrows(), "spmm_t shape mismatch");
    let k = b.ncols();
    let b = b.as_standard_layout();
    let src = b.as_slice().expect("standard layout");
    let mut out = vec![0.0; a.cols() * k];
    for (i, row) in a.outer_iterator().enumerate() {
        let s = &src[i * k..(i + 1) * k];
        for (j, &v) in row.iter() {
            axpy(&mut out[j * k..(j + 1) * k], v, s);
        }
    }
    Array2::from_shape_vec((a.cols(), k), out).expect("sized above")
}

#[inline]
fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// `D̃^{-1/2}(A + I)D̃^{-1/2}` of a graph, sparse.
pub fn normalized_adjacency(g: &Graph) -> CsMat<f64> {
    let n = g.n();
    let deg: Vec<f64> = g.degrees().iter().map(|d| d + 1.0).collect();
    let mut tri = TriMat::new((n, n));
    for i in 0..n {
        tri.add_triplet(i, i, 1.0 / deg[i]);
        for (j, w) in g.neighbors(i) {
            if j != i {
                tri.add_triplet(i, j, w / (deg[i] * deg[j]).sqrt());
            }
        }
    }
    tri.to_csr()
}

/// `D̃^{-1/2}(A + I)D̃^{-1/2}` of a dense nonnegative matrix.
pub fn normalized_adjacency_dense(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut t = a.clone();
    for i in 0..n {
        t[[i, i]] += 1.0;
    }
    let deg = t.sum_axis(Axis(1));
    Array2::from_shape_fn((n, n), |(i, j)| t[[i, j]] / (deg[i] * deg[j]).sqrt())
}

/// `ŜᴷX`.
pub fn propagate(s_hat: &CsMat<f64>, x: &Array2<f64>, k: usize) -> Array2<f64> {
    let mut h = x.clone();
    for _ in 0..k {
        h = spmm(s_hat, &h);
    }
    h
}

pub fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut y = Array2::zeros((labels.len(), classes));
    for (i, &c) in labels.iter().enumerate() {
        y[[i, c]] = 1.0;
    }
    y
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Mean cross-entropy of softmax(logits) over `rows`.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize], rows: &[usize]) -> f64 {
    let mut total = 0.0;
    for &i in rows {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[labels[i]];
    }
    total / rows.len().max(1) as f64
}

pub fn accuracy(pred: &[usize], labels: &[usize], rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|&&i| pred[i] == labels[i]).count() as f64 / rows.len() as f64
}

/// Simplified graph convolution: `logits = ŜᴷXΘ`.
#[derive(Clone, Debug)]
pub struct SgcModel {
    pub k: usize,
    pub theta: Array2<f64>,
}

impl SgcModel {
    /// Θ uniform in `±1/√d`.
    pub fn init<R: Rng + ?Sized>(k: usize, d: usize, classes: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d.max(1) as f64).sqrt();
        Self {
            k,
            theta: Array2::from_shape_fn((d, classes), |_| rng.gen_range(-bound..bound)),
        }
    }

    pub fn forward(&self, g: &Graph) -> Result<Array2<f64>> {
        if g.num_features() != self.theta.nrows() {
            return Err(HydroError::shape(format!(
                "SGC expects {} features, graph has {}",
                self.theta.nrows(),
                g.num_features()
            )));
        }
        let h = propagate(&normalized_adjacency(g), g.features(), self.k);
        Ok(h.dot(&self.theta))
    }
}

/// Gradient of the mean softmax cross-entropy over `rows` with respect to
/// Θ, given propagated features `h = ŜᴷX`:
/// `h[rows]ᵀ(softmax(h[rows]Θ) − Y[rows]) / |rows|`.
pub fn sgc_grad_from_propagated(
    h: &Array2<f64>,
    theta: &Array2<f64>,
    labels: &[usize],
    rows: &[usize],
) -> Result<Array2<f64>> {
    if rows.is_empty() {
        return Err(HydroError::contract("sgc_grad: empty mask"));
    }
    if h.ncols() != theta.nrows() {
        return Err(HydroError::shape(format!(
            "propagated width {} vs Θ rows {}",
            h.ncols(),
            theta.nrows()
        )));
    }
    let hm = h.select(Axis(0), rows);
    let p = softmax_rows(&hm.dot(theta));
    let y = one_hot(
        &rows.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
        theta.ncols(),
    );
    Ok(hm.t().dot(&(p - y)) / rows.len() as f64)
}

/// SGC gradient on a graph over the masked nodes.
pub fn sgc_grad(g: &Graph, model: &SgcModel, rows: &[usize]) -> Result<Array2<f64>> {
    if g.num_features() != model.theta.nrows() {
        return Err(HydroError::shape("SGC feature width mismatch"));
    }
    let h = propagate(&normalized_adjacency(g), g.features(), model.k);
    sgc_grad_from_propagated(&h, &model.theta, g.labels(), rows)
}

/// Records the SGC gradient on the tape for propagated features `h`
/// (`n×d`), a constant Θ and constant one-hot targets. Differentiable with
/// respect to `h`.
pub fn sgc_grad_var(
    tape: &mut Tape,
    h: Var,
    theta: &Array2<f64>,
    targets: &Array2<f64>,
) -> Result<Var> {
    let n = tape.value(h).nrows();
    if n == 0 {
        return Err(HydroError::contract("sgc_grad: empty mask"));
    }
    let th = tape.constant(theta.clone());
    let logits = tape.matmul(h, th)?;
    let p = tape.softmax_rows(logits);
    let y = tape.constant(targets.clone());
    let r = tape.sub(p, y)?;
    let ht = tape.transpose(h);
    let g = tape.matmul(ht, r)?;
    Ok(tape.affine(g, 1.0 / n as f64, 0.0))
}

/// Records `ŜᴷX` for a dense adjacency variable `a` (zero diagonal,
/// nonnegative) and features `x`.
pub fn propagate_var(tape: &mut Tape, a: Var, x: Var, k: usize) -> Result<Var> {
    let with_loops = tape.add_identity(a, 1.0)?;
    let s = tape.sym_normalize(with_loops)?;
    let mut h = x;
    for _ in 0..k {
        h = tape.matmul(s, h)?;
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            epochs: 500,
            lr: 0.01,
            weight_decay: 5e-4,
            dropout: 0.5,
        }
    }
}

/// Two-layer GCN `Ŝ·ReLU(ŜXW₁ + b₁)·W₂ + b₂`.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnModel {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Output of [`gcn_infer`].
#[derive(Clone, Debug)]
pub struct GcnOutput {
    pub logits: Array2<f64>,
    /// Hidden pre-activations `ŜXW₁ + b₁`.
    pub embeddings: Array2<f64>,
    pub predictions: Vec<usize>,
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (rows + cols).max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (k, p) in params.iter_mut().enumerate() {
            Zip::from(&mut self.m[k])
                .and(&mut self.v[k])
                .and(&grads[k])
                .and(&mut **p)
                .for_each(|m, v, &g, p| {
                    *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                    *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                });
        }
    }
}

/// Adam with coupled L2 weight decay, public for reuse by the distiller.
pub struct AdamState {
    inner: Adam,
    weight_decay: f64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)], weight_decay: f64) -> Self {
        Self {
            inner: Adam::new(shapes),
            weight_decay,
        }
    }

    /// Updates `params` in place from their loss gradients.
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>], lr: f64) {
        let decayed: Vec<Array2<f64>> = grads
            .iter()
            .zip(params.iter())
            .map(|(g, p)| g + &(&**p * self.weight_decay))
            .collect();
        self.inner.step(params, &decayed, lr);
    }
}

/// Per-epoch record of [`gcn_train`].
#[derive(Clone, Debug)]
pub struct GcnTrace {
    pub losses: Vec<f64>,
}

/// Full-batch training on the nodes in `rows` with Adam, coupled weight
/// decay and dropout on the input features and hidden layer.
pub fn gcn_train<R: Rng + ?Sized>(
    g: &Graph,
    rows: &[usize],
    cfg: &GcnConfig,
    rng: &mut R,
) -> Result<(GcnModel, GcnTrace)> {
    if rows.is_empty() {
        return Err(HydroError::contract("gcn_train: no training nodes"));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(HydroError::contract(format!(
            "dropout {} outside [0, 1)",
            cfg.dropout
        )));
    }
    let d = g.num_features();
    let c = g.num_classes();
    let s_hat = normalized_adjacency(g);
    let x = Features::new(g.features());
    let mut w1 = glorot(d, cfg.hidden, rng);
    let mut b1 = Array2::zeros((1, cfg.hidden));
    let mut w2 = glorot(cfg.hidden, c, rng);
    let mut b2 = Array2::zeros((1, c));
    let mut adam = AdamState::new(&[w1.dim(), b1.dim(), w2.dim(), b2.dim()], cfg.weight_decay);
    let targets = one_hot(g.labels(), c);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let keep = 1.0 - cfg.dropout;
    for _ in 0..cfg.epochs {
        let xd = if cfg.dropout > 0.0 {
            x.dropout(cfg.dropout, rng)
        } else {
            x.clone()
        };
        let a1 = spmm(&s_hat, &xd.dot(&w1)) + &b1;
        let mut mask = Array2::zeros(a1.dim());
        let mut h = Array2::zeros(a1.dim());
        Zip::from(&mut mask)
            .and(&mut h)
            .and(&a1)
            .for_each(|m, h, &v| {
                if v > 0.0 && (cfg.dropout == 0.0 || rng.gen::<f64>() < keep) {
                    *m = 1.0 / keep;
                    *h = v / keep;
                }
            });
        let logits = spmm(&s_hat, &h.dot(&w2)) + &b2;
        losses.push(cross_entropy(&logits, g.labels(), rows));

        let p = softmax_rows(&logits);
        let mut dlogits = Array2::zeros(logits.dim());
        let scale = 1.0 / rows.len() as f64;
        for &i in rows {
            let mut r = dlogits.row_mut(i);
            r.assign(&((&p.row(i) - &targets.row(i)) * scale));
        }
        let db2 = dlogits.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dz2 = spmm(&s_hat, &dlogits);
        let dw2 = h.t().dot(&dz2);
        let da1 = dz2.dot(&w2.t()) * &mask;
        let db1 = da1.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dz1 = spmm(&s_hat, &da1);
        let dw1 = xd.t_dot(&dz1);
        adam.step(
            &mut [&mut w1, &mut b1, &mut w2, &mut b2],
            &[dw1, db1, dw2, db2],
            cfg.lr,
        );
    }
    let model = GcnModel {
        w1,
        b1: b1.row(0).to_owned(),
        w2,
        b2: b2.row(0).to_owned(),
    };
    if model
        .w1
        .iter()
        .chain(model.w2.iter())
        .any(|v| !v.is_finite())
    {
        return Err(HydroError::Training {
            epoch: cfg.epochs,
            msg: "GCN weights became non-finite".into(),
        });
    }
    Ok((model, GcnTrace { losses }))
}

/// Trains on every node of a condensed graph using its dense weighted
/// adjacency.
pub fn gcn_train_condensed<R: Rng + ?Sized>(
    cg: &CondensedGraph,
    num_classes: usize,
    cfg: &GcnConfig,
    rng: &mut R,
) -> Result<(GcnModel, GcnTrace)> {
    let g = cg.to_graph(num_classes)?;
    let rows: Vec<usize> = (0..g.n()).collect();
    gcn_train(&g, &rows, cfg, rng)
}

/// Deterministic forward pass without dropout.
pub fn gcn_infer(model: &GcnModel, g: &Graph) -> Result<GcnOutput> {
    if g.num_features() != model.w1.nrows() {
        return Err(HydroError::shape(format!(
            "GCN expects {} features, graph has {}",
            model.w1.nrows(),
            g.num_features()
        )));
    }
    let s_hat = normalized_adjacency(g);
    let x = Features::new(g.features());
    let embeddings = spmm(&s_hat, &x.dot(&model.w1)) + &model.b1;
    let h = embeddings.mapv(|v| v.max(0.0));
    let logits = spmm(&s_hat, &h.dot(&model.w2)) + &model.b2;
    let predictions = argmax_rows(&logits);
    Ok(GcnOutput {
        logits,
        embeddings,
        predictions,
    })
}
