//! Hyperbolic structure generator.
//!
//! Every ordered node pair `(i, j)` gets an edge embedding (the
//! concatenation of both nodes' tangent features), which is lifted onto the
//! ball and passed through Möbius linear layers with tangent-space batch
//! norm and hyperbolic ReLU. The last layer emits one hyperbolic value per
//! pair; its first tangent coordinate is the edge logit, and the logits are
//! symmetrized and squashed into the synthetic adjacency.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adgrad::{Tape, Var};
use crate::error::{HydroError, Result};
use crate::fmtutil;
use crate::manifold::PoincareBall;

/// Largest synthetic graph the dense pair batch is allowed to cover.
pub const MAX_NODES: usize = 512;

/// Variance floor of the tangent batch norm.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperNetConfig {
    /// Number of Möbius linear layers; all but the last are followed by
    /// batch norm and hyperbolic ReLU.
    pub layers: usize,
    pub hidden: usize,
    pub curvature: f64,
    pub seed: u64,
}

impl Default for HyperNetConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 128,
            curvature: 0.01,
            seed: 0,
        }
    }
}

/// Trainable values of the generator. Biases are ball points; everything
/// else is Euclidean.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperNetParams {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub bn_scale: Vec<Array1<f64>>,
    pub bn_shift: Vec<Array1<f64>>,
}

/// Tape handles for one registration of [`HyperNetParams`].
#[derive(Clone, Debug)]
pub struct HyperNetVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    pub bn_scale: Vec<Var>,
    pub bn_shift: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct HyperNet {
    config: HyperNetConfig,
    ball: PoincareBall,
    in_dim: usize,
    pub params: HyperNetParams,
}

impl HyperNet {
    /// A generator for node features of dimension `feat_dim`. Weights are
    /// uniform in `±1/√fan_in`, biases sit at the origin, batch norm starts
    /// as the identity affine map.
    pub fn new(config: HyperNetConfig, feat_dim: usize) -> Result<Self> {
        if config.layers == 0 {
            return Err(HydroError::contract("hypernet needs at least one layer"));
        }
        if config.hidden == 0 && config.layers > 1 {
            return Err(HydroError::contract("hidden width must be positive"));
        }
        let ball = PoincareBall::new(config.curvature)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let in_dim = 2 * feat_dim;
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat_n(config.hidden, config.layers - 1));
        dims.push(1);
        let mut params = HyperNetParams {
            weights: Vec::new(),
            biases: Vec::new(),
            bn_scale: Vec::new(),
            bn_shift: Vec::new(),
        };
        for l in 0..config.layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            params
                .weights
                .push(Array2::from_shape_fn((fan_in, fan_out), |_| {
                    rng.gen_range(-bound..bound)
                }));
            params.biases.push(Array1::zeros(fan_out));
            if l + 1 < config.layers {
                params.bn_scale.push(Array1::ones(fan_out));
                params.bn_shift.push(Array1::zeros(fan_out));
            }
        }
        Ok(Self {
            config,
            ball,
            in_dim,
            params,
        })
    }

    pub fn config(&self) -> &HyperNetConfig {
        &self.config
    }

    pub fn ball(&self) -> PoincareBall {
        self.ball
    }

    /// Adds the parameters to `tape` as leaves.
    pub fn register(&self, tape: &mut Tape) -> HyperNetVars {
        let row = |a: &Array1<f64>| a.clone().insert_axis(ndarray::Axis(0));
        HyperNetVars {
            weights: self
                .params
                .weights
                .iter()
                .map(|w| tape.leaf(w.clone()))
                .collect(),
            biases: self
                .params
                .biases
                .iter()
                .map(|b| tape.leaf(row(b)))
                .collect(),
            bn_scale: self
                .params
                .bn_scale
                .iter()
                .map(|b| tape.leaf(row(b)))
                .collect(),
            bn_shift: self
                .params
                .bn_shift
                .iter()
                .map(|b| tape.leaf(row(b)))
                .collect(),
        }
    }

    /// Synthetic adjacency for tangent node features `x` (`n′×d`).
    ///
    /// The first layer is evaluated without materializing the `n′²×2d`
    /// edge batch: with `e_ij = [x_i, x_j]`,
    /// `log₀(lift(e_ij))·W = f(‖e_ij‖)·(x_i W_top + x_j W_bot)` where `f`
    /// is the boundary-projection factor.
    pub fn forward(&self, tape: &mut Tape, vars: &HyperNetVars, x: Var) -> Result<Var> {
        let (n, d) = tape.value(x).dim();
        if 2 * d != self.in_dim {
            return Err(HydroError::shape(format!(
                "hypernet expects {}-dim features, got {d}",
                self.in_dim / 2
            )));
        }
        if n > MAX_NODES {
            return Err(HydroError::contract(format!(
                "synthetic graph of {n} nodes exceeds the {MAX_NODES}-node limit"
            )));
        }
        let ball = self.ball;
        let w_top = tape.row_range(vars.weights[0], 0, d)?;
        let w_bot = tape.row_range(vars.weights[0], d, 2 * d)?;
        let p = tape.matmul(x, w_top)?;
        let q = tape.matmul(x, w_bot)?;
        let pre = tape.pair_sum(p, q)?;
        let sq = tape.row_sq_norm(x);
        let pair_sq = tape.pair_sum(sq, sq)?;
        let factor = tape.lift_scale(pair_sq, ball);
        let tangent = tape.mul_col(pre, factor)?;
        let mut z = self.finish_linear(tape, tangent, vars.biases[0])?;
        z = self.hidden_block(tape, vars, 0, z)?;
        for l in 1..self.config.layers {
            z = mobius_linear(tape, ball, z, vars.weights[l], vars.biases[l])?;
            z = self.hidden_block(tape, vars, l, z)?;
        }
        adjacency_head(tape, ball, z, n)
    }

    /// The same map as [`Self::forward`] evaluated through the explicit edge
    /// batch; slower, used as a reference.
    pub fn forward_reference(&self, tape: &mut Tape, vars: &HyperNetVars, x: Var) -> Result<Var> {
        let n = tape.value(x).nrows();
        let ball = self.ball;
        let e = edge_embed(tape, x);
        let mut z = lift(tape, ball, e);
        for l in 0..self.config.layers {
            z = mobius_linear(tape, ball, z, vars.weights[l], vars.biases[l])?;
            z = self.hidden_block(tape, vars, l, z)?;
        }
        adjacency_head(tape, ball, z, n)
    }

    fn finish_linear(&self, tape: &mut Tape, tangent: Var, bias: Var) -> Result<Var> {
        let h = tape.exp0_rows(tangent, self.ball);
        let h = tape.project_rows(h, self.ball);
        let t = tape.mobius_add_rows(bias, h, self.ball)?;
        Ok(tape.project_rows(t, self.ball))
    }

    fn hidden_block(&self, tape: &mut Tape, vars: &HyperNetVars, l: usize, z: Var) -> Result<Var> {
        if l + 1 == self.config.layers {
            return Ok(z);
        }
        let z = tangent_batchnorm(tape, self.ball, z, vars.bn_scale[l], vars.bn_shift[l])?;
        Ok(hyperbolic_relu(tape, self.ball, z))
    }

    /// Adjacency from the current parameters, off-tape.
    pub fn adjacency(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let xv = tape.constant(x.clone());
        let a = self.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(a).clone())
    }

    /// JSON checkpoint with 17-significant-digit floats.
    pub fn checkpoint(&self) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct Doc<'a> {
            config: &'a HyperNetConfig,
            feat_dim: usize,
            layers: Vec<Layer>,
        }
        #[derive(Serialize)]
        struct Layer {
            shape: [usize; 2],
            weight: Vec<f64>,
            bias: Vec<f64>,
            bn_scale: Option<Vec<f64>>,
            bn_shift: Option<Vec<f64>>,
        }
        let layers = (0..self.config.layers)
            .map(|l| {
                let w = &self.params.weights[l];
                Layer {
                    shape: [w.nrows(), w.ncols()],
                    weight: w.iter().copied().collect(),
                    bias: self.params.biases[l].to_vec(),
                    bn_scale: self.params.bn_scale.get(l).map(|v| v.to_vec()),
                    bn_shift: self.params.bn_shift.get(l).map(|v| v.to_vec()),
                }
            })
            .collect();
        let doc = Doc {
            config: &self.config,
            feat_dim: self.in_dim / 2,
            layers,
        };
        Ok(fmtutil::to_json_17(&doc)?)
    }
}

/// Row `i·n + j` is the concatenation of rows `i` and `j` of `x`.
pub fn edge_embed(tape: &mut Tape, x: Var) -> Var {
    tape.pair_concat(x)
}

/// Exponential map at the origin followed by boundary projection, row-wise.
pub fn lift(tape: &mut Tape, ball: PoincareBall, e: Var) -> Var {
    let h = tape.exp0_rows(e, ball);
    tape.project_rows(h, ball)
}

/// `b ⊕ exp₀(log₀(z)·W)`, boundary-projected.
pub fn mobius_linear(tape: &mut Tape, ball: PoincareBall, z: Var, w: Var, b: Var) -> Result<Var> {
    let (_, din) = tape.value(z).dim();
    let (wr, wc) = tape.value(w).dim();
    if din != wr || tape.value(b).dim() != (1, wc) {
        return Err(HydroError::shape(format!(
            "mobius_linear: input width {din}, weight {wr}×{wc}, bias {:?}",
            tape.value(b).dim()
        )));
    }
    let t = tape.log0_rows(z, ball);
    let t = tape.matmul(t, w)?;
    let h = tape.exp0_rows(t, ball);
    let h = tape.project_rows(h, ball);
    let out = tape.mobius_add_rows(b, h, ball)?;
    Ok(tape.project_rows(out, ball))
}

/// Batch norm in the tangent space at the origin: per-feature
/// standardization (variance floored at [`BN_EPS`]), then `scale·t + shift`.
pub fn tangent_batchnorm(
    tape: &mut Tape,
    ball: PoincareBall,
    z: Var,
    scale: Var,
    shift: Var,
) -> Result<Var> {
    if tape.value(z).nrows() < 2 {
        return Err(HydroError::contract(
            "batch norm needs a batch of at least 2 rows",
        ));
    }
    let t = tape.log0_rows(z, ball);
    let t = tape.standardize(t, BN_EPS)?;
    let t = tape.mul_row(t, scale)?;
    let t = tape.add_row(t, shift)?;
    let h = tape.exp0_rows(t, ball);
    Ok(tape.project_rows(h, ball))
}

/// `exp₀(ReLU(log₀(z)))`.
pub fn hyperbolic_relu(tape: &mut Tape, ball: PoincareBall, z: Var) -> Var {
    let t = tape.log0_rows(z, ball);
    let t = tape.relu(t);
    let h = tape.exp0_rows(t, ball);
    tape.project_rows(h, ball)
}

/// Reads the first tangent coordinate of each pair as a logit, reshapes to
/// `n×n`, symmetrizes, applies the sigmoid and zeroes the diagonal.
pub fn adjacency_head(tape: &mut Tape, ball: PoincareBall, z: Var, n: usize) -> Result<Var> {
    if tape.value(z).nrows() != n * n {
        return Err(HydroError::shape(format!(
            "adjacency head expects {} rows, got {}",
            n * n,
            tape.value(z).nrows()
        )));
    }
    let t = tape.log0_rows(z, ball);
    let logits = tape.column(t, 0)?;
    let logits = tape.reshape(logits, n, n)?;
    let sym = tape.symmetrize(logits)?;
    let a = tape.sigmoid(sym);
    tape.zero_diag(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn ball(c: f64) -> PoincareBall {
        PoincareBall::new(c).unwrap()
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0) * scale)
    }

    #[test]
    fn edge_embed_examples() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let e = edge_embed(&mut t, x);
        let v = t.value(e);
        assert_eq!(v.row(1).to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(v.row(2).to_vec(), vec![3.0, 4.0, 1.0, 2.0]);
        let one = t.leaf(array![[5.0, 6.0]]);
        let e = edge_embed(&mut t, one);
        assert_eq!(t.value(e), &array![[5.0, 6.0, 5.0, 6.0]]);
    }

    #[test]
    fn lift_examples() {
        let mut t = Tape::new();
        let e = t.leaf(array![[0.0, 0.0], [0.5, 0.0], [50.0, 0.0]]);
        let h = lift(&mut t, ball(1.0), e);
        let v = t.value(h);
        assert_eq!(v.row(0).to_vec(), vec![0.0, 0.0]);
        assert!((v[[1, 0]] - 0.5f64.tanh()).abs() < 1e-15);
        for row in v.rows() {
            assert!(row.dot(&row) < 1.0);
        }
    }

    #[test]
    fn mobius_linear_examples() {
        let b = ball(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = rand_matrix(&mut rng, 5, 3, 0.5);
        let mut t = Tape::new();
        let z = t.leaf(pts.clone());
        let w = t.leaf(Array2::eye(3));
        let bias = t.leaf(Array2::zeros((1, 3)));
        let out = mobius_linear(&mut t, b, z, w, bias).unwrap();
        for (a, e) in t.value(out).iter().zip(pts.iter()) {
            assert!((a - e).abs() < 1e-9);
        }
        let w0 = t.leaf(Array2::zeros((3, 2)));
        let b0 = t.leaf(Array2::zeros((1, 2)));
        let out = mobius_linear(&mut t, b, z, w0, b0).unwrap();
        assert!(t.value(out).iter().all(|&v| v == 0.0));
        let bad = t.leaf(Array2::zeros((4, 2)));
        assert!(mobius_linear(&mut t, b, z, bad, b0).is_err());
    }

    #[test]
    fn mobius_linear_weight_gradient() {
        let b = ball(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let pts = rand_matrix(&mut rng, 6, 4, 0.8);
            let w = rand_matrix(&mut rng, 4, 4, 0.7);
            let bias = rand_matrix(&mut rng, 1, 4, 0.5);
            let weights = rand_matrix(&mut rng, 6, 4, 1.0);
            let eval = |wm: Array2<f64>| {
                let mut t = Tape::new();
                let z = t.constant(pts.clone());
                let wv = t.leaf(wm);
                let bv = t.constant(bias.clone());
                let out = mobius_linear(&mut t, b, z, wv, bv).unwrap();
                let c = t.constant(weights.clone());
                let p = t.mul(out, c).unwrap();
                let l = t.sum(p);
                let g = t.backward(l).unwrap().get(wv).unwrap().clone();
                (t.scalar(l), g)
            };
            let (_, g) = eval(w.clone());
            let h = 1e-6;
            for idx in 0..16 {
                let (r, c) = (idx / 4, idx % 4);
                let mut p = w.clone();
                let mut m = w.clone();
                p[[r, c]] += h;
                m[[r, c]] -= h;
                let fd = (eval(p).0 - eval(m).0) / (2.0 * h);
                assert!((fd - g[[r, c]]).abs() / fd.abs().max(1.0) < 1e-4);
            }
        }
    }

    #[test]
    fn batchnorm_examples() {
        let b = ball(0.01);
        let mut t = Tape::new();
        let one = t.constant(Array2::ones((1, 2)));
        let zero = t.constant(Array2::zeros((1, 2)));
        // an already-standardized tangent batch
        let tangent = array![[1.0, -1.0], [-1.0, 1.0], [1.0, 1.0], [-1.0, -1.0]];
        let tv = t.leaf(tangent.clone());
        let z = t.exp0_rows(tv, b);
        let out = tangent_batchnorm(&mut t, b, z, one, zero).unwrap();
        let back = t.log0_rows(out, b);
        for (a, e) in t.value(back).iter().zip(tangent.iter()) {
            assert!((a - e).abs() < 1e-6);
        }
        let col_mean = t.value(back).mean_axis(ndarray::Axis(0)).unwrap();
        assert!(col_mean.iter().all(|m| m.abs() <= 1e-9));
        let var = t
            .value(back)
            .mapv(|v| v * v)
            .mean_axis(ndarray::Axis(0))
            .unwrap();
        assert!(var.iter().all(|v| (v - 1.0).abs() <= 1e-6));

        // constant batch collapses onto exp₀(shift)
        let shift = t.constant(array![[0.3, -0.2]]);
        let c = t.constant(Array2::from_elem((3, 2), 0.4));
        let out = tangent_batchnorm(&mut t, b, c, one, shift).unwrap();
        let expect = b.expmap0_raw(array![0.3, -0.2].view());
        for row in t.value(out).rows() {
            for (a, e) in row.iter().zip(expect.iter()) {
                assert!((a - e).abs() < 1e-15);
            }
        }

        let single = t.constant(array![[0.1, 0.2]]);
        assert!(matches!(
            tangent_batchnorm(&mut t, b, single, one, zero),
            Err(HydroError::Contract(_))
        ));
    }

    #[test]
    fn hyperbolic_relu_examples() {
        let b = ball(1.0);
        let mut t = Tape::new();
        let pos = t.leaf(array![[0.2, 0.0], [0.1, 0.3]]);
        let z = t.exp0_rows(pos, b);
        let r = hyperbolic_relu(&mut t, b, z);
        for (a, e) in t.value(r).iter().zip(t.value(z).iter()) {
            assert!((a - e).abs() < 1e-9);
        }
        let neg = t.leaf(array![[-0.2, -0.5]]);
        let z = t.exp0_rows(neg, b);
        let r = hyperbolic_relu(&mut t, b, z);
        assert!(t.value(r).iter().all(|&v| v == 0.0));
        let mixed = t.leaf(array![[0.4, -0.3], [-0.1, 0.2]]);
        let z = t.exp0_rows(mixed, b);
        let once = hyperbolic_relu(&mut t, b, z);
        let twice = hyperbolic_relu(&mut t, b, once);
        for (a, e) in t.value(once).iter().zip(t.value(twice).iter()) {
            assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn adjacency_head_examples() {
        let b = ball(0.1);
        let mut t = Tape::new();
        let zeros = t.leaf(Array2::zeros((9, 1)));
        let a = adjacency_head(&mut t, b, zeros, 3).unwrap();
        let v = t.value(a);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(v[[i, j]], if i == j { 0.0 } else { 0.5 });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = rand_matrix(&mut rng, 4, 4, 2.0);
        let as_points = |t: &mut Tape, m: &Array2<f64>| {
            let flat = Array2::from_shape_vec((16, 1), m.iter().copied().collect()).unwrap();
            let l = t.leaf(flat);
            t.exp0_rows(l, b)
        };
        let z1 = as_points(&mut t, &logits);
        let z2 = as_points(&mut t, &logits.t().to_owned());
        let a1 = adjacency_head(&mut t, b, z1, 4).unwrap();
        let a2 = adjacency_head(&mut t, b, z2, 4).unwrap();
        assert_eq!(t.value(a1), t.value(a2));
        let v = t.value(a1);
        assert_eq!(v, &v.t().to_owned());
    }

    fn net(layers: usize, d: usize, c: f64, seed: u64) -> HyperNet {
        HyperNet::new(
            HyperNetConfig {
                layers,
                hidden: 5,
                curvature: c,
                seed,
            },
            d,
        )
        .unwrap()
    }

    #[test]
    fn fast_path_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &c in &[0.01, 0.1, 1.0] {
            for layers in 1..=3 {
                let mut hn = net(layers, 3, c, 7);
                for b in hn.params.biases.iter_mut() {
                    b.mapv_inplace(|_| rng.gen_range(-0.2..0.2));
                }
                // include rows beyond the representable radius
                let x = rand_matrix(&mut rng, 5, 3, 2.0 / c.sqrt());
                let mut t = Tape::new();
                let vars = hn.register(&mut t);
                let xv = t.leaf(x);
                let fast = hn.forward(&mut t, &vars, xv).unwrap();
                let slow = hn.forward_reference(&mut t, &vars, xv).unwrap();
                for (a, e) in t.value(fast).iter().zip(t.value(slow).iter()) {
                    assert!((a - e).abs() < 1e-9, "{a} vs {e}");
                }
            }
        }
    }

    #[test]
    fn composed_network_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hn = net(2, 3, 0.1, 9);
        let x = rand_matrix(&mut rng, 4, 3, 1.0);
        let target = rand_matrix(&mut rng, 4, 4, 1.0);
        let loss_of = |hn: &HyperNet, xm: &Array2<f64>| {
            let mut t = Tape::new();
            let vars = hn.register(&mut t);
            let xv = t.leaf(xm.clone());
            let a = hn.forward(&mut t, &vars, xv).unwrap();
            let c = t.constant(target.clone());
            let p = t.mul(a, c).unwrap();
            let l = t.sum(p);
            let grads = t.backward(l).unwrap();
            let gx = grads.get(xv).unwrap().clone();
            let gw: Vec<_> = vars
                .weights
                .iter()
                .map(|&w| grads.get_or_zeros(w, t.value(w).dim()))
                .collect();
            let gb: Vec<_> = vars
                .biases
                .iter()
                .map(|&w| grads.get_or_zeros(w, t.value(w).dim()))
                .collect();
            let gs: Vec<_> = vars
                .bn_scale
                .iter()
                .map(|&w| grads.get_or_zeros(w, t.value(w).dim()))
                .collect();
            (t.scalar(l), gx, gw, gb, gs)
        };
        let (_, gx, gw, gb, gs) = loss_of(&hn, &x);
        let h = 1e-6;
        let check = |fd: f64, an: f64| {
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(err < 1e-4, "fd {fd} analytic {an}");
        };
        for idx in 0..x.len() {
            let (r, c) = (idx / 3, idx % 3);
            let (mut p, mut m) = (x.clone(), x.clone());
            p[[r, c]] += h;
            m[[r, c]] -= h;
            check(
                (loss_of(&hn, &p).0 - loss_of(&hn, &m).0) / (2.0 * h),
                gx[[r, c]],
            );
        }
        for l in 0..2 {
            let (rows, cols) = hn.params.weights[l].dim();
            for idx in (0..rows * cols).step_by(3) {
                let (r, c) = (idx / cols, idx % cols);
                let (mut p, mut m) = (hn.clone(), hn.clone());
                p.params.weights[l][[r, c]] += h;
                m.params.weights[l][[r, c]] -= h;
                check(
                    (loss_of(&p, &x).0 - loss_of(&m, &x).0) / (2.0 * h),
                    gw[l][[r, c]],
                );
            }
            for k in 0..hn.params.biases[l].len() {
                let (mut p, mut m) = (hn.clone(), hn.clone());
                p.params.biases[l][k] += h;
                m.params.biases[l][k] -= h;
                check(
                    (loss_of(&p, &x).0 - loss_of(&m, &x).0) / (2.0 * h),
                    gb[l][[0, k]],
                );
            }
        }
        for k in 0..hn.params.bn_scale[0].len() {
            let (mut p, mut m) = (hn.clone(), hn.clone());
            p.params.bn_scale[0][k] += h;
            m.params.bn_scale[0][k] -= h;
            check(
                (loss_of(&p, &x).0 - loss_of(&m, &x).0) / (2.0 * h),
                gs[0][[0, k]],
            );
        }
    }

    #[test]
    fn outputs_stay_in_ball_and_adjacency_is_well_formed() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..1000u64 {
            let c = if trial % 2 == 0 { 0.01 } else { 0.1 };
            let hn = net(2, 3, c, trial);
            let x = rand_matrix(&mut rng, 4, 3, 5.0 / c.sqrt());
            let mut t = Tape::new();
            let vars = hn.register(&mut t);
            let xv = t.leaf(x);
            let a = hn.forward(&mut t, &vars, xv).unwrap();
            // every node after the input on this tape that holds ball rows
            let max_sq = (1.0 - crate::manifold::BOUNDARY_EPS) / c;
            let v = t.value(a);
            assert_eq!(v, &v.t().to_owned());
            for i in 0..4 {
                assert_eq!(v[[i, i]], 0.0);
            }
            assert!(v.iter().all(|&w| (0.0..1.0).contains(&w)));
            let b = ball(c);
            let mut t2 = Tape::new();
            let vars2 = hn.register(&mut t2);
            let xv2 = t2.leaf(rand_matrix(&mut rng, 4, 3, 1.0));
            let e = edge_embed(&mut t2, xv2);
            let mut z = lift(&mut t2, b, e);
            for l in 0..2 {
                z = mobius_linear(&mut t2, b, z, vars2.weights[l], vars2.biases[l]).unwrap();
                for row in t2.value(z).rows() {
                    assert!(row.dot(&row) <= max_sq);
                }
                if l == 0 {
                    z = tangent_batchnorm(&mut t2, b, z, vars2.bn_scale[0], vars2.bn_shift[0])
                        .unwrap();
                    for row in t2.value(z).rows() {
                        assert!(row.dot(&row) <= max_sq);
                    }
                    z = hyperbolic_relu(&mut t2, b, z);
                }
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let hn = net(3, 4, 0.01, 3);
        let x = rand_matrix(&mut rng, 6, 4, 1.0);
        let perm = [3, 0, 5, 1, 4, 2];
        let px = x.select(ndarray::Axis(0), &perm);
        let a = hn.adjacency(&x).unwrap();
        let pa = hn.adjacency(&px).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert!((pa[[i, j]] - a[[perm[i], perm[j]]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn size_and_shape_limits() {
        let hn = net(2, 2, 0.1, 0);
        assert!(hn.adjacency(&Array2::zeros((3, 5))).is_err());
        let big = HyperNet::new(
            HyperNetConfig {
                layers: 1,
                hidden: 1,
                curvature: 0.1,
                seed: 0,
            },
            1,
        )
        .unwrap();
        assert!(big.adjacency(&Array2::zeros((MAX_NODES + 1, 1))).is_err());
        let a = hn.adjacency(&Array2::zeros((35, 2))).unwrap();
        assert_eq!(a.dim(), (35, 35));
    }

    #[test]
    fn checkpoint_is_json() {
        let hn = net(2, 2, 0.1, 0);
        let bytes = hn.checkpoint().unwrap();
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(v["layers"][0]["shape"][0], 4);
        assert_eq!(v["layers"].as_array().unwrap().len(), 2);
    }
}
