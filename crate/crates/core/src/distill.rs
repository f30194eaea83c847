//! The condensation loop: per-class SGC gradient matching along a short
//! training trajectory, spectral-gap alignment against sampled subgraphs,
//! a tangent-norm regularizer, and Riemannian SGD for ball-valued
//! parameters.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adgrad::{Tape, Var};
use crate::error::{HydroError, Result};
use crate::gnn::{self, AdamState, GcnConfig};
use crate::graphcore::{init_condensed, sample_connected_subgraph, CondensedGraph, Graph};
use crate::hypernet::{HyperNet, HyperNetConfig};
use crate::manifold::PoincareBall;
use crate::spectral;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Fraction of the original node count kept.
    pub ratio: f64,
    pub epochs: usize,
    pub outer: usize,
    pub inner: usize,
    /// Riemannian step size for the condensed features.
    pub lr_feat: f64,
    /// Step size for hypernetwork parameters (Adam for weights, Riemannian
    /// SGD for Möbius biases).
    pub lr_struct: f64,
    /// Adam step size of the inner SGC.
    pub lr_model: f64,
    pub beta: f64,
    /// Weight of the spectral-gap term; 1 in the full objective.
    pub gap_weight: f64,
    pub momentum: f64,
    pub curvature: f64,
    pub weight_decay: f64,
    /// Nodes per sampled subgraph.
    pub sample_size: usize,
    pub sgc_hops: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Probe cadence in epochs; 0 disables probing.
    pub probe_every: usize,
    pub probe_epochs: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            ratio: 0.026,
            epochs: 600,
            outer: 10,
            inner: 10,
            lr_feat: 0.01,
            lr_struct: 0.01,
            lr_model: 0.01,
            beta: 0.1,
            gap_weight: 1.0,
            momentum: 0.0,
            curvature: 0.01,
            weight_decay: 0.0,
            sample_size: 1000,
            sgc_hops: 2,
            hidden: 128,
            layers: 2,
            probe_every: 50,
            probe_epochs: 200,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(HydroError::contract(format!("{field}: {msg}")));
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return bad("ratio", format!("{} is outside (0, 1]", self.ratio));
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.outer == 0 || self.inner == 0 {
            return bad("outer/inner", "loop counts must be at least 1".into());
        }
        for (name, lr) in [
            ("lr_feat", self.lr_feat),
            ("lr_struct", self.lr_struct),
            ("lr_model", self.lr_model),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(name, format!("{lr} is not a nonnegative step size"));
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta", format!("{} must be nonnegative", self.beta));
        }
        if !(self.gap_weight >= 0.0 && self.gap_weight.is_finite()) {
            return bad(
                "gap_weight",
                format!("{} must be nonnegative", self.gap_weight),
            );
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("{} is outside [0, 1)", self.momentum));
        }
        if !(self.curvature > 0.0 && self.curvature.is_finite()) {
            return bad("curvature", format!("{} must be positive", self.curvature));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(
                "weight_decay",
                format!("{} must be nonnegative", self.weight_decay),
            );
        }
        if self.sample_size < 2 {
            return bad("sample_size", "must be at least 2".into());
        }
        if self.layers == 0 || self.hidden == 0 {
            return bad("layers/hidden", "must be positive".into());
        }
        Ok(())
    }
}

/// Riemannian SGD with momentum and weight decay on the Poincaré ball.
///
/// Each row of a parameter matrix is a separate ball point with its own
/// momentum buffer, kept in the tangent space at the row's current value.
#[derive(Clone, Debug)]
pub struct RiemannianOptState {
    ball: PoincareBall,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Array2<f64>,
}

impl RiemannianOptState {
    pub fn new(
        ball: PoincareBall,
        shape: (usize, usize),
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Self {
        Self {
            ball,
            lr,
            momentum,
            weight_decay,
            buffers: Array2::zeros(shape),
        }
    }

    pub fn buffers(&self) -> &Array2<f64> {
        &self.buffers
    }

    /// Steps every row of `points` in place.
    pub fn step(
        &mut self,
        points: &mut Array2<f64>,
        grads: &Array2<f64>,
        epoch: usize,
    ) -> Result<()> {
        if points.dim() != self.buffers.dim() || grads.dim() != self.buffers.dim() {
            return Err(HydroError::shape(format!(
                "riemannian step: parameter {:?}, gradient {:?}, state {:?}",
                points.dim(),
                grads.dim(),
                self.buffers.dim()
            )));
        }
        for i in 0..points.nrows() {
            let (p, m) = riemannian_step(
                &self.ball,
                points.row(i),
                grads.row(i),
                self.buffers.row(i),
                self.lr,
                self.momentum,
                self.weight_decay,
                epoch,
            )?;
            points.row_mut(i).assign(&p);
            self.buffers.row_mut(i).assign(&m);
        }
        Ok(())
    }
}

/// One Riemannian SGD step for a single point. `m` is the momentum buffer
/// in the tangent space at `p`; the returned buffer lives at the new point.
///
/// `r = ((1 − c‖p‖²)²/4)(g + λ·log₀p)`, `m ← μm + r`,
/// `p′ = proj(exp_p(−lr·m))`, `m ← PT_{p→p′}(m)`.
#[allow(clippy::too_many_arguments)]
pub fn riemannian_step(
    ball: &PoincareBall,
    p: ArrayView1<f64>,
    grad: ArrayView1<f64>,
    m: ArrayView1<f64>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    epoch: usize,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(HydroError::Training {
            epoch,
            msg: "non-finite gradient for a ball parameter".into(),
        });
    }
    let c = ball.curvature();
    let p_sq = p.dot(&p);
    let metric = (1.0 - c * p_sq).powi(2) / 4.0;
    let mut rgrad = grad.to_owned();
    if weight_decay != 0.0 {
        rgrad.scaled_add(weight_decay, &ball.logmap0_raw(p));
    }
    rgrad.mapv_inplace(|v| v * metric);
    let mut buf = m.to_owned() * momentum;
    buf += &rgrad;
    let step = buf.mapv(|v| -lr * v);
    let moved = ball.expmap_raw(p, step.view());
    let next = ball.project_raw(moved.view());
    let buf = if momentum != 0.0 {
        ball.transport_raw(p, next.view(), buf.view())
    } else {
        Array1::zeros(p.len())
    };
    Ok((next, buf))
}

/// `Σ_layers Σ_cols (1 − cos)` between paired gradient tensors; columns
/// where either side has zero norm contribute 0.
pub fn match_loss(syn: &[Array2<f64>], real: &[Array2<f64>]) -> Result<f64> {
    if syn.len() != real.len() {
        return Err(HydroError::shape(format!(
            "{} vs {} gradient tensors",
            syn.len(),
            real.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in syn.iter().zip(real) {
        if a.dim() != b.dim() {
            return Err(HydroError::shape(format!(
                "gradient {:?} vs {:?}",
                a.dim(),
                b.dim()
            )));
        }
        for (ca, cb) in a.columns().into_iter().zip(b.columns()) {
            let na = ca.dot(&ca).sqrt();
            let nb = cb.dot(&cb).sqrt();
            if na < 1e-12 || nb < 1e-12 {
                continue;
            }
            total += 1.0 - ca.dot(&cb) / (na * nb);
        }
    }
    Ok(total)
}

/// `L_gm + L_rw + β·L_reg`.
pub fn total_loss(l_gm: f64, l_rw: f64, l_reg: f64, beta: f64) -> f64 {
    l_gm + l_rw + beta * l_reg
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_gm")]
    pub l_gm: f64,
    #[serde(rename = "L_rw_norm")]
    pub l_rw_norm: f64,
    #[serde(rename = "L_reg")]
    pub l_reg: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub g_syn: f64,
    pub g_sub: f64,
    pub probe_val_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    /// The probe-selected graph, or the final one when nothing was probed.
    pub condensed: CondensedGraph,
    pub final_graph: CondensedGraph,
    pub best_epoch: usize,
    pub records: Vec<EpochRecord>,
    /// Outer iterations whose λ₂ was (near) repeated.
    pub degenerate_lambda2: usize,
}

/// Real per-class SGC gradients share one forward pass on the full graph.
struct RealSide {
    /// `(class, ŜᴷX rows of its training nodes, one-hot targets)`.
    classes: Vec<(usize, Array2<f64>, Array2<f64>)>,
}

impl RealSide {
    fn new(g: &Graph, hops: usize) -> Self {
        let h = gnn::propagate(&gnn::normalized_adjacency(g), g.features(), hops);
        let c = g.num_classes();
        let mut classes = Vec::new();
        for k in 0..c {
            let rows: Vec<usize> = g
                .splits()
                .train
                .iter()
                .copied()
                .filter(|&i| g.labels()[i] == k)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let mut y = Array2::zeros((rows.len(), c));
            y.column_mut(k).fill(1.0);
            classes.push((k, h.select(Axis(0), &rows), y));
        }
        Self { classes }
    }
}

fn softmax_grad(h: &Array2<f64>, theta: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    let p = gnn::softmax_rows(&h.dot(theta));
    h.t().dot(&(p - y)) / h.nrows() as f64
}

struct State {
    ball: PoincareBall,
    /// Condensed features as ball points.
    x: Array2<f64>,
    labels: Vec<usize>,
    net: HyperNet,
}

impl State {
    fn tangent_features(&self) -> Array2<f64> {
        let mut t = self.x.clone();
        for (mut out, row) in t.rows_mut().into_iter().zip(self.x.rows()) {
            out.assign(&self.ball.logmap0_raw(row));
        }
        t
    }

    fn snapshot(&self, config_hash: &str, seed: u64) -> Result<CondensedGraph> {
        let features = self.tangent_features();
        let adjacency = self.net.adjacency(&features)?;
        Ok(CondensedGraph {
            adjacency,
            features,
            labels: self.labels.clone(),
            config_hash: config_hash.to_string(),
            seed,
        })
    }

    fn check_inside(&self, epoch: usize) -> Result<()> {
        let limit = self.ball.max_norm_sq() * (1.0 + 1e-12);
        let rows = self
            .x
            .rows()
            .into_iter()
            .chain(self.net.params.biases.iter().map(|b| b.view()));
        for r in rows {
            if !(r.dot(&r) <= limit) {
                return Err(HydroError::Training {
                    epoch,
                    msg: "a hyperbolic parameter left the ball".into(),
                });
            }
        }
        Ok(())
    }
}

/// Condenses `g`. `on_epoch` sees every record as soon as it is complete
/// (the CLI streams them to the run log).
pub fn distill(
    g: &Graph,
    cfg: &DistillConfig,
    config_hash: &str,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    if g.splits().train.is_empty() {
        return Err(HydroError::contract("distillation needs training nodes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ball = PoincareBall::new(cfg.curvature)?;
    let init = init_condensed(g, cfg.ratio, &mut rng)?;
    let n_syn = init.n();
    let d = g.num_features();
    let c = g.num_classes();

    let mut x = init.features.clone();
    for mut row in x.rows_mut() {
        let p = ball.project_raw(ball.expmap0_raw(row.view()).view());
        row.assign(&p);
    }
    let net = HyperNet::new(
        HyperNetConfig {
            layers: cfg.layers,
            hidden: cfg.hidden,
            curvature: cfg.curvature,
            seed: rng.gen(),
        },
        d,
    )?;
    let mut state = State {
        ball,
        x,
        labels: init.labels.clone(),
        net,
    };
    let syn_classes: Vec<(usize, Vec<usize>)> = (0..c)
        .map(|k| {
            (
                k,
                (0..n_syn)
                    .filter(|&i| state.labels[i] == k)
                    .collect::<Vec<_>>(),
            )
        })
        .filter(|(_, rows)| !rows.is_empty())
        .collect();
    let y_syn = gnn::one_hot(&state.labels, c);
    let real = RealSide::new(g, cfg.sgc_hops);

    let mut feat_opt = RiemannianOptState::new(
        ball,
        (n_syn, d),
        cfg.lr_feat,
        cfg.momentum,
        cfg.weight_decay,
    );
    let mut bias_opts: Vec<RiemannianOptState> = state
        .net
        .params
        .biases
        .iter()
        .map(|b| {
            RiemannianOptState::new(
                ball,
                (1, b.len()),
                cfg.lr_struct,
                cfg.momentum,
                cfg.weight_decay,
            )
        })
        .collect();
    let euclid_shapes: Vec<(usize, usize)> = euclidean_params(&state.net)
        .iter()
        .map(|p| p.dim())
        .collect();
    let mut struct_adam = AdamState::new(&euclid_shapes, cfg.weight_decay);

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut last_good = state.snapshot(config_hash, cfg.seed)?;
    let mut best = (f64::NEG_INFINITY, last_good.clone(), 0usize);
    let mut degenerate = 0;
    let sample_size = cfg.sample_size.min(g.n());
    let val = g.splits().val.clone();

    for epoch in 1..=cfg.epochs {
        let sub = sample_connected_subgraph(g, sample_size, &mut rng)?;
        let g_sub = spectral::sampled_gap(&sub.graph.dense_adjacency())?;
        let mut sums = [0.0f64; 5];
        for _ in 0..cfg.outer {
            let mut theta = gnn::SgcModel::init(cfg.sgc_hops, d, c, &mut rng).theta;
            let mut theta_adam = AdamState::new(&[theta.dim()], 0.0);
            let mut tape = Tape::new();
            let xv = tape.leaf(state.x.clone());
            let vars = state.net.register(&mut tape);
            let xt = tape.log0_rows(xv, ball);
            let a = state.net.forward(&mut tape, &vars, xt)?;
            let h = gnn::propagate_var(&mut tape, a, xt, cfg.sgc_hops)?;
            let h_val = tape.value(h).clone();
            let mut class_h = Vec::with_capacity(syn_classes.len());
            for (k, rows) in &syn_classes {
                class_h.push((
                    *k,
                    tape.select_rows(h, rows)?,
                    gnn::one_hot(&vec![*k; rows.len()], c),
                ));
            }

            let mut l_gm: Option<Var> = None;
            for _ in 0..cfg.inner {
                for (k, hc, yc) in &class_h {
                    let Some((_, h_real, y_real)) = real.classes.iter().find(|(rk, _, _)| rk == k)
                    else {
                        continue;
                    };
                    let g_real = softmax_grad(h_real, &theta, y_real);
                    let g_syn = gnn::sgc_grad_var(&mut tape, *hc, &theta, yc)?;
                    let target = tape.constant(g_real);
                    let term = tape.cosine_match(g_syn, target)?;
                    l_gm = Some(match l_gm {
                        Some(acc) => tape.add(acc, term)?,
                        None => term,
                    });
                }
                let step = softmax_grad(&h_val, &theta, &y_syn);
                theta_adam.step(&mut [&mut theta], &[step], cfg.lr_model);
            }
            let l_gm = match l_gm {
                Some(v) => v,
                None => tape.constant(Array2::zeros((1, 1))),
            };
            let before = tape.degenerate_lambda2_events();
            let (l_rw, g_syn) = spectral::normalized_gap_loss(&mut tape, a, g_sub)?;
            degenerate += tape.degenerate_lambda2_events() - before;
            let sq = tape.row_sq_norm(xt);
            let l_reg = tape.mean(sq);
            let rw_term = tape.affine(l_rw, cfg.gap_weight, 0.0);
            let reg_term = tape.affine(l_reg, cfg.beta, 0.0);
            let partial = tape.add(l_gm, rw_term)?;
            let total = tape.add(partial, reg_term)?;

            let vals = [
                tape.scalar(l_gm),
                tape.scalar(l_rw),
                tape.scalar(l_reg),
                tape.scalar(g_syn),
                total_loss(
                    tape.scalar(l_gm),
                    cfg.gap_weight * tape.scalar(l_rw),
                    tape.scalar(l_reg),
                    cfg.beta,
                ),
            ];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(HydroError::Divergence {
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }

            let grads = tape.backward(total)?;
            let gx = grads.get_or_zeros(xv, state.x.dim());
            feat_opt.step(&mut state.x, &gx, epoch)?;
            for (l, opt) in bias_opts.iter_mut().enumerate() {
                let b = &mut state.net.params.biases[l];
                let mut as_row = b.clone().insert_axis(Axis(0));
                let gb = grads.get_or_zeros(vars.biases[l], as_row.dim());
                opt.step(&mut as_row, &gb, epoch)?;
                *b = as_row.row(0).to_owned();
            }
            let mut euclid_grads = Vec::new();
            for (l, w) in state.net.params.weights.iter().enumerate() {
                euclid_grads.push(grads.get_or_zeros(vars.weights[l], w.dim()));
            }
            for (l, s) in state.net.params.bn_scale.iter().enumerate() {
                euclid_grads.push(grads.get_or_zeros(vars.bn_scale[l], (1, s.len())));
            }
            for (l, s) in state.net.params.bn_shift.iter().enumerate() {
                euclid_grads.push(grads.get_or_zeros(vars.bn_shift[l], (1, s.len())));
            }
            let mut params = euclidean_params(&state.net);
            let mut refs: Vec<&mut Array2<f64>> = params.iter_mut().collect();
            struct_adam.step(&mut refs, &euclid_grads, cfg.lr_struct);
            write_back(&mut state.net, params);
            state.check_inside(epoch)?;
        }

        let outer = cfg.outer as f64;
        let snap = state.snapshot(config_hash, cfg.seed)?;
        if snap
            .adjacency
            .iter()
            .chain(snap.features.iter())
            .any(|v| !v.is_finite())
        {
            return Err(HydroError::Divergence {
                epoch,
                last_good: Box::new(last_good),
            });
        }
        last_good = snap;
        let probe_due = cfg.probe_every > 0
            && !val.is_empty()
            && (epoch % cfg.probe_every == 0 || epoch == cfg.epochs);
        let probe_val_acc = if probe_due {
            let acc = probe(&last_good, g, &val, cfg.probe_epochs, &mut rng)?;
            if acc > best.0 {
                best = (acc, last_good.clone(), epoch);
            }
            Some(acc)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            l_gm: sums[0] / outer,
            l_rw_norm: sums[1] / outer,
            l_reg: sums[2] / outer,
            l_total: sums[4] / outer,
            g_syn: sums[3] / outer,
            g_sub,
            probe_val_acc,
        };
        log::debug!(
            "epoch {epoch}: L_gm {:.4} L_rw {:.4} g_syn {:.5} g_sub {:.5}",
            record.l_gm,
            record.l_rw_norm,
            record.g_syn,
            record.g_sub
        );
        on_epoch(&record)?;
        records.push(record);
    }

    if degenerate > 0 {
        log::info!("{degenerate} outer iterations hit a repeated second eigenvalue");
    }
    let (condensed, best_epoch) = if best.0.is_finite() {
        (best.1, best.2)
    } else {
        (last_good.clone(), cfg.epochs)
    };
    Ok(DistillOutcome {
        condensed,
        final_graph: last_good,
        best_epoch,
        records,
        degenerate_lambda2: degenerate,
    })
}

/// Validation accuracy of a short GCN trained on the condensed graph.
fn probe<R: Rng + ?Sized>(
    cg: &CondensedGraph,
    g: &Graph,
    val: &[usize],
    epochs: usize,
    rng: &mut R,
) -> Result<f64> {
    let cfg = GcnConfig {
        epochs,
        ..GcnConfig::default()
    };
    let (model, _) = gnn::gcn_train_condensed(cg, g.num_classes(), &cfg, rng)?;
    let out = gnn::gcn_infer(&model, g)?;
    Ok(gnn::accuracy(&out.predictions, g.labels(), val))
}

/// Weights, batch-norm scales and shifts as matrices, in a fixed order.
fn euclidean_params(net: &HyperNet) -> Vec<Array2<f64>> {
    let p = &net.params;
    p.weights
        .iter()
        .cloned()
        .chain(p.bn_scale.iter().map(|s| s.clone().insert_axis(Axis(0))))
        .chain(p.bn_shift.iter().map(|s| s.clone().insert_axis(Axis(0))))
        .collect()
}

fn write_back(net: &mut HyperNet, params: Vec<Array2<f64>>) {
    let p = &mut net.params;
    let (nw, ns) = (p.weights.len(), p.bn_scale.len());
    let mut it = params.into_iter();
    for k in 0..nw {
        p.weights[k] = it.next().expect("weight");
    }
    for k in 0..ns {
        p.bn_scale[k] = it.next().expect("scale").row(0).to_owned();
    }
    for k in 0..p.bn_shift.len() {
        p.bn_shift[k] = it.next().expect("shift").row(0).to_owned();
    }
}
