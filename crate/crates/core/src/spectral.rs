//! Walk spectra and walk-based distances: spectral gaps, the differentiable
//! gap loss, commute times from the Laplacian pseudoinverse, shortest-path
//! flow distances, and mixing/conductance diagnostics.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use ndarray::{Array1, Array2};
use sprs::CsMat;

use crate::adgrad::{Tape, Var};
use crate::error::{HydroError, Result};
use crate::fmtutil;
use crate::graphcore::{lazy_walk_sampled, lazy_walk_synthetic_symmetric, Graph};
use crate::linalg;

/// Laplacian eigenvalues at or below this are treated as zero when forming
/// the pseudoinverse.
pub const PINV_TOL: f64 = 1e-10;

/// Default cap applied to commute times in heatmap exports.
pub const DEFAULT_COMMUTE_CAP: f64 = 20000.0;

/// Floor on the sampled gap when normalizing the gap loss.
pub const GAP_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct SpectralGap {
    pub gap: f64,
    pub lambda2: f64,
    /// Unit eigenvector for `lambda2`.
    pub v2: Array1<f64>,
}

/// `1 − λ₂` of a symmetric walk matrix, `λ₂` being the second-largest
/// eigenvalue counted with multiplicity.
pub fn spectral_gap(w: &Array2<f64>) -> Result<SpectralGap> {
    linalg::require_symmetric(w, 1e-9, "spectral_gap")?;
    let n = w.nrows();
    if n < 2 {
        return Err(HydroError::shape("spectral_gap: need at least 2 nodes"));
    }
    let (vals, vecs) = linalg::sym_eigen(w);
    let lambda2 = vals[n - 2];
    Ok(SpectralGap {
        gap: 1.0 - lambda2,
        lambda2,
        v2: vecs.column(n - 2).to_owned(),
    })
}

/// Eigenvalue-only variant of [`spectral_gap`], returning `(gap, λ₂)`.
pub fn spectral_gap_value(w: &Array2<f64>) -> Result<(f64, f64)> {
    linalg::require_symmetric(w, 1e-9, "spectral_gap")?;
    let n = w.nrows();
    if n < 2 {
        return Err(HydroError::shape("spectral_gap: need at least 2 nodes"));
    }
    let vals = linalg::sym_eigenvalues(w);
    Ok((1.0 - vals[n - 2], vals[n - 2]))
}

/// Gap of the lazy walk `½(I + D⁻¹A′)` of a dense synthetic adjacency.
pub fn synthetic_gap(a: &Array2<f64>) -> Result<f64> {
    Ok(spectral_gap_value(&lazy_walk_synthetic_symmetric(a)?)?.0)
}

/// Gap of the self-loop lazy walk of a sampled adjacency.
pub fn sampled_gap(a_sub: &Array2<f64>) -> Result<f64> {
    Ok(spectral_gap_value(&lazy_walk_sampled(a_sub)?)?.0)
}

/// Records `1 − λ₂(½(I + D^{-1/2}A′D^{-1/2}))` for a symmetric,
/// nonnegative `A′` on the tape.
pub fn synthetic_gap_var(tape: &mut Tape, a_prime: Var) -> Result<Var> {
    let norm = tape.sym_normalize(a_prime)?;
    let shifted = tape.add_identity(norm, 1.0)?;
    let lazy = tape.affine(shifted, 0.5, 0.0);
    let l2 = tape.lambda2(lazy)?;
    Ok(tape.affine(l2, -1.0, 1.0))
}

/// The gap-alignment term `|g_syn − g_sub|`, with `g_syn` taken from the
/// walk of `A′` and `g_sub` from the self-loop walk of `A_sub`.
pub fn gap_loss(tape: &mut Tape, a_prime: Var, a_sub: &Array2<f64>) -> Result<Var> {
    let g_sub = sampled_gap(a_sub)?;
    let g_syn = synthetic_gap_var(tape, a_prime)?;
    let diff = tape.affine(g_syn, 1.0, -g_sub);
    Ok(tape.abs(diff))
}

/// `|g_syn − g_sub| / max(g_sub, 1e-6)` for a precomputed `g_sub`; returns
/// the loss together with the `g_syn` node.
pub fn normalized_gap_loss(tape: &mut Tape, a_prime: Var, g_sub: f64) -> Result<(Var, Var)> {
    let g_syn = synthetic_gap_var(tape, a_prime)?;
    let scale = 1.0 / g_sub.max(GAP_FLOOR);
    let diff = tape.affine(g_syn, scale, -g_sub * scale);
    Ok((tape.abs(diff), g_syn))
}

/// Moore–Penrose pseudoinverse of a symmetric matrix via its
/// eigendecomposition, dropping eigenvalues at or below [`PINV_TOL`] in
/// magnitude.
pub fn pseudoinverse_sym(m: &Array2<f64>) -> Array2<f64> {
    let (vals, vecs) = linalg::sym_eigen(m);
    let n = m.nrows();
    let mut scaled = vecs.clone();
    for k in 0..n {
        let inv = if vals[k].abs() > PINV_TOL {
            1.0 / vals[k]
        } else {
            0.0
        };
        scaled.column_mut(k).mapv_inplace(|x| x * inv);
    }
    scaled.dot(&vecs.t())
}

/// Commute times `vol·(G_uu + G_vv − G_uv − G_vu)` with `G = L⁺`, computed
/// per connected component with that component's volume. Pairs in
/// different components get `+∞`.
pub fn commute_matrix(g: &Graph) -> Array2<f64> {
    let n = g.n();
    let mut ct = Array2::from_elem((n, n), f64::INFINITY);
    for comp in g.components() {
        let k = comp.len();
        let mut pos = vec![usize::MAX; n];
        for (a, &u) in comp.iter().enumerate() {
            pos[u] = a;
        }
        let mut lap = Array2::zeros((k, k));
        let mut vol = 0.0;
        for (a, &u) in comp.iter().enumerate() {
            for (v, w) in g.neighbors(u) {
                let b = pos[v];
                lap[[a, b]] -= w;
                lap[[a, a]] += w;
                vol += w;
            }
        }
        let green = pseudoinverse_sym(&lap);
        for a in 0..k {
            for b in 0..k {
                let value = if a == b {
                    0.0
                } else {
                    vol * (green[[a, a]] + green[[b, b]] - green[[a, b]] - green[[b, a]])
                };
                ct[[comp[a], comp[b]]] = value.max(0.0);
            }
        }
    }
    ct
}

/// Elementwise `min(x, cap)`; `+∞` entries become `cap`.
pub fn cap_matrix(m: &Array2<f64>, cap: f64) -> Result<Array2<f64>> {
    if !(cap > 0.0) {
        return Err(HydroError::contract(format!(
            "cap must be positive, got {cap}"
        )));
    }
    Ok(m.mapv(|x| x.min(cap)))
}

#[derive(Clone, Copy, PartialEq)]
struct Frontier {
    dist: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest-path weights from `source` over a CSR adjacency.
pub fn dijkstra(adj: &CsMat<f64>, source: usize) -> Vec<f64> {
    let n = adj.rows();
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Frontier {
        dist: 0.0,
        node: source,
    });
    while let Some(Frontier { dist: d, node: u }) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        let row = adj.outer_view(u).expect("row in range");
        for (v, &w) in row.iter() {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Frontier { dist: nd, node: v });
            }
        }
    }
    dist
}

/// All-pairs shortest-path weights; unreachable pairs are `+∞`.
pub fn all_pairs_dijkstra(adj: &CsMat<f64>) -> Result<Array2<f64>> {
    let (r, c) = adj.shape();
    if r != c {
        return Err(HydroError::shape(format!("adjacency is {r}×{c}")));
    }
    if let Some((&w, (i, j))) = adj.iter().find(|(w, _)| **w < 0.0 || w.is_nan()) {
        return Err(HydroError::domain(format!("edge ({i},{j}) has weight {w}")));
    }
    let adj = adj.to_csr();
    let mut out = Array2::zeros((r, r));
    for s in 0..r {
        let d = dijkstra(&adj, s);
        out.row_mut(s).assign(&Array1::from(d));
    }
    Ok(out)
}

/// Flow distances: all-pairs shortest-path weights of `g`.
pub fn flow_distance(g: &Graph) -> Result<Array2<f64>> {
    all_pairs_dijkstra(g.adjacency())
}

/// Eigenvalues of the normalized Laplacian `I − D^{-1/2}AD^{-1/2}` in
/// ascending order.
pub fn normalized_laplacian_spectrum(g: &Graph) -> Vec<f64> {
    let n = g.n();
    let deg = g.degrees();
    let mut m = Array2::<f64>::eye(n);
    for i in 0..n {
        for (j, w) in g.neighbors(i) {
            if deg[i] > 0.0 && deg[j] > 0.0 {
                m[[i, j]] -= w / (deg[i] * deg[j]).sqrt();
            }
        }
    }
    linalg::sym_eigenvalues(&m)
}

#[derive(Clone, Debug)]
pub struct WalkDiagnostics {
    /// Gap of the lazy walk `½(I + D⁻¹A)`.
    pub gap: f64,
    pub lambda2: f64,
    /// Second-smallest normalized-Laplacian eigenvalue.
    pub nu2: f64,
    /// `1/gap`.
    pub mixing_estimate: f64,
    /// Total variation to the stationary distribution after `t` lazy steps
    /// from the start node, for `t = 0, 1, …`.
    pub tv_curve: Vec<f64>,
    pub cheeger_lower: f64,
    pub cheeger_upper: f64,
}

/// Mixing and conductance diagnostics of a connected graph. The curve runs
/// for `steps` steps, or `⌈50·mixing_estimate⌉` when `None`.
pub fn walk_diagnostics(g: &Graph, start: usize, steps: Option<usize>) -> Result<WalkDiagnostics> {
    if !g.is_connected() || g.n() < 2 {
        return Err(HydroError::contract(
            "walk diagnostics need a connected graph with at least 2 nodes",
        ));
    }
    if start >= g.n() {
        return Err(HydroError::contract(format!(
            "start node {start} out of range"
        )));
    }
    let nu = normalized_laplacian_spectrum(g);
    let nu2 = nu[1];
    // lazy walk eigenvalues are 1 − ν/2
    let gap = nu2 / 2.0;
    let lambda2 = 1.0 - gap;
    let mixing_estimate = 1.0 / gap;
    let steps = steps.unwrap_or_else(|| (50.0 * mixing_estimate).ceil() as usize);

    let deg = g.degrees();
    let vol: f64 = deg.iter().sum();
    let pi: Vec<f64> = deg.iter().map(|d| d / vol).collect();
    let tv = |p: &[f64]| 0.5 * p.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum::<f64>();
    let mut p = vec![0.0; g.n()];
    p[start] = 1.0;
    let mut tv_curve = Vec::with_capacity(steps + 1);
    tv_curve.push(tv(&p));
    for _ in 0..steps {
        let mut next: Vec<f64> = p.iter().map(|x| 0.5 * x).collect();
        for (i, &pi_mass) in p.iter().enumerate() {
            if pi_mass == 0.0 {
                continue;
            }
            for (j, w) in g.neighbors(i) {
                next[j] += 0.5 * pi_mass * w / deg[i];
            }
        }
        p = next;
        tv_curve.push(tv(&p));
    }
    Ok(WalkDiagnostics {
        gap,
        lambda2,
        nu2,
        mixing_estimate,
        tv_curve,
        cheeger_lower: nu2 / 2.0,
        cheeger_upper: (2.0 * nu2).sqrt(),
    })
}

/// Spectral and distance summary of a graph.
#[derive(Clone, Debug)]
pub struct WalkReport {
    pub spectral_gap: f64,
    pub lambda2: f64,
    pub commute: Array2<f64>,
    pub flow_dist: Array2<f64>,
    /// `None` for disconnected graphs.
    pub diagnostics: Option<WalkDiagnostics>,
}

pub fn walk_report(g: &Graph) -> Result<WalkReport> {
    let w = crate::graphcore::lazy_walk_synthetic_symmetric(&g.dense_adjacency())?;
    let (spectral_gap, lambda2) = spectral_gap_value(&w)?;
    let diagnostics = if g.is_connected() {
        Some(walk_diagnostics(g, 0, Some(0))?)
    } else {
        None
    };
    Ok(WalkReport {
        spectral_gap,
        lambda2,
        commute: commute_matrix(g),
        flow_dist: flow_distance(g)?,
        diagnostics,
    })
}

/// Writes a matrix as CSV, one row per line, 17 significant digits.
/// `header` lines are emitted first, each prefixed with `# `.
pub fn write_matrix_csv(path: impl AsRef<Path>, m: &Array2<f64>, header: &[String]) -> Result<()> {
    let mut out = String::with_capacity(m.len() * 24 + 64);
    for h in header {
        out.push_str("# ");
        out.push_str(h);
        out.push('\n');
    }
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|&x| fmtutil::f64_17(x)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a matrix written by [`write_matrix_csv`]; `#` lines are skipped.
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| HydroError::ingestion(path, format!("line {}: {e}", k + 1)))?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(HydroError::ingestion(
                    path,
                    format!("line {}: {} values, expected {c}", k + 1, row.len()),
                ))
            }
            _ => {}
        }
        data.extend(row);
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols.unwrap_or(0)), data)
        .map_err(|e| HydroError::ingestion(path, e.to_string()))
}

/// Capped commute matrix of `g` written as CSV.
pub fn commute_heatmap_export(
    g: &Graph,
    cap: f64,
    path: impl AsRef<Path>,
    header: &[String],
) -> Result<Array2<f64>> {
    let m = cap_matrix(&commute_matrix(g), cap)?;
    write_matrix_csv(path, &m, header)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphcore::lazy_walk_synthetic;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn complete(n: usize) -> Graph {
        let mut e = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                e.push((u, v));
            }
        }
        Graph::structure_only(n, &e).unwrap()
    }

    fn path(n: usize) -> Graph {
        let e: Vec<_> = (0..n - 1).map(|u| (u, u + 1)).collect();
        Graph::structure_only(n, &e).unwrap()
    }

    fn lazy_sym(g: &Graph) -> Array2<f64> {
        lazy_walk_synthetic_symmetric(&g.dense_adjacency()).unwrap()
    }

    #[test]
    fn closed_form_gaps() {
        let k4 = spectral_gap(&lazy_sym(&complete(4))).unwrap();
        assert!((k4.lambda2 - 1.0 / 3.0).abs() < 1e-9);
        assert!((k4.gap - 2.0 / 3.0).abs() < 1e-9);
        let p3 = spectral_gap(&lazy_sym(&path(3))).unwrap();
        assert!((p3.gap - 0.5).abs() < 1e-9);
        let id = spectral_gap(&Array2::eye(3)).unwrap();
        assert_eq!(id.gap, 0.0);
        assert!(matches!(
            spectral_gap(&array![[1.0, 0.5], [0.0, 1.0]]),
            Err(HydroError::Contract(_))
        ));
    }

    #[test]
    fn eigenvector_is_unit_and_eigen() {
        let w = lazy_sym(&path(5));
        let sg = spectral_gap(&w).unwrap();
        assert!((sg.v2.dot(&sg.v2) - 1.0).abs() < 1e-12);
        let wv = w.dot(&sg.v2);
        for (a, b) in wv.iter().zip(sg.v2.iter()) {
            assert!((a - sg.lambda2 * b).abs() < 1e-10);
        }
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64, weighted: bool) -> Graph {
        let mut e = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if rng.gen::<f64>() < p {
                    let w = if weighted {
                        rng.gen_range(0.1..5.0)
                    } else {
                        1.0
                    };
                    e.push((u, v, w));
                }
            }
        }
        Graph::from_edges(
            n,
            &e,
            Array2::zeros((n, 0)),
            vec![0; n],
            1,
            Default::default(),
        )
        .unwrap()
    }

    fn dense_random(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let v = rng.gen_range(0.05..1.0);
                a[[i, j]] = v;
                a[[j, i]] = v;
            }
        }
        a
    }

    #[test]
    fn gap_matches_nonsymmetric_walk_spectrum() {
        // eigenvalues of the row-stochastic walk via the characteristic
        // polynomial check: W v = λ v with v = D^{-1/2} u
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let a = dense_random(&mut rng, 7);
            let sg = spectral_gap(&lazy_walk_synthetic_symmetric(&a).unwrap()).unwrap();
            let w = lazy_walk_synthetic(&a).unwrap();
            let d = a.sum_axis(ndarray::Axis(1));
            let v: Array1<f64> = sg
                .v2
                .iter()
                .zip(d.iter())
                .map(|(u, d)| u / d.sqrt())
                .collect();
            let wv = w.dot(&v);
            for (x, y) in wv.iter().zip(v.iter()) {
                assert!((x - sg.lambda2 * y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gap_loss_zero_on_permuted_self_loop_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            let g = random_graph(&mut rng, 9, 0.5, false);
            let a_sub = g.dense_adjacency();
            let mut perm: Vec<usize> = (0..9).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            // the synthetic walk has no self-loops, so the matching A′ carries
            // the sampled walk's self-loops explicitly
            let mut with_loops = a_sub.clone();
            for i in 0..9 {
                with_loops[[i, i]] += 1.0;
            }
            let permuted = Array2::from_shape_fn((9, 9), |(i, j)| with_loops[[perm[i], perm[j]]]);
            let mut tape = Tape::new();
            let a = tape.leaf(permuted);
            let loss = gap_loss(&mut tape, a, &a_sub).unwrap();
            assert!(tape.scalar(loss) < 1e-12);
        }
    }

    #[test]
    fn gap_loss_is_scale_invariant_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a_sub = random_graph(&mut rng, 10, 0.4, false).dense_adjacency();
        for _ in 0..5 {
            let a = dense_random(&mut rng, 10);
            let eval = |m: Array2<f64>| {
                let mut t = Tape::new();
                let v = t.leaf(m);
                let l = gap_loss(&mut t, v, &a_sub).unwrap();
                t.scalar(l)
            };
            let base = eval(a.clone());
            assert!(base >= 0.0);
            for alpha in [0.5, 2.0] {
                assert!((eval(&a * alpha) - base).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gap_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a_sub = random_graph(&mut rng, 10, 0.4, false).dense_adjacency();
        for _ in 0..5 {
            let a = dense_random(&mut rng, 10);
            let build = |t: &mut Tape, m: Array2<f64>| {
                let v = t.leaf(m);
                let s = t.symmetrize(v).unwrap();
                let z = t.zero_diag(s).unwrap();
                (v, gap_loss(t, z, &a_sub).unwrap())
            };
            let mut tape = Tape::new();
            let (v, loss) = build(&mut tape, a.clone());
            let grad = tape.backward(loss).unwrap().get(v).unwrap().clone();
            let h = 1e-6;
            for i in 0..10 {
                for j in 0..10 {
                    let mut p = a.clone();
                    let mut m = a.clone();
                    p[[i, j]] += h;
                    m[[i, j]] -= h;
                    let mut tp = Tape::new();
                    let (_, lp) = build(&mut tp, p);
                    let mut tm = Tape::new();
                    let (_, lm) = build(&mut tm, m);
                    let fd = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * h);
                    let err = (fd - grad[[i, j]]).abs() / fd.abs().max(grad[[i, j]].abs()).max(1.0);
                    assert!(err < 1e-4, "({i},{j}) fd {fd} vs {}", grad[[i, j]]);
                }
            }
        }
    }

    /// Commute times from effective resistances computed by Gaussian
    /// elimination on the grounded Laplacian.
    fn resistance_oracle(g: &Graph, u: usize, v: usize) -> f64 {
        let n = g.n();
        let lap = {
            let mut l = Array2::<f64>::zeros((n, n));
            for (a, b, w) in g.edges() {
                l[[a, b]] -= w;
                l[[b, a]] -= w;
                l[[a, a]] += w;
                l[[b, b]] += w;
            }
            l
        };
        // ground node v, inject unit current at u
        let keep: Vec<usize> = (0..n).filter(|&k| k != v).collect();
        let m = keep.len();
        let mut aug = Array2::<f64>::zeros((m, m + 1));
        for (r, &i) in keep.iter().enumerate() {
            for (c, &j) in keep.iter().enumerate() {
                aug[[r, c]] = lap[[i, j]];
            }
            aug[[r, m]] = if i == u { 1.0 } else { 0.0 };
        }
        for col in 0..m {
            let piv = (col..m)
                .max_by(|&a, &b| aug[[a, col]].abs().total_cmp(&aug[[b, col]].abs()))
                .unwrap();
            for k in 0..=m {
                let t = aug[[col, k]];
                aug[[col, k]] = aug[[piv, k]];
                aug[[piv, k]] = t;
            }
            for r in 0..m {
                if r != col {
                    let f = aug[[r, col]] / aug[[col, col]];
                    for k in col..=m {
                        aug[[r, k]] -= f * aug[[col, k]];
                    }
                }
            }
        }
        let pos = keep.iter().position(|&k| k == u).unwrap();
        aug[[pos, m]] / aug[[pos, pos]]
    }

    #[test]
    fn commute_closed_forms() {
        let ct = commute_matrix(&path(3));
        assert!((ct[[0, 1]] - 4.0).abs() < 1e-9);
        assert!((ct[[0, 2]] - 8.0).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let g = random_graph(&mut rng, 10, 0.5, true);
            if !g.is_connected() {
                continue;
            }
            let ct = commute_matrix(&g);
            let vol: f64 = g.degrees().iter().sum();
            for u in 0..10 {
                assert_eq!(ct[[u, u]], 0.0);
                for v in 0..10 {
                    assert!((ct[[u, v]] - ct[[v, u]]).abs() < 1e-9);
                    if u != v {
                        let expect = vol * resistance_oracle(&g, u, v);
                        assert!((ct[[u, v]] - expect).abs() < 1e-9 * expect.max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn commute_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let g = random_graph(&mut rng, 9, 0.6, true);
        let mut perm: Vec<usize> = (0..9).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let h = g.induced(&perm).unwrap();
        let (cg, ch) = (commute_matrix(&g), commute_matrix(&h));
        for a in 0..9 {
            for b in 0..9 {
                let (x, y) = (ch[[a, b]], cg[[perm[a], perm[b]]]);
                assert!(x == y || (x - y).abs() < 1e-9 * y.max(1.0));
            }
        }
    }

    #[test]
    fn commute_across_components_is_infinite() {
        let g = Graph::structure_only(4, &[(0, 1), (2, 3)]).unwrap();
        let ct = commute_matrix(&g);
        assert!((ct[[0, 1]] - 2.0).abs() < 1e-12);
        assert!(ct[[0, 2]].is_infinite());
        let capped = cap_matrix(&commute_matrix(&path(3)), 0.5).unwrap();
        assert_eq!(
            capped,
            array![[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]]
        );
        assert!(cap_matrix(&ct, 0.0).is_err());
    }

    fn floyd_warshall(g: &Graph) -> Array2<f64> {
        let n = g.n();
        let mut d = Array2::from_elem((n, n), f64::INFINITY);
        for i in 0..n {
            d[[i, i]] = 0.0;
        }
        for (u, v, w) in g.edges() {
            d[[u, v]] = d[[u, v]].min(w);
            d[[v, u]] = d[[v, u]].min(w);
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let via = d[[i, k]] + d[[k, j]];
                    if via < d[[i, j]] {
                        d[[i, j]] = via;
                    }
                }
            }
        }
        d
    }

    #[test]
    fn flow_distance_examples() {
        let tri = flow_distance(&complete(3)).unwrap();
        assert_eq!(
            tri,
            array![[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]]
        );
        assert_eq!(flow_distance(&path(3)).unwrap()[[0, 2]], 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..20 {
            let g = random_graph(&mut rng, 12, 0.3, true);
            let fd = flow_distance(&g).unwrap();
            let fw = floyd_warshall(&g);
            for (a, b) in fd.iter().zip(fw.iter()) {
                // same additions in a different order may differ in the last bit
                assert!(a == b || (a - b).abs() <= 1e-12 * b.abs());
            }
            for i in 0..12 {
                for j in 0..12 {
                    for k in 0..12 {
                        assert!(fd[[i, j]] <= fd[[i, k]] + fd[[k, j]] + 1e-12);
                    }
                }
            }
        }
        let neg =
            sprs::TriMat::from_triplets((2, 2), vec![0, 1], vec![1, 0], vec![-1.0, -1.0]).to_csr();
        assert!(matches!(
            all_pairs_dijkstra(&neg),
            Err(HydroError::Domain(_))
        ));
    }

    #[test]
    fn diagnostics_examples() {
        let d = walk_diagnostics(&complete(4), 0, None).unwrap();
        assert!((d.nu2 - 4.0 / 3.0).abs() < 1e-12);
        assert!((d.cheeger_lower - 2.0 / 3.0).abs() < 1e-12);
        assert!((d.cheeger_upper - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((d.gap - 2.0 / 3.0).abs() < 1e-12);

        let edge = walk_diagnostics(&path(2), 0, Some(3)).unwrap();
        assert_eq!(edge.tv_curve[0], 0.5);

        let g = path(6);
        let d = walk_diagnostics(&g, 0, None).unwrap();
        for w in d.tv_curve.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
        assert!(*d.tv_curve.last().unwrap() <= 1e-6);

        let split = Graph::structure_only(3, &[(0, 1)]).unwrap();
        assert!(matches!(
            walk_diagnostics(&split, 0, None),
            Err(HydroError::Contract(_))
        ));
    }

    #[test]
    fn lazy_walk_eigenvalues_relate_to_normalized_laplacian() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let g = random_graph(&mut rng, 12, 0.5, true);
        let nu = normalized_laplacian_spectrum(&g);
        let mut from_walk: Vec<f64> = linalg::sym_eigenvalues(&lazy_sym(&g))
            .into_iter()
            .map(|l| 2.0 * (1.0 - l))
            .collect();
        from_walk.sort_by(f64::total_cmp);
        for (a, b) in nu.iter().zip(&from_walk) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn heatmap_export_caps_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let p3 = Graph::structure_only(3, &[(0, 1), (1, 2)]).unwrap();
        let path = dir.path().join("ct.csv");
        let m = commute_heatmap_export(&p3, 0.5, &path, &["config_hash=abc".into()]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m[[i, j]], if i == j { 0.0 } else { 0.5 });
            }
        }
        assert!(std::fs::read_to_string(&path)
            .unwrap()
            .starts_with("# config_hash=abc\n"));
        assert_eq!(read_matrix_csv(&path).unwrap(), m);

        let uncapped = commute_heatmap_export(&p3, DEFAULT_COMMUTE_CAP, &path, &[]).unwrap();
        assert_eq!(uncapped, commute_matrix(&p3));
        let split = Graph::structure_only(3, &[(0, 1)]).unwrap();
        let flow = flow_distance(&split).unwrap();
        write_matrix_csv(&path, &flow, &[]).unwrap();
        assert_eq!(read_matrix_csv(&path).unwrap(), flow);
    }
}
