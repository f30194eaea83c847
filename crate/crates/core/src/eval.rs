//! Downstream evaluation of condensed graphs: node classification, link
//! prediction from GCN embeddings, the random-selection baseline and the
//! commute-time comparison score.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HydroError, Result};
use crate::fmtutil;
use crate::gnn::{self, GcnConfig, GcnModel};
use crate::graphcore::{apportion, budget, CondensedGraph, Graph};
use crate::spectral;

/// Fraction of edges held out for link prediction.
pub const LP_HOLDOUT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Nc,
    Lp,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Nc => "nc",
            Task::Lp => "lp",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: Task,
    pub mean: f64,
    /// Population standard deviation over the runs.
    pub std: f64,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub accuracies: Vec<f64>,
}

impl EvalResult {
    pub fn from_runs(
        task: Task,
        seeds: Vec<u64>,
        accuracies: Vec<f64>,
        config_hash: &str,
    ) -> Result<Self> {
        if seeds.len() != accuracies.len() || seeds.is_empty() {
            return Err(HydroError::contract(format!(
                "{} seeds for {} accuracies",
                seeds.len(),
                accuracies.len()
            )));
        }
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let std = (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(Self {
            task,
            mean,
            std,
            runs: accuracies.len(),
            seeds,
            config_hash: config_hash.to_string(),
            accuracies,
        })
    }
}

/// `results.json`: one result block per task.
pub fn write_results(path: impl AsRef<Path>, results: &[EvalResult]) -> Result<()> {
    let mut bytes = fmtutil::to_json_17(&results)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<EvalResult>> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// What a GCN is trained on.
#[derive(Clone, Copy, Debug)]
pub enum TrainSource<'a> {
    /// Every node of a condensed graph is a training node.
    Condensed(&'a CondensedGraph),
    /// The original graph with its own training split.
    Whole,
}

fn check_source(src: TrainSource<'_>, g: &Graph) -> Result<()> {
    if let TrainSource::Condensed(cg) = src {
        cg.validate()?;
        if cg.features.ncols() != g.num_features() {
            return Err(HydroError::shape(format!(
                "condensed features have {} columns, dataset has {}",
                cg.features.ncols(),
                g.num_features()
            )));
        }
        let present = cg.classes_present();
        if let Some(missing) = (0..g.num_classes()).find(|c| !present.contains(c)) {
            return Err(HydroError::contract(format!(
                "class {missing} is absent from the condensed graph"
            )));
        }
        if cg.labels.iter().any(|&l| l >= g.num_classes()) {
            return Err(HydroError::contract(
                "condensed labels exceed the dataset's classes",
            ));
        }
    } else if g.splits().train.is_empty() {
        return Err(HydroError::contract("the dataset has no training nodes"));
    }
    Ok(())
}

fn train(
    src: TrainSource<'_>,
    g: &Graph,
    cfg: &GcnConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GcnModel> {
    let (model, _) = match src {
        TrainSource::Condensed(cg) => gnn::gcn_train_condensed(cg, g.num_classes(), cfg, rng)?,
        TrainSource::Whole => gnn::gcn_train(g, &g.splits().train, cfg, rng)?,
    };
    Ok(model)
}

/// Test accuracy of one GCN trained on `src` with `seed`.
pub fn nc_run(src: TrainSource<'_>, g: &Graph, cfg: &GcnConfig, seed: u64) -> Result<f64> {
    check_source(src, g)?;
    if g.splits().test.is_empty() {
        return Err(HydroError::contract("the dataset has no test nodes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = train(src, g, cfg, &mut rng)?;
    let out = gnn::gcn_infer(&model, g)?;
    Ok(gnn::accuracy(
        &out.predictions,
        g.labels(),
        &g.splits().test,
    ))
}

/// Node classification over `seeds`, one run per seed, in order.
pub fn eval_nc(
    src: TrainSource<'_>,
    g: &Graph,
    cfg: &GcnConfig,
    seeds: &[u64],
    config_hash: &str,
) -> Result<EvalResult> {
    let accs = seeds
        .iter()
        .map(|&s| nc_run(src, g, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    EvalResult::from_runs(Task::Nc, seeds.to_vec(), accs, config_hash)
}

/// Held-out positives, sampled negatives and the graph left for inference.
#[derive(Clone, Debug)]
pub struct LinkSplit {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
    pub train_graph: Graph,
}

/// Holds out `⌊0.1·|E|⌋` edges (at least one is required) and draws as many
/// distinct non-edges by rejection.
pub fn link_split<R: Rng + ?Sized>(g: &Graph, rng: &mut R) -> Result<LinkSplit> {
    let mut edges: Vec<(usize, usize)> = g.edges().into_iter().map(|(u, v, _)| (u, v)).collect();
    let k = (LP_HOLDOUT * edges.len() as f64).floor() as usize;
    if k == 0 {
        return Err(HydroError::contract(format!(
            "link prediction needs at least 10 edges to hold one out, graph has {}",
            edges.len()
        )));
    }
    let n = g.n();
    let max_pairs = n * (n - 1) / 2;
    if max_pairs - edges.len() < k {
        return Err(HydroError::contract(
            "too few non-edges for balanced negatives",
        ));
    }
    edges.shuffle(rng);
    let positives: Vec<(usize, usize)> = edges[..k].to_vec();
    let mut is_edge = std::collections::HashSet::with_capacity(edges.len());
    for &(u, v) in &edges {
        is_edge.insert((u, v));
    }
    let mut chosen = std::collections::HashSet::with_capacity(k);
    let mut negatives = Vec::with_capacity(k);
    while negatives.len() < k {
        let u = rng.gen_range(0..n);
        let v = rng.gen_range(0..n);
        if u == v {
            continue;
        }
        let pair = (u.min(v), u.max(v));
        if is_edge.contains(&pair) || !chosen.insert(pair) {
            continue;
        }
        negatives.push(pair);
    }
    let train_graph = g.without_edges(&positives)?;
    Ok(LinkSplit {
        positives,
        negatives,
        train_graph,
    })
}

/// `σ(z_u·z_v)`.
pub fn link_score(emb: &Array2<f64>, u: usize, v: usize) -> f64 {
    let s = emb.row(u).dot(&emb.row(v));
    1.0 / (1.0 + (-s).exp())
}

/// Thresholded accuracy of embedding inner products on a link split.
pub fn link_accuracy(emb: &Array2<f64>, split: &LinkSplit) -> f64 {
    let pos = split
        .positives
        .iter()
        .filter(|&&(u, v)| link_score(emb, u, v) >= 0.5)
        .count();
    let neg = split
        .negatives
        .iter()
        .filter(|&&(u, v)| link_score(emb, u, v) < 0.5)
        .count();
    (pos + neg) as f64 / (split.positives.len() + split.negatives.len()) as f64
}

/// One link-prediction run: the split and the GCN both draw from `seed`.
pub fn lp_run(src: TrainSource<'_>, g: &Graph, cfg: &GcnConfig, seed: u64) -> Result<f64> {
    check_source(src, g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = link_split(g, &mut rng)?;
    let model = train(src, &split.train_graph, cfg, &mut rng)?;
    let out = gnn::gcn_infer(&model, &split.train_graph)?;
    Ok(link_accuracy(&out.embeddings, &split))
}

pub fn eval_lp(
    src: TrainSource<'_>,
    g: &Graph,
    cfg: &GcnConfig,
    seeds: &[u64],
    config_hash: &str,
) -> Result<EvalResult> {
    let accs = seeds
        .iter()
        .map(|&s| lp_run(src, g, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    EvalResult::from_runs(Task::Lp, seeds.to_vec(), accs, config_hash)
}

/// Random-selection condensation: the budget is apportioned over the
/// training class distribution and filled with uniformly drawn training
/// nodes of each class (all of them when a class has fewer); the induced
/// subgraph is the condensed graph. Returns `None` for `ratio == 1`, which
/// means training on the whole graph.
pub fn baseline_random<R: Rng + ?Sized>(
    g: &Graph,
    ratio: f64,
    rng: &mut R,
) -> Result<Option<CondensedGraph>> {
    let total = budget(g.n(), ratio)?;
    if ratio == 1.0 {
        return Ok(None);
    }
    let counts = g.train_class_counts();
    let quota = apportion(&counts, total)?;
    let mut nodes = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (c, &q) in quota.iter().enumerate() {
        let mut pool: Vec<usize> = g
            .splits()
            .train
            .iter()
            .copied()
            .filter(|&i| g.labels()[i] == c)
            .collect();
        pool.shuffle(rng);
        pool.truncate(q);
        labels.extend(std::iter::repeat_n(c, pool.len()));
        nodes.extend(pool);
    }
    let sub = g.induced(&nodes)?;
    Ok(Some(CondensedGraph {
        adjacency: sub.dense_adjacency(),
        features: sub.features().clone(),
        labels,
        config_hash: String::new(),
        seed: 0,
    }))
}

/// Capped commute matrices of both graphs and their comparison score.
#[derive(Clone, Debug)]
pub struct CommuteComparison {
    pub condensed: Array2<f64>,
    pub original: Array2<f64>,
    pub score: f64,
}

/// Mean absolute difference between the sorted, cap-normalized upper
/// triangle of `condensed` and the original's upper triangle resampled to
/// the same length by empirical quantiles: entry `k` of `m′` takes the
/// original's sorted value at index `⌊(k + ½)·m/m′⌋`.
pub fn commute_score(condensed: &Array2<f64>, original: &Array2<f64>, cap: f64) -> Result<f64> {
    if !(cap > 0.0) {
        return Err(HydroError::contract(format!(
            "cap must be positive, got {cap}"
        )));
    }
    let upper = |m: &Array2<f64>| {
        let n = m.nrows();
        let mut v = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                v.push(m[[i, j]].min(cap) / cap);
            }
        }
        v.sort_by(f64::total_cmp);
        v
    };
    let a = upper(condensed);
    let b = upper(original);
    if a.is_empty() || b.is_empty() {
        return Err(HydroError::contract(
            "commute comparison needs at least two nodes on each side",
        ));
    }
    let (ma, mb) = (a.len(), b.len());
    let total: f64 = a
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let idx = (((k as f64 + 0.5) * mb as f64 / ma as f64).floor() as usize).min(mb - 1);
            (x - b[idx]).abs()
        })
        .sum();
    Ok(total / ma as f64)
}

/// Commute comparison of a condensed graph against its source.
pub fn compare_commute(cg: &CondensedGraph, g: &Graph, cap: f64) -> Result<CommuteComparison> {
    let syn = cg.to_graph(g.num_classes().max(1))?;
    compare_commute_graphs(&syn, g, cap)
}

pub fn compare_commute_graphs(syn: &Graph, g: &Graph, cap: f64) -> Result<CommuteComparison> {
    let condensed = spectral::cap_matrix(&spectral::commute_matrix(syn), cap)?;
    let original = spectral::cap_matrix(&spectral::commute_matrix(g), cap)?;
    let score = commute_score(&condensed, &original, cap)?;
    Ok(CommuteComparison {
        condensed,
        original,
        score,
    })
}
