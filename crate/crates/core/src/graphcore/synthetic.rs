//! Planted-partition graphs with bag-of-words features, used as stand-ins
//! for citation datasets in tests and demos.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use super::{Graph, Splits};
use crate::error::{HydroError, Result};

#[derive(Clone, Debug)]
pub struct PlantedPartition {
    pub nodes: usize,
    pub classes: usize,
    /// Vocabulary size; each class owns an equal contiguous block of words.
    pub features: usize,
    pub avg_degree: f64,
    /// Expected fraction of a node's edges that stay inside its class.
    pub homophily: f64,
    pub words_per_node: usize,
    /// Probability that a drawn word comes from the node's own class block.
    pub signal: f64,
    pub train_per_class: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for PlantedPartition {
    fn default() -> Self {
        Self {
            nodes: 600,
            classes: 4,
            features: 200,
            avg_degree: 4.0,
            homophily: 0.8,
            words_per_node: 12,
            signal: 0.5,
            train_per_class: 20,
            val: 100,
            test: 200,
        }
    }
}

pub fn planted_partition<R: Rng + ?Sized>(cfg: &PlantedPartition, rng: &mut R) -> Result<Graph> {
    let n = cfg.nodes;
    let c = cfg.classes;
    if c == 0 || n < c || cfg.features < c {
        return Err(HydroError::contract(
            "planted partition needs nodes ≥ classes ≥ 1 and features ≥ classes",
        ));
    }
    if !(0.0..=1.0).contains(&cfg.homophily) || !(0.0..=1.0).contains(&cfg.signal) {
        return Err(HydroError::contract(
            "homophily and signal must lie in [0, 1]",
        ));
    }
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let per_class = n as f64 / c as f64;
    let p_in = (cfg.avg_degree * cfg.homophily / (per_class - 1.0).max(1.0)).min(1.0);
    let p_out = (cfg.avg_degree * (1.0 - cfg.homophily) / (n as f64 - per_class).max(1.0)).min(1.0);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] { p_in } else { p_out };
            if rng.gen::<f64>() < p {
                edges.push((u, v, 1.0));
            }
        }
    }

    let block = cfg.features / c;
    let mut features = Array2::zeros((n, cfg.features));
    for u in 0..n {
        for _ in 0..cfg.words_per_node {
            let w = if rng.gen::<f64>() < cfg.signal {
                labels[u] * block + rng.gen_range(0..block)
            } else {
                rng.gen_range(0..cfg.features)
            };
            features[[u, w]] = 1.0;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut taken = vec![0usize; c];
    let mut train = Vec::new();
    let mut rest = Vec::new();
    for &u in &order {
        if taken[labels[u]] < cfg.train_per_class {
            taken[labels[u]] += 1;
            train.push(u);
        } else {
            rest.push(u);
        }
    }
    let val: Vec<usize> = rest.iter().copied().take(cfg.val).collect();
    let test: Vec<usize> = rest.iter().copied().skip(cfg.val).take(cfg.test).collect();
    let mut splits = Splits { train, val, test };
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    Graph::from_edges(n, &edges, features, labels, c, splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_and_splits() {
        let cfg = PlantedPartition::default();
        let g = planted_partition(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(g.n(), 600);
        assert_eq!(g.num_features(), 200);
        assert_eq!(g.splits().train.len(), 80);
        assert_eq!(g.splits().val.len(), 100);
        assert_eq!(g.splits().test.len(), 200);
        assert_eq!(g.train_class_counts(), vec![20; 4]);
        let avg = 2.0 * g.num_edges() as f64 / g.n() as f64;
        assert!((avg - 4.0).abs() < 0.6, "average degree {avg}");
    }

    #[test]
    fn edges_are_mostly_homophilous() {
        let g = planted_partition(
            &PlantedPartition::default(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let same = g
            .edges()
            .iter()
            .filter(|(u, v, _)| g.labels()[*u] == g.labels()[*v])
            .count();
        let frac = same as f64 / g.num_edges() as f64;
        assert!(frac > 0.7, "homophily {frac}");
    }
}
