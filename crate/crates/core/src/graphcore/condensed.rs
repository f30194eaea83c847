use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, Splits, SYMMETRY_TOL};
use crate::error::{HydroError, Result};
use crate::fmtutil;

/// A small synthetic graph `(A′, X′, Y′)` plus the provenance of the run
/// that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct CondensedGraph {
    pub adjacency: Array2<f64>,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CondensedJson {
    n: usize,
    adjacency: Vec<Vec<f64>>,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    config_hash: String,
    seed: u64,
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: Vec<Vec<f64>>, cols: Option<usize>, what: &str) -> Result<Array2<f64>> {
    let r = rows.len();
    let c = cols.unwrap_or_else(|| rows.first().map_or(0, Vec::len));
    if rows.iter().any(|row| row.len() != c) {
        return Err(HydroError::shape(format!("{what}: ragged rows")));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((r, c), flat).map_err(|e| HydroError::shape(format!("{what}: {e}")))
}

impl CondensedGraph {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Checks shapes, `0 ≤ A′ ≤ 1`, symmetry, zero diagonal and finite
    /// features.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.adjacency.dim() != (n, n) {
            return Err(HydroError::shape(format!(
                "adjacency {:?} for {n} nodes",
                self.adjacency.dim()
            )));
        }
        if self.features.nrows() != n {
            return Err(HydroError::shape(format!(
                "{} feature rows for {n} nodes",
                self.features.nrows()
            )));
        }
        for ((i, j), &w) in self.adjacency.indexed_iter() {
            if !(0.0..=1.0).contains(&w) {
                return Err(HydroError::domain(format!(
                    "A′[{i},{j}] = {w} outside [0, 1]"
                )));
            }
            if i == j && w != 0.0 {
                return Err(HydroError::contract(format!(
                    "A′ has nonzero diagonal at {i}"
                )));
            }
            if (w - self.adjacency[[j, i]]).abs() > SYMMETRY_TOL {
                return Err(HydroError::contract(format!(
                    "A′ is not symmetric at ({i},{j})"
                )));
            }
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(HydroError::domain("non-finite condensed feature"));
        }
        Ok(())
    }

    /// Distinct labels in ascending order.
    pub fn classes_present(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// The condensed graph as a [`Graph`] whose nodes all belong to the
    /// training split.
    pub fn to_graph(&self, num_classes: usize) -> Result<Graph> {
        self.validate()?;
        let splits = Splits {
            train: (0..self.n()).collect(),
            ..Splits::default()
        };
        Graph::from_dense(
            &self.adjacency,
            self.features.clone(),
            self.labels.clone(),
            num_classes,
            splits,
        )
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let doc = CondensedJson {
            n: self.n(),
            adjacency: rows(&self.adjacency),
            features: rows(&self.features),
            labels: self.labels.clone(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
        };
        let mut bytes = fmtutil::to_json_17(&doc)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let doc: CondensedJson = serde_json::from_slice(bytes)?;
        let n = doc.n;
        let cg = CondensedGraph {
            adjacency: from_rows(doc.adjacency, Some(n), "adjacency")?,
            features: from_rows(doc.features, None, "features")?,
            labels: doc.labels,
            config_hash: doc.config_hash,
            seed: doc.seed,
        };
        cg.validate()?;
        Ok(cg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| HydroError::ingestion(path, e.to_string()))?;
        Self::from_json_bytes(&bytes).map_err(|e| HydroError::ingestion(path, e.to_string()))
    }
}

/// Splits `total` across classes in proportion to `counts` by the largest
/// remainder method. Every class with a nonzero count receives at least one
/// slot; classes with a zero count receive none.
pub fn apportion(counts: &[usize], total: usize) -> Result<Vec<usize>> {
    let present = counts.iter().filter(|&&c| c > 0).count();
    if total < present {
        return Err(HydroError::contract(format!(
            "budget of {total} nodes is smaller than the {present} classes present"
        )));
    }
    let sum: usize = counts.iter().sum();
    if sum == 0 {
        return Ok(vec![0; counts.len()]);
    }
    let quota: Vec<f64> = counts
        .iter()
        .map(|&c| total as f64 * c as f64 / sum as f64)
        .collect();
    let mut out: Vec<usize> = quota.iter().map(|q| q.floor() as usize).collect();
    for (o, &c) in out.iter_mut().zip(counts) {
        if c > 0 && *o == 0 {
            *o = 1;
        }
    }
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).filter(|&k| counts[k] > 0).collect();
    if assigned < total {
        // largest fractional remainder first, lower class index on ties
        order.sort_by(|&a, &b| {
            let ra = quota[a] - out[a] as f64;
            let rb = quota[b] - out[b] as f64;
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &k in order.iter().cycle().take(total - assigned) {
            out[k] += 1;
        }
    } else if assigned > total {
        // the minimum-one rule overshot: trim the classes furthest above quota
        let mut excess = assigned - total;
        while excess > 0 {
            let k = order
                .iter()
                .copied()
                .filter(|&k| out[k] > 1)
                .max_by(|&a, &b| {
                    (out[a] as f64 - quota[a])
                        .total_cmp(&(out[b] as f64 - quota[b]))
                        .then(b.cmp(&a))
                })
                .expect("total ≥ present classes");
            out[k] -= 1;
            excess -= 1;
        }
    }
    Ok(out)
}

/// Node budget `⌊r·n⌋` for reduction ratio `r`.
pub fn budget(n: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(HydroError::contract(format!(
            "ratio {ratio} outside (0, 1]"
        )));
    }
    // guard against products like 0.57·100 = 56.99999999999999
    Ok((ratio * n as f64 + 1e-9).floor() as usize)
}

/// Allocates `⌊r·n⌋` condensed nodes across classes following the class
/// distribution of the training split, with features copied from randomly
/// chosen training nodes of the matching class and an empty adjacency.
/// Labels are grouped by class in ascending order.
pub fn init_condensed<R: Rng + ?Sized>(
    g: &Graph,
    ratio: f64,
    rng: &mut R,
) -> Result<CondensedGraph> {
    let n_prime = budget(g.n(), ratio)?;
    let counts = g.train_class_counts();
    if counts.iter().all(|&c| c == 0) {
        return Err(HydroError::contract("training split is empty"));
    }
    let per_class = apportion(&counts, n_prime)?;
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); g.num_classes()];
    for &i in &g.splits().train {
        pools[g.labels()[i]].push(i);
    }
    let mut chosen = Vec::with_capacity(n_prime);
    let mut labels = Vec::with_capacity(n_prime);
    for (class, &k) in per_class.iter().enumerate() {
        let pool = &mut pools[class];
        pool.shuffle(rng);
        for t in 0..k {
            chosen.push(pool[t % pool.len()]);
            labels.push(class);
        }
    }
    Ok(CondensedGraph {
        adjacency: Array2::zeros((n_prime, n_prime)),
        features: g.features().select(ndarray::Axis(0), &chosen),
        labels,
        config_hash: String::new(),
        seed: 0,
    })
}
