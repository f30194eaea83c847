//! Directory-based dataset format.
//!
//! A dataset directory holds:
//!
//! * `edges.csv`: one undirected edge `u,v` (or weighted `u,v,w`) per line,
//!   0-based, each edge listed once;
//! * `features.csv`: one comma-separated row of decimals per node;
//! * `labels.csv`: one integer class per line;
//! * `splits.json`: `{"train":[...],"val":[...],"test":[...]}`;
//! * `meta.json` (optional): declared `nodes`, `edges`, `classes` and
//!   `features` counts, checked on load.
//!
//! Lines starting with `#` and blank lines are ignored in `edges.csv` and
//! `labels.csv`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Graph, GraphFlag, Splits};
use crate::error::{HydroError, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<usize>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| HydroError::ingestion(path, e.to_string()))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_edges(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (line_no, line) in data_lines(&text) {
        let bad = |msg: &str| HydroError::ingestion(path, format!("line {line_no}: {msg}"));
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 2 && parts.len() != 3 {
            return Err(bad("expected `u,v` or `u,v,w`"));
        }
        let u = parts[0]
            .parse::<usize>()
            .map_err(|_| bad("bad source index"))?;
        let v = parts[1]
            .parse::<usize>()
            .map_err(|_| bad("bad target index"))?;
        let w = match parts.get(2) {
            Some(s) => s.parse::<f64>().map_err(|_| bad("bad weight"))?,
            None => 1.0,
        };
        if !w.is_finite() || w <= 0.0 {
            return Err(bad("edge weights must be positive and finite"));
        }
        out.push((u, v, w));
    }
    Ok(out)
}

fn parse_features(path: &Path, n: usize) -> Result<Array2<f64>> {
    let text = read(path)?;
    let rows: Vec<&str> = text.lines().collect();
    if rows.len() != n {
        return Err(HydroError::ingestion(
            path,
            format!("{} rows for {n} labelled nodes", rows.len()),
        ));
    }
    let d = if rows.first().is_some_and(|r| !r.trim().is_empty()) {
        rows[0].split(',').count()
    } else {
        0
    };
    let mut flat = Vec::with_capacity(n * d);
    for (k, row) in rows.iter().enumerate() {
        if d == 0 {
            if !row.trim().is_empty() {
                return Err(HydroError::ingestion(
                    path,
                    format!("row {} is not empty", k + 1),
                ));
            }
            continue;
        }
        let before = flat.len();
        for field in row.split(',') {
            let v = field.trim().parse::<f64>().map_err(|_| {
                HydroError::ingestion(path, format!("row {}: bad value `{field}`", k + 1))
            })?;
            if !v.is_finite() {
                return Err(HydroError::ingestion(
                    path,
                    format!("row {}: non-finite value", k + 1),
                ));
            }
            flat.push(v);
        }
        if flat.len() - before != d {
            return Err(HydroError::ingestion(
                path,
                format!(
                    "row {} has {} values, expected {d}",
                    k + 1,
                    flat.len() - before
                ),
            ));
        }
    }
    Ok(Array2::from_shape_vec((n, d), flat).expect("row lengths checked"))
}

fn parse_labels(path: &Path) -> Result<Vec<usize>> {
    let text = read(path)?;
    data_lines(&text)
        .map(|(line_no, l)| {
            l.parse::<usize>().map_err(|_| {
                HydroError::ingestion(path, format!("line {line_no}: bad label `{l}`"))
            })
        })
        .collect()
}

/// Merges undirected records. Repeated pairs with equal weights count as
/// duplicates; pairs whose records disagree on the weight are averaged and
/// counted as symmetrized.
fn merge_edges(records: &[(usize, usize, f64)]) -> (Vec<(usize, usize, f64)>, usize, usize) {
    let mut pairs: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for &(u, v, w) in records {
        pairs.entry((u.min(v), u.max(v))).or_default().push(w);
    }
    let mut duplicates = 0;
    let mut mismatched = 0;
    let merged = pairs
        .into_iter()
        .map(|((u, v), ws)| {
            duplicates += ws.len() - 1;
            if ws.iter().any(|&w| w != ws[0]) {
                mismatched += 1;
            }
            (u, v, ws.iter().sum::<f64>() / ws.len() as f64)
        })
        .collect();
    (merged, duplicates, mismatched)
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Graph> {
    let dir = dir.as_ref();
    let file = |name: &str| -> PathBuf { dir.join(name) };
    if !dir.is_dir() {
        return Err(HydroError::ingestion(dir, "dataset directory not found"));
    }
    let meta: Option<DatasetMeta> = match fs::read(file("meta.json")) {
        Ok(bytes) => Some(
            serde_json::from_slice(&bytes)
                .map_err(|e| HydroError::ingestion(file("meta.json"), e.to_string()))?,
        ),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(HydroError::ingestion(file("meta.json"), e.to_string())),
    };
    let meta = meta.unwrap_or_default();

    let labels = parse_labels(&file("labels.csv"))?;
    let n = labels.len();
    let features = parse_features(&file("features.csv"), n)?;
    let records = parse_edges(&file("edges.csv"))?;
    let splits_path = file("splits.json");
    let splits: Splits = serde_json::from_str(&read(&splits_path)?)
        .map_err(|e| HydroError::ingestion(&splits_path, e.to_string()))?;

    let observed_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let num_classes = meta.classes.unwrap_or(observed_classes);
    let mismatch = |what: &str, declared: usize, found: usize| {
        HydroError::ingestion(
            file("meta.json"),
            format!("declared {declared} {what}, found {found}"),
        )
    };
    if let Some(d) = meta.nodes.filter(|&d| d != n) {
        return Err(mismatch("nodes", d, n));
    }
    if let Some(d) = meta.edges.filter(|&d| d != records.len()) {
        return Err(mismatch("edges", d, records.len()));
    }
    if let Some(d) = meta.features.filter(|&d| d != features.ncols()) {
        return Err(mismatch("features", d, features.ncols()));
    }
    if num_classes < observed_classes {
        return Err(HydroError::ingestion(
            file("labels.csv"),
            format!(
                "label {} out of range for {num_classes} classes",
                observed_classes - 1
            ),
        ));
    }
    if let Some(&(u, v, _)) = records.iter().find(|&&(u, v, _)| u >= n || v >= n) {
        return Err(HydroError::ingestion(
            file("edges.csv"),
            format!("edge ({u},{v}) out of range for {n} nodes"),
        ));
    }
    for (name, idx) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        if let Some(&i) = idx.iter().find(|&&i| i >= n) {
            return Err(HydroError::ingestion(
                &splits_path,
                format!("{name} index {i} out of range for {n} nodes"),
            ));
        }
    }

    let (edges, duplicates, mismatched) = merge_edges(&records);
    let mut g = Graph::from_edges(n, &edges, features, labels, num_classes, splits)
        .map_err(|e| HydroError::ingestion(dir, e.to_string()))?;
    if duplicates > 0 {
        log::warn!(
            "{}: {duplicates} repeated edge records merged",
            dir.display()
        );
        g.push_flag(GraphFlag::DuplicateEdges(duplicates));
    }
    if mismatched > 0 {
        log::warn!(
            "{}: {mismatched} edges listed with conflicting weights; symmetrized by averaging",
            dir.display()
        );
        g.push_flag(GraphFlag::Symmetrized(mismatched));
    }
    for flag in g.flags() {
        match flag {
            GraphFlag::NoEdges => log::warn!("{}: graph has no edges", dir.display()),
            GraphFlag::SelfLoopsDropped(k) => {
                log::warn!("{}: {k} self-loops dropped", dir.display())
            }
            _ => {}
        }
    }
    Ok(g)
}

/// Writes `g` in the directory format, including `meta.json`. Loading the
/// result and saving again reproduces the same bytes.
pub fn save_dataset(g: &Graph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let edges = g.edges();
    let weighted = edges.iter().any(|&(_, _, w)| w != 1.0);
    let mut text = String::new();
    for (u, v, w) in &edges {
        if weighted {
            text.push_str(&format!("{u},{v},{w}\n"));
        } else {
            text.push_str(&format!("{u},{v}\n"));
        }
    }
    fs::write(dir.join("edges.csv"), text)?;

    let mut text = String::new();
    for row in g.features().rows() {
        let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&fields.join(","));
        text.push('\n');
    }
    fs::write(dir.join("features.csv"), text)?;

    let text: String = g.labels().iter().map(|y| format!("{y}\n")).collect();
    fs::write(dir.join("labels.csv"), text)?;

    let mut splits = serde_json::to_vec(g.splits())?;
    splits.push(b'\n');
    fs::write(dir.join("splits.json"), splits)?;

    let meta = DatasetMeta {
        nodes: Some(g.n()),
        edges: Some(edges.len()),
        classes: Some(g.num_classes()),
        features: Some(g.num_features()),
    };
    let mut meta = serde_json::to_vec(&meta)?;
    meta.push(b'\n');
    fs::write(dir.join("meta.json"), meta)?;
    Ok(())
}
