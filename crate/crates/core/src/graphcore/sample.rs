use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;

use super::Graph;
use crate::error::{HydroError, Result};

/// An induced subgraph together with the original index of each node.
#[derive(Clone, Debug)]
pub struct Subgraph {
    pub graph: Graph,
    pub nodes: Vec<usize>,
}

fn check_size(g: &Graph, size: usize) -> Result<()> {
    if size == 0 || size > g.n() {
        return Err(HydroError::contract(format!(
            "sample size {size} outside 1..={}",
            g.n()
        )));
    }
    Ok(())
}

/// Induced subgraph on `size` nodes drawn uniformly without replacement.
pub fn sample_subgraph<R: Rng + ?Sized>(g: &Graph, size: usize, rng: &mut R) -> Result<Subgraph> {
    check_size(g, size)?;
    let mut all: Vec<usize> = (0..g.n()).collect();
    all.shuffle(rng);
    all.truncate(size);
    Ok(Subgraph {
        graph: g.induced(&all)?,
        nodes: all,
    })
}

/// Breadth-first snowball sample: starting from a uniformly chosen node of
/// the largest connected component, visits neighbours in random order until
/// `min(size, |component|)` nodes are collected. The result is connected.
pub fn sample_connected_subgraph<R: Rng + ?Sized>(
    g: &Graph,
    size: usize,
    rng: &mut R,
) -> Result<Subgraph> {
    check_size(g, size)?;
    let components = g.components();
    let largest = components
        .iter()
        .max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0])))
        .expect("graph has nodes");
    let target = size.min(largest.len());
    let seed = largest[rng.gen_range(0..largest.len())];
    let mut visited = vec![false; g.n()];
    visited[seed] = true;
    let mut order = vec![seed];
    let mut queue = VecDeque::from([seed]);
    'outer: while let Some(u) = queue.pop_front() {
        let mut nbrs: Vec<usize> = g.neighbors(u).map(|(v, _)| v).collect();
        nbrs.shuffle(rng);
        for v in nbrs {
            if order.len() == target {
                break 'outer;
            }
            if !visited[v] {
                visited[v] = true;
                order.push(v);
                queue.push_back(v);
            }
        }
    }
    Ok(Subgraph {
        graph: g.induced(&order)?,
        nodes: order,
    })
}
