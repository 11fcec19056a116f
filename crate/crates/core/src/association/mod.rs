//! Pairing biometric clusters with device IDs.
//!
//! Each candidate tree node `i` and device `j` get a composite score
//! `q = (1 - ω)·q_link(i) + ω·sim(context(i), context(j))`. The attack picks
//! `K` node–device pairs maximizing the total score such that nodes and
//! devices are used at most once and no chosen node is an ancestor of
//! another. [`select_nodes`] solves this exactly; [`brute_force_select`] is
//! the enumeration oracle for small instances.

mod brute;
mod hungarian;
mod solver;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linkage_tree::LinkageTree;
use crate::model::{ContextMetric, ContextVector, MacAddress};

pub use brute::{brute_force_select, BRUTE_FORCE_MAX_DEVICES, BRUTE_FORCE_MAX_LEAVES};
pub use solver::SolverStats;

/// Objectives within this distance of the optimum count as co-optimal; the
/// lexicographically smallest co-optimal pair set is returned.
pub const TIE_EPS: f64 = 1e-9;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Composite scores over candidate nodes (rows) and devices (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub node_ids: Vec<usize>,
    pub devices: Vec<MacAddress>,
    pub scores: Matrix,
    pub omega: f64,
}

impl ScoreMatrix {
    pub fn new(node_ids: Vec<usize>, devices: Vec<MacAddress>, scores: Matrix, omega: f64) -> Result<Self> {
        if scores.rows != node_ids.len() || scores.cols != devices.len() {
            return Err(Error::Contract(format!(
                "score matrix is {}x{} but has {} nodes and {} devices",
                scores.rows,
                scores.cols,
                node_ids.len(),
                devices.len()
            )));
        }
        Ok(ScoreMatrix {
            node_ids,
            devices,
            scores,
            omega,
        })
    }

    pub fn get(&self, row: usize, device: usize) -> f64 {
        self.scores.get(row, device)
    }

    /// Multiply every entry by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.scores.data.iter_mut().for_each(|x| *x *= c);
        out
    }
}

/// Attendance similarity between every node context and every device context.
pub fn assoc_scores(
    node_contexts: &[&ContextVector],
    device_contexts: &[&ContextVector],
    metric: ContextMetric,
) -> Result<Matrix> {
    let mut data = Vec::with_capacity(node_contexts.len() * device_contexts.len());
    for n in node_contexts {
        for d in device_contexts {
            data.push(metric.similarity(n, d)?);
        }
    }
    Ok(Matrix {
        rows: node_contexts.len(),
        cols: device_contexts.len(),
        data,
    })
}

pub fn validate_omega(omega: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::Config(format!("omega {omega} outside [0, 1]")));
    }
    Ok(())
}

/// `q[i][j] = (1 - omega)·q_link[i] + omega·q_assoc[i][j]`.
pub fn composite_scores(q_link: &[f64], q_assoc: &Matrix, omega: f64) -> Result<Matrix> {
    validate_omega(omega)?;
    if q_link.len() != q_assoc.rows {
        return Err(Error::Contract(format!(
            "{} linkage scores for {} rows",
            q_link.len(),
            q_assoc.rows
        )));
    }
    Ok(Matrix::from_fn(q_assoc.rows, q_assoc.cols, |i, j| {
        (1.0 - omega) * q_link[i] + omega * q_assoc.get(i, j)
    }))
}

/// Score every candidate node of `tree` against every device.
pub fn score_tree(
    tree: &LinkageTree,
    candidates: &[usize],
    devices: &BTreeMap<MacAddress, ContextVector>,
    metric: ContextMetric,
    omega: f64,
) -> Result<ScoreMatrix> {
    validate_omega(omega)?;
    let nodes: Vec<&ContextVector> = candidates.iter().map(|&c| &tree.node(c).context).collect();
    let devs: Vec<&ContextVector> = devices.values().collect();
    let assoc = assoc_scores(&nodes, &devs, metric)?;
    let q_link: Vec<f64> = candidates.iter().map(|&c| tree.node(c).q_link).collect();
    let scores = composite_scores(&q_link, &assoc, omega)?;
    ScoreMatrix::new(candidates.to_vec(), devices.keys().copied().collect(), scores, omega)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignedPair {
    pub node: usize,
    pub mac: MacAddress,
    pub score: f64,
}

/// Selected `(node, device)` pairs, sorted by `(node, mac)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: Vec<AssignedPair>,
    pub objective: f64,
    pub k_requested: usize,
    pub k_achieved: usize,
    /// True when fewer than `k_requested` pairs were feasible.
    pub clamped: bool,
}

impl Assignment {
    pub(crate) fn from_pairs(mut pairs: Vec<AssignedPair>, k_requested: usize) -> Self {
        pairs.sort_by_key(|p| (p.node, p.mac));
        let objective = pairs.iter().map(|p| p.score).sum();
        let k_achieved = pairs.len();
        Assignment {
            pairs,
            objective,
            k_requested,
            k_achieved,
            clamped: k_achieved < k_requested,
        }
    }

    pub fn pair_keys(&self) -> Vec<(usize, MacAddress)> {
        self.pairs.iter().map(|p| (p.node, p.mac)).collect()
    }

    /// Check the structural constraints against `tree`.
    pub fn validate(&self, tree: &LinkageTree) -> Result<()> {
        for (i, a) in self.pairs.iter().enumerate() {
            for b in &self.pairs[i + 1..] {
                if a.node == b.node || a.mac == b.mac {
                    return Err(Error::Contract(format!(
                        "pairs ({}, {}) and ({}, {}) share a node or device",
                        a.node, a.mac, b.node, b.mac
                    )));
                }
                if !tree.incomparable(a.node, b.node) {
                    return Err(Error::Contract(format!(
                        "nodes {} and {} are on one root-to-leaf path",
                        a.node, b.node
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Lexicographic order on sorted pair lists.
pub(crate) fn lex_cmp(a: &[(usize, usize)], b: &[(usize, usize)]) -> Ordering {
    a.cmp(b)
}

/// Largest antichain among `candidates` (a subset of tree nodes).
pub fn max_antichain(tree: &LinkageTree, candidates: &[usize]) -> usize {
    let mut is_cand = vec![false; tree.node_count()];
    for &c in candidates {
        is_cand[c] = true;
    }
    let mut best = vec![0usize; tree.node_count()];
    // Children always carry smaller ids than their parent.
    for v in 0..tree.node_count() {
        let below = match tree.node(v).children {
            Some((a, b)) => best[a] + best[b],
            None => 0,
        };
        best[v] = if is_cand[v] { below.max(1) } else { below };
    }
    best[tree.root]
}

fn check_request(tree: &LinkageTree, scores: &ScoreMatrix, k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if scores.node_ids.is_empty() {
        return Err(Error::Contract("no candidate nodes to select from".into()));
    }
    if let Some(&bad) = scores.node_ids.iter().find(|&&n| n >= tree.node_count()) {
        return Err(Error::Contract(format!("candidate node {bad} is not in the tree")));
    }
    let mut ids = scores.node_ids.clone();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != scores.node_ids.len() {
        return Err(Error::Contract("duplicate candidate nodes".into()));
    }
    let feasible = scores.devices.len().min(max_antichain(tree, &scores.node_ids));
    Ok(k.min(feasible))
}

/// Exact solution of the constrained selection program.
///
/// Returns `min(K, feasible maximum)` pairs with the largest total score;
/// among co-optimal pair sets (within [`TIE_EPS`]) the lexicographically
/// smallest under `(node_id, mac)` wins.
pub fn select_nodes(tree: &LinkageTree, scores: &ScoreMatrix, k: usize) -> Result<Assignment> {
    Ok(select_nodes_with_stats(tree, scores, k)?.0)
}

pub fn select_nodes_with_stats(
    tree: &LinkageTree,
    scores: &ScoreMatrix,
    k: usize,
) -> Result<(Assignment, SolverStats)> {
    let target = check_request(tree, scores, k)?;
    let (pairs, stats) = solver::solve(tree, scores, target);
    let pairs = pairs
        .into_iter()
        .map(|(row, dev)| AssignedPair {
            node: scores.node_ids[row],
            mac: scores.devices[dev],
            score: scores.get(row, dev),
        })
        .collect();
    Ok((Assignment::from_pairs(pairs, k), stats))
}

/// Two-step baseline: cut the dendrogram into `k` flat clusters, then match
/// clusters to devices one-to-one maximizing total attendance similarity.
pub fn naive_baseline(
    tree: &LinkageTree,
    devices: &BTreeMap<MacAddress, ContextVector>,
    k: usize,
    metric: ContextMetric,
) -> Result<Assignment> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if k > tree.leaf_count() {
        return Err(Error::Config(format!(
            "K = {k} exceeds the {} available samples",
            tree.leaf_count()
        )));
    }
    let clusters = tree.cut(k)?;
    let macs: Vec<MacAddress> = devices.keys().copied().collect();
    let ctx: Vec<&ContextVector> = devices.values().collect();
    let node_ctx: Vec<&ContextVector> = clusters.iter().map(|&c| &tree.node(c).context).collect();
    let sim = assoc_scores(&node_ctx, &ctx, metric)?;

    let mut pairs = Vec::new();
    if clusters.len() <= macs.len() {
        let cols = hungarian::max_weight_assignment(&sim.data, sim.rows, sim.cols);
        for (i, &j) in cols.iter().enumerate() {
            pairs.push(AssignedPair {
                node: clusters[i],
                mac: macs[j],
                score: sim.get(i, j),
            });
        }
    } else {
        let t = Matrix::from_fn(sim.cols, sim.rows, |j, i| sim.get(i, j));
        let rows = hungarian::max_weight_assignment(&t.data, t.rows, t.cols);
        for (j, &i) in rows.iter().enumerate() {
            pairs.push(AssignedPair {
                node: clusters[i],
                mac: macs[j],
                score: sim.get(i, j),
            });
        }
    }
    Ok(Assignment::from_pairs(pairs, k))
}
