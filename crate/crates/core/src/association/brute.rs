//! Exhaustive reference for small instances.

use super::{check_request, AssignedPair, Assignment, ScoreMatrix, TIE_EPS};
use crate::error::{Error, Result};
use crate::linkage_tree::LinkageTree;
use crate::model::MacAddress;

pub const BRUTE_FORCE_MAX_LEAVES: usize = 16;
pub const BRUTE_FORCE_MAX_DEVICES: usize = 8;

/// Enumerate every feasible pair set and return the best one under the same
/// tie rule as [`super::select_nodes`].
pub fn brute_force_select(tree: &LinkageTree, scores: &ScoreMatrix, k: usize) -> Result<Assignment> {
    if tree.leaf_count() > BRUTE_FORCE_MAX_LEAVES || scores.devices.len() > BRUTE_FORCE_MAX_DEVICES {
        return Err(Error::Config(format!(
            "brute force is limited to {BRUTE_FORCE_MAX_LEAVES} samples and {BRUTE_FORCE_MAX_DEVICES} devices"
        )));
    }
    let target = check_request(tree, scores, k)?;

    let mut rows: Vec<usize> = (0..scores.node_ids.len()).collect();
    rows.sort_by_key(|&r| scores.node_ids[r]);

    let mut search = Enumerator {
        tree,
        scores,
        rows: &rows,
        target,
        chosen: Vec::new(),
        used: vec![false; scores.devices.len()],
        best: f64::NEG_INFINITY,
        winner: None,
    };
    search.walk(0, &mut |s: &mut Enumerator| {
        let obj = s.objective();
        if obj > s.best {
            s.best = obj;
        }
    });
    let best = search.best;
    search.walk(0, &mut |s: &mut Enumerator| {
        if s.objective() < best - TIE_EPS {
            return;
        }
        let key = s.key();
        if s.winner.as_ref().is_none_or(|w| key < *w) {
            s.winner = Some(key);
        }
    });

    let pairs = search
        .winner
        .unwrap_or_default()
        .into_iter()
        .map(|(node, mac)| {
            let row = rows
                .iter()
                .copied()
                .find(|&r| scores.node_ids[r] == node)
                .expect("winner nodes come from the score matrix");
            let dev = scores.devices.iter().position(|&d| d == mac).expect("known device");
            AssignedPair {
                node,
                mac,
                score: scores.get(row, dev),
            }
        })
        .collect();
    Ok(Assignment::from_pairs(pairs, k))
}

struct Enumerator<'a> {
    tree: &'a LinkageTree,
    scores: &'a ScoreMatrix,
    rows: &'a [usize],
    target: usize,
    chosen: Vec<(usize, usize)>,
    used: Vec<bool>,
    best: f64,
    winner: Option<Vec<(usize, MacAddress)>>,
}

impl Enumerator<'_> {
    fn objective(&self) -> f64 {
        self.chosen.iter().map(|&(r, d)| self.scores.get(r, d)).sum()
    }

    fn key(&self) -> Vec<(usize, MacAddress)> {
        let mut key: Vec<_> = self
            .chosen
            .iter()
            .map(|&(r, d)| (self.scores.node_ids[r], self.scores.devices[d]))
            .collect();
        key.sort();
        key
    }

    fn walk(&mut self, from: usize, visit: &mut dyn FnMut(&mut Self)) {
        if self.chosen.len() == self.target {
            visit(self);
            return;
        }
        for idx in from..self.rows.len() {
            let row = self.rows[idx];
            let node = self.scores.node_ids[row];
            let ok = self
                .chosen
                .iter()
                .all(|&(r, _)| self.tree.incomparable(self.scores.node_ids[r], node));
            if !ok {
                continue;
            }
            for dev in 0..self.scores.devices.len() {
                if self.used[dev] {
                    continue;
                }
                self.used[dev] = true;
                self.chosen.push((row, dev));
                self.walk(idx + 1, visit);
                self.chosen.pop();
                self.used[dev] = false;
            }
        }
    }
}
