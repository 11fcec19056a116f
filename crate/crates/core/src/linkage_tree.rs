//! Average-linkage dendrogram over biometric embeddings.
//!
//! Every node carries a linkage score (mean pairwise `(1 + cos) / 2` over its
//! members) and the OR of its members' session-attendance bits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dot, session_index, BiometricSample, ContextVector, Session};

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub node_id: usize,
    /// `None` for leaves; otherwise the two merged children, smaller id first.
    pub children: Option<(usize, usize)>,
    pub parent: Option<usize>,
    pub size: usize,
    /// Half-open range into [`LinkageTree::leaf_order`] holding this node's members.
    pub span: (usize, usize),
    pub q_link: f64,
    pub context: ContextVector,
    /// Cosine distance at which the children merged; 0 for leaves.
    pub merge_height: f64,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// Dendrogram with `2N - 1` nodes for `N` samples.
///
/// Leaves take ids `0..N` in sample order; internal nodes take `N..` in merge
/// order, so a parent always has a larger id than its children.
#[derive(Debug, Clone)]
pub struct LinkageTree {
    pub nodes: Vec<TreeNode>,
    pub root: usize,
    /// Sample indices in depth-first leaf order.
    pub leaf_order: Vec<usize>,
}

impl LinkageTree {
    pub fn leaf_count(&self) -> usize {
        self.leaf_order.len()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    /// Sample indices (into the input sample slice) under `id`.
    pub fn members(&self, id: usize) -> &[usize] {
        let (lo, hi) = self.nodes[id].span;
        &self.leaf_order[lo..hi]
    }

    /// True when `a` is `b` or one of its ancestors.
    pub fn is_ancestor_or_self(&self, a: usize, b: usize) -> bool {
        let (alo, ahi) = self.nodes[a].span;
        let (blo, bhi) = self.nodes[b].span;
        alo <= blo && bhi <= ahi
    }

    /// True when neither node is an ancestor of the other.
    pub fn incomparable(&self, a: usize, b: usize) -> bool {
        !self.is_ancestor_or_self(a, b) && !self.is_ancestor_or_self(b, a)
    }

    /// The `k` flat clusters obtained by undoing the last `k - 1` merges.
    pub fn cut(&self, k: usize) -> Result<Vec<usize>> {
        let n = self.leaf_count();
        if k == 0 || k > n {
            return Err(Error::Config(format!("cannot cut {n} samples into {k} clusters")));
        }
        let limit = 2 * n - k;
        Ok((0..limit)
            .filter(|&v| self.nodes[v].parent.is_none_or(|p| p >= limit))
            .collect())
    }

    /// Serializable view with member sample ids expanded.
    pub fn to_file(&self, samples: &[BiometricSample]) -> TreeFile {
        TreeFile {
            leaves: self.leaf_count(),
            root: self.root,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    id: n.node_id,
                    children: n.children.map(|(a, b)| vec![a, b]).unwrap_or_default(),
                    members: self
                        .members(n.node_id)
                        .iter()
                        .map(|&i| samples[i].sample_id.clone())
                        .collect(),
                    q_link: n.q_link,
                    context: n.context.clone(),
                    merge_height: n.merge_height,
                })
                .collect(),
        }
    }
}

/// JSON form of a tree, as written by the `tree` and `associate` commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeFile {
    pub leaves: usize,
    pub root: usize,
    pub nodes: Vec<NodeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: usize,
    pub children: Vec<usize>,
    pub members: Vec<String>,
    pub q_link: f64,
    pub context: ContextVector,
    pub merge_height: f64,
}

/// Condensed strictly-upper-triangular distance matrix.
struct Condensed {
    n: usize,
    data: Vec<f64>,
}

impl Condensed {
    fn idx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        i * (2 * self.n - i - 1) / 2 + (j - i - 1)
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.idx(i, j)]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] = v;
    }
}

/// One agglomeration step: node ids of the merged clusters and the average
/// linkage distance between them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

/// Average-linkage agglomeration over a precomputed distance function.
///
/// Always merges the closest pair; ties go to the lexicographically smallest
/// `(node_id, node_id)` pair. Keeps a nearest-neighbour cache per active
/// cluster, which is exact for average linkage because a merged cluster is
/// never strictly closer to a third cluster than both of its parts.
pub fn average_linkage(n: usize, distance: impl Fn(usize, usize) -> f64) -> Vec<Merge> {
    if n < 2 {
        return Vec::new();
    }
    let mut d = Condensed {
        n,
        data: vec![0.0; n * (n - 1) / 2],
    };
    for i in 0..n {
        for j in i + 1..n {
            d.set(i, j, distance(i, j));
        }
    }

    let mut id_of: Vec<usize> = (0..n).collect();
    let mut size: Vec<usize> = vec![1; n];
    let mut active: Vec<bool> = vec![true; n];
    let mut live: Vec<usize> = (0..n).collect();
    let mut nn: Vec<(f64, usize)> = vec![(f64::INFINITY, usize::MAX); n];

    let scan = |s: usize, d: &Condensed, live: &[usize], id_of: &[usize]| -> (f64, usize) {
        let mut best = (f64::INFINITY, usize::MAX);
        for &t in live {
            if t == s {
                continue;
            }
            let dist = d.get(s, t);
            if best.1 == usize::MAX || (dist, id_of[t]) < (best.0, id_of[best.1]) {
                best = (dist, t);
            }
        }
        best
    };

    for s in 0..n {
        nn[s] = scan(s, &d, &live, &id_of);
    }

    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        let key = |s: usize| {
            let (dist, t) = nn[s];
            let (a, b) = (id_of[s], id_of[t]);
            (dist, a.min(b), a.max(b))
        };
        let mut s = live[0];
        for &c in &live[1..] {
            if key(c) < key(s) {
                s = c;
            }
        }
        let (dist, t) = nn[s];
        merges.push(Merge {
            a: id_of[s].min(id_of[t]),
            b: id_of[s].max(id_of[t]),
            distance: dist,
        });

        // The merged cluster lives in slot `s`; slot `t` retires.
        active[t] = false;
        live.retain(|&x| x != t);
        let (ns, nt) = (size[s] as f64, size[t] as f64);
        for &k in &live {
            if k != s {
                let v = (ns * d.get(k, s) + nt * d.get(k, t)) / (ns + nt);
                d.set(k, s, v);
            }
        }
        size[s] += size[t];
        id_of[s] = n + step;

        for idx in 0..live.len() {
            let k = live[idx];
            if k == s {
                continue;
            }
            let (cur, other) = nn[k];
            if other == s || other == t {
                nn[k] = scan(k, &d, &live, &id_of);
            } else {
                let v = d.get(k, s);
                if (v, id_of[s]) < (cur, id_of[other]) {
                    nn[k] = (v, s);
                }
            }
        }
        nn[s] = scan(s, &d, &live, &id_of);
    }
    debug_assert!(active.iter().filter(|&&a| a).count() == 1);
    merges
}

/// Build the annotated linkage tree for `samples` (embeddings must be unit norm).
pub fn build_tree(samples: &[BiometricSample], sessions: &[Session]) -> Result<LinkageTree> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot build a linkage tree from zero samples".into()));
    }
    let index = session_index(sessions);
    let g = sessions.len();
    let mut leaf_context = Vec::with_capacity(samples.len());
    for s in samples {
        let pos = *index.get(s.session_id.as_str()).ok_or_else(|| {
            Error::Contract(format!("sample {} references unknown session {}", s.sample_id, s.session_id))
        })?;
        let mut v = ContextVector::zeros(g);
        v.set(pos);
        leaf_context.push(v);
    }

    let n = samples.len();
    let merges = average_linkage(n, |i, j| {
        1.0 - dot(&samples[i].embedding, &samples[j].embedding)
    });

    let mut nodes: Vec<TreeNode> = leaf_context
        .into_iter()
        .enumerate()
        .map(|(i, context)| TreeNode {
            node_id: i,
            children: None,
            parent: None,
            size: 1,
            span: (0, 0),
            q_link: 1.0,
            context,
            merge_height: 0.0,
        })
        .collect();
    // Sum of pairwise cosine distances within each node.
    let mut within: Vec<f64> = vec![0.0; 2 * n - 1];
    for (step, m) in merges.iter().enumerate() {
        let id = n + step;
        let (na, nb) = (nodes[m.a].size, nodes[m.b].size);
        let size = na + nb;
        within[id] = within[m.a] + within[m.b] + (na * nb) as f64 * m.distance;
        let pairs = (size * (size - 1) / 2) as f64;
        let q_link = (1.0 - within[id] / (2.0 * pairs)).clamp(0.0, 1.0);
        let height = m
            .distance
            .max(nodes[m.a].merge_height)
            .max(nodes[m.b].merge_height)
            .max(0.0);
        let context = nodes[m.a].context.union(&nodes[m.b].context);
        nodes[m.a].parent = Some(id);
        nodes[m.b].parent = Some(id);
        nodes.push(TreeNode {
            node_id: id,
            children: Some((m.a, m.b)),
            parent: None,
            size,
            span: (0, 0),
            q_link,
            context,
            merge_height: height,
        });
    }
    let root = nodes.len() - 1;

    // Depth-first leaf order; each node's members become one contiguous span.
    let mut leaf_order = Vec::with_capacity(n);
    let mut stack = vec![(root, false)];
    while let Some((v, done)) = stack.pop() {
        if done {
            let lo = match nodes[v].children {
                Some((a, _)) => nodes[a].span.0,
                None => leaf_order.len() - 1,
            };
            nodes[v].span = (lo, leaf_order.len());
            continue;
        }
        match nodes[v].children {
            None => {
                leaf_order.push(v);
                stack.push((v, true));
            }
            Some((a, b)) => {
                stack.push((v, true));
                stack.push((b, false));
                stack.push((a, false));
            }
        }
    }

    Ok(LinkageTree {
        nodes,
        root,
        leaf_order,
    })
}

/// Mean of `(1 + cos) / 2` over all unordered member pairs; 1 for a singleton.
///
/// Uses `Σ_{i<j} x_i·x_j = (|Σ x|² − Σ|x|²) / 2`, so the cost is linear in
/// the member count.
pub fn linkage_score(tree: &LinkageTree, node: usize, samples: &[BiometricSample]) -> f64 {
    let members = tree.members(node);
    if members.len() < 2 {
        return 1.0;
    }
    let dim = samples[members[0]].embedding.len();
    let mut sum = vec![0.0; dim];
    let mut self_dots = 0.0;
    for &m in members {
        let e = &samples[m].embedding;
        self_dots += dot(e, e);
        for (s, x) in sum.iter_mut().zip(e) {
            *s += x;
        }
    }
    let pair_dots = (dot(&sum, &sum) - self_dots) / 2.0;
    let pairs = (members.len() * (members.len() - 1) / 2) as f64;
    let mean_cos = pair_dots / pairs;
    ((1.0 + mean_cos) / 2.0).clamp(0.0, 1.0)
}

/// OR of the session bits of the node's members.
pub fn node_context_vector(
    tree: &LinkageTree,
    node: usize,
    samples: &[BiometricSample],
    sessions: &[Session],
) -> Result<ContextVector> {
    let index = session_index(sessions);
    let mut v = ContextVector::zeros(sessions.len());
    for &m in tree.members(node) {
        let s = &samples[m];
        let pos = *index.get(s.session_id.as_str()).ok_or_else(|| {
            Error::Contract(format!("sample {} references unknown session {}", s.sample_id, s.session_id))
        })?;
        v.set(pos);
    }
    Ok(v)
}

/// Node ids with at least `min_cluster_size` members, ascending.
pub fn candidate_nodes(tree: &LinkageTree, min_cluster_size: usize) -> Vec<usize> {
    tree.nodes
        .iter()
        .filter(|n| n.size >= min_cluster_size)
        .map(|n| n.node_id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sessions(g: usize) -> Vec<Session> {
        (0..g)
            .map(|i| Session {
                id: format!("s{i}"),
                start_ms: i as i64 * 10,
                end_ms: i as i64 * 10 + 5,
                location: "lab".into(),
            })
            .collect()
    }

    fn sample(i: usize, session: usize, v: &[f64]) -> BiometricSample {
        BiometricSample {
            sample_id: format!("x{i}"),
            session_id: format!("s{session}"),
            embedding: crate::model::l2_normalize(v).unwrap(),
            true_label: None,
        }
    }

    #[test]
    fn single_sample_tree() {
        let t = build_tree(&[sample(0, 0, &[1.0, 0.0])], &sessions(1)).unwrap();
        assert_eq!(t.node_count(), 1);
        assert_eq!(t.root, 0);
        assert!(t.node(0).is_leaf());
        assert_eq!(t.node(0).q_link, 1.0);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(build_tree(&[], &sessions(1)).is_err());
    }

    #[test]
    fn two_samples() {
        let s = [sample(0, 0, &[1.0, 0.0]), sample(1, 1, &[0.6, 0.8])];
        let t = build_tree(&s, &sessions(2)).unwrap();
        assert_eq!(t.node_count(), 3);
        assert!((t.node(2).merge_height - 0.4).abs() < 1e-12);
        assert_eq!(t.node(2).context.to_bit_string(), "11");
        assert_eq!(t.node(2).children, Some((0, 1)));
    }

    #[test]
    fn tight_pairs_merge_first() {
        let s = [
            sample(0, 0, &[1.0, 0.05, 0.0]),
            sample(1, 1, &[0.0, 0.05, 1.0]),
            sample(2, 2, &[1.0, -0.05, 0.0]),
            sample(3, 3, &[0.0, -0.05, 1.0]),
        ];
        let t = build_tree(&s, &sessions(4)).unwrap();
        assert_eq!(t.node(4).children, Some((0, 2)));
        assert_eq!(t.node(5).children, Some((1, 3)));
        assert_eq!(t.node(4).context.to_bit_string(), "1010");
        assert_eq!(t.root, 6);
    }

    #[test]
    fn equal_distances_break_ties_by_node_ids() {
        // Three mutually orthogonal vectors: every pair is at distance 1.
        let s = [
            sample(0, 0, &[1.0, 0.0, 0.0]),
            sample(1, 0, &[0.0, 1.0, 0.0]),
            sample(2, 0, &[0.0, 0.0, 1.0]),
        ];
        let t = build_tree(&s, &sessions(1)).unwrap();
        assert_eq!(t.node(3).children, Some((0, 1)));
        assert_eq!(t.node(4).children, Some((2, 3)));
    }

    #[test]
    fn linkage_score_examples() {
        let s = [sample(0, 0, &[1.0, 0.0]), sample(1, 0, &[1.0, 0.0])];
        let t = build_tree(&s, &sessions(1)).unwrap();
        assert!((linkage_score(&t, 2, &s) - 1.0).abs() < 1e-12);
        assert_eq!(linkage_score(&t, 0, &s), 1.0);

        let s = [sample(0, 0, &[1.0, 0.0]), sample(1, 0, &[0.0, 1.0])];
        let t = build_tree(&s, &sessions(1)).unwrap();
        assert!((linkage_score(&t, 2, &s) - 0.5).abs() < 1e-12);
        assert!((t.node(2).q_link - 0.5).abs() < 1e-12);
    }

    #[test]
    fn context_vectors_follow_sessions() {
        let s = [sample(0, 2, &[1.0, 0.0]), sample(1, 0, &[1.0, 0.1])];
        let g = sessions(4);
        let t = build_tree(&s, &g).unwrap();
        assert_eq!(node_context_vector(&t, 0, &s, &g).unwrap().to_bit_string(), "0010");
        assert_eq!(node_context_vector(&t, 2, &s, &g).unwrap().to_bit_string(), "1010");

        let same: Vec<_> = (0..5).map(|i| sample(i, 1, &[1.0, i as f64])).collect();
        let t = build_tree(&same, &g).unwrap();
        assert!(t.nodes.iter().all(|n| n.context.to_bit_string() == "0100"));
    }

    #[test]
    fn candidates_by_size() {
        let s: Vec<_> = (0..4).map(|i| sample(i, 0, &[1.0, i as f64])).collect();
        let t = build_tree(&s, &sessions(1)).unwrap();
        assert_eq!(candidate_nodes(&t, 1).len(), 7);
        assert_eq!(candidate_nodes(&t, 2), vec![4, 5, 6]);
        assert!(candidate_nodes(&t, 5).is_empty());
    }

    #[test]
    fn cut_extremes() {
        let s: Vec<_> = (0..5).map(|i| sample(i, 0, &[1.0, i as f64 * 0.3])).collect();
        let t = build_tree(&s, &sessions(1)).unwrap();
        assert_eq!(t.cut(1).unwrap(), vec![t.root]);
        assert_eq!(t.cut(5).unwrap(), vec![0, 1, 2, 3, 4]);
        let two = t.cut(2).unwrap();
        assert_eq!(t.node(t.root).children, Some((two[0], two[1])));
        assert!(t.cut(6).is_err());
    }
}
