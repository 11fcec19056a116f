//! Exact branch-and-bound for the node-selection program.
//!
//! Bounds come from relaxing the one-node-per-device constraints with
//! Lagrange multipliers `λ ≥ 0`. What remains is "pick an antichain of exactly
//! `r` nodes, each scored by `max_j (q_ij − λ_j)`", which a max-plus knapsack
//! over the tree solves exactly in `O(nodes · r)`.
//!
//! The dual is minimized by a short subgradient warm start followed by
//! cutting planes (each relaxed antichain is a linear minorant of the dual
//! function; a small LP minimizes their envelope). Relaxed antichains are
//! repaired into feasible solutions with an optimal node–device assignment.
//!
//! The search runs in three steps:
//!
//! 1. Dual optimization at the root, which also yields the incumbent.
//! 2. Reduced-cost fixing: for every pair, an upper bound on any solution
//!    containing it (from an outside-subtree knapsack). Pairs that cannot
//!    reach the incumbent are dropped.
//! 3. Depth-first include/exclude branching over the surviving pairs in
//!    `(node_id, mac)` order. Include-first DFS in that order visits pair sets
//!    lexicographically, so the first co-optimal solution found is the
//!    lexicographically smallest one. Nodes re-optimize `λ` from the pooled
//!    cuts that are still valid, and a repaired completion that reaches the
//!    incumbent stops the bounding early.

use std::cmp::Ordering;
use std::collections::{HashSet, VecDeque};

use microlp::{ComparisonOp, OptimizationDirection, Problem, Variable};

use super::hungarian::max_weight_assignment;
use super::{lex_cmp, ScoreMatrix, TIE_EPS};
use crate::linkage_tree::LinkageTree;

const NONE: u32 = u32::MAX;
const ROOT_ITERATIONS: usize = 100;
const ROOT_CUTS: usize = 2000;
const NODE_CUTS: usize = 200;
const CUT_POOL_SIZE: usize = 4000;
const LP_CUT_LIMIT: usize = 600;
const STALL_LIMIT: usize = 8;
/// Subgradient steps a search node tries before building an LP.
const PROBE_STEPS: usize = 4;
const FACE_DIRECTIONS: usize = 8;
/// Bound evaluations allowed for the tie-break once the objective is proven
/// optimal. Degenerate instances can have very many co-optimal pair sets.
const TIE_BREAK_BUDGET: usize = 10_000;
const MIN_THETA: f64 = 1e-6;
/// Slack on reduced-cost fixing against floating-point error in the bounds.
const FIXING_MARGIN: f64 = 1e-9;

/// Counters describing one solver run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolverStats {
    pub root_upper_bound: f64,
    pub root_lower_bound: f64,
    pub subgradient_iterations: usize,
    pub pairs_total: usize,
    pub pairs_after_fixing: usize,
    pub search_nodes: usize,
    pub bound_evaluations: usize,
    /// The objective is optimal, but the search for the lexicographically
    /// smallest co-optimum stopped at [`TIE_BREAK_BUDGET`].
    pub tie_break_truncated: bool,
}

struct Relaxed {
    /// Knapsack value, excluding the `Σ λ` term and fixed pairs.
    value: f64,
    /// `(node, device, pair index)` of the relaxed antichain.
    picks: Vec<(usize, usize, usize)>,
}

struct Incumbent {
    objective: f64,
    /// `(node, device rank)`, sorted.
    key: Vec<(usize, usize)>,
    /// `(node, device)` in the same order as `key`.
    pairs: Vec<(usize, usize)>,
    found_in_order: bool,
}

struct Solver<'a> {
    tree: &'a LinkageTree,
    scores: &'a ScoreMatrix,
    k: usize,
    row_of: Vec<usize>,
    dev_rank: Vec<usize>,
    /// Allowed `(node, device)` pairs in lexicographic order.
    pairs: Vec<(usize, usize)>,
    /// For each tree node: `(device, pair index)`, ascending.
    node_pairs: Vec<Vec<(u32, u32)>>,

    blocked: Vec<u32>,
    dev_used: Vec<bool>,
    included: Vec<(usize, usize)>,
    included_score: f64,

    knap: Vec<Vec<f64>>,
    self_pick: Vec<u32>,
    self_pair: Vec<u32>,

    /// Recent relaxed antichains as `(node, device)`, reused as cuts.
    cut_pool: VecDeque<Vec<(usize, usize)>>,
    cut_set: HashSet<Vec<(usize, usize)>>,

    opt_hi: f64,
    best: Option<Incumbent>,
    /// The current search position sorts after the incumbent.
    past: bool,
    stats: SolverStats,
}

pub(crate) fn solve(tree: &LinkageTree, scores: &ScoreMatrix, k: usize) -> (Vec<(usize, usize)>, SolverStats) {
    if k == 0 {
        return (Vec::new(), SolverStats::default());
    }
    let mut solver = Solver::new(tree, scores, k);
    solver.run();
    let stats = solver.stats.clone();
    let best = solver.best.expect("a feasible solution exists when k <= feasible maximum");
    let pairs = best
        .pairs
        .into_iter()
        .map(|(node, dev)| (solver.row_of[node], dev))
        .collect();
    (pairs, stats)
}

fn max_plus(x: &[f64], y: &[f64], cap: usize, out: &mut Vec<f64>) {
    let len = (x.len() + y.len() - 1).min(cap + 1);
    out.clear();
    out.resize(len, f64::NEG_INFINITY);
    for (i, &a) in x.iter().enumerate().take(len) {
        for (j, &b) in y.iter().enumerate().take(len - i) {
            let v = a + b;
            if v > out[i + j] {
                out[i + j] = v;
            }
        }
    }
    // Feasible counts are downward closed, so infeasible ones form a tail.
    while out.len() > 1 && out[out.len() - 1] == f64::NEG_INFINITY {
        out.pop();
    }
}

/// `z − Σ c_j λ_j` as a linear expression.
fn cut_expr(z: Variable, vars: &[Variable], coef: &[f64]) -> Vec<(Variable, f64)> {
    let mut expr = vec![(z, 1.0)];
    expr.extend(vars.iter().zip(coef).filter(|(_, &c)| c != 0.0).map(|(&v, &c)| (v, -c)));
    expr
}

impl<'a> Solver<'a> {
    fn new(tree: &'a LinkageTree, scores: &'a ScoreMatrix, k: usize) -> Self {
        let n = tree.node_count();
        let m = scores.devices.len();
        let mut row_of = vec![usize::MAX; n];
        for (row, &node) in scores.node_ids.iter().enumerate() {
            row_of[node] = row;
        }
        let mut by_mac: Vec<usize> = (0..m).collect();
        by_mac.sort_by_key(|&d| scores.devices[d]);
        let mut dev_rank = vec![0; m];
        for (rank, &d) in by_mac.iter().enumerate() {
            dev_rank[d] = rank;
        }
        let mut pairs = Vec::with_capacity(scores.node_ids.len() * m);
        let mut nodes = scores.node_ids.clone();
        nodes.sort_unstable();
        for &node in &nodes {
            for &d in &by_mac {
                pairs.push((node, d));
            }
        }
        let mut solver = Solver {
            tree,
            scores,
            k,
            row_of,
            dev_rank,
            pairs: Vec::new(),
            node_pairs: Vec::new(),
            blocked: vec![0; n],
            dev_used: vec![false; m],
            included: Vec::new(),
            included_score: 0.0,
            knap: vec![Vec::new(); n],
            self_pick: vec![NONE; n],
            self_pair: vec![NONE; n],
            cut_pool: VecDeque::new(),
            cut_set: HashSet::new(),
            opt_hi: f64::NEG_INFINITY,
            best: None,
            past: false,
            stats: SolverStats::default(),
        };
        solver.stats.pairs_total = pairs.len();
        solver.set_pairs(pairs);
        solver
    }

    fn set_pairs(&mut self, pairs: Vec<(usize, usize)>) {
        let mut node_pairs = vec![Vec::new(); self.tree.node_count()];
        for (idx, &(node, dev)) in pairs.iter().enumerate() {
            node_pairs[node].push((dev as u32, idx as u32));
        }
        self.pairs = pairs;
        self.node_pairs = node_pairs;
    }

    fn q(&self, node: usize, dev: usize) -> f64 {
        self.scores.get(self.row_of[node], dev)
    }

    /// Solve the Lagrangian relaxation over pairs with index `>= pos`,
    /// choosing exactly `r` more nodes. `None` when no antichain of that size
    /// remains.
    fn relax(&mut self, lambda: &[f64], pos: usize, r: usize) -> Option<Relaxed> {
        self.stats.bound_evaluations += 1;
        let n = self.tree.node_count();
        for u in 0..n {
            let mut best: Option<(f64, u32, u32)> = None;
            if self.blocked[u] == 0 && r > 0 {
                for &(dev, idx) in &self.node_pairs[u] {
                    if (idx as usize) < pos || self.dev_used[dev as usize] {
                        continue;
                    }
                    let c = self.q(u, dev as usize) - lambda[dev as usize];
                    if best.is_none_or(|(b, _, _)| c > b) {
                        best = Some((c, dev, idx));
                    }
                }
            }
            let (lower, upper) = self.knap.split_at_mut(u);
            let fu = &mut upper[0];
            match self.tree.node(u).children {
                None => {
                    fu.clear();
                    fu.push(0.0);
                }
                Some((a, b)) => max_plus(&lower[a], &lower[b], r, fu),
            }
            self.self_pick[u] = NONE;
            let Some((c, dev, idx)) = best else { continue };
            if fu.len() < 2 {
                fu.push(c);
            } else if c > fu[1] {
                fu[1] = c;
            } else {
                continue;
            }
            self.self_pick[u] = dev;
            self.self_pair[u] = idx;
        }
        let root = self.tree.root;
        if self.knap[root].len() <= r {
            return None;
        }
        let value = self.knap[root][r];
        let mut picks = Vec::with_capacity(r);
        let mut stack = vec![(root, r)];
        while let Some((u, t)) = stack.pop() {
            if t == 0 {
                continue;
            }
            if t == 1 && self.self_pick[u] != NONE {
                picks.push((u, self.self_pick[u] as usize, self.self_pair[u] as usize));
                continue;
            }
            let (a, b) = self.tree.node(u).children.expect("sizes above zero only below internal nodes");
            let (fa, fb) = (&self.knap[a], &self.knap[b]);
            let lo = t.saturating_sub(fb.len() - 1);
            let hi = t.min(fa.len() - 1);
            let mut split = lo;
            let mut best = f64::NEG_INFINITY;
            for s in lo..=hi {
                let v = fa[s] + fb[t - s];
                if v > best {
                    best = v;
                    split = s;
                }
            }
            stack.push((a, split));
            stack.push((b, t - split));
        }
        Some(Relaxed { value, picks })
    }

    fn lambda_sum_free(&self, lambda: &[f64]) -> f64 {
        lambda
            .iter()
            .zip(&self.dev_used)
            .filter(|(_, &used)| !used)
            .map(|(l, _)| l)
            .sum()
    }

    fn offer(&mut self, mut pairs: Vec<(usize, usize)>, found_in_order: bool) {
        pairs.sort_by_key(|&(node, dev)| (node, self.dev_rank[dev]));
        let objective: f64 = pairs.iter().map(|&(node, dev)| self.q(node, dev)).sum();
        if objective > self.opt_hi {
            self.opt_hi = objective;
        }
        if objective < self.opt_hi - TIE_EPS {
            return;
        }
        let key: Vec<(usize, usize)> = pairs.iter().map(|&(n, d)| (n, self.dev_rank[d])).collect();
        let take = match &self.best {
            None => true,
            Some(cur) => {
                cur.objective < self.opt_hi - TIE_EPS
                    || match lex_cmp(&key, &cur.key) {
                        Ordering::Less => true,
                        Ordering::Equal => found_in_order && !cur.found_in_order,
                        Ordering::Greater => false,
                    }
            }
        };
        if take {
            self.best = Some(Incumbent {
                objective,
                key,
                pairs,
                found_in_order,
            });
        }
    }

    /// Whether no solution below `upper` can replace the incumbent. Once the
    /// search has moved lexicographically past the incumbent, only a strictly
    /// better objective would.
    fn prune(&self, upper: f64) -> bool {
        upper <= self.prune_target()
    }

    /// Best device assignment for a fixed antichain of nodes.
    fn repair(&mut self, nodes: &[usize]) {
        let m = self.scores.devices.len();
        if nodes.len() > m {
            return;
        }
        let mut w = Vec::with_capacity(nodes.len() * m);
        for &node in nodes {
            for dev in 0..m {
                w.push(self.q(node, dev));
            }
        }
        let cols = max_weight_assignment(&w, nodes.len(), m);
        let pairs = nodes.iter().copied().zip(cols).collect();
        self.offer(pairs, false);
    }

    /// Complete the fixed pairs with the nodes of a relaxed antichain, using
    /// the best assignment of the free devices, and offer the result. Returns
    /// its objective when it lies inside the current search space, which
    /// makes it a witness that no bound can prune the state.
    fn repair_state(&mut self, rel: &Relaxed, pos: usize) -> Option<f64> {
        let free: Vec<usize> = (0..self.dev_used.len()).filter(|&d| !self.dev_used[d]).collect();
        let nodes: Vec<usize> = rel.picks.iter().map(|p| p.0).collect();
        if nodes.len() > free.len() {
            return None;
        }
        let mut w = Vec::with_capacity(nodes.len() * free.len());
        for &node in &nodes {
            for &dev in &free {
                w.push(self.q(node, dev));
            }
        }
        let cols = max_weight_assignment(&w, nodes.len(), free.len());
        let added: Vec<(usize, usize)> = nodes.iter().copied().zip(cols.into_iter().map(|c| free[c])).collect();
        let inside = added.iter().all(|&(node, dev)| {
            self.node_pairs[node]
                .iter()
                .any(|&(d, idx)| d as usize == dev && idx as usize >= pos)
        });
        let mut pairs = self.included.clone();
        pairs.extend_from_slice(&added);
        let value = self.included_score + added.iter().map(|&(node, dev)| self.q(node, dev)).sum::<f64>();
        self.offer(pairs, false);
        inside.then_some(value)
    }

    /// Threshold for [`Self::prune`]: bounds at or below it cannot change
    /// the answer. Used as the subgradient target inside the search.
    fn prune_target(&self) -> f64 {
        match &self.best {
            None => f64::NEG_INFINITY,
            Some(cur) if cur.found_in_order || self.past => cur.objective + TIE_EPS,
            // Strictly below, as ties at the threshold still count.
            Some(_) => (self.opt_hi - TIE_EPS).next_down(),
        }
    }

    /// Whether the fixed pairs, followed by pair `next` if given, already sort
    /// after the incumbent.
    fn beyond_incumbent(&self, next: Option<usize>) -> bool {
        let Some(cur) = &self.best else { return false };
        let prefix = self.included.iter().chain(next.map(|i| &self.pairs[i]));
        for (&(node, dev), &key) in prefix.zip(&cur.key) {
            match (node, self.dev_rank[dev]).cmp(&key) {
                Ordering::Less => return false,
                Ordering::Greater => return true,
                Ordering::Equal => {}
            }
        }
        false
    }

    /// Projected subgradient of the dual at the relaxed solution `rel`.
    fn gradient(&self, rel: &Relaxed, lambda: &[f64]) -> Vec<f64> {
        let mut count = vec![0i64; lambda.len()];
        for &(_, dev, _) in &rel.picks {
            count[dev] += 1;
        }
        count
            .iter()
            .zip(lambda)
            .zip(&self.dev_used)
            .map(|((&c, &l), &used)| {
                let g = 1.0 - c as f64;
                if used || (l <= 0.0 && g > 0.0) {
                    0.0
                } else {
                    g
                }
            })
            .collect()
    }

    /// Subgradient warm start of the root multipliers. Every relaxed
    /// antichain is repaired into an incumbent and kept as a cut.
    fn tighten(&mut self, lambda: &mut Vec<f64>, iterations: usize) -> Option<f64> {
        let k = self.k;
        let mut cur = lambda.clone();
        let mut best: Option<f64> = None;
        let mut theta = 2.0;
        let mut stall = 0;
        for _ in 0..iterations {
            self.stats.subgradient_iterations += 1;
            let rel = self.relax(&cur, 0, k)?;
            let ub = self.lambda_sum_free(&cur) + rel.value;
            let nodes: Vec<usize> = rel.picks.iter().map(|p| p.0).collect();
            self.repair(&nodes);
            self.remember(&rel);
            let grad = self.gradient(&rel, &cur);
            if best.is_none_or(|b| ub < b) {
                lambda.clone_from(&cur);
                best = Some(ub);
                stall = 0;
            } else {
                stall += 1;
                if stall >= STALL_LIMIT {
                    theta /= 2.0;
                    stall = 0;
                }
            }
            if best.is_some_and(|b| b <= self.opt_hi + TIE_EPS * 1e-3) {
                break;
            }
            let norm2: f64 = grad.iter().map(|g| g * g).sum();
            if norm2 == 0.0 || theta < MIN_THETA {
                break;
            }
            let gap = (ub - self.opt_hi).max(1e-9 * (1.0 + ub.abs()));
            let step = theta * gap / norm2;
            for (l, g) in cur.iter_mut().zip(&grad) {
                *l = (*l - step * g).max(0.0);
            }
        }
        best
    }

    /// Record a relaxed antichain for reuse as a cut by later bounds.
    fn remember(&mut self, rel: &Relaxed) {
        let mut cut: Vec<(usize, usize)> = rel.picks.iter().map(|&(node, dev, _)| (node, dev)).collect();
        cut.sort_unstable();
        if self.cut_set.insert(cut.clone()) {
            if self.cut_pool.len() == CUT_POOL_SIZE {
                let old = self.cut_pool.pop_front().expect("pool is full");
                self.cut_set.remove(&old);
            }
            self.cut_pool.push_back(cut);
        }
    }

    /// A pooled antichain as a cut of the current dual function:
    /// `(constant, coefficient per device)`. `None` when the antichain is not
    /// a feasible relaxed solution in the current state.
    fn cut_row(&self, cut: &[(usize, usize)], pos: usize, r: usize) -> Option<(f64, Vec<f64>)> {
        let mut coef: Vec<f64> = self.dev_used.iter().map(|&u| if u { 0.0 } else { 1.0 }).collect();
        let mut constant = self.included_score;
        let mut count = 0;
        for &(node, dev) in cut {
            if self.included.contains(&(node, dev)) {
                continue;
            }
            if self.blocked[node] != 0 || self.dev_used[dev] {
                return None;
            }
            let &(_, idx) = self.node_pairs[node].iter().find(|&&(d, _)| d as usize == dev)?;
            if (idx as usize) < pos {
                return None;
            }
            coef[dev] -= 1.0;
            constant += self.q(node, dev);
            count += 1;
        }
        (count == r).then_some((constant, coef))
    }

    /// Minimize the dual function by cutting planes: every relaxed antichain
    /// is a linear minorant, and the lower envelope of the known ones is
    /// minimized over `λ ∈ [0, 1]^M` by linear programming. Multipliers above
    /// 1 never help because all scores lie in `[0, 1]`.
    ///
    /// Starts from `lambda` and leaves the best multipliers found there. At
    /// the root each relaxed antichain is also repaired into an incumbent.
    /// Inside the search, `None` means the state is infeasible or pruned.
    fn bound(&mut self, lambda: &mut Vec<f64>, pos: usize, r: usize, iterations: usize, root: bool) -> Option<(Relaxed, f64)> {
        let mut best: Option<(Relaxed, f64)> = None;
        let mut query = lambda.clone();
        let mut repaired: HashSet<Vec<usize>> = HashSet::new();
        let mut lp: Option<(microlp::Solution, microlp::Variable, Vec<microlp::Variable>)> = None;
        for step in 0..iterations {
            let rel = self.relax(&query, pos, r)?;
            let ub = self.included_score + self.lambda_sum_free(&query) + rel.value;
            let probe = (!root && step < PROBE_STEPS).then(|| self.gradient(&rel, &query));
            let nodes: Vec<usize> = rel.picks.iter().map(|p| p.0).collect();
            // The state is fixed during one call, so a node set repairs the same way twice.
            let witness = if !repaired.insert(nodes.clone()) {
                None
            } else if root {
                self.repair(&nodes);
                None
            } else {
                self.repair_state(&rel, pos)
            };
            self.remember(&rel);
            let mut coef: Vec<f64> = self.dev_used.iter().map(|&u| if u { 0.0 } else { 1.0 }).collect();
            let mut constant = self.included_score;
            for &(node, dev, _) in &rel.picks {
                coef[dev] -= 1.0;
                constant += self.q(node, dev);
            }
            if best.as_ref().is_none_or(|(_, b)| ub < *b) {
                lambda.clone_from(&query);
                best = Some((rel, ub));
            }
            let best_ub = best.as_ref().map_or(f64::INFINITY, |b| b.1);
            if root {
                if best_ub <= self.opt_hi + TIE_EPS * 1e-3 {
                    break;
                }
            } else if self.prune(best_ub) {
                return None;
            } else if witness.is_some_and(|v| !self.prune(v)) {
                break;
            }
            // A few Polyak steps towards the prune target before any LP.
            if let Some(grad) = probe {
                let norm2: f64 = grad.iter().map(|g| g * g).sum();
                if norm2 > 0.0 {
                    let size = (ub - self.prune_target()) / norm2;
                    for (l, g) in query.iter_mut().zip(&grad) {
                        *l = (*l - size * g).clamp(0.0, 1.0);
                    }
                    continue;
                }
            }

            let solved = match lp.take() {
                None => self.cut_lp(pos, r),
                Some((sol, z, vars)) => {
                    let expr = cut_expr(z, &vars, &coef);
                    match sol.add_constraint(expr.as_slice(), ComparisonOp::Ge, constant) {
                        Ok(outcome) => outcome.into_solution().ok().map(|sol| (sol, z, vars)),
                        Err(_) => None,
                    }
                }
            };
            let Some((sol, z, vars)) = solved else { break };
            let model = sol.objective();
            if best_ub - model <= 1e-11 * (1.0 + best_ub.abs()) || (!root && !self.prune(model)) {
                break;
            }
            query = vars.iter().map(|&v| sol.var_value(v).clamp(0.0, 1.0)).collect();
            lp = Some((sol, z, vars));
        }
        best
    }

    /// Cutting-plane LP over the pooled cuts that are valid in the current state.
    fn cut_lp(&self, pos: usize, r: usize) -> Option<(microlp::Solution, microlp::Variable, Vec<microlp::Variable>)> {
        let mut lp = Problem::new(OptimizationDirection::Minimize);
        let z = lp.add_var(1.0, (f64::NEG_INFINITY, f64::INFINITY));
        let vars: Vec<_> = self
            .dev_used
            .iter()
            .map(|&used| lp.add_var(0.0, (0.0, if used { 0.0 } else { 1.0 })))
            .collect();
        let mut rows = 0;
        for cut in self.cut_pool.iter().rev() {
            if rows == LP_CUT_LIMIT {
                break;
            }
            if let Some((constant, coef)) = self.cut_row(cut, pos, r) {
                lp.add_constraint(cut_expr(z, &vars, &coef).as_slice(), ComparisonOp::Ge, constant);
                rows += 1;
            }
        }
        if rows == 0 {
            return None;
        }
        let sol = lp.solve().ok()?.into_solution().ok()?;
        Some((sol, z, vars))
    }

    fn run(&mut self) {
        let m = self.scores.devices.len();
        let k = self.k;

        // Step 1: dual optimization, subgradient first, then cutting planes.
        let mut lambda = vec![0.0; m];
        let Some(root_ub) = self.tighten(&mut lambda, ROOT_ITERATIONS) else {
            return;
        };
        let root_ub = self.bound(&mut lambda, 0, k, ROOT_CUTS, true).map_or(root_ub, |b| b.1.min(root_ub));
        self.stats.root_upper_bound = root_ub;
        self.stats.root_lower_bound = self.opt_hi;

        // Step 2: reduced-cost fixing. The dual is usually degenerate, so
        // besides the best multipliers we also fix against other points of
        // the optimal face; each of them gives valid pair bounds.
        let threshold = self.opt_hi - TIE_EPS - FIXING_MARGIN;
        let mut keep = vec![true; self.pairs.len()];
        let mut candidates = vec![lambda.clone()];
        candidates.extend(self.face_points(root_ub));
        for mu in &candidates {
            if self.relax(mu, 0, k).is_none() {
                return;
            }
            let outside = self.outside_knapsack(k);
            let total: f64 = mu.iter().sum();
            for (slot, &(node, dev)) in keep.iter_mut().zip(&self.pairs) {
                *slot = *slot
                    && outside[node].len() >= k
                    && total + self.q(node, dev) - mu[dev] + outside[node][k - 1] >= threshold;
            }
        }
        let kept: Vec<(usize, usize)> = self
            .pairs
            .iter()
            .zip(&keep)
            .filter_map(|(&p, &k)| k.then_some(p))
            .collect();
        self.stats.pairs_after_fixing = kept.len();
        self.set_pairs(kept);

        // Step 3: lexicographic depth-first search.
        self.search(0, lambda, root_ub);
    }

    /// Multipliers on the face `model(λ) ≤ ub` of the root cut model,
    /// extreme in a few fixed directions.
    fn face_points(&self, ub: f64) -> Vec<Vec<f64>> {
        let m = self.dev_used.len();
        let mut out = Vec::new();
        for t in 0..FACE_DIRECTIONS {
            let direction = |j: usize| -> f64 {
                match t {
                    0 => 1.0,
                    1 => -1.0,
                    _ => {
                        let h = (j as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> (13 + t);
                        if h & 1 == 0 { 1.0 } else { -1.0 }
                    }
                }
            };
            let mut lp = Problem::new(OptimizationDirection::Minimize);
            let z = lp.add_var(0.0, (f64::NEG_INFINITY, ub));
            let vars: Vec<_> = (0..m).map(|j| lp.add_var(direction(j), (0.0, 1.0))).collect();
            let mut rows = 0;
            for cut in self.cut_pool.iter().rev().take(LP_CUT_LIMIT) {
                if let Some((constant, coef)) = self.cut_row(cut, 0, self.k) {
                    lp.add_constraint(cut_expr(z, &vars, &coef).as_slice(), ComparisonOp::Ge, constant);
                    rows += 1;
                }
            }
            if rows == 0 {
                break;
            }
            if let Some(sol) = lp.solve().ok().and_then(|o| o.into_solution().ok()) {
                out.push(vars.iter().map(|&v| sol.var_value(v).clamp(0.0, 1.0)).collect());
            }
        }
        out
    }

    /// For every node, the best knapsack over nodes incomparable with it.
    /// Uses the tables left by the latest `relax` call.
    fn outside_knapsack(&self, cap: usize) -> Vec<Vec<f64>> {
        let n = self.tree.node_count();
        let mut out = vec![Vec::new(); n];
        out[self.tree.root] = vec![0.0];
        for u in (0..n).rev() {
            if let Some((a, b)) = self.tree.node(u).children {
                let mut oa = Vec::new();
                let mut ob = Vec::new();
                max_plus(&out[u], &self.knap[b], cap, &mut oa);
                max_plus(&out[u], &self.knap[a], cap, &mut ob);
                out[a] = oa;
                out[b] = ob;
            }
        }
        out
    }

    fn include(&mut self, node: usize, dev: usize) {
        self.adjust_blocked(node, 1);
        self.dev_used[dev] = true;
        self.included.push((node, dev));
        self.included_score += self.q(node, dev);
    }

    fn exclude(&mut self, node: usize, dev: usize) {
        self.adjust_blocked(node, -1);
        self.dev_used[dev] = false;
        self.included.pop();
        self.included_score -= self.q(node, dev);
    }

    fn adjust_blocked(&mut self, node: usize, delta: i32) {
        let apply = |b: &mut u32| *b = (*b as i32 + delta) as u32;
        let mut stack = vec![node];
        while let Some(v) = stack.pop() {
            apply(&mut self.blocked[v]);
            if let Some((a, b)) = self.tree.node(v).children {
                stack.push(a);
                stack.push(b);
            }
        }
        let mut up = self.tree.node(node).parent;
        while let Some(p) = up {
            apply(&mut self.blocked[p]);
            up = self.tree.node(p).parent;
        }
    }

    fn free_devices(&self) -> usize {
        self.dev_used.iter().filter(|&&u| !u).count()
    }

    /// Bounds for including one more pair at multipliers `lambda`: a
    /// solution containing `(node, dev)` is worth at most
    /// `base + q(node, dev) − λ_dev + rest[node]`.
    fn pair_bounds(&mut self, lambda: &[f64], pos: usize, r: usize) -> (f64, Vec<f64>) {
        let base = self.included_score + self.lambda_sum_free(lambda);
        if self.relax(lambda, pos, r).is_none() {
            return (base, vec![f64::NEG_INFINITY; self.tree.node_count()]);
        }
        let rest = self
            .outside_knapsack(r)
            .into_iter()
            .map(|o| o.get(r - 1).copied().unwrap_or(f64::NEG_INFINITY))
            .collect();
        (base, rest)
    }

    fn eligible(&self, idx: usize) -> bool {
        let (node, dev) = self.pairs[idx];
        self.blocked[node] == 0 && !self.dev_used[dev]
    }

    /// Exact completion when one pair is missing.
    fn finish_single(&mut self, start: usize) {
        let mut top: Option<(f64, usize)> = None;
        for idx in start..self.pairs.len() {
            if self.eligible(idx) {
                let (node, dev) = self.pairs[idx];
                let q = self.q(node, dev);
                if top.is_none_or(|(t, _)| q > t) {
                    top = Some((q, idx));
                }
            }
        }
        let Some((q, idx)) = top else { return };
        if self.prune(self.included_score + q) {
            return;
        }
        let with = |s: &Self, idx: usize| {
            let mut sol = s.included.clone();
            sol.push(s.pairs[idx]);
            sol
        };
        let sol = with(self, idx);
        self.offer(sol, false);
        // The first qualifying pair in order is the lexicographic winner here.
        let floor = self.opt_hi - TIE_EPS - 1e-12;
        for i in start..self.pairs.len() {
            if !self.eligible(i) {
                continue;
            }
            let (node, dev) = self.pairs[i];
            if self.included_score + self.q(node, dev) >= floor {
                let sol = with(self, i);
                self.offer(sol, true);
                if self.best.as_ref().is_some_and(|b| b.found_in_order) {
                    return;
                }
            }
        }
    }

    /// Include-first DFS over pairs `start..` on top of the fixed pairs.
    /// `inherited` is an upper bound valid for this state, e.g. the parent's.
    fn search(&mut self, start: usize, mut lambda: Vec<f64>, inherited: f64) {
        if self.out_of_budget() {
            return;
        }
        self.stats.search_nodes += 1;
        let remaining = self.k - self.included.len();
        if remaining == 1 {
            self.finish_single(start);
            return;
        }
        if self.free_devices() < remaining {
            return;
        }
        self.past = self.beyond_incumbent(None);
        if self.prune(inherited) {
            return;
        }
        // No bound can prune a state that still contains the incumbent, so
        // bounding waits until an exclusion removes it.
        let mut rel = None;
        let mut upper = inherited;
        if !self.incumbent_inside(start) {
            let Some((r, u)) = self.bound(&mut lambda, start, remaining, NODE_CUTS, false) else {
                return;
            };
            rel = Some(r);
            upper = u.min(inherited);
        }
        let mut rest = self.pair_bounds(&lambda, start, remaining);
        for pos in start..self.pairs.len() {
            if !self.eligible(pos) {
                continue;
            }
            self.past = self.beyond_incumbent(Some(pos));
            if self.prune(upper) {
                return;
            }
            let (node, dev) = self.pairs[pos];
            if self.prune(rest.0 + self.q(node, dev) - lambda[dev] + rest.1[node]) {
                continue;
            }
            self.include(node, dev);
            self.search(pos + 1, lambda.clone(), upper);
            self.exclude(node, dev);
            if self.stats.tie_break_truncated {
                return;
            }
            self.past = self.beyond_incumbent(Some(pos));
            // Excluding pairs only shrinks the state, so `upper` still holds.
            if self.prune(upper) {
                return;
            }
            let stale = rel
                .as_ref()
                .is_none_or(|r: &Relaxed| r.picks.iter().any(|&(_, _, idx)| idx == pos));
            if !stale {
                continue;
            }
            if self.incumbent_inside(pos + 1) {
                rel = None;
                continue;
            }
            match self.bound(&mut lambda, pos + 1, remaining, NODE_CUTS, false) {
                Some((r, u)) => {
                    rel = Some(r);
                    upper = u.min(upper);
                    rest = self.pair_bounds(&lambda, pos + 1, remaining);
                }
                None => return,
            }
        }
    }

    /// Whether the tie-break budget is spent. Only applies once the root bound
    /// certifies the incumbent objective, so the answer stays optimal.
    fn out_of_budget(&mut self) -> bool {
        let certified = self
            .best
            .as_ref()
            .is_some_and(|cur| self.stats.root_upper_bound <= cur.objective + TIE_EPS);
        if certified && self.stats.bound_evaluations >= TIE_BREAK_BUDGET {
            self.stats.tie_break_truncated = true;
        }
        self.stats.tie_break_truncated
    }

    /// Whether the incumbent is a completion of the fixed pairs using only
    /// eligible pairs from `pos` on, with a value the prune test keeps.
    fn incumbent_inside(&self, pos: usize) -> bool {
        let Some(cur) = &self.best else { return false };
        if self.prune(cur.objective) {
            return false;
        }
        cur.pairs.iter().all(|&(node, dev)| {
            self.included.contains(&(node, dev))
                || (self.blocked[node] == 0
                    && !self.dev_used[dev]
                    && self.node_pairs[node]
                        .iter()
                        .any(|&(d, idx)| d as usize == dev && idx as usize >= pos))
        })
    }
}
