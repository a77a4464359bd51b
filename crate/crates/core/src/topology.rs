//! Bandwidth matrix bookkeeping and the max–min Hamiltonian cycle solver
//! that orders the ring.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{bail, Result};

/// Rings of at most this many nodes are solved exactly.
pub const EXACT_LIMIT: usize = 10;
/// Search-node budget for each Hamiltonicity test in the large-n heuristic.
pub const HAMILTON_BUDGET: usize = 200_000;
/// Bandwidth assigned to an edge whose probe failed.
pub const FLOOR_BPS: f64 = 1.0;
pub const EMA_ALPHA: f64 = 0.5;
/// A new order must beat the current one by this factor to be adopted.
pub const HYSTERESIS: f64 = 1.1;

/// Symmetric n×n bandwidth table in bits per second; diagonal unused.
#[derive(Clone, Debug, PartialEq)]
pub struct BandwidthMatrix {
    n: usize,
    w: Vec<f64>,
}

impl BandwidthMatrix {
    /// Builds from directed measurements (`raw[i * n + j]` is i → j),
    /// keeping the smaller of the two directions.
    pub fn from_directed(n: usize, raw: &[f64]) -> Result<Self> {
        if n < 2 {
            bail!(Shape, "bandwidth matrix needs at least 2 nodes, got {n}");
        }
        if raw.len() != n * n {
            bail!(Shape, "bandwidth matrix of order {n} needs {} entries, got {}", n * n, raw.len());
        }
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let v = raw[i * n + j];
                if v.is_nan() || v < 0.0 {
                    bail!(Range, "bandwidth {v} for edge {i}->{j}");
                }
                w[i * n + j] = v.min(raw[j * n + i]);
            }
        }
        Ok(BandwidthMatrix { n, w })
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let raw: Vec<f64> = (0..n * n).map(|x| if x / n == x % n { 0.0 } else { f(x / n, x % n) }).collect();
        BandwidthMatrix::from_directed(n, &raw)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.n + j]
    }

    /// Same matrix with node `i` relabelled `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                w[perm[i] * n + perm[j]] = self.get(i, j);
            }
        }
        BandwidthMatrix { n, w }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RingOrder {
    pub order: Vec<usize>,
    /// Smallest bandwidth over consecutive pairs, wrap-around included.
    pub objective: f64,
}

/// Bottleneck bandwidth of a cyclic order.
pub fn cycle_objective(m: &BandwidthMatrix, order: &[usize]) -> f64 {
    let n = order.len();
    (0..n).map(|i| m.get(order[i], order[(i + 1) % n])).fold(f64::INFINITY, f64::min)
}

/// Ring order maximising the minimum edge bandwidth. Exact for
/// `n ≤ EXACT_LIMIT`, threshold search otherwise. Deterministic.
pub fn solve_ring(m: &BandwidthMatrix) -> Result<RingOrder> {
    let n = m.n();
    if n < 2 {
        bail!(Shape, "ring needs at least 2 nodes");
    }
    let order = if n <= EXACT_LIMIT { solve_exact(m) } else { solve_threshold(m) };
    let objective = cycle_objective(m, &order);
    Ok(RingOrder { order, objective })
}

fn solve_exact(m: &BandwidthMatrix) -> Vec<usize> {
    let n = m.n();
    let mut best: Vec<usize> = (0..n).collect();
    let mut best_obj = cycle_objective(m, &best);
    if n <= 3 {
        return best;
    }
    let mut path = vec![0usize];
    let mut used = vec![false; n];
    used[0] = true;
    exact_dfs(m, &mut path, &mut used, f64::INFINITY, &mut best, &mut best_obj);
    best
}

fn exact_dfs(
    m: &BandwidthMatrix,
    path: &mut Vec<usize>,
    used: &mut [bool],
    cur: f64,
    best: &mut Vec<usize>,
    best_obj: &mut f64,
) {
    let n = m.n();
    let last = *path.last().unwrap();
    if path.len() == n {
        // Each undirected cycle is visited twice; keep one orientation.
        if path[1] > path[n - 1] {
            return;
        }
        let total = cur.min(m.get(last, path[0]));
        if total > *best_obj {
            *best_obj = total;
            best.clone_from(path);
        }
        return;
    }
    for v in 1..n {
        if used[v] {
            continue;
        }
        let c = cur.min(m.get(last, v));
        if c <= *best_obj {
            continue;
        }
        used[v] = true;
        path.push(v);
        exact_dfs(m, path, used, c, best, best_obj);
        path.pop();
        used[v] = false;
    }
}

/// Nearest-neighbour tour from node 0 following the widest free edge.
pub fn greedy_ring(m: &BandwidthMatrix) -> Vec<usize> {
    let n = m.n();
    let mut used = vec![false; n];
    let mut order = vec![0];
    used[0] = true;
    while order.len() < n {
        let last = *order.last().unwrap();
        let mut pick = None;
        for v in 0..n {
            if !used[v] && pick.is_none_or(|p| m.get(last, v) > m.get(last, p)) {
                pick = Some(v);
            }
        }
        let v = pick.unwrap();
        used[v] = true;
        order.push(v);
    }
    order
}

fn solve_threshold(m: &BandwidthMatrix) -> Vec<usize> {
    let n = m.n();
    let mut weights: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| m.get(i, j)).collect();
    weights.sort_by(|a, b| a.total_cmp(b));
    weights.dedup();
    let greedy = greedy_ring(m);
    let greedy_obj = cycle_objective(m, &greedy);
    // Largest threshold index whose edge set still admits a found cycle.
    let (mut lo, mut hi) = (0usize, weights.len());
    let mut found: Option<Vec<usize>> = None;
    while lo < hi {
        let mid = (lo + hi) / 2;
        match hamiltonian_cycle(m, weights[mid]) {
            Some(c) => {
                found = Some(c);
                lo = mid + 1;
            }
            None => hi = mid,
        }
    }
    match found {
        Some(c) if cycle_objective(m, &c) >= greedy_obj => c,
        _ => greedy,
    }
}

/// Budgeted backtracking search for a Hamiltonian cycle using only edges of
/// bandwidth ≥ `t`. `None` means none was found within the budget.
fn hamiltonian_cycle(m: &BandwidthMatrix, t: f64) -> Option<Vec<usize>> {
    let n = m.n();
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut a: Vec<usize> = (0..n).filter(|&j| j != i && m.get(i, j) >= t).collect();
            a.sort_by(|&x, &y| m.get(i, y).total_cmp(&m.get(i, x)).then(x.cmp(&y)));
            a
        })
        .collect();
    if adj.iter().any(|a| a.len() < 2) {
        return None;
    }
    let mut path = vec![0usize];
    let mut used = vec![false; n];
    used[0] = true;
    let mut budget = HAMILTON_BUDGET;
    if ham_dfs(&adj, &mut path, &mut used, &mut budget) {
        Some(path)
    } else {
        None
    }
}

fn ham_dfs(adj: &[Vec<usize>], path: &mut Vec<usize>, used: &mut [bool], budget: &mut usize) -> bool {
    let n = adj.len();
    let last = *path.last().unwrap();
    if path.len() == n {
        return adj[last].contains(&0);
    }
    if *budget == 0 {
        return false;
    }
    *budget -= 1;
    // Try the most constrained successors first.
    let mut next: Vec<usize> = adj[last].iter().copied().filter(|&v| !used[v]).collect();
    let free_degree = |v: usize| adj[v].iter().filter(|&&u| !used[u]).count();
    next.sort_by_key(|&v| free_degree(v));
    for v in next {
        used[v] = true;
        path.push(v);
        if ham_dfs(adj, path, used, budget) {
            return true;
        }
        path.pop();
        used[v] = false;
    }
    false
}

/// Smoothed directed bandwidth observations keyed by node id, plus the
/// hysteresis rule for publishing a new ring order.
#[derive(Clone, Debug, Default)]
pub struct RingTracker {
    ema: BTreeMap<(String, String), f64>,
}

impl RingTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, from: &str, to: &str, bps: f64) {
        if !(bps.is_finite() && bps >= 0.0) {
            return;
        }
        let e = self.ema.entry((from.to_string(), to.to_string())).or_insert(bps);
        *e = EMA_ALPHA * bps + (1.0 - EMA_ALPHA) * *e;
    }

    pub fn mark_failed(&mut self, from: &str, to: &str) {
        self.ema.insert((from.to_string(), to.to_string()), FLOOR_BPS);
    }

    pub fn estimate(&self, from: &str, to: &str) -> Option<f64> {
        self.ema.get(&(from.to_string(), to.to_string())).copied()
    }

    /// Drops observations involving nodes outside `members`.
    pub fn retain(&mut self, members: &[String]) {
        self.ema.retain(|(a, b), _| members.contains(a) && members.contains(b));
    }

    /// Symmetrized matrix over `nodes`; unmeasured edges are unconstrained.
    pub fn matrix(&self, nodes: &[String]) -> Result<BandwidthMatrix> {
        BandwidthMatrix::from_fn(nodes.len(), |i, j| self.estimate(&nodes[i], &nodes[j]).unwrap_or(f64::MAX))
    }

    /// Next ring order for `members`: the current order restricted to the
    /// members (newcomers appended), replaced by the optimum only when that
    /// improves the bottleneck by more than the hysteresis factor.
    pub fn propose(&self, members: &[String], current: &[String]) -> Vec<String> {
        let mut order: Vec<String> = current.iter().filter(|n| members.contains(n)).cloned().collect();
        for m in members {
            if !order.contains(m) {
                order.push(m.clone());
            }
        }
        if order.len() < 3 {
            return order;
        }
        let Ok(mat) = self.matrix(&order) else { return order };
        let identity: Vec<usize> = (0..order.len()).collect();
        let cur = cycle_objective(&mat, &identity);
        let Ok(best) = solve_ring(&mat) else { return order };
        if best.objective > HYSTERESIS * cur {
            best.order.iter().map(|&i| order[i].clone()).collect()
        } else {
            order
        }
    }
}

/// Writes the plain-text snapshot: a header of node ids, then one row per
/// node (`id` followed by n bandwidths, `-` on the diagonal).
pub fn format_matrix(ids: &[String], m: &BandwidthMatrix) -> String {
    let mut s = String::new();
    s.push_str("node");
    for id in ids {
        let _ = write!(s, " {id}");
    }
    s.push('\n');
    for (i, id) in ids.iter().enumerate() {
        s.push_str(id);
        for j in 0..m.n() {
            if i == j {
                s.push_str(" -");
            } else {
                let _ = write!(s, " {}", m.get(i, j));
            }
        }
        s.push('\n');
    }
    s
}

/// Parses [`format_matrix`] output. Blank lines and `#` comments are
/// ignored; the leading header token is optional; off-diagonal values are
/// bits per second and asymmetric entries are symmetrized.
pub fn parse_matrix(text: &str) -> Result<(Vec<String>, BandwidthMatrix)> {
    let mut lines = text.lines().map(|l| l.split('#').next().unwrap_or("").trim()).filter(|l| !l.is_empty());
    let Some(header) = lines.next() else { bail!(Decode, "empty bandwidth matrix") };
    let mut ids: Vec<String> = header.split_whitespace().map(String::from).collect();
    if ids.first().map(String::as_str) == Some("node") {
        ids.remove(0);
    }
    let n = ids.len();
    let mut raw = vec![f64::NAN; n * n];
    let mut seen = vec![false; n];
    for line in lines {
        let mut tok = line.split_whitespace();
        let id = tok.next().unwrap_or_default();
        let Some(i) = ids.iter().position(|x| x == id) else { bail!(Decode, "row for unknown node {id}") };
        if seen[i] {
            bail!(Decode, "duplicate row for node {id}");
        }
        seen[i] = true;
        let vals: Vec<&str> = tok.collect();
        if vals.len() != n {
            bail!(Decode, "row {id} has {} values, expected {n}", vals.len());
        }
        for (j, v) in vals.iter().enumerate() {
            raw[i * n + j] = if i == j {
                0.0
            } else {
                match v.parse::<f64>() {
                    Ok(x) if x.is_finite() && x >= 0.0 => x,
                    _ => bail!(Decode, "bad bandwidth {v:?} at row {id}, column {}", ids[j]),
                }
            };
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        bail!(Decode, "missing row for node {}", ids[i]);
    }
    Ok((ids, BandwidthMatrix::from_directed(n, &raw)?))
}
