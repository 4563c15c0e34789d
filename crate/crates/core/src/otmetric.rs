//! Wasserstein distances on finite supports.
//!
//! [`w1_exact`] solves the transport linear program with a transportation
//! simplex (a network simplex specialised to the complete bipartite graph)
//! and returns an optimal dual pair alongside the primal value, so every solve
//! can be certified. [`w1_sinkhorn`] is the entropic approximation for large
//! supports, and [`w2_diag_gaussian`] is the closed form used by the learned
//! bisimulation loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Tolerance on the total mass of a [`FiniteDist`].
pub const MASS_TOL: f64 = 1e-12;

/// A probability vector over `k` support indices.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDist {
    weights: Vec<f64>,
}

impl FiniteDist {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidDistribution("empty support".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidDistribution(format!("weight {w} is negative or non-finite")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidDistribution(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { weights })
    }

    /// Point mass on `index` within a support of size `k`.
    pub fn dirac(k: usize, index: usize) -> Result<Self> {
        if index >= k {
            return Err(Error::InvalidDistribution(format!("index {index} outside support of size {k}")));
        }
        let mut w = vec![0.0; k];
        w[index] = 1.0;
        Self::new(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Symmetric, nonnegative `k x k` cost table with zero diagonal.
///
/// Only a pseudometric is required: the triangle inequality is not checked.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundMetric {
    k: usize,
    costs: Vec<f64>,
}

impl GroundMetric {
    /// Builds from a row-major table. Symmetry is checked to `1e-12`.
    pub fn new(k: usize, costs: Vec<f64>) -> Result<Self> {
        if costs.len() != k * k {
            return Err(Error::DimensionMismatch { expected: k * k, got: costs.len() });
        }
        for i in 0..k {
            if costs[i * k + i] != 0.0 {
                return Err(Error::InvalidDistribution(format!("cost diagonal at {i} is nonzero")));
            }
            for j in 0..k {
                let c = costs[i * k + j];
                if !c.is_finite() || c < 0.0 {
                    return Err(Error::InvalidDistribution(format!("cost ({i},{j}) = {c} is negative or non-finite")));
                }
                if (c - costs[j * k + i]).abs() > 1e-12 {
                    return Err(Error::InvalidDistribution(format!("cost is not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { k, costs })
    }

    /// The discrete metric: 1 off the diagonal.
    pub fn discrete(k: usize) -> Self {
        let mut costs = vec![1.0; k * k];
        for i in 0..k {
            costs[i * k + i] = 0.0;
        }
        Self { k, costs }
    }

    pub fn size(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.costs[i * self.k + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.costs
    }
}

/// Diagonal Gaussian with strictly positive standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::DimensionMismatch { expected: mean.len(), got: std.len() });
        }
        if let Some(s) = std.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidDistribution(format!("std {s} is not strictly positive")));
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Optimal transport plan with its dual certificate.
#[derive(Debug, Clone)]
pub struct W1Solution {
    /// Primal optimum `sum cost * plan`.
    pub value: f64,
    /// Nonzero plan entries `(i, j, mass)`.
    pub plan: Vec<(usize, usize, f64)>,
    /// Row potentials `u`, one per support index of `p`.
    pub dual_row: Vec<f64>,
    /// Column potentials `v`, one per support index of `q`.
    pub dual_col: Vec<f64>,
}

impl W1Solution {
    /// Dual objective `sum p_i u_i + sum q_j v_j`.
    pub fn dual_value(&self, p: &[f64], q: &[f64]) -> f64 {
        dot(p, &self.dual_row) + dot(q, &self.dual_col)
    }

    /// Largest violation of `u_i + v_j <= cost(i, j)` (zero when feasible).
    pub fn dual_infeasibility(&self, cost: impl Fn(usize, usize) -> f64) -> f64 {
        let mut worst = 0.0f64;
        for (i, u) in self.dual_row.iter().enumerate() {
            for (j, v) in self.dual_col.iter().enumerate() {
                worst = worst.max(u + v - cost(i, j));
            }
        }
        worst
    }

    /// `|primal - dual|`; zero (to rounding) for an optimal solve.
    pub fn duality_gap(&self, p: &[f64], q: &[f64]) -> f64 {
        (self.value - self.dual_value(p, q)).abs()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact 1-Wasserstein distance between `p` and `q` under `cost`.
pub fn w1_exact(p: &FiniteDist, q: &FiniteDist, cost: &GroundMetric) -> Result<W1Solution> {
    let k = cost.size();
    if p.len() != k {
        return Err(Error::DimensionMismatch { expected: k, got: p.len() });
    }
    if q.len() != k {
        return Err(Error::DimensionMismatch { expected: k, got: q.len() });
    }
    transport(p.weights(), q.weights(), |i, j| cost.get(i, j))
}

/// Exact transport between arbitrary nonnegative mass vectors of equal total.
///
/// `cost(i, j)` is queried for `i < p.len()`, `j < q.len()`. Zero-mass entries
/// are dropped from the simplex and receive the tightest feasible potential
/// afterwards, so the certificate covers the full index range.
pub fn transport(p: &[f64], q: &[f64], cost: impl Fn(usize, usize) -> f64) -> Result<W1Solution> {
    let rows: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
    let cols: Vec<usize> = (0..q.len()).filter(|&j| q[j] > 0.0).collect();
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::InvalidDistribution("transport between empty masses".into()));
    }
    let a: Vec<f64> = rows.iter().map(|&i| p[i]).collect();
    let b: Vec<f64> = cols.iter().map(|&j| q[j]).collect();
    let m = a.len();
    let n = b.len();
    let mut c = vec![0.0; m * n];
    for (ri, &i) in rows.iter().enumerate() {
        for (cj, &j) in cols.iter().enumerate() {
            c[ri * n + cj] = cost(i, j);
        }
    }

    let reduced = TransportSimplex::solve(&a, &b, &c)?;

    let mut dual_row = vec![f64::NAN; p.len()];
    let mut dual_col = vec![f64::NAN; q.len()];
    for (ri, &i) in rows.iter().enumerate() {
        dual_row[i] = reduced.u[ri];
    }
    for (cj, &j) in cols.iter().enumerate() {
        dual_col[j] = reduced.v[cj];
    }
    // Zero-mass rows first (against supported columns), then zero-mass columns
    // against every row.
    for i in 0..p.len() {
        if dual_row[i].is_nan() {
            dual_row[i] = cols.iter().map(|&j| cost(i, j) - dual_col[j]).fold(f64::INFINITY, f64::min);
        }
    }
    for j in 0..q.len() {
        if dual_col[j].is_nan() {
            dual_col[j] = (0..p.len()).map(|i| cost(i, j) - dual_row[i]).fold(f64::INFINITY, f64::min);
        }
    }

    let plan = reduced
        .basis
        .iter()
        .filter(|e| e.flow > 0.0)
        .map(|e| (rows[e.row], cols[e.col], e.flow))
        .collect();
    Ok(W1Solution { value: reduced.value, plan, dual_row, dual_col })
}

#[derive(Debug, Clone, Copy)]
struct BasicCell {
    row: usize,
    col: usize,
    flow: f64,
}

struct TransportSimplex {
    value: f64,
    basis: Vec<BasicCell>,
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Consecutive degenerate pivots after which entering/leaving switch to
/// Bland's smallest-index rule.
const DEGENERATE_SWITCH: usize = 32;

impl TransportSimplex {
    fn solve(a: &[f64], b: &[f64], c: &[f64]) -> Result<Self> {
        let m = a.len();
        let n = b.len();
        let scale = c.iter().fold(1.0f64, |acc, x| acc.max(x.abs()));
        let tol = 1e-12 * scale;

        let mut basis = northwest_corner(a, b);
        let mut u = vec![0.0; m];
        let mut v = vec![0.0; n];
        let max_pivots = 50 * (m + n) * (m + n) + 1000;
        let mut degenerate_run = 0usize;

        for _ in 0..max_pivots {
            potentials(&basis, c, n, &mut u, &mut v);

            let bland = degenerate_run >= DEGENERATE_SWITCH;
            let mut entering: Option<(usize, usize)> = None;
            let mut best = -tol;
            'scan: for i in 0..m {
                for j in 0..n {
                    let r = c[i * n + j] - u[i] - v[j];
                    if r < best {
                        if bland {
                            entering = Some((i, j));
                            break 'scan;
                        }
                        best = r;
                        entering = Some((i, j));
                    }
                }
            }
            let Some((ei, ej)) = entering else {
                let value = basis.iter().map(|e| e.flow * c[e.row * n + e.col]).sum();
                return Ok(Self { value, basis, u, v });
            };

            // Tree path from column node `ej` back to row node `ei`; edges on it
            // alternate -, +, -, ... starting next to the entering column.
            let path = tree_path(&basis, m, n, m + ej, ei);
            let mut leave: Option<usize> = None;
            for (k, &edge) in path.iter().enumerate() {
                if k % 2 == 0 {
                    let better = match leave {
                        None => true,
                        Some(l) => {
                            let (fl, fe) = (basis[l].flow, basis[edge].flow);
                            fe < fl || (bland && fe == fl && (basis[edge].row, basis[edge].col) < (basis[l].row, basis[l].col))
                        }
                    };
                    if better {
                        leave = Some(edge);
                    }
                }
            }
            let leave = leave.expect("cycle has at least one decreasing edge");
            let theta = basis[leave].flow;
            degenerate_run = if theta == 0.0 { degenerate_run + 1 } else { 0 };
            for (k, &edge) in path.iter().enumerate() {
                if k % 2 == 0 {
                    basis[edge].flow -= theta;
                } else {
                    basis[edge].flow += theta;
                }
            }
            basis[leave] = BasicCell { row: ei, col: ej, flow: theta };
        }
        Err(Error::SimplexIterationLimit(max_pivots))
    }
}

fn northwest_corner(a: &[f64], b: &[f64]) -> Vec<BasicCell> {
    let m = a.len();
    let n = b.len();
    let mut ra = a.to_vec();
    let mut rb = b.to_vec();
    let mut basis = Vec::with_capacity(m + n - 1);
    let (mut i, mut j) = (0, 0);
    loop {
        let x = ra[i].min(rb[j]);
        basis.push(BasicCell { row: i, col: j, flow: x });
        ra[i] -= x;
        rb[j] -= x;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if j == n - 1 || (i < m - 1 && ra[i] <= rb[j]) {
            i += 1;
        } else {
            j += 1;
        }
    }
    debug_assert_eq!(basis.len(), m + n - 1);
    basis
}

/// Solves `u_i + v_j = c_ij` on the basis tree with `u_0 = 0`.
fn potentials(basis: &[BasicCell], c: &[f64], n: usize, u: &mut [f64], v: &mut [f64]) {
    let m = u.len();
    let mut row_set = vec![false; m];
    let mut col_set = vec![false; n];
    u[0] = 0.0;
    row_set[0] = true;
    let mut remaining = basis.len();
    let mut done = vec![false; basis.len()];
    while remaining > 0 {
        let mut progressed = false;
        for (k, e) in basis.iter().enumerate() {
            if done[k] {
                continue;
            }
            if row_set[e.row] {
                v[e.col] = c[e.row * n + e.col] - u[e.row];
                col_set[e.col] = true;
            } else if col_set[e.col] {
                u[e.row] = c[e.row * n + e.col] - v[e.col];
                row_set[e.row] = true;
            } else {
                continue;
            }
            done[k] = true;
            remaining -= 1;
            progressed = true;
        }
        debug_assert!(progressed, "basis is not a spanning tree");
        if !progressed {
            break;
        }
    }
}

/// Basis-edge indices along the tree path from node `from` to row node `to`.
/// Row nodes are `0..m`, column nodes `m..m+n`.
fn tree_path(basis: &[BasicCell], m: usize, n: usize, from: usize, to: usize) -> Vec<usize> {
    let nodes = m + n;
    let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nodes];
    for (k, e) in basis.iter().enumerate() {
        adjacency[e.row].push((m + e.col, k));
        adjacency[m + e.col].push((e.row, k));
    }
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; nodes];
    let mut seen = vec![false; nodes];
    let mut queue = alloc::collections::VecDeque::new();
    seen[from] = true;
    queue.push_back(from);
    while let Some(node) = queue.pop_front() {
        if node == to {
            break;
        }
        for &(next, edge) in &adjacency[node] {
            if !seen[next] {
                seen[next] = true;
                parent[next] = Some((node, edge));
                queue.push_back(next);
            }
        }
    }
    let mut path = Vec::new();
    let mut node = to;
    while node != from {
        let (prev, edge) = parent[node].expect("basis tree is connected");
        path.push(edge);
        node = prev;
    }
    path.reverse();
    path
}

/// Entropic-regularised transport cost `<P_eps, C>`.
///
/// Log-domain Sinkhorn with epsilon scaling: the regularisation starts at the
/// cost scale and is divided by 4 until `epsilon` is reached, warm-starting the
/// potentials at each stage. Converged when the row-marginal L1 violation
/// drops to `1e-6`.
pub fn w1_sinkhorn(p: &FiniteDist, q: &FiniteDist, cost: &GroundMetric, epsilon: f64, max_iter: usize) -> Result<f64> {
    let k = cost.size();
    if p.len() != k || q.len() != k {
        return Err(Error::DimensionMismatch { expected: k, got: p.len().max(q.len()) });
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidDistribution(format!("epsilon must be positive, got {epsilon}")));
    }
    let rows: Vec<usize> = (0..k).filter(|&i| p.weights()[i] > 0.0).collect();
    let cols: Vec<usize> = (0..k).filter(|&j| q.weights()[j] > 0.0).collect();
    let m = rows.len();
    let n = cols.len();
    let log_a: Vec<f64> = rows.iter().map(|&i| math::ln(p.weights()[i])).collect();
    let log_b: Vec<f64> = cols.iter().map(|&j| math::ln(q.weights()[j])).collect();
    let a: Vec<f64> = rows.iter().map(|&i| p.weights()[i]).collect();
    let mut c = vec![0.0; m * n];
    for (ri, &i) in rows.iter().enumerate() {
        for (cj, &j) in cols.iter().enumerate() {
            c[ri * n + cj] = cost.get(i, j);
        }
    }
    let c_max = c.iter().copied().fold(0.0f64, f64::max);

    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let mut buf = vec![0.0; m.max(n)];
    let mut eps = if c_max > epsilon { c_max } else { epsilon };
    let mut iterations = 0usize;
    loop {
        let last_stage = eps <= epsilon;
        loop {
            // f update
            for i in 0..m {
                for j in 0..n {
                    buf[j] = (g[j] - c[i * n + j]) / eps;
                }
                f[i] = eps * (log_a[i] - math::log_sum_exp(&buf[..n]));
            }
            // g update
            for j in 0..n {
                for i in 0..m {
                    buf[i] = (f[i] - c[i * n + j]) / eps;
                }
                g[j] = eps * (log_b[j] - math::log_sum_exp(&buf[..m]));
            }
            iterations += 1;
            let mut violation = 0.0;
            for i in 0..m {
                let row: f64 = (0..n).map(|j| math::exp((f[i] + g[j] - c[i * n + j]) / eps)).sum();
                violation += (row - a[i]).abs();
            }
            if violation <= 1e-6 {
                break;
            }
            if iterations >= max_iter {
                return Err(Error::SinkhornNotConverged { violation, iterations });
            }
        }
        if last_stage {
            break;
        }
        eps = (eps / 4.0).max(epsilon);
    }
    let mut value = 0.0;
    for i in 0..m {
        for j in 0..n {
            value += c[i * n + j] * math::exp((f[i] + g[j] - c[i * n + j]) / eps);
        }
    }
    Ok(value)
}

/// Closed-form 2-Wasserstein distance between diagonal Gaussians.
pub fn w2_diag_gaussian(a: &DiagGaussian, b: &DiagGaussian) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    Ok(w2_diag_raw(&a.mean, &a.std, &b.mean, &b.std))
}

/// Same closed form on raw slices; callers guarantee equal lengths.
pub(crate) fn w2_diag_raw(mean_a: &[f64], std_a: &[f64], mean_b: &[f64], std_b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in mean_a.iter().zip(mean_b) {
        s += (x - y) * (x - y);
    }
    for (x, y) in std_a.iter().zip(std_b) {
        s += (x - y) * (x - y);
    }
    math::sqrt(s)
}

/// Brute-force reference for small transport problems.
///
/// Enumerates every spanning tree of the `m x n` bipartite support graph,
/// recovers its (unique) flow by peeling leaves, keeps the nonnegative ones
/// (the basic feasible plans, i.e. the polytope vertices) and returns the
/// cheapest. Exponential; meant for `k <= 3` oracle checks only.
#[cfg(any(test, feature = "oracles"))]
pub mod brute_force {
    use alloc::vec;
    use alloc::vec::Vec;

    pub fn transport_min(p: &[f64], q: &[f64], cost: impl Fn(usize, usize) -> f64) -> f64 {
        let m = p.len();
        let n = q.len();
        let cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
        let need = m + n - 1;
        let mut best = f64::INFINITY;
        let mut chosen = Vec::with_capacity(need);
        enumerate(&cells, 0, need, &mut chosen, &mut |subset| {
            if let Some(flows) = peel(subset, p, q) {
                let c: f64 = subset.iter().zip(&flows).map(|(&(i, j), f)| f * cost(i, j)).sum();
                if c < best {
                    best = c;
                }
            }
        });
        best
    }

    fn enumerate(
        cells: &[(usize, usize)],
        start: usize,
        need: usize,
        chosen: &mut Vec<(usize, usize)>,
        visit: &mut dyn FnMut(&[(usize, usize)]),
    ) {
        if chosen.len() == need {
            visit(chosen);
            return;
        }
        for idx in start..cells.len() {
            if cells.len() - idx < need - chosen.len() {
                break;
            }
            chosen.push(cells[idx]);
            enumerate(cells, idx + 1, need, chosen, visit);
            chosen.pop();
        }
    }

    /// Flow on a spanning-tree support, or `None` if the support is not a
    /// spanning tree or the flow is negative somewhere.
    fn peel(subset: &[(usize, usize)], p: &[f64], q: &[f64]) -> Option<Vec<f64>> {
        let m = p.len();
        let mut rem: Vec<f64> = p.iter().chain(q.iter()).copied().collect();
        let mut alive = vec![true; subset.len()];
        let mut flows = vec![0.0; subset.len()];
        for _ in 0..subset.len() {
            let mut degree = vec![0usize; rem.len()];
            for (k, &(i, j)) in subset.iter().enumerate() {
                if alive[k] {
                    degree[i] += 1;
                    degree[m + j] += 1;
                }
            }
            let leaf_edge = subset.iter().enumerate().find_map(|(k, &(i, j))| {
                if !alive[k] {
                    return None;
                }
                if degree[i] == 1 {
                    Some((k, i, m + j))
                } else if degree[m + j] == 1 {
                    Some((k, m + j, i))
                } else {
                    None
                }
            });
            // No leaf among remaining edges means a cycle.
            let (k, leaf, other) = leaf_edge?;
            let f = rem[leaf];
            flows[k] = f;
            rem[leaf] = 0.0;
            rem[other] -= f;
            alive[k] = false;
        }
        if flows.iter().any(|&f| f < -1e-12) || rem.iter().any(|r| r.abs() > 1e-9) {
            return None;
        }
        Some(flows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn dist(w: &[f64]) -> FiniteDist {
        FiniteDist::new(w.to_vec()).unwrap()
    }

    #[test]
    fn identical_distributions_cost_nothing() {
        let p = dist(&[0.2, 0.3, 0.5]);
        let sol = w1_exact(&p, &p, &GroundMetric::discrete(3)).unwrap();
        assert_abs_diff_eq!(sol.value, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn opposite_diracs() {
        let sol = w1_exact(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0]), &GroundMetric::discrete(2)).unwrap();
        assert_abs_diff_eq!(sol.value, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn two_by_two_split_mass() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.25, 0.75]);
        let sol = w1_exact(&p, &q, &GroundMetric::discrete(2)).unwrap();
        assert_abs_diff_eq!(sol.value, 0.25, epsilon = 1e-15);
        assert!(sol.duality_gap(p.weights(), q.weights()) < 1e-12);
    }

    #[test]
    fn rejects_bad_distributions() {
        assert!(FiniteDist::new(vec![0.5, 0.6]).is_err());
        assert!(FiniteDist::new(vec![-0.1, 1.1]).is_err());
        assert!(FiniteDist::new(vec![]).is_err());
        let p = dist(&[1.0]);
        assert!(w1_exact(&p, &dist(&[0.5, 0.5]), &GroundMetric::discrete(2)).is_err());
    }

    #[test]
    fn sinkhorn_close_to_exact_on_two_by_two() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.25, 0.75]);
        let v = w1_sinkhorn(&p, &q, &GroundMetric::discrete(2), 1e-3, 100_000).unwrap();
        assert!((v - 0.25).abs() <= 5e-3, "{v}");
    }

    #[test]
    fn sinkhorn_self_distance_bounded_by_entropy() {
        let k = 4;
        let p = dist(&[0.25; 4]);
        let eps = 0.05;
        let v = w1_sinkhorn(&p, &p, &GroundMetric::discrete(k), eps, 100_000).unwrap();
        assert!(v >= 0.0 && v <= eps * (k as f64).ln() + 1e-9, "{v}");
    }

    #[test]
    fn sinkhorn_reports_non_convergence() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.25, 0.75]);
        let err = w1_sinkhorn(&p, &q, &GroundMetric::discrete(2), 1e-3, 1).unwrap_err();
        assert!(matches!(err, Error::SinkhornNotConverged { .. }));
        assert!(w1_sinkhorn(&p, &q, &GroundMetric::discrete(2), 0.0, 10).is_err());
    }

    #[test]
    fn w2_closed_form_examples() {
        let a = DiagGaussian::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let b = DiagGaussian::new(vec![3.0, 4.0], vec![1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(w2_diag_gaussian(&a, &b).unwrap(), 5.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w2_diag_gaussian(&a, &a).unwrap(), 0.0);
        let c = DiagGaussian::new(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap();
        assert_abs_diff_eq!(w2_diag_gaussian(&a, &c).unwrap(), 2f64.sqrt(), epsilon = 1e-15);
        let d = DiagGaussian::new(vec![0.0], vec![1.0]).unwrap();
        assert!(w2_diag_gaussian(&a, &d).is_err());
        assert!(DiagGaussian::new(vec![0.0], vec![0.0]).is_err());
    }

    fn arb_dist(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, k).prop_map(|w| {
            let mut w = w;
            w[0] += 1e-3;
            let s: f64 = w.iter().sum();
            let mut out: Vec<f64> = w.iter().map(|x| x / s).collect();
            let rest: f64 = out[1..].iter().sum();
            out[0] = 1.0 - rest;
            out
        })
    }

    /// Random true metric: Euclidean distances between random points on a line.
    fn arb_line_metric(k: usize) -> impl Strategy<Value = GroundMetric> {
        prop::collection::vec(0.0f64..5.0, k).prop_map(move |x| {
            let mut c = vec![0.0; k * k];
            for i in 0..k {
                for j in 0..k {
                    c[i * k + j] = (x[i] - x[j]).abs();
                }
            }
            GroundMetric::new(k, c).unwrap()
        })
    }

    proptest! {
        #[test]
        fn symmetric_and_certified((p, q, cost) in (2usize..7).prop_flat_map(|k| (arb_dist(k), arb_dist(k), arb_line_metric(k)))) {
            let p = FiniteDist::new(p).unwrap();
            let q = FiniteDist::new(q).unwrap();
            let pq = w1_exact(&p, &q, &cost).unwrap();
            let qp = w1_exact(&q, &p, &cost).unwrap();
            prop_assert!((pq.value - qp.value).abs() < 1e-12);
            prop_assert!(pq.duality_gap(p.weights(), q.weights()) < 1e-9);
            prop_assert!(pq.dual_infeasibility(|i, j| cost.get(i, j)) < 1e-9);
            prop_assert!(pq.value >= 0.0);
            let pp = w1_exact(&p, &p, &cost).unwrap();
            prop_assert!(pp.value.abs() < 1e-12);
        }

        #[test]
        fn triangle_inequality_on_metric_costs((p, q, r, cost) in (2usize..6).prop_flat_map(|k| (arb_dist(k), arb_dist(k), arb_dist(k), arb_line_metric(k)))) {
            let p = FiniteDist::new(p).unwrap();
            let q = FiniteDist::new(q).unwrap();
            let r = FiniteDist::new(r).unwrap();
            let pq = w1_exact(&p, &q, &cost).unwrap().value;
            let qr = w1_exact(&q, &r, &cost).unwrap().value;
            let pr = w1_exact(&p, &r, &cost).unwrap().value;
            prop_assert!(pr <= pq + qr + 1e-12);
        }

        #[test]
        fn matches_brute_force_small((p, q, c) in (1usize..4).prop_flat_map(|k| (arb_dist(k), arb_dist(k), prop::collection::vec(0.0f64..3.0, k * k).prop_map(move |raw| (k, raw))))) {
            let (k, raw) = c;
            let mut costs = vec![0.0; k * k];
            for i in 0..k {
                for j in 0..k {
                    if i != j {
                        let v = raw[i.min(j) * k + i.max(j)];
                        costs[i * k + j] = v;
                    }
                }
            }
            let cost = GroundMetric::new(k, costs).unwrap();
            let sol = w1_exact(&FiniteDist::new(p.clone()).unwrap(), &FiniteDist::new(q.clone()).unwrap(), &cost).unwrap();
            let oracle = brute_force::transport_min(&p, &q, |i, j| cost.get(i, j));
            prop_assert!((sol.value - oracle).abs() < 1e-9, "{} vs {}", sol.value, oracle);
        }

        #[test]
        fn sinkhorn_monotone_in_epsilon((p, q, cost) in (2usize..5).prop_flat_map(|k| (arb_dist(k), arb_dist(k), arb_line_metric(k)))) {
            let p = FiniteDist::new(p).unwrap();
            let q = FiniteDist::new(q).unwrap();
            let exact = w1_exact(&p, &q, &cost).unwrap().value;
            let mut prev = f64::INFINITY;
            for eps in [1.0, 0.3, 0.1, 0.03, 0.01] {
                let v = w1_sinkhorn(&p, &q, &cost, eps, 200_000).unwrap();
                prop_assert!(v <= prev + 1e-5, "eps {eps}: {v} > {prev}");
                prop_assert!(v >= exact - 1e-5);
                prev = v;
            }
            prop_assert!(prev - exact <= 0.01 * 2f64.ln() * 2.0 + 1e-5);
        }
    }
}
