//! Squared maximum mean discrepancy with an RBF kernel, and greedy subset selection that
//! maximizes the MMD reduction of each added sample using cached kernel sums.

use crate::matrix::{self, Matrix};
use crate::{Error, Result};

/// `k(x, y) = exp(-|x - y|^2 / (2 sigma^2))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RbfKernel {
    pub sigma: f64,
}

impl RbfKernel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::config(format!("kernel width {sigma} must be positive")));
        }
        Ok(Self { sigma })
    }

    /// Width from the median pairwise distance (1.0 if that is zero or undefined).
    pub fn median_heuristic(points: &Matrix) -> Self {
        Self {
            sigma: crate::detectors::median_heuristic(points),
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        (-matrix::sq_dist(x, y) / (2.0 * self.sigma * self.sigma)).exp()
    }

    fn sum_over(&self, set: &Matrix, y: &[f64]) -> f64 {
        set.iter_rows().map(|x| self.eval(x, y)).sum()
    }
}

/// Biased (V-statistic) estimate of MMD² between two sets.
pub fn mmd2(x: &Matrix, y: &Matrix, kernel: &RbfKernel) -> Result<f64> {
    let (m, n) = (x.rows(), y.rows());
    if m == 0 || n == 0 {
        return Err(Error::config("MMD needs two non-empty sets"));
    }
    if x.cols() != y.cols() {
        return Err(Error::shape("MMD operands differ in dimension"));
    }
    let xx: f64 = x.iter_rows().map(|a| kernel.sum_over(x, a)).sum();
    let yy: f64 = y.iter_rows().map(|a| kernel.sum_over(y, a)).sum();
    let xy: f64 = x.iter_rows().map(|a| kernel.sum_over(y, a)).sum();
    let (m, n) = (m as f64, n as f64);
    Ok(xx / (m * m) + yy / (n * n) - 2.0 * xy / (m * n))
}

/// Reference set `D`, selected subset `Q ⊆ D` and the kernel sums that make
/// [`MmdState::expressiveness`] constant-time.
#[derive(Debug, Clone)]
pub struct MmdState {
    reference: Matrix,
    kernel: RbfKernel,
    /// `sum_{x in D} k(x, d_u)` for every `u`.
    d_row_sum: Vec<f64>,
    /// `sum_{y in Q} k(y, d_u)` for every `u`.
    q_row_sum: Vec<f64>,
    d_internal: f64,
    q_internal: f64,
    /// `sum_{y in Q} d_row_sum[y]`.
    cross: f64,
    selected: Vec<usize>,
    in_q: Vec<bool>,
}

impl MmdState {
    pub fn new(reference: Matrix, kernel: RbfKernel) -> Result<Self> {
        let n = reference.rows();
        if n == 0 {
            return Err(Error::config("reference set is empty"));
        }
        use rayon::prelude::*;
        let d_row_sum: Vec<f64> = (0..n).into_par_iter().map(|u| kernel.sum_over(&reference, reference.row(u))).collect();
        let d_internal = d_row_sum.iter().sum();
        Ok(Self {
            reference,
            kernel,
            d_row_sum,
            q_row_sum: vec![0.0; n],
            d_internal,
            q_internal: 0.0,
            cross: 0.0,
            selected: Vec::new(),
            in_q: vec![false; n],
        })
    }

    pub fn kernel(&self) -> RbfKernel {
        self.kernel
    }

    pub fn reference(&self) -> &Matrix {
        &self.reference
    }

    pub fn len(&self) -> usize {
        self.reference.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.reference.rows() == 0
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn contains(&self, u: usize) -> bool {
        self.in_q[u]
    }

    fn mmd_with(&self, q_internal: f64, cross: f64, q: usize) -> f64 {
        let n = self.reference.rows() as f64;
        if q == 0 {
            // continuous extension: the Q terms vanish
            return self.d_internal / (n * n);
        }
        let q = q as f64;
        self.d_internal / (n * n) + q_internal / (q * q) - 2.0 * cross / (n * q)
    }

    /// `MMD²(D, Q)`; for an empty `Q` this is the `D`-internal term alone.
    pub fn mmd2(&self) -> f64 {
        self.mmd_with(self.q_internal, self.cross, self.selected.len())
    }

    /// `MMD²(D, Q) - MMD²(D, Q ∪ {d_u})` from the caches. With an empty `Q` this ranks
    /// candidates by `-MMD²(D, {d_u})`.
    pub fn expressiveness(&self, u: usize) -> f64 {
        let k_uu = 1.0;
        let q_internal = self.q_internal + 2.0 * self.q_row_sum[u] + k_uu;
        let cross = self.cross + self.d_row_sum[u];
        self.mmd2() - self.mmd_with(q_internal, cross, self.selected.len() + 1)
    }

    /// Adds `d_u` to `Q` and refreshes the caches in `O(|D|)` kernel evaluations.
    pub fn add(&mut self, u: usize) -> Result<()> {
        if u >= self.reference.rows() {
            return Err(Error::config(format!("candidate {u} outside reference set")));
        }
        if self.in_q[u] {
            return Err(Error::config(format!("candidate {u} already selected")));
        }
        #[cfg(debug_assertions)]
        {
            let direct: f64 = self
                .selected
                .iter()
                .map(|&y| self.kernel.eval(self.reference.row(y), self.reference.row(u)))
                .sum();
            debug_assert!(
                (direct - self.q_row_sum[u]).abs() <= 1e-9 * (1.0 + direct.abs()),
                "stale q_row_sum cache for {u}"
            );
        }
        self.q_internal += 2.0 * self.q_row_sum[u] + 1.0;
        self.cross += self.d_row_sum[u];
        let xu = self.reference.row(u).to_vec();
        for (v, s) in self.q_row_sum.iter_mut().enumerate() {
            *s += self.kernel.eval(self.reference.row(v), &xu);
        }
        self.in_q[u] = true;
        self.selected.push(u);
        Ok(())
    }

    /// Recomputes every cache from scratch and compares.
    pub fn audit(&self) -> Result<()> {
        let tol = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
        for v in 0..self.reference.rows() {
            let direct: f64 = self
                .selected
                .iter()
                .map(|&y| self.kernel.eval(self.reference.row(y), self.reference.row(v)))
                .sum();
            if !tol(direct, self.q_row_sum[v]) {
                return Err(Error::config(format!("stale selected-set kernel sum at {v}")));
            }
        }
        let q_int: f64 = self.selected.iter().map(|&y| self.q_row_sum[y]).sum();
        let cross: f64 = self.selected.iter().map(|&y| self.d_row_sum[y]).sum();
        if !tol(q_int, self.q_internal) || !tol(cross, self.cross) {
            return Err(Error::config("stale selected-set totals"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GreedyMode {
    /// Re-score after every pick.
    Sequential,
    /// Score once per round and take the top entries.
    Batch,
}

/// Picks up to `eta` unselected members from every cluster, highest expressiveness
/// first, adding each pick to `state`. Returns `(cluster, sample)` pairs in pick order;
/// an empty result means every cluster is exhausted.
pub fn select_round(clusters: &[Vec<usize>], state: &mut MmdState, eta: usize, mode: GreedyMode) -> Result<Vec<(usize, usize)>> {
    if eta == 0 {
        return Err(Error::config("selection step must be at least 1"));
    }
    let mut picked = Vec::new();
    for (c, members) in clusters.iter().enumerate() {
        match mode {
            GreedyMode::Sequential => {
                for _ in 0..eta {
                    let best = members
                        .iter()
                        .copied()
                        .filter(|&u| !state.contains(u))
                        .map(|u| (u, state.expressiveness(u)))
                        .fold(None, |best: Option<(usize, f64)>, (u, e)| match best {
                            Some((bu, be)) if be > e || (be == e && bu < u) => best,
                            _ => Some((u, e)),
                        });
                    let Some((u, _)) = best else { break };
                    state.add(u)?;
                    picked.push((c, u));
                }
            }
            GreedyMode::Batch => {
                let mut scored: Vec<(usize, f64)> = members
                    .iter()
                    .copied()
                    .filter(|&u| !state.contains(u))
                    .map(|u| (u, state.expressiveness(u)))
                    .collect();
                scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                for &(u, _) in scored.iter().take(eta) {
                    state.add(u)?;
                    picked.push((c, u));
                }
            }
        }
    }
    Ok(picked)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops when the last two MMD values differ by at most `epsilon` or `round > max_rounds`.
pub fn stopping_check(history: &[f64], epsilon: f64, round: usize, max_rounds: usize) -> StopDecision {
    if round > max_rounds {
        return StopDecision::Stop;
    }
    match history {
        [.., prev, last] if (last - prev).abs() <= epsilon => StopDecision::Stop,
        _ => StopDecision::Continue,
    }
}
