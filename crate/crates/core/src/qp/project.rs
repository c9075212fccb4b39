use serde::{Deserialize, Serialize};

use super::assemble::dot;
use super::QpError;
use crate::features::FeatureRanking;

/// Feasible region for the flattened weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
    /// Weight indices from best rank to worst; weights must be
    /// nonincreasing along this chain.
    ordering: Option<Vec<usize>>,
    /// `c = mean_P(phi) - mean_N(phi)`; feasible weights satisfy `c . w >= 0`.
    mean_direction: Vec<f64>,
}

impl ConstraintSet {
    /// Bounds `[0, 1]`, no ordering.
    pub fn new(mean_direction: Vec<f64>) -> ConstraintSet {
        let dim = mean_direction.len();
        ConstraintSet {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
            ordering: None,
            mean_direction,
        }
    }

    /// Only the bounded simplex (zero mean direction).
    pub fn simplex(dim: usize) -> ConstraintSet {
        ConstraintSet::new(vec![0.0; dim])
    }

    pub fn with_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Result<ConstraintSet, QpError> {
        for v in [&lower, &upper] {
            if v.len() != self.dim() {
                return Err(QpError::Dimension {
                    expected: self.dim(),
                    got: v.len(),
                });
            }
        }
        self.lower = lower;
        self.upper = upper;
        Ok(self)
    }

    pub fn with_uniform_bounds(self, lower: f64, upper: f64) -> ConstraintSet {
        let dim = self.dim();
        self.with_bounds(vec![lower; dim], vec![upper; dim])
            .expect("dimensions match by construction")
    }

    /// Require `w[k] >= w[l]` whenever `rank(k) <= rank(l)`.
    pub fn with_ordering(mut self, ranking: &FeatureRanking) -> Result<ConstraintSet, QpError> {
        if ranking.len() != self.dim() {
            return Err(QpError::Dimension {
                expected: self.dim(),
                got: ranking.len(),
            });
        }
        self.ordering = Some(ranking.order());
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.mean_direction.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn ordering(&self) -> Option<&[usize]> {
        self.ordering.as_deref()
    }

    pub fn mean_direction(&self) -> &[f64] {
        &self.mean_direction
    }

    pub fn residuals(&self, w: &[f64]) -> ConstraintResiduals {
        let simplex = (w.iter().sum::<f64>() - 1.0).abs();
        let bounds = w
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (lo, hi))| (lo - v).max(v - hi).max(0.0))
            .fold(0.0, f64::max);
        let ordering = self
            .ordering
            .as_ref()
            .map(|o| {
                o.windows(2)
                    .map(|p| (w[p[1]] - w[p[0]]).max(0.0))
                    .fold(0.0, f64::max)
            })
            .unwrap_or(0.0);
        let mean = (-dot(&self.mean_direction, w)).max(0.0);
        ConstraintResiduals {
            simplex,
            bounds,
            ordering,
            mean,
        }
    }
}

/// Constraint violations of a weight vector; all zero when feasible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintResiduals {
    /// `|sum w - 1|`
    pub simplex: f64,
    pub bounds: f64,
    pub ordering: f64,
    /// `max(0, -c . w)`
    pub mean: f64,
}

impl ConstraintResiduals {
    pub fn max(&self) -> f64 {
        self.simplex
            .max(self.bounds)
            .max(self.ordering)
            .max(self.mean)
    }
}

// Tightest bounds implied by the chain: a weight can be no larger than any
// better-ranked upper bound and no smaller than any worse-ranked lower bound.
fn chain_bounds(cs: &ConstraintSet, order: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut lo = cs.lower.clone();
    let mut hi = cs.upper.clone();
    let mut running = f64::INFINITY;
    for &k in order {
        running = running.min(cs.upper[k]);
        hi[k] = running;
    }
    let mut running = f64::NEG_INFINITY;
    for &k in order.iter().rev() {
        running = running.max(cs.lower[k]);
        lo[k] = running;
    }
    (lo, hi)
}

/// Validate bounds, the simplex budget and the chain against the bounds.
pub fn check_feasibility(cs: &ConstraintSet) -> Result<(), QpError> {
    let infeasible = |msg: String| Err(QpError::InfeasibleConstraints(msg));
    let dim = cs.dim();
    if dim == 0 {
        return infeasible("no weights".into());
    }
    for k in 0..dim {
        let (lo, hi) = (cs.lower[k], cs.upper[k]);
        if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi > 1.0 {
            return infeasible(format!("bounds of weight {k} must lie in [0, 1] (got [{lo}, {hi}])"));
        }
        if lo > hi {
            return infeasible(format!("r_min({k}) = {lo} exceeds r_max({k}) = {hi}"));
        }
    }
    let sum_lo: f64 = cs.lower.iter().sum();
    let sum_hi: f64 = cs.upper.iter().sum();
    if sum_lo > 1.0 + 1e-12 {
        return infeasible(format!("sum of r_min is {sum_lo} > 1"));
    }
    if sum_hi < 1.0 - 1e-12 {
        return infeasible(format!("sum of r_max is {sum_hi} < 1"));
    }

    let (lo, hi) = match &cs.ordering {
        Some(order) => {
            let (lo, hi) = chain_bounds(cs, order);
            for k in 0..dim {
                if lo[k] > hi[k] {
                    return infeasible(format!(
                        "rank ordering forces weight {k} into [{}, {}], which is empty",
                        lo[k], hi[k]
                    ));
                }
            }
            let sum_lo: f64 = lo.iter().sum();
            let sum_hi: f64 = hi.iter().sum();
            if sum_lo > 1.0 + 1e-12 || sum_hi < 1.0 - 1e-12 {
                return infeasible(format!(
                    "rank ordering with bounds admits weight sums only in [{sum_lo}, {sum_hi}]"
                ));
            }
            (lo, hi)
        }
        None => (cs.lower.clone(), cs.upper.clone()),
    };

    // Without ordering the best attainable c . w is a greedy fill; with
    // ordering this is only a necessary condition and the projection
    // reports anything it misses.
    let c = &cs.mean_direction;
    let mut idx: Vec<usize> = (0..dim).collect();
    idx.sort_by(|&a, &b| c[b].total_cmp(&c[a]));
    let mut w = lo.clone();
    let mut budget = 1.0 - lo.iter().sum::<f64>();
    for &k in &idx {
        let add = (hi[k] - lo[k]).min(budget.max(0.0));
        w[k] += add;
        budget -= add;
    }
    let best = dot(c, &w);
    if best < -1e-12 {
        return infeasible(format!(
            "mean constraint cannot hold: max over the bounded simplex of (mean_P - mean_N) . w is {best}"
        ));
    }
    Ok(())
}

/// Euclidean projection onto `{ lo <= w <= hi, sum w = 1 }`, computed from
/// the sorted breakpoints of the clipped shift `w_i = clip(v_i - tau)`.
/// Assumes `sum lo <= 1 <= sum hi`.
pub fn project_bounded_simplex(v: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let n = v.len();
    // (tau, slope change): at v - hi a coordinate starts moving, at v - lo
    // it stops.
    let mut events: Vec<(f64, f64)> = Vec::with_capacity(2 * n);
    for i in 0..n {
        events.push((v[i] - hi[i], -1.0));
        events.push((v[i] - lo[i], 1.0));
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let target = 1.0;
    let mut tau = events[0].0;
    let mut s: f64 = hi.iter().sum();
    let mut slope = 0.0;
    let mut found = None;
    if s <= target {
        found = Some(tau);
    } else {
        for &(t, ds) in &events {
            let s_at = s + slope * (t - tau);
            if s_at <= target {
                found = Some(if slope == 0.0 {
                    tau
                } else {
                    tau + (target - s) / slope
                });
                break;
            }
            tau = t;
            s = s_at;
            slope += ds;
        }
    }
    let tau = found.unwrap_or(tau);
    let mut w: Vec<f64> = (0..n).map(|i| (v[i] - tau).clamp(lo[i], hi[i])).collect();

    // Spread the rounding error over free coordinates.
    let err = w.iter().sum::<f64>() - target;
    if err != 0.0 {
        let free: Vec<usize> = (0..n)
            .filter(|&i| w[i] - err > lo[i] && w[i] - err < hi[i])
            .collect();
        if let Some(&i) = free.first() {
            w[i] -= err;
        }
    }
    w
}

/// Least-squares nonincreasing fit of `y` (pool adjacent violators).
pub fn pava_nonincreasing(y: &[f64]) -> Vec<f64> {
    // blocks of (sum, count)
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (s1, c1) = blocks[blocks.len() - 1];
            let (s0, c0) = blocks[blocks.len() - 2];
            if s0 / c0 as f64 >= s1 / c1 as f64 {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().expect("at least one block");
            *last = (s0 + s1, c0 + c1);
        }
    }
    let mut out = Vec::with_capacity(y.len());
    for (s, c) in blocks {
        out.extend(std::iter::repeat_n(s / c as f64, c));
    }
    out
}

fn project_chain(v: &[f64], order: &[usize]) -> Vec<f64> {
    let y: Vec<f64> = order.iter().map(|&k| v[k]).collect();
    let fit = pava_nonincreasing(&y);
    let mut w = v.to_vec();
    for (&k, f) in order.iter().zip(fit) {
        w[k] = f;
    }
    w
}

/// Projection onto `{ w : c . w >= 0 }`.
pub fn project_halfspace(v: &[f64], c: &[f64]) -> Vec<f64> {
    let cv = dot(c, v);
    let cc = dot(c, c);
    if cv >= 0.0 || cc == 0.0 {
        return v.to_vec();
    }
    let t = cv / cc;
    v.iter().zip(c).map(|(vi, ci)| vi - t * ci).collect()
}

const MAX_SWEEPS: usize = 100_000;

/// Projection onto the feasible region by Dykstra's alternating projections
/// over (a) the bounded simplex, (b) the ordering chain, (c) the mean
/// half-space, swept in that order. Stops once the iterate violates no
/// constraint by more than `tol` and a full sweep moves it by at most `tol`.
pub fn project(w: &[f64], cs: &ConstraintSet, tol: f64) -> Result<Vec<f64>, QpError> {
    if w.len() != cs.dim() {
        return Err(QpError::Dimension {
            expected: cs.dim(),
            got: w.len(),
        });
    }
    let sum_lo: f64 = cs.lower.iter().sum();
    let sum_hi: f64 = cs.upper.iter().sum();
    if sum_lo > 1.0 + 1e-12 || sum_hi < 1.0 - 1e-12 {
        return Err(QpError::InfeasibleConstraints(format!(
            "bounds admit weight sums only in [{sum_lo}, {sum_hi}]"
        )));
    }

    let c = &cs.mean_direction;
    let has_halfspace = c.iter().any(|&v| v != 0.0);
    let a = project_bounded_simplex(w, &cs.lower, &cs.upper);
    if cs.ordering.is_none() && (!has_halfspace || dot(c, &a) >= 0.0) {
        return Ok(a);
    }

    let n = w.len();
    let mut x = w.to_vec();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut last_residual = f64::INFINITY;
    for _ in 0..MAX_SWEEPS {
        let prev = x.clone();

        let xa: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + b).collect();
        let y = project_bounded_simplex(&xa, &cs.lower, &cs.upper);
        for i in 0..n {
            p[i] = xa[i] - y[i];
        }

        let z = match &cs.ordering {
            Some(order) => {
                let yb: Vec<f64> = y.iter().zip(&q).map(|(a, b)| a + b).collect();
                let z = project_chain(&yb, order);
                for i in 0..n {
                    q[i] = yb[i] - z[i];
                }
                z
            }
            None => y,
        };

        x = if has_halfspace {
            let zc: Vec<f64> = z.iter().zip(&r).map(|(a, b)| a + b).collect();
            let x = project_halfspace(&zc, c);
            for i in 0..n {
                r[i] = zc[i] - x[i];
            }
            x
        } else {
            z
        };

        let residual = cs.residuals(&x).max();
        let moved = x
            .iter()
            .zip(&prev)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        last_residual = residual;
        if residual <= tol && moved <= tol {
            return Ok(x);
        }
    }
    Err(QpError::InfeasibleConstraints(format!(
        "alternating projections stalled with constraint residual {last_residual:e}"
    )))
}
