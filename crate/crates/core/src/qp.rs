//! Projected gradient descent for `min x^T Q x - 2 b^T x` over the capped
//! simplex `{x in [0,1]^n : sum x = N}`.
//!
//! `Q` may be indefinite (the zero-diagonal Gram matrix); in that case the
//! solver returns a feasible stationary point rather than a global minimum.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::derive_seed;
use crate::selection::{GramMatrix, SelectionWeights};

/// Feasibility tolerance of the projection's sum constraint.
pub const PROJECTION_TOL: f64 = 1e-10;

const BISECTION_MAX_ITERS: usize = 200;
const LIPSCHITZ_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Relative objective decrease below which an iteration counts as stalled.
    pub tolerance: f64,
    pub power_iter_steps: usize,
    /// Consecutive stalled iterations required to stop.
    pub stall_iters: usize,
    /// Stop only once `||x - P(x - grad f(x))|| <= stationarity_tol * (1 + |f|)`.
    pub stationarity_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iters: 5000,
            tolerance: 1e-9,
            power_iter_steps: 50,
            stall_iters: 3,
            stationarity_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct QpProblem<'a> {
    pub q: &'a GramMatrix,
    /// Linear coefficient; the objective is `x^T Q x - 2 b^T x`.
    pub b: Vec<f64>,
    pub budget: usize,
}

impl<'a> QpProblem<'a> {
    /// The uncoordinated problem, `b = 0`.
    pub fn quadratic(q: &'a GramMatrix, budget: usize) -> Self {
        QpProblem { q, b: vec![0.0; q.size()], budget }
    }

    fn validate(&self) -> Result<()> {
        let n = self.q.size();
        if self.b.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: self.b.len() });
        }
        if self.budget == 0 || self.budget > n {
            return Err(Error::Infeasible { budget: self.budget, available: n });
        }
        if self.q.matrix().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Q"));
        }
        if self.b.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("b"));
        }
        Ok(())
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.evaluate(x).0
    }

    pub fn gradient(&self, x: &[f64]) -> Array1<f64> {
        let (_, qx) = self.evaluate(x);
        self.gradient_from(qx)
    }

    /// Objective at `x` together with `Q x`.
    fn evaluate(&self, x: &[f64]) -> (f64, Array1<f64>) {
        let xv = ArrayView1::from(x);
        let qx = self.q.mul_vec(xv);
        let f = xv.dot(&qx) - 2.0 * xv.dot(&ArrayView1::from(self.b.as_slice()));
        (f, qx)
    }

    fn gradient_from(&self, mut qx: Array1<f64>) -> Array1<f64> {
        qx.zip_mut_with(&ArrayView1::from(self.b.as_slice()), |gi, &bi| *gi = 2.0 * (*gi - bi));
        qx
    }
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: SelectionWeights,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Euclidean projection of `y` onto `{x in [0,1]^n : sum x = budget}`.
///
/// Bisects on the shift `tau` in `x_i = clamp(y_i - tau, 0, 1)` over the
/// bracket `[min(y) - 1, max(y)]` (with Newton steps where they land inside
/// the bracket), then applies one exact correction of `tau` on the
/// coordinates strictly inside `(0, 1)`.
pub fn project_capped_simplex(y: &[f64], budget: usize) -> Result<Vec<f64>> {
    let n = y.len();
    if budget > n {
        return Err(Error::Infeasible { budget, available: n });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("projection input"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let target = budget as f64;
    if budget == n {
        return Ok(vec![1.0; n]);
    }
    if budget == 0 {
        return Ok(vec![0.0; n]);
    }

    // sum of clamp(y - tau) and the number of coordinates strictly inside (0, 1)
    let shifted_sum = |tau: f64| -> (f64, usize) {
        y.iter().fold((0.0, 0), |(s, free), &v| {
            let c = (v - tau).clamp(0.0, 1.0);
            (s + c, free + usize::from(c > 0.0 && c < 1.0))
        })
    };
    let (min_y, max_y) = y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    // s(lo) = n >= N and s(hi) = 0 <= N; s is non-increasing in tau
    let mut lo = min_y - 1.0;
    let mut hi = max_y;
    let mut tau = 0.5 * (lo + hi);
    for _ in 0..BISECTION_MAX_ITERS {
        let (s, free) = shifted_sum(tau);
        if (s - target).abs() <= PROJECTION_TOL {
            break;
        }
        if s > target {
            lo = tau;
        } else {
            hi = tau;
        }
        // s is piecewise linear with slope -free; take the Newton step when it stays inside the bracket
        let newton = if free > 0 { tau + (s - target) / free as f64 } else { f64::NAN };
        tau = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }

    let mut x: Vec<f64> = y.iter().map(|&v| (v - tau).clamp(0.0, 1.0)).collect();
    let free: Vec<usize> = (0..n).filter(|&i| x[i] > 0.0 && x[i] < 1.0).collect();
    if !free.is_empty() {
        let excess = x.iter().sum::<f64>() - target;
        let corrected = tau + excess / free.len() as f64;
        if free.iter().all(|&i| {
            let v = y[i] - corrected;
            (0.0..=1.0).contains(&v)
        }) {
            for &i in &free {
                x[i] = y[i] - corrected;
            }
        }
    }
    Ok(x)
}

/// Estimates the spectral norm of `Q` by power iteration.
///
/// The start vector is built from row statistics of `Q`, so relabeling the
/// coordinates relabels it the same way.
pub fn spectral_norm(q: &GramMatrix, steps: usize) -> f64 {
    let m = q.matrix();
    let n = q.size();
    if n == 0 {
        return 0.0;
    }
    let mut v: Array1<f64> = m
        .rows()
        .into_iter()
        .map(|row| {
            let sum: f64 = row.sum();
            let sq: f64 = row.dot(&row);
            1.0 + sq + 0.5 * sum + 0.25 * sum * sum
        })
        .collect();
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        // fall back to a fixed pseudo-random start
        v = (0..n).map(|i| 0.5 + (derive_seed(i as u64, 17) % 1000) as f64 / 1000.0).collect();
    }
    let norm = v.dot(&v).sqrt();
    v /= norm;

    let mut estimate = 0.0;
    for _ in 0..steps.max(1) {
        let w = q.mul_vec(v.view());
        let wn = w.dot(&w).sqrt();
        estimate = wn;
        if wn == 0.0 || !wn.is_finite() {
            break;
        }
        v = w / wn;
    }
    estimate
}

/// `||x - P(x - grad f(x))||`, zero exactly at stationary points.
pub fn projected_gradient_norm(p: &QpProblem<'_>, x: &[f64]) -> Result<f64> {
    let g = p.gradient(x);
    let y: Vec<f64> = x.iter().zip(g.iter()).map(|(xi, gi)| xi - gi).collect();
    let px = project_capped_simplex(&y, p.budget)?;
    Ok(x.iter().zip(&px).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// Solves from the uniform start `(N/n) 1`.
pub fn solve(p: &QpProblem<'_>, opts: &SolverOptions) -> Result<QpSolution> {
    solve_from(p, opts, None)
}

/// Solves from `start` (projected onto the feasible set) or from the uniform point.
///
/// The returned point is the best iterate seen, so a warm start can never make
/// the objective worse than at `start`.
pub fn solve_from(p: &QpProblem<'_>, opts: &SolverOptions, start: Option<&[f64]>) -> Result<QpSolution> {
    p.validate()?;
    let n = p.q.size();
    let mut x = match start {
        Some(s) => {
            if s.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: s.len() });
            }
            project_capped_simplex(s, p.budget)?
        }
        None => SelectionWeights::uniform(n, p.budget)?.values().to_vec(),
    };

    let mut lipschitz = (2.0 * spectral_norm(p.q, opts.power_iter_steps)).max(LIPSCHITZ_FLOOR);
    let (mut f, qx) = p.evaluate(&x);
    let mut grad = p.gradient_from(qx);
    let mut stalled = 0usize;
    let mut converged = false;
    let mut iterations = 0usize;

    while iterations < opts.max_iters {
        let step = 1.0 / lipschitz;
        let y: Vec<f64> = x.iter().zip(grad.iter()).map(|(xi, gi)| xi - step * gi).collect();
        let xn = project_capped_simplex(&y, p.budget)?;
        let (fn_, qxn) = p.evaluate(&xn);
        iterations += 1;

        if fn_ > f + 1e-12 * (1.0 + f.abs()) {
            // step too long for the true curvature; the power-iteration
            // estimate undershot the spectral norm
            lipschitz *= 2.0;
            continue;
        }

        let decrease = f - fn_;
        let rel = decrease / f.abs().max(1e-12);
        x = xn;
        f = fn_;
        grad = p.gradient_from(qxn);

        if rel < opts.tolerance {
            stalled += 1;
        } else {
            stalled = 0;
        }
        if stalled >= opts.stall_iters {
            let pg = natural_residual(&x, &grad, p.budget)?;
            if pg <= opts.stationarity_tol * (1.0 + f.abs()) {
                converged = true;
                break;
            }
        }
    }

    let mut values = x;
    // clamp rounding noise so the weights pass their own validation
    for v in &mut values {
        *v = v.clamp(0.0, 1.0);
    }
    let objective = p.objective(&values);
    Ok(QpSolution { x: SelectionWeights::new(values, p.budget)?, objective, iterations, converged })
}

fn natural_residual(x: &[f64], grad: &Array1<f64>, budget: usize) -> Result<f64> {
    let y: Vec<f64> = x.iter().zip(grad.iter()).map(|(xi, gi)| xi - gi).collect();
    let px = project_capped_simplex(&y, budget)?;
    Ok(x.iter().zip(&px).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array2};

    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn projection_of_feasible_point_is_identity() {
        let x = project_capped_simplex(&[0.5, 0.5, 0.0], 1).unwrap();
        assert!(close(&x, &[0.5, 0.5, 0.0], 1e-10));
    }

    #[test]
    fn projection_with_full_budget_is_all_ones() {
        let x = project_capped_simplex(&[3.0, -7.0, 0.2, 0.0], 4).unwrap();
        assert_eq!(x, vec![1.0; 4]);
    }

    #[test]
    fn projection_rejects_excess_budget() {
        assert!(matches!(project_capped_simplex(&[0.0, 1.0], 3), Err(Error::Infeasible { .. })));
    }

    /// Grid oracle: minimize ||x - y||^2 over the feasible triangle for n = 3, N = 1.
    #[test]
    fn projection_matches_grid_oracle() {
        let y = [2.0, -1.0, 0.5];
        let steps = 400;
        let mut best = (f64::INFINITY, [0.0; 3]);
        for a in 0..=steps {
            for b in 0..=(steps - a) {
                let x1 = a as f64 / steps as f64;
                let x2 = b as f64 / steps as f64;
                let x3 = 1.0 - x1 - x2;
                let d = (x1 - y[0]).powi(2) + (x2 - y[1]).powi(2) + (x3 - y[2]).powi(2);
                if d < best.0 {
                    best = (d, [x1, x2, x3]);
                }
            }
        }
        assert!(close(&best.1, &[1.0, 0.0, 0.0], 1e-12));
        let x = project_capped_simplex(&y, 1).unwrap();
        assert!(close(&x, &best.1, 1e-10));
        // KKT: tau in [0.5, 1] gives this point; the returned point is consistent with it
        let tau = 0.5;
        let from_tau: Vec<f64> = y.iter().map(|v| (v - tau).clamp(0.0, 1.0)).collect();
        assert!(close(&x, &from_tau, 1e-12));
    }

    #[test]
    fn identity_quadratic_is_minimized_at_uniform_point() {
        let q = GramMatrix::from_matrix(Array2::eye(4)).unwrap();
        let sol = solve(&QpProblem::quadratic(&q, 2), &SolverOptions::default()).unwrap();
        assert!(close(sol.x.values(), &[0.5; 4], 1e-9));
        assert!((sol.objective - 1.0).abs() < 1e-9);
        assert!(sol.converged);
    }

    #[test]
    fn pure_linear_objective() {
        let q = GramMatrix::from_matrix(Array2::zeros((3, 3))).unwrap();
        let p = QpProblem { q: &q, b: vec![1.0, 0.0, 0.0], budget: 1 };
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert!(close(sol.x.values(), &[1.0, 0.0, 0.0], 1e-9));
        assert!((sol.objective + 2.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_finite_linear_term() {
        let q = GramMatrix::from_matrix(Array2::eye(2)).unwrap();
        let p = QpProblem { q: &q, b: vec![f64::NAN, 0.0], budget: 1 };
        assert!(matches!(solve(&p, &SolverOptions::default()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn spectral_norm_of_small_matrices() {
        let q = GramMatrix::from_matrix(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert!((spectral_norm(&q, 50) - 1.0).abs() < 1e-9);
        let q = GramMatrix::from_matrix(array![[2.0, 0.0], [0.0, -3.0]]).unwrap();
        assert!((spectral_norm(&q, 200) - 3.0).abs() < 1e-6);
    }

    #[test]
    fn duplicate_pair_nonconvex_fixed_point() {
        // zero-diagonal Gram of {(1,0),(1,0),(0,1)}
        let q = GramMatrix::from_matrix(array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]).unwrap();
        let sol = solve(&QpProblem::quadratic(&q, 2), &SolverOptions::default()).unwrap();
        assert!(close(sol.x.values(), &[0.5, 0.5, 1.0], 1e-9));
        assert!((sol.objective - 0.5).abs() < 1e-9);
    }
}
