//! Empirical-likelihood weights for the multiply robust estimator.
//!
//! For a treatment level `d_q`, each unit's constraint vector stacks its
//! centered propensity scores and centered outcome predictions,
//!
//! ```text
//! g_i = ( pi^1(d_q|x_i) - theta^1, ..., a^1(x_i, d_q) - eta^1, ... )
//! ```
//!
//! where every `theta^j` / `eta^k` is a mean over ALL n units. Weights
//! for the units with `D_i = d_q` come from minimizing the convex
//! barrier objective
//!
//! ```text
//! F(rho) = -(1/n) * sum_{i in M_q} log(1 + rho' g_i)
//! ```
//!
//! over the open domain where every `1 + rho' g_i > 0` (damped Newton
//! with a backtracking line search). At the minimizer the weighted
//! constraint sum vanishes, and the weights are the normalized
//! reciprocals `w_i ∝ 1 / (1 + rho' g_i)`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{treatment_group, Dataset, TreatmentGroup};
use crate::error::{Error, Result};
use crate::glm::{predict_or, OutcomeFit};
use crate::gps::{gps_pmf_flagged, GpsModel};

/// Newton stops once the barrier gradient infinity-norm is below this.
pub const GRAD_TOL: f64 = 1e-9;
/// ... and the unscaled constraint residual is below this.
pub const RESIDUAL_TOL: f64 = 1e-6;
/// Squared Newton decrements below this cannot improve the iterate.
pub const DECREMENT_TOL: f64 = 1e-12;
/// A converged solution whose smallest slack `1 + rho'g_i` is below
/// this sits on the domain boundary and is reported as degenerate.
pub const DEGENERATE_SLACK: f64 = 1e-8;
const MAX_NEWTON_ITER: usize = 100;
const ARMIJO: f64 = 1e-4;
/// The line search keeps every slack at or above this margin.
const BOUNDARY_MARGIN: f64 = 1e-10;
const MAX_BACKTRACKS: usize = 60;
/// Ridge added to the Hessian when its Cholesky factorization fails.
const HESSIAN_RIDGE: f64 = 1e-12;
/// Multiplier norms beyond this indicate a minimizer escaping to
/// infinity (zero outside the hull of the member constraints).
const RHO_LIMIT: f64 = 1e8;

/// Centered constraint matrix for one treatment level.
#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    pub level: usize,
    /// `n x (J + K)` matrix of centered constraints, one row per unit
    /// (non-members included; only member rows enter the objective).
    pub g: DMatrix<f64>,
    /// Full-sample means of the propensity columns.
    pub theta: Vec<f64>,
    /// Full-sample means of the outcome-prediction columns.
    pub eta: Vec<f64>,
    pub group: TreatmentGroup,
    /// GPS floor events observed while assembling the matrix.
    pub clamp_events: usize,
}

/// How a weight solve ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverStatus {
    Converged,
    MaxIter,
    Degenerate,
}

/// Result of one empirical-likelihood weight solve.
#[derive(Debug, Clone)]
pub struct MrSolution {
    /// Constraint multipliers at the final iterate.
    pub rho: DVector<f64>,
    /// Normalized weights over the member units, in member order;
    /// empty unless `status == Converged`.
    pub weights: Vec<f64>,
    /// Barrier objective at the final iterate.
    pub objective: f64,
    /// Infinity-norm of the barrier gradient at the final iterate.
    pub grad_norm: f64,
    /// Smallest member slack `1 + rho'g_i` at the final iterate.
    pub min_slack: f64,
    /// Accepted Newton steps.
    pub iterations: usize,
    pub status: SolverStatus,
}

/// Assembles the centered constraint system for `level` from fitted
/// propensity and outcome models. At least one model is required, and
/// every propensity model must cover the dataset's levels.
pub fn build_constraints(
    ds: &Dataset,
    ps_models: &[GpsModel],
    or_fits: &[OutcomeFit],
    level: usize,
) -> Result<ConstraintSystem> {
    let cols = ps_models.len() + or_fits.len();
    if cols == 0 {
        return Err(Error::EmptyInput("constraint system needs at least one model".into()));
    }
    let group = treatment_group(ds, level)?;
    for m in ps_models {
        if m.levels() != ds.q_levels() {
            return Err(Error::InvalidSpec(format!(
                "propensity model covers {} levels but the data have {}",
                m.levels(),
                ds.q_levels()
            )));
        }
    }

    let n = ds.n();
    let mut raw = DMatrix::zeros(n, cols);
    let mut clamp_events = 0;
    for (c, model) in ps_models.iter().enumerate() {
        for i in 0..n {
            let (pmf, clamped) = gps_pmf_flagged(model, ds.covariate_row(i), level)?;
            if clamped {
                clamp_events += 1;
            }
            raw[(i, c)] = pmf;
        }
    }
    for (c, fit) in or_fits.iter().enumerate() {
        let col = ps_models.len() + c;
        for i in 0..n {
            raw[(i, col)] = predict_or(fit, ds.covariate_row(i), level)?;
        }
    }

    let mut means = vec![0.0; cols];
    for c in 0..cols {
        let mut total = 0.0;
        for i in 0..n {
            total += raw[(i, c)];
        }
        means[c] = total / n as f64;
        for i in 0..n {
            raw[(i, c)] -= means[c];
        }
    }
    let (theta, eta) = {
        let (t, e) = means.split_at(ps_models.len());
        (t.to_vec(), e.to_vec())
    };

    Ok(ConstraintSystem { level, g: raw, theta, eta, group, clamp_events })
}

impl ConstraintSystem {
    pub fn n(&self) -> usize {
        self.g.nrows()
    }

    pub fn num_constraints(&self) -> usize {
        self.g.ncols()
    }

    fn check_dim(&self, rho: &DVector<f64>) -> Result<()> {
        if rho.len() != self.num_constraints() {
            return Err(Error::InvalidSpec(format!(
                "multiplier has {} entries for {} constraints",
                rho.len(),
                self.num_constraints()
            )));
        }
        Ok(())
    }

    /// Member slacks `1 + rho'g_i` (in member order) and their minimum.
    fn member_slacks(&self, rho: &DVector<f64>) -> (Vec<f64>, f64) {
        let mut slacks = Vec::with_capacity(self.group.size());
        let mut min_slack = f64::INFINITY;
        for &i in &self.group.members {
            let mut s = 1.0;
            for c in 0..self.g.ncols() {
                s += rho[c] * self.g[(i, c)];
            }
            min_slack = min_slack.min(s);
            slacks.push(s);
        }
        (slacks, min_slack)
    }

    /// Barrier objective `-(1/n) sum_{members} log(1 + rho'g_i)`.
    /// Errors if `rho` lies outside the open domain.
    pub fn objective(&self, rho: &DVector<f64>) -> Result<f64> {
        self.check_dim(rho)?;
        let (slacks, min_slack) = self.member_slacks(rho);
        if min_slack <= 0.0 || min_slack.is_nan() {
            return Err(Error::DomainViolation);
        }
        let total: f64 = slacks.iter().map(|s| s.ln()).sum();
        Ok(-total / self.n() as f64)
    }

    /// Gradient and Hessian of the barrier objective at `rho`:
    /// `grad = -(1/n) sum g_i / s_i`, `hess = (1/n) sum g_i g_i' / s_i^2`.
    pub fn gradient_hessian(&self, rho: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check_dim(rho)?;
        let dim = self.num_constraints();
        let (slacks, min_slack) = self.member_slacks(rho);
        if min_slack <= 0.0 || min_slack.is_nan() {
            return Err(Error::DomainViolation);
        }
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        for (pos, &i) in self.group.members.iter().enumerate() {
            let s = slacks[pos];
            let inv = 1.0 / s;
            let inv2 = inv * inv;
            for a in 0..dim {
                let ga = self.g[(i, a)];
                grad[a] -= ga * inv;
                for b in a..dim {
                    hess[(a, b)] += ga * self.g[(i, b)] * inv2;
                }
            }
        }
        let scale = 1.0 / self.n() as f64;
        grad *= scale;
        hess *= scale;
        for a in 0..dim {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        Ok((grad, hess))
    }

    /// Unscaled constraint residual `sum_{members} g_i / (1 + rho'g_i)`,
    /// the quantity a converged multiplier drives to zero.
    pub fn residual(&self, rho: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(rho)?;
        let dim = self.num_constraints();
        let (slacks, min_slack) = self.member_slacks(rho);
        if min_slack <= 0.0 || min_slack.is_nan() {
            return Err(Error::DomainViolation);
        }
        let mut res = DVector::zeros(dim);
        for (pos, &i) in self.group.members.iter().enumerate() {
            let inv = 1.0 / slacks[pos];
            for c in 0..dim {
                res[c] += self.g[(i, c)] * inv;
            }
        }
        Ok(res)
    }
}

fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>) -> Option<DVector<f64>> {
    let neg_grad = -grad;
    if let Some(chol) = hess.clone().cholesky() {
        return Some(chol.solve(&neg_grad));
    }
    let mut ridged = hess.clone();
    for i in 0..ridged.nrows() {
        ridged[(i, i)] += HESSIAN_RIDGE;
    }
    ridged.cholesky().map(|chol| chol.solve(&neg_grad))
}

/// Minimizes the barrier objective by damped Newton iteration.
///
/// Starts at `rho = 0` (always interior). Convergence requires both the
/// scaled gradient below [`GRAD_TOL`] and the unscaled residual below
/// [`RESIDUAL_TOL`]; solutions pinned to the domain boundary (smallest
/// slack below [`DEGENERATE_SLACK`]) or escaping to infinity are
/// reported as [`SolverStatus::Degenerate`], never as weights.
pub fn solve_rho(cs: &ConstraintSystem) -> Result<MrSolution> {
    if cs.group.size() == 0 {
        return Err(Error::EmptyGroup { level: cs.level });
    }
    let dim = cs.num_constraints();
    let n = cs.n() as f64;
    // The residual equals n times the gradient, so both tolerances
    // collapse into one bound on the gradient norm.
    let stop_tol = GRAD_TOL.min(RESIDUAL_TOL / n);

    let mut rho = DVector::zeros(dim);
    let mut objective = cs.objective(&rho)?;
    let mut iterations = 0;
    let mut status = SolverStatus::MaxIter;

    for _ in 0..MAX_NEWTON_ITER {
        let (grad, hess) = cs.gradient_hessian(&rho)?;
        if grad.amax() < stop_tol {
            status = SolverStatus::Converged;
            break;
        }

        let Some(direction) = newton_direction(&hess, &grad) else {
            status = SolverStatus::Degenerate;
            break;
        };
        // Squared Newton decrement; non-negative whenever the (ridged)
        // Hessian is positive definite.
        let decrement = -grad.dot(&direction);
        if !decrement.is_finite() {
            status = SolverStatus::Degenerate;
            break;
        }
        if decrement < DECREMENT_TOL {
            // Tiny decrement: the objective is settled, but rho can
            // still be off by O(sqrt(decrement / curvature)). One last
            // damped step shrinks that error quadratically. The Armijo
            // test is useless here — the demanded decrease sits below
            // rounding noise — so accept any non-increasing candidate.
            let slop = 1e-12 * (1.0 + objective.abs());
            let mut step = 1.0;
            for _ in 0..MAX_BACKTRACKS {
                let candidate = &rho + step * &direction;
                let (_, cand_min_slack) = cs.member_slacks(&candidate);
                if cand_min_slack >= BOUNDARY_MARGIN {
                    let cand_objective = cs.objective(&candidate)?;
                    if cand_objective <= objective + slop {
                        rho = candidate;
                        objective = cand_objective;
                        iterations += 1;
                        break;
                    }
                }
                step *= 0.5;
            }
            status = SolverStatus::Converged;
            break;
        }

        let mut accepted = false;
        let mut step = 1.0;
        for _ in 0..MAX_BACKTRACKS {
            let candidate = &rho + step * &direction;
            let (_, cand_min_slack) = cs.member_slacks(&candidate);
            if cand_min_slack >= BOUNDARY_MARGIN {
                let cand_objective = cs.objective(&candidate)?;
                if cand_objective <= objective - ARMIJO * step * decrement {
                    rho = candidate;
                    objective = cand_objective;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            // The domain margin or the descent condition cannot be met.
            status = SolverStatus::Degenerate;
            break;
        }
        iterations += 1;
        if rho.norm() > RHO_LIMIT {
            status = SolverStatus::Degenerate;
            break;
        }
    }

    let (grad, _) = cs.gradient_hessian(&rho)?;
    let grad_norm = grad.amax();
    let (slacks, min_slack) = cs.member_slacks(&rho);

    if status == SolverStatus::Converged
        && (min_slack < DEGENERATE_SLACK || cs.residual(&rho)?.amax() > RESIDUAL_TOL)
    {
        status = SolverStatus::Degenerate;
    }

    let weights =
        if status == SolverStatus::Converged { normalized_weights(&slacks) } else { Vec::new() };

    Ok(MrSolution { rho, weights, objective, grad_norm, min_slack, iterations, status })
}

fn normalized_weights(slacks: &[f64]) -> Vec<f64> {
    let reciprocals: Vec<f64> = slacks.iter().map(|s| 1.0 / s).collect();
    let total: f64 = reciprocals.iter().sum();
    reciprocals.into_iter().map(|r| r / total).collect()
}

/// Normalized empirical-likelihood weights of a converged solve, in
/// member order. Fails on any non-converged status.
pub fn mr_weights(solution: &MrSolution, cs: &ConstraintSystem) -> Result<Vec<f64>> {
    if solution.status != SolverStatus::Converged {
        return Err(Error::SolverFailed(format!("status {:?}", solution.status)));
    }
    let (slacks, min_slack) = cs.member_slacks(&solution.rho);
    if min_slack <= 0.0 || min_slack.is_nan() {
        return Err(Error::DomainViolation);
    }
    Ok(normalized_weights(&slacks))
}
