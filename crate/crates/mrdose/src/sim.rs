//! Monte Carlo benchmark: a known data-generating process, a
//! replication harness, and frozen reference results to compare runs
//! against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use std::result::Result as StdResult;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{evaluate, ApoEstimate, EstimatorSpec};
use crate::family::ModelFamily;
use crate::glm::{fit_binomial, fit_gaussian, OutcomeFit};
use crate::gps::GpsModel;
use crate::report::{CellStats, EstimatorSummary, ExperimentReport};

/// Base seed used by the benchmark when the caller does not supply one.
pub const DEFAULT_BASE_SEED: u64 = 20260815;

/// Data-generating process with a single covariate:
///
/// * `x ~ Uniform(x_low, x_high)`;
/// * `d | x ~ Binomial(trials, sigmoid(b0 + b1 x + b2 x^2))`;
/// * `y | d, x ~ Normal(c0 + c1 d + c2 d^2 + c3 x + c4 x^2,
///   noise_variance)`.
#[derive(Debug, Clone, Serialize)]
pub struct DgpSpec {
    pub n: usize,
    pub x_low: f64,
    pub x_high: f64,
    /// Binomial trials; the treatment takes levels `0..=trials`.
    pub trials: usize,
    /// `(b0, b1, b2)` on the logistic scale.
    pub ps_coefficients: [f64; 3],
    /// `(c0, c1, c2, c3, c4)` for `(1, d, d^2, x, x^2)`.
    pub outcome_coefficients: [f64; 5],
    pub noise_variance: f64,
}

impl DgpSpec {
    /// The benchmark design: `x ~ U(-2.5, 2.5)`,
    /// `d ~ Bin(3, sigmoid(-0.5 - 0.1 x + 0.2 x^2))`,
    /// `y ~ N(1 + 2 d - 0.35 d^2 + 2 x + 3 x^2, 2)`.
    ///
    /// The success curve stays within [0.37, 0.74] over the covariate
    /// range, so every treatment level keeps enough mass for the
    /// inverse-probability terms to be well behaved at the tails; this
    /// is what produces the reference variance profile in
    /// [`reference::TABLE`].
    pub fn benchmark(n: usize) -> Self {
        Self {
            n,
            x_low: -2.5,
            x_high: 2.5,
            trials: 3,
            ps_coefficients: [-0.5, -0.1, 0.2],
            outcome_coefficients: [1.0, 2.0, -0.35, 2.0, 3.0],
            noise_variance: 2.0,
        }
    }

    pub fn q_levels(&self) -> usize {
        self.trials + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidSpec("simulation needs n >= 1".into()));
        }
        if !(self.x_low.is_finite() && self.x_high.is_finite() && self.x_low < self.x_high) {
            return Err(Error::InvalidSpec(format!(
                "covariate range [{}, {}] is not a proper interval",
                self.x_low, self.x_high
            )));
        }
        if self.trials == 0 {
            return Err(Error::InvalidSpec("treatment needs at least 1 trial".into()));
        }
        let finite = self.ps_coefficients.iter().chain(self.outcome_coefficients.iter());
        if finite.clone().any(|c| !c.is_finite()) {
            return Err(Error::InvalidSpec("non-finite coefficient in generating model".into()));
        }
        if !(self.noise_variance.is_finite() && self.noise_variance > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "noise variance must be positive and finite, got {}",
                self.noise_variance
            )));
        }
        Ok(())
    }

    fn success_prob(&self, x: f64) -> f64 {
        let [b0, b1, b2] = self.ps_coefficients;
        let eta = b0 + b1 * x + b2 * x * x;
        1.0 / (1.0 + (-eta).exp())
    }

    fn mean_outcome(&self, x: f64, d: usize) -> f64 {
        let [c0, c1, c2, c3, c4] = self.outcome_coefficients;
        let d = d as f64;
        c0 + c1 * d + c2 * d * d + c3 * x + c4 * x * x
    }
}

/// Deterministic per-replication seed derived from the base seed with a
/// SplitMix64-style mixer, so replications are decorrelated and the
/// stream for replication `r` never depends on how many replications
/// run or in what order.
pub fn replication_seed(base_seed: u64, replication: usize) -> u64 {
    let mut z = base_seed.wrapping_add((replication as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Draws one dataset. The generator is ChaCha12 seeded with `seed`; per
/// unit the draw order is fixed: the covariate (uniform), then exactly
/// `trials` Bernoulli comparisons, then one standard normal for the
/// outcome noise.
pub fn simulate_dataset(dgp: &DgpSpec, seed: u64) -> Result<Dataset> {
    dgp.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = dgp.n;
    let sigma = dgp.noise_variance.sqrt();

    let mut outcomes = Vec::with_capacity(n);
    let mut treatments = Vec::with_capacity(n);
    let mut covariates = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.random_range(dgp.x_low..dgp.x_high);
        let p = dgp.success_prob(x);
        let mut d = 0usize;
        for _ in 0..dgp.trials {
            if rng.random::<f64>() < p {
                d += 1;
            }
        }
        let z: f64 = rng.sample(StandardNormal);
        outcomes.push(dgp.mean_outcome(x, d) + sigma * z);
        treatments.push(d);
        covariates.push(x);
    }
    Dataset::new(outcomes, treatments, covariates, 1, dgp.q_levels())
}

/// Analytic average potential outcome at `level`, using the closed-form
/// uniform moments `E[x] = (lo + hi)/2` and
/// `E[x^2] = (lo^2 + lo hi + hi^2)/3`.
pub fn true_apo(dgp: &DgpSpec, level: usize) -> f64 {
    let [c0, c1, c2, c3, c4] = dgp.outcome_coefficients;
    let (lo, hi) = (dgp.x_low, dgp.x_high);
    let ex = (lo + hi) / 2.0;
    let ex2 = (lo * lo + lo * hi + hi * hi) / 3.0;
    let d = level as f64;
    c0 + c1 * d + c2 * d * d + c3 * ex + c4 * ex2
}

/// A full Monte Carlo experiment: draw `replications` datasets from
/// `dgp`, fit the referenced family models on each, and evaluate every
/// estimator at every treatment level.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dgp: DgpSpec,
    pub family: ModelFamily,
    pub estimators: Vec<EstimatorSpec>,
    pub replications: usize,
    pub base_seed: u64,
}

impl ExperimentConfig {
    /// The benchmark protocol: built-in family and estimator list on the
    /// benchmark design at sample size `n`.
    pub fn benchmark(n: usize, replications: usize, base_seed: u64) -> Self {
        Self {
            dgp: DgpSpec::benchmark(n),
            family: ModelFamily::benchmark(),
            estimators: benchmark_estimators(),
            replications,
            base_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        self.family.validate()?;
        if self.replications == 0 {
            return Err(Error::InvalidSpec("experiment needs at least one replication".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidSpec("experiment needs at least one estimator".into()));
        }
        let (j_n, k_n) = (self.family.num_propensity(), self.family.num_outcome());
        for spec in &self.estimators {
            if spec.ps_mask.len() != j_n || spec.or_mask.len() != k_n {
                return Err(Error::InvalidSpec(format!(
                    "estimator {} masks {}+{} models but the family has {}+{}",
                    spec.name(),
                    spec.ps_mask.len(),
                    spec.or_mask.len(),
                    j_n,
                    k_n
                )));
            }
        }
        Ok(())
    }
}

/// The nine benchmark estimators, in presentation order.
pub fn benchmark_estimators() -> Vec<EstimatorSpec> {
    [
        "DR_1010", "DR_1001", "DR_0110", "DR_0101", "MR_1101", "MR_1110", "MR_1011", "MR_0111",
        "MR_1111",
    ]
    .iter()
    .map(|name| EstimatorSpec::parse(name, 2, 2).expect("benchmark estimator names are valid"))
    .collect()
}

/// Family models fitted on one dataset. Slots hold `None` when the
/// model was not referenced by any estimator or its fit failed; in the
/// latter case the parallel error slot says why.
#[derive(Debug, Clone)]
pub struct FittedSet {
    pub ps: Vec<Option<GpsModel>>,
    pub or: Vec<Option<OutcomeFit>>,
    pub ps_errors: Vec<Option<String>>,
    pub or_errors: Vec<Option<String>>,
}

/// Fits exactly the family models referenced by at least one estimator.
/// Fit failures are captured per model, not propagated, so estimators
/// that do not depend on the failing model still run.
pub fn fit_models(ds: &Dataset, family: &ModelFamily, estimators: &[EstimatorSpec]) -> FittedSet {
    let j_n = family.num_propensity();
    let k_n = family.num_outcome();
    let mut ps_used = vec![false; j_n];
    let mut or_used = vec![false; k_n];
    for spec in estimators {
        for (slot, &selected) in ps_used.iter_mut().zip(spec.ps_mask.iter()) {
            *slot |= selected;
        }
        for (slot, &selected) in or_used.iter_mut().zip(spec.or_mask.iter()) {
            *slot |= selected;
        }
    }

    let mut ps = Vec::with_capacity(j_n);
    let mut ps_errors = Vec::with_capacity(j_n);
    for (j, &used) in ps_used.iter().enumerate() {
        if !used {
            ps.push(None);
            ps_errors.push(None);
            continue;
        }
        let outcome =
            family.propensity_spec(j, ds.q_levels()).and_then(|spec| fit_binomial(ds, &spec));
        match outcome {
            Ok(fit) if fit.converged => {
                ps.push(Some(GpsModel::new(fit)));
                ps_errors.push(None);
            }
            Ok(fit) => {
                ps.push(None);
                ps_errors.push(Some(format!(
                    "propensity model {}: no convergence in {} iterations",
                    j + 1,
                    fit.iterations
                )));
            }
            Err(e) => {
                ps.push(None);
                ps_errors.push(Some(format!("propensity model {}: {e}", j + 1)));
            }
        }
    }

    let mut or = Vec::with_capacity(k_n);
    let mut or_errors = Vec::with_capacity(k_n);
    for (k, &used) in or_used.iter().enumerate() {
        if !used {
            or.push(None);
            or_errors.push(None);
            continue;
        }
        let outcome = family.outcome_spec(k).and_then(|spec| fit_gaussian(ds, &spec));
        match outcome {
            Ok(fit) => {
                or.push(Some(fit));
                or_errors.push(None);
            }
            Err(e) => {
                or.push(None);
                or_errors.push(Some(format!("outcome model {}: {e}", k + 1)));
            }
        }
    }

    FittedSet { ps, or, ps_errors, or_errors }
}

/// Evaluates one estimator at one level against a fitted set, mapping
/// any failure — including upstream fit failures of the models the
/// estimator selects — to a message rather than an error type, since a
/// failed cell is a recorded outcome of a replication, not a fault of
/// the harness.
pub fn evaluate_cell(
    spec: &EstimatorSpec,
    ds: &Dataset,
    fitted: &FittedSet,
    level: usize,
) -> StdResult<ApoEstimate, String> {
    for (j, &selected) in spec.ps_mask.iter().enumerate() {
        if selected {
            if let Some(Some(message)) = fitted.ps_errors.get(j) {
                return Err(message.clone());
            }
        }
    }
    for (k, &selected) in spec.or_mask.iter().enumerate() {
        if selected {
            if let Some(Some(message)) = fitted.or_errors.get(k) {
                return Err(message.clone());
            }
        }
    }
    evaluate(spec, ds, &fitted.ps, &fitted.or, level).map_err(|e| e.to_string())
}

/// Everything retained from one successful cell evaluation.
struct CellValue {
    value: f64,
    clamp_events: usize,
    solver_iterations: Option<usize>,
    solver_grad_norm: Option<f64>,
    solver_min_slack: Option<f64>,
}

impl From<ApoEstimate> for CellValue {
    fn from(est: ApoEstimate) -> Self {
        let solver = est.diagnostics.solver;
        Self {
            value: est.value,
            clamp_events: est.diagnostics.clamp_events,
            solver_iterations: solver.as_ref().map(|s| s.iterations),
            solver_grad_norm: solver.as_ref().map(|s| s.grad_norm),
            solver_min_slack: solver.as_ref().map(|s| s.min_slack),
        }
    }
}

type RepOutcome = Vec<Vec<StdResult<CellValue, String>>>;

fn run_one(config: &ExperimentConfig, replication: usize) -> Result<RepOutcome> {
    let seed = replication_seed(config.base_seed, replication);
    let ds = simulate_dataset(&config.dgp, seed)?;
    let fitted = fit_models(&ds, &config.family, &config.estimators);
    let q = ds.q_levels();
    Ok(config
        .estimators
        .iter()
        .map(|spec| {
            (0..q)
                .map(|level| evaluate_cell(spec, &ds, &fitted, level).map(CellValue::from))
                .collect()
        })
        .collect())
}

/// Runs the experiment. Replications are drawn and evaluated in
/// parallel but aggregated in replication order, so the report is
/// byte-identical however many worker threads are available.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let q = config.dgp.q_levels();
    let truth: Vec<f64> = (0..q).map(|level| true_apo(&config.dgp, level)).collect();

    let reps: Vec<RepOutcome> = (0..config.replications)
        .into_par_iter()
        .map(|r| run_one(config, r))
        .collect::<Result<Vec<_>>>()?;

    let estimators = config
        .estimators
        .iter()
        .enumerate()
        .map(|(e, spec)| {
            let cells = (0..q).map(|level| aggregate_cell(&reps, e, level, truth[level])).collect();
            EstimatorSummary { name: spec.name(), cells }
        })
        .collect();

    Ok(ExperimentReport {
        n: config.dgp.n,
        q_levels: q,
        replications: config.replications,
        base_seed: config.base_seed,
        truth,
        estimators,
    })
}

fn aggregate_cell(reps: &[RepOutcome], e: usize, level: usize, truth: f64) -> CellStats {
    let mut values = Vec::new();
    let mut clamp_events: u64 = 0;
    let mut solver_iterations_max: Option<usize> = None;
    let mut solver_grad_norm_max: Option<f64> = None;
    let mut solver_min_slack_min: Option<f64> = None;
    let mut failures = 0usize;
    let mut failure_examples: Vec<String> = Vec::new();

    for rep in reps {
        match &rep[e][level] {
            Ok(cell) => {
                values.push(cell.value);
                clamp_events += cell.clamp_events as u64;
                if let Some(it) = cell.solver_iterations {
                    solver_iterations_max =
                        Some(solver_iterations_max.map_or(it, |m: usize| m.max(it)));
                }
                if let Some(g) = cell.solver_grad_norm {
                    solver_grad_norm_max = Some(solver_grad_norm_max.map_or(g, |m: f64| m.max(g)));
                }
                if let Some(s) = cell.solver_min_slack {
                    solver_min_slack_min = Some(solver_min_slack_min.map_or(s, |m: f64| m.min(s)));
                }
            }
            Err(message) => {
                failures += 1;
                if failure_examples.len() < 3 && !failure_examples.contains(message) {
                    failure_examples.push(message.clone());
                }
            }
        }
    }

    let successes = values.len();
    let av_est =
        if successes > 0 { Some(values.iter().sum::<f64>() / successes as f64) } else { None };
    let variance_degenerate = successes < 2;
    let emp_var = if let (Some(mean), false) = (av_est, variance_degenerate) {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (successes - 1) as f64
    } else {
        0.0
    };

    CellStats {
        level,
        successes,
        failures,
        av_est,
        emp_var,
        variance_degenerate,
        bias: av_est.map(|m| m - truth),
        clamp_events,
        solver_iterations_max,
        solver_grad_norm_max,
        solver_min_slack_min,
        failure_examples,
    }
}

/// Frozen reference results for the benchmark design, produced with
/// 1000 replications at n = 10000. New runs are compared against these.
pub mod reference {
    /// Monte Carlo estimate of the truth row in the reference run.
    pub const TRUTH: [f64; 4] = [7.253, 8.903, 9.853, 10.103];

    pub struct ReferenceRow {
        pub name: &'static str,
        pub av_est: [f64; 4],
        pub emp_var: [f64; 4],
        pub bias: [f64; 4],
    }

    pub const TABLE: [ReferenceRow; 9] = [
        ReferenceRow {
            name: "DR_1010",
            av_est: [7.255, 8.902, 9.853, 10.103],
            emp_var: [0.008, 0.006, 0.005, 0.008],
            bias: [0.002, -0.001, 0.000, 0.000],
        },
        ReferenceRow {
            name: "DR_1001",
            av_est: [7.238, 8.903, 9.850, 10.109],
            emp_var: [0.073, 0.015, 0.012, 0.071],
            bias: [-0.015, 0.001, -0.002, 0.006],
        },
        ReferenceRow {
            name: "DR_0110",
            av_est: [7.253, 8.901, 9.853, 10.103],
            emp_var: [0.008, 0.006, 0.005, 0.008],
            bias: [0.000, -0.001, 0.000, 0.000],
        },
        ReferenceRow {
            name: "DR_0101",
            av_est: [7.010, 8.784, 9.969, 10.479],
            emp_var: [0.071, 0.014, 0.011, 0.061],
            bias: [-0.243, -0.118, 0.117, 0.377],
        },
        ReferenceRow {
            name: "MR_1101",
            av_est: [7.251, 8.899, 9.852, 10.098],
            emp_var: [0.009, 0.006, 0.005, 0.009],
            bias: [-0.002, -0.004, -0.001, -0.005],
        },
        ReferenceRow {
            name: "MR_1110",
            av_est: [7.247, 8.899, 9.848, 10.099],
            emp_var: [0.008, 0.005, 0.005, 0.009],
            bias: [-0.006, -0.004, -0.005, -0.006],
        },
        ReferenceRow {
            name: "MR_1011",
            av_est: [7.250, 8.905, 9.854, 10.105],
            emp_var: [0.008, 0.006, 0.005, 0.009],
            bias: [-0.003, 0.002, 0.002, 0.002],
        },
        ReferenceRow {
            name: "MR_0111",
            av_est: [7.249, 8.899, 9.851, 10.098],
            emp_var: [0.008, 0.005, 0.005, 0.008],
            bias: [-0.004, -0.003, -0.002, -0.005],
        },
        ReferenceRow {
            name: "MR_1111",
            av_est: [7.248, 8.899, 9.850, 10.096],
            emp_var: [0.008, 0.005, 0.005, 0.009],
            bias: [-0.005, -0.004, -0.003, -0.007],
        },
    ];

    pub fn row(name: &str) -> Option<&'static ReferenceRow> {
        TABLE.iter().find(|r| r.name == name)
    }

    /// Estimators that are consistent under the benchmark design (at
    /// least one selected model is correctly specified).
    pub const CONSISTENT: [&str; 8] =
        ["DR_1010", "DR_1001", "DR_0110", "MR_1101", "MR_1110", "MR_1011", "MR_0111", "MR_1111"];
}

/// Agreement tolerance between the analytic truth and the reference
/// truth row.
pub const TRUTH_CROSS_TOL: f64 = 0.01;
/// Absolute bias bound for estimators that should be consistent.
pub const CONSISTENT_BIAS_TOL: f64 = 0.03;
/// Band around the reference bias for the doubly misspecified DR.
pub const MISSPEC_BIAS_BAND: f64 = 0.08;
/// Acceptable ratio range of observed to reference empirical variance.
pub const VARIANCE_RATIO_RANGE: (f64, f64) = (0.5, 2.0);

/// One named check of a report against the reference results.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonCheck {
    pub label: String,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of comparing a report against the reference results.
#[derive(Debug, Clone, Serialize)]
pub struct ReferenceComparison {
    /// Set when the comparison could not run (for example a single
    /// replication has no empirical variance); `checks` is then empty.
    pub skipped: Option<String>,
    pub checks: Vec<ComparisonCheck>,
    pub passed: bool,
}

fn cell_series(report: &ExperimentReport, name: &str) -> StdResult<Vec<(f64, f64)>, String> {
    let est = report
        .estimator(name)
        .ok_or_else(|| format!("estimator {name} missing from the report"))?;
    est.cells
        .iter()
        .map(|c| match c.bias {
            Some(bias) => Ok((bias, c.emp_var)),
            None => Err(format!("estimator {name} level {} has no successful runs", c.level)),
        })
        .collect()
}

/// Compares a benchmark report against the frozen reference results:
/// the analytic truth must agree with the reference truth row, the
/// consistent estimators must have small absolute bias, the doubly
/// misspecified DR must reproduce the reference bias signature, and the
/// benchmark DR's empirical variance must be of the reference order.
pub fn compare_reference(report: &ExperimentReport) -> ReferenceComparison {
    if report.replications < 2 {
        return ReferenceComparison {
            skipped: Some(format!(
                "needs at least 2 replications to estimate empirical variance, got {}",
                report.replications
            )),
            checks: Vec::new(),
            passed: false,
        };
    }
    let mut checks = Vec::new();

    let truth_dev = report
        .truth
        .iter()
        .zip(reference::TRUTH.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    checks.push(ComparisonCheck {
        label: "analytic truth matches reference truth row".to_string(),
        passed: report.truth.len() == reference::TRUTH.len() && truth_dev <= TRUTH_CROSS_TOL,
        detail: format!("max |deviation| = {truth_dev:.4} (tolerance {TRUTH_CROSS_TOL})"),
    });

    for name in reference::CONSISTENT {
        let (passed, detail) = match cell_series(report, name) {
            Ok(cells) => {
                let worst = cells.iter().map(|(b, _)| b.abs()).fold(0.0f64, f64::max);
                (
                    worst <= CONSISTENT_BIAS_TOL,
                    format!("max |bias| = {worst:.4} (tolerance {CONSISTENT_BIAS_TOL})"),
                )
            }
            Err(message) => (false, message),
        };
        checks.push(ComparisonCheck { label: format!("{name} bias is small"), passed, detail });
    }

    let reference_bias = &reference::row("DR_0101").expect("reference row").bias;
    let (passed, detail) = match cell_series(report, "DR_0101") {
        Ok(cells) => {
            let worst = cells
                .iter()
                .zip(reference_bias.iter())
                .map(|((b, _), r)| (b - r).abs())
                .fold(0.0f64, f64::max);
            (
                worst <= MISSPEC_BIAS_BAND,
                format!("max |bias deviation| = {worst:.4} (band {MISSPEC_BIAS_BAND})"),
            )
        }
        Err(message) => (false, message),
    };
    checks.push(ComparisonCheck {
        label: "DR_0101 reproduces the reference bias signature".to_string(),
        passed,
        detail,
    });

    let reference_var = &reference::row("DR_1010").expect("reference row").emp_var;
    let (lo, hi) = VARIANCE_RATIO_RANGE;
    let (passed, detail) = match cell_series(report, "DR_1010") {
        Ok(cells) => {
            let ratios: Vec<f64> =
                cells.iter().zip(reference_var.iter()).map(|((_, v), r)| v / r).collect();
            let ok = ratios.iter().all(|&r| r >= lo && r <= hi);
            (
                ok,
                format!(
                    "variance ratios {:?} (acceptable [{lo}, {hi}])",
                    ratios.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>()
                ),
            )
        }
        Err(message) => (false, message),
    };
    checks.push(ComparisonCheck {
        label: "DR_1010 empirical variance is of the reference order".to_string(),
        passed,
        detail,
    });

    let passed = checks.iter().all(|c| c.passed);
    ReferenceComparison { skipped: None, checks, passed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{mr_apo, reg_apo};
    use crate::glm::{FeatureTerm, LinkFn, PropensityFit, PropensityModelSpec};
    use crate::report::render_json;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;
    use std::collections::HashSet;

    #[test]
    fn analytic_truth_has_the_closed_form_values() {
        let dgp = DgpSpec::benchmark(100);
        let expected = [7.25, 8.90, 9.85, 10.10];
        for (level, want) in expected.iter().enumerate() {
            assert_abs_diff_eq!(true_apo(&dgp, level), *want, epsilon = 1e-12);
        }
    }

    #[test]
    fn analytic_truth_agrees_with_reference_truth_row() {
        let dgp = DgpSpec::benchmark(100);
        for (level, reference) in reference::TRUTH.iter().enumerate() {
            assert!((true_apo(&dgp, level) - reference).abs() < TRUTH_CROSS_TOL, "level {level}");
        }
    }

    #[test]
    fn simulation_is_deterministic_in_the_seed() {
        let dgp = DgpSpec::benchmark(500);
        let a = simulate_dataset(&dgp, 99).unwrap();
        let b = simulate_dataset(&dgp, 99).unwrap();
        assert_eq!(a.outcomes(), b.outcomes());
        assert_eq!(a.treatments(), b.treatments());
        for i in 0..a.n() {
            assert_eq!(a.covariate_row(i), b.covariate_row(i));
        }

        let c = simulate_dataset(&dgp, 100).unwrap();
        assert_ne!(a.outcomes(), c.outcomes());
    }

    #[test]
    fn replication_seeds_are_distinct() {
        let mut seen = HashSet::new();
        for base in [0u64, 1, DEFAULT_BASE_SEED, u64::MAX] {
            for rep in 0..1000 {
                assert!(seen.insert(replication_seed(base, rep)), "collision at {base}/{rep}");
            }
        }
    }

    /// Composite Simpson's rule on [lo, hi].
    fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, intervals: usize) -> f64 {
        assert!(intervals.is_multiple_of(2));
        let h = (hi - lo) / intervals as f64;
        let mut total = f(lo) + f(hi);
        for i in 1..intervals {
            let weight = if i % 2 == 1 { 4.0 } else { 2.0 };
            total += weight * f(lo + i as f64 * h);
        }
        total * h / 3.0
    }

    #[test]
    fn large_sample_moments_match_quadrature() {
        let dgp = DgpSpec::benchmark(1_000_000);
        let ds = simulate_dataset(&dgp, 7).unwrap();
        let n = ds.n() as f64;

        let mean_x = (0..ds.n()).map(|i| ds.covariate_row(i)[0]).sum::<f64>() / n;
        let mean_x2 = (0..ds.n()).map(|i| ds.covariate_row(i)[0].powi(2)).sum::<f64>() / n;
        assert_abs_diff_eq!(mean_x, 0.0, epsilon = 0.01);
        assert_abs_diff_eq!(mean_x2, 6.25 / 3.0, epsilon = 0.01);

        // E[d] = trials * E[p(x)] with the density 1/(hi - lo).
        let width = dgp.x_high - dgp.x_low;
        let e_p = simpson(|x| dgp.success_prob(x), dgp.x_low, dgp.x_high, 10_000) / width;
        let mean_d = ds.treatments().iter().map(|&d| d as f64).sum::<f64>() / n;
        assert_abs_diff_eq!(mean_d, 3.0 * e_p, epsilon = 0.005);

        // E[y] via E[d | x] = 3 p and E[d^2 | x] = 3 p (1 - p) + 9 p^2.
        let e_y = simpson(
            |x| {
                let p = dgp.success_prob(x);
                let ed = 3.0 * p;
                let ed2 = 3.0 * p * (1.0 - p) + 9.0 * p * p;
                1.0 + 2.0 * ed - 0.35 * ed2 + 2.0 * x + 3.0 * x * x
            },
            dgp.x_low,
            dgp.x_high,
            10_000,
        ) / width;
        let mean_y = ds.outcomes().iter().sum::<f64>() / n;
        assert_abs_diff_eq!(mean_y, e_y, epsilon = 0.02);
    }

    #[test]
    fn groups_partition_the_sample() {
        let ds = simulate_dataset(&DgpSpec::benchmark(10_000), DEFAULT_BASE_SEED).unwrap();
        let mut total = 0;
        for level in 0..ds.q_levels() {
            let size = crate::data::treatment_group(&ds, level).unwrap().size();
            assert!(size > 0, "level {level} unobserved");
            total += size;
        }
        assert_eq!(total, 10_000);
    }

    #[test]
    fn dgp_validation_rejects_bad_designs() {
        let mut dgp = DgpSpec::benchmark(0);
        assert!(dgp.validate().is_err());
        dgp.n = 10;
        dgp.x_low = 2.5;
        dgp.x_high = -2.5;
        assert!(dgp.validate().is_err());
        dgp.x_low = -2.5;
        dgp.x_high = 2.5;
        dgp.noise_variance = 0.0;
        assert!(dgp.validate().is_err());
        dgp.noise_variance = 2.0;
        assert!(dgp.validate().is_ok());
    }

    #[test]
    fn regression_estimator_recovers_truth_on_one_large_sample() {
        let dgp = DgpSpec::benchmark(10_000);
        let ds = simulate_dataset(&dgp, 21).unwrap();
        let family = ModelFamily::benchmark();
        let fit = fit_gaussian(&ds, &family.outcome_spec(0).unwrap()).unwrap();
        for level in 0..4 {
            let est = reg_apo(&ds, &fit, level).unwrap();
            assert!(
                (est.value - true_apo(&dgp, level)).abs() < 0.05,
                "level {level}: {} vs {}",
                est.value,
                true_apo(&dgp, level)
            );
        }
    }

    #[test]
    fn mr_with_the_true_propensity_model_recovers_truth() {
        let dgp = DgpSpec::benchmark(10_000);
        let ds = simulate_dataset(&dgp, 21).unwrap();
        // The generating propensity model itself, not a refit.
        let spec = PropensityModelSpec::new(
            LinkFn::Logit,
            vec![
                FeatureTerm::Intercept,
                FeatureTerm::CovariatePower { j: 1, k: 1 },
                FeatureTerm::CovariatePower { j: 1, k: 2 },
            ],
            3,
        )
        .unwrap();
        let gps = GpsModel::new(PropensityFit {
            spec,
            coefficients: DVector::from_vec(vec![-0.5, -0.1, 0.2]),
            converged: true,
            iterations: 0,
            log_likelihood: 0.0,
            loglik_path: vec![],
        });
        for level in 0..4 {
            let est = mr_apo(&ds, std::slice::from_ref(&gps), &[], level).unwrap();
            assert!(
                (est.value - true_apo(&dgp, level)).abs() < 0.1,
                "level {level}: {} vs {}",
                est.value,
                true_apo(&dgp, level)
            );
        }
    }

    fn small_config(replications: usize) -> ExperimentConfig {
        let mut config = ExperimentConfig::benchmark(400, replications, 5);
        config.estimators = vec![
            EstimatorSpec::parse("DR_1010", 2, 2).unwrap(),
            EstimatorSpec::parse("MR_1111", 2, 2).unwrap(),
        ];
        config
    }

    #[test]
    fn run_experiment_aggregates_and_is_reproducible() {
        let config = small_config(3);
        let report = run_experiment(&config).unwrap();
        assert_eq!(report.estimators.len(), 2);
        assert_eq!(report.truth.len(), 4);
        for est in &report.estimators {
            assert_eq!(est.cells.len(), 4);
            for cell in &est.cells {
                assert_eq!(cell.successes, 3);
                assert_eq!(cell.failures, 0);
                assert!(cell.av_est.unwrap().is_finite());
                assert!(cell.emp_var > 0.0);
                assert!(!cell.variance_degenerate);
            }
        }
        let mr = report.estimator("MR_1111").unwrap();
        assert!(mr.cells[0].solver_iterations_max.is_some());
        assert!(report.estimator("DR_1010").unwrap().cells[0].solver_iterations_max.is_none());

        let again = run_experiment(&config).unwrap();
        assert_eq!(render_json(&report), render_json(&again));
    }

    #[test]
    fn single_replication_flags_degenerate_variance_and_skips_comparison() {
        let config = small_config(1);
        let report = run_experiment(&config).unwrap();
        let cell = &report.estimators[0].cells[0];
        assert_eq!(cell.successes, 1);
        assert_eq!(cell.emp_var, 0.0);
        assert!(cell.variance_degenerate);

        // With one replication the average is the single estimate.
        let ds = simulate_dataset(&config.dgp, replication_seed(config.base_seed, 0)).unwrap();
        let fitted = fit_models(&ds, &config.family, &config.estimators);
        let single = evaluate_cell(&config.estimators[0], &ds, &fitted, 0).unwrap();
        assert_eq!(cell.av_est, Some(single.value));

        let comparison = compare_reference(&report);
        assert!(comparison.skipped.is_some());
        assert!(!comparison.passed);
        assert!(comparison.checks.is_empty());
    }

    #[test]
    fn fit_failures_poison_only_dependent_estimators() {
        // Second propensity model references a covariate the data lack,
        // so its fit fails; IPW_01 depends on it, DR_1010 does not.
        let family = ModelFamily::from_json(
            r#"{
              "ps": [
                { "link": "logit",
                  "terms": [ { "kind": "intercept" },
                             { "kind": "covpow", "j": 1, "k": 1 },
                             { "kind": "covpow", "j": 1, "k": 2 } ] },
                { "link": "logit",
                  "terms": [ { "kind": "intercept" },
                             { "kind": "covpow", "j": 2, "k": 1 } ] }
              ],
              "or": [
                { "terms": [ { "kind": "intercept" },
                             { "kind": "treatpow", "k": 1 },
                             { "kind": "treatpow", "k": 2 },
                             { "kind": "covpow", "j": 1, "k": 1 },
                             { "kind": "covpow", "j": 1, "k": 2 } ] }
              ]
            }"#,
        )
        .unwrap();
        let config = ExperimentConfig {
            dgp: DgpSpec::benchmark(300),
            family,
            estimators: vec![
                EstimatorSpec::parse("DR_101", 2, 1).unwrap(),
                EstimatorSpec::parse("IPW_01", 2, 1).unwrap(),
            ],
            replications: 2,
            base_seed: 3,
        };
        let report = run_experiment(&config).unwrap();

        let dr = report.estimator("DR_101").unwrap();
        assert!(dr.cells.iter().all(|c| c.successes == 2 && c.failures == 0));

        let ipw = report.estimator("IPW_01").unwrap();
        for cell in &ipw.cells {
            assert_eq!(cell.successes, 0);
            assert_eq!(cell.failures, 2);
            assert!(cell.av_est.is_none());
            assert!(cell.failure_examples[0].contains("propensity model 2"));
        }
    }

    #[test]
    fn config_validation_catches_mask_mismatches() {
        let mut config = ExperimentConfig::benchmark(100, 2, 1);
        assert!(config.validate().is_ok());
        config.estimators = vec![EstimatorSpec::parse("DR_11", 1, 1).unwrap()];
        assert!(config.validate().is_err());
        config.estimators = vec![];
        assert!(config.validate().is_err());
    }

    #[test]
    fn benchmark_estimator_list_is_in_presentation_order() {
        let names: Vec<String> = benchmark_estimators().iter().map(|e| e.name()).collect();
        assert_eq!(
            names,
            vec![
                "DR_1010", "DR_1001", "DR_0110", "DR_0101", "MR_1101", "MR_1110", "MR_1011",
                "MR_0111", "MR_1111"
            ]
        );
        for row in reference::TABLE.iter() {
            assert!(names.contains(&row.name.to_string()));
        }
    }

    #[test]
    fn empirical_variance_scales_inversely_with_sample_size() {
        let mut small = ExperimentConfig::benchmark(2_000, 200, 17);
        small.estimators = vec![EstimatorSpec::parse("DR_1010", 2, 2).unwrap()];
        let mut large = small.clone();
        large.dgp = DgpSpec::benchmark(10_000);

        let small_report = run_experiment(&small).unwrap();
        let large_report = run_experiment(&large).unwrap();
        for level in 0..4 {
            let ratio = small_report.estimators[0].cells[level].emp_var
                / large_report.estimators[0].cells[level].emp_var;
            assert!(
                (3.0..=8.0).contains(&ratio),
                "level {level}: variance ratio {ratio} outside [3, 8]"
            );
        }
    }

    #[test]
    fn comparison_detects_a_corrupted_report() {
        let mut config = ExperimentConfig::benchmark(2_000, 50, 23);
        config.estimators = benchmark_estimators();
        let mut report = run_experiment(&config).unwrap();

        // A shifted DR_1010 bias must fail the consistency check.
        let idx = report.estimators.iter().position(|e| e.name == "DR_1010").unwrap();
        for cell in &mut report.estimators[idx].cells {
            cell.bias = cell.bias.map(|b| b + 1.0);
        }
        let comparison = compare_reference(&report);
        assert!(!comparison.passed);
        let failing = comparison.checks.iter().find(|c| c.label.contains("DR_1010 bias")).unwrap();
        assert!(!failing.passed);
    }
}
