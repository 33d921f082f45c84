//! Feature maps and maximum-likelihood fitting for the postulated models.
//!
//! Propensity models are binomial GLMs with a logit or complementary
//! log-log link, fitted by iteratively reweighted least squares (Fisher
//! scoring) with step-halving. Outcome-regression models are linear in
//! their features and fitted by ordinary least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Success probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`
/// before they enter likelihoods or propensity weights.
pub const PROB_CLAMP: f64 = 1e-12;

const MAX_ITERATIONS: usize = 100;
/// Converged when the max absolute coefficient update falls below this.
const COEF_TOL: f64 = 1e-8;
/// ... or when the log-likelihood improvement falls below this.
const LOGLIK_TOL: f64 = 1e-10;
const MAX_HALVINGS: usize = 30;
/// Coefficient norms beyond this indicate a likelihood maximized at
/// infinity (perfectly separated data).
const SEPARATION_LIMIT: f64 = 1e4;
/// Ridge added to the normal equations on the single singularity retry.
const RIDGE: f64 = 1e-10;
/// Singular values below `SINGULAR_REL_TOL * sigma_max` count as zero.
const SINGULAR_REL_TOL: f64 = 1e-12;

/// Link function mapping a success probability to the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkFn {
    Logit,
    Cloglog,
}

impl LinkFn {
    /// Link: probability -> linear predictor.
    pub fn apply(self, p: f64) -> f64 {
        match self {
            LinkFn::Logit => (p / (1.0 - p)).ln(),
            // log(-log(1 - p)), written with ln_1p for small-p accuracy
            LinkFn::Cloglog => (-(-p).ln_1p()).ln(),
        }
    }

    /// Inverse link: linear predictor -> probability, clamped to
    /// `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn inverse(self, z: f64) -> f64 {
        let raw = match self {
            LinkFn::Logit => {
                if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                }
            }
            // 1 - exp(-exp(z)) via expm1 for accuracy near zero
            LinkFn::Cloglog => -(-z.exp()).exp_m1(),
        };
        raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    }

    /// Derivative dp/dz of the inverse link at linear predictor `z`,
    /// given the (clamped) probability `p` there.
    fn dmu_deta(self, z: f64, p: f64) -> f64 {
        match self {
            LinkFn::Logit => p * (1.0 - p),
            LinkFn::Cloglog => (z - z.exp()).exp(),
        }
    }
}

/// One multiplicative feature of a design row.
///
/// Covariate indices `j` are 1-based and match the CSV column names
/// `x1,...,xp`; exponents `k` must be at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum FeatureTerm {
    #[serde(rename = "intercept")]
    Intercept,
    /// x_j^k
    #[serde(rename = "covpow")]
    CovariatePower { j: usize, k: u32 },
    /// exp(x_j)
    #[serde(rename = "covexp")]
    CovariateExp { j: usize },
    /// d^k
    #[serde(rename = "treatpow")]
    TreatmentPower { k: u32 },
}

pub(crate) fn validate_terms(
    features: &[FeatureTerm],
    allow_treatment: bool,
    what: &str,
) -> Result<()> {
    if features.is_empty() {
        return Err(Error::InvalidSpec(format!("{what} needs at least one feature term")));
    }
    for term in features {
        match *term {
            FeatureTerm::Intercept => {}
            FeatureTerm::CovariatePower { j, k } => {
                if j == 0 {
                    return Err(Error::InvalidSpec(format!(
                        "{what}: covariate indices are 1-based, got j = 0"
                    )));
                }
                if k == 0 {
                    return Err(Error::InvalidSpec(format!(
                        "{what}: covariate exponent must be at least 1"
                    )));
                }
            }
            FeatureTerm::CovariateExp { j } => {
                if j == 0 {
                    return Err(Error::InvalidSpec(format!(
                        "{what}: covariate indices are 1-based, got j = 0"
                    )));
                }
            }
            FeatureTerm::TreatmentPower { k } => {
                if !allow_treatment {
                    return Err(Error::InvalidSpec(format!(
                        "{what}: propensity features cannot reference the treatment"
                    )));
                }
                if k == 0 {
                    return Err(Error::InvalidSpec(format!(
                        "{what}: treatment exponent must be at least 1"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Evaluates a feature map at covariates `x` and, when the map contains
/// treatment powers, the treatment level `d`. A supplied but unused `d`
/// is fine; a missing `d` with treatment terms is an error.
pub fn design_row(features: &[FeatureTerm], x: &[f64], d: Option<usize>) -> Result<Vec<f64>> {
    if features.is_empty() {
        return Err(Error::InvalidSpec("empty feature map".into()));
    }
    let p = x.len();
    let mut row = Vec::with_capacity(features.len());
    for term in features {
        let value = match *term {
            FeatureTerm::Intercept => 1.0,
            FeatureTerm::CovariatePower { j, k } => {
                if j == 0 || j > p {
                    return Err(Error::CovariateIndex { j, p });
                }
                x[j - 1].powi(k as i32)
            }
            FeatureTerm::CovariateExp { j } => {
                if j == 0 || j > p {
                    return Err(Error::CovariateIndex { j, p });
                }
                x[j - 1].exp()
            }
            FeatureTerm::TreatmentPower { k } => {
                let d = d.ok_or(Error::MissingTreatment)?;
                (d as f64).powi(k as i32)
            }
        };
        if !value.is_finite() {
            return Err(Error::InvalidSpec(format!("feature {term:?} evaluated to {value}")));
        }
        row.push(value);
    }
    Ok(row)
}

/// A postulated propensity model: binomial GLM for the treatment level
/// out of `trials = Q - 1` trials, with covariate-only features.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModelSpec {
    pub link: LinkFn,
    pub features: Vec<FeatureTerm>,
    pub trials: usize,
}

impl PropensityModelSpec {
    pub fn new(link: LinkFn, features: Vec<FeatureTerm>, trials: usize) -> Result<Self> {
        validate_terms(&features, false, "propensity model")?;
        if trials == 0 {
            return Err(Error::InvalidSpec("propensity model needs trials >= 1".into()));
        }
        Ok(Self { link, features, trials })
    }
}

/// A postulated outcome-regression model, linear in its features.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeModelSpec {
    pub features: Vec<FeatureTerm>,
}

impl OutcomeModelSpec {
    pub fn new(features: Vec<FeatureTerm>) -> Result<Self> {
        validate_terms(&features, true, "outcome model")?;
        Ok(Self { features })
    }
}

/// A fitted propensity model.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub spec: PropensityModelSpec,
    pub coefficients: DVector<f64>,
    pub converged: bool,
    /// Accepted IRLS updates performed.
    pub iterations: usize,
    pub log_likelihood: f64,
    /// Log-likelihood after each accepted update, starting at the
    /// zero-coefficient value; non-decreasing by construction.
    pub loglik_path: Vec<f64>,
}

/// A fitted outcome-regression model.
#[derive(Debug, Clone)]
pub struct OutcomeFit {
    pub spec: OutcomeModelSpec,
    pub coefficients: DVector<f64>,
    /// Unbiased residual variance, RSS / (n - k).
    pub residual_variance: f64,
    pub converged: bool,
}

/// Solves the symmetric system `m * delta = rhs` with a rank-revealing
/// factorization; singular values below `SINGULAR_REL_TOL * sigma_max`
/// count as zero and trigger one ridge retry.
fn solve_normal_equations(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(solution) = rank_revealing_solve(m, rhs) {
        return Ok(solution);
    }
    let mut ridged = m.clone();
    for i in 0..m.nrows() {
        ridged[(i, i)] += RIDGE;
    }
    rank_revealing_solve(&ridged, rhs).ok_or_else(|| {
        Error::Singular(format!(
            "{}x{} weighted normal equations remain rank deficient after ridge retry",
            m.nrows(),
            m.ncols()
        ))
    })
}

fn rank_revealing_solve(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = m.clone().svd(true, true);
    let sigma_max = svd.singular_values.amax();
    if sigma_max <= 0.0 || !sigma_max.is_finite() {
        return None;
    }
    let cutoff = SINGULAR_REL_TOL * sigma_max;
    if svd.singular_values.iter().any(|&s| s <= cutoff) {
        return None;
    }
    svd.solve(rhs, cutoff).ok()
}

fn binomial_log_likelihood(d: &[usize], trials: f64, probs: &[f64]) -> f64 {
    // Binomial coefficients are constant in the parameters and omitted.
    let mut ll = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        let di = d[i] as f64;
        ll += di * p.ln() + (trials - di) * (1.0 - p).ln();
    }
    ll
}

/// Fits a binomial propensity model by IRLS with step-halving.
///
/// Requirements: the dataset's `q_levels` must equal `spec.trials + 1`.
/// Each accepted update never decreases the log-likelihood; convergence
/// is declared when the max coefficient change drops below `1e-8` or the
/// log-likelihood improvement below `1e-10`, within 100 iterations.
pub fn fit_binomial(ds: &Dataset, spec: &PropensityModelSpec) -> Result<PropensityFit> {
    if ds.q_levels() != spec.trials + 1 {
        return Err(Error::InvalidSpec(format!(
            "model postulates {} trials but the data have {} levels",
            spec.trials,
            ds.q_levels()
        )));
    }
    let n = ds.n();
    let k = spec.features.len();
    let trials = spec.trials as f64;

    let mut design = Vec::with_capacity(n * k);
    for i in 0..n {
        design.extend(design_row(&spec.features, ds.covariate_row(i), None)?);
    }
    let z = DMatrix::from_row_slice(n, k, &design);

    let probs_at = |coef: &DVector<f64>| -> (Vec<f64>, Vec<f64>) {
        let eta = &z * coef;
        let mut probs = Vec::with_capacity(n);
        let mut slopes = Vec::with_capacity(n);
        for i in 0..n {
            let p = spec.link.inverse(eta[i]);
            probs.push(p);
            slopes.push(spec.link.dmu_deta(eta[i], p));
        }
        (probs, slopes)
    };

    let mut coef = DVector::zeros(k);
    let (mut probs, mut slopes) = probs_at(&coef);
    let mut loglik = binomial_log_likelihood(ds.treatments(), trials, &probs);
    let mut loglik_path = vec![loglik];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..MAX_ITERATIONS {
        // Score and Fisher information at the current coefficients.
        let mut score = DVector::zeros(k);
        let mut info = DMatrix::zeros(k, k);
        for i in 0..n {
            let p = probs[i];
            let var = p * (1.0 - p);
            let su = (ds.treatment(i) as f64 - trials * p) * slopes[i] / var;
            let wi = trials * slopes[i] * slopes[i] / var;
            for a in 0..k {
                let za = z[(i, a)];
                score[a] += su * za;
                for b in a..k {
                    info[(a, b)] += wi * za * z[(i, b)];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }

        let delta = solve_normal_equations(&info, &score)?;

        // Step-halve until the log-likelihood stops decreasing.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = &coef + step * &delta;
            let (cand_probs, cand_slopes) = probs_at(&candidate);
            let cand_ll = binomial_log_likelihood(ds.treatments(), trials, &cand_probs);
            if cand_ll >= loglik {
                accepted = Some((candidate, cand_probs, cand_slopes, cand_ll));
                break;
            }
            step *= 0.5;
        }
        let Some((new_coef, new_probs, new_slopes, new_ll)) = accepted else {
            // No ascent step found: the iteration has stalled.
            break;
        };

        iterations += 1;
        let max_change = (&new_coef - &coef).amax();
        let gain = new_ll - loglik;
        coef = new_coef;
        probs = new_probs;
        slopes = new_slopes;
        loglik = new_ll;
        loglik_path.push(loglik);

        if coef.norm() > SEPARATION_LIMIT {
            return Err(Error::Separation { norm: coef.norm(), limit: SEPARATION_LIMIT });
        }
        if max_change < COEF_TOL || gain < LOGLIK_TOL {
            converged = true;
            break;
        }
    }

    if coef.iter().any(|c| !c.is_finite()) {
        return Err(Error::Singular("binomial fit produced non-finite coefficients".into()));
    }

    Ok(PropensityFit {
        spec: spec.clone(),
        coefficients: coef,
        converged,
        iterations,
        log_likelihood: loglik,
        loglik_path,
    })
}

/// Fits an outcome-regression model by ordinary least squares.
///
/// The design matrix must have full column rank and strictly more rows
/// than columns (the residual variance uses `n - k` degrees of freedom).
pub fn fit_gaussian(ds: &Dataset, spec: &OutcomeModelSpec) -> Result<OutcomeFit> {
    let n = ds.n();
    let k = spec.features.len();
    if n <= k {
        return Err(Error::TooFewRows { n, terms: k });
    }

    let mut design = Vec::with_capacity(n * k);
    for i in 0..n {
        design.extend(design_row(&spec.features, ds.covariate_row(i), Some(ds.treatment(i)))?);
    }
    let a = DMatrix::from_row_slice(n, k, &design);
    let y = DVector::from_column_slice(ds.outcomes());

    let svd = a.clone().svd(true, true);
    let sigma_max = svd.singular_values.amax();
    let cutoff = sigma_max * (n.max(k) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    if rank < k {
        return Err(Error::RankDeficient { rank, cols: k });
    }
    let coefficients = svd
        .solve(&y, cutoff)
        .map_err(|e| Error::Singular(format!("least-squares solve failed: {e}")))?;

    let residuals = &y - &a * &coefficients;
    let residual_variance = residuals.norm_squared() / (n - k) as f64;

    Ok(OutcomeFit { spec: spec.clone(), coefficients, residual_variance, converged: true })
}

/// Predicted outcome-regression value a(x, d) under a fitted model.
pub fn predict_or(fit: &OutcomeFit, x: &[f64], d: usize) -> Result<f64> {
    let row = design_row(&fit.spec.features, x, Some(d))?;
    Ok(row.iter().zip(fit.coefficients.iter()).map(|(r, c)| r * c).sum())
}
