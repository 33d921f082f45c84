//! Average potential outcome (APO) estimators and treatment contrasts.
//!
//! Four estimator kinds share one interface:
//!
//! * `REG` — average of outcome-regression predictions at the level;
//! * `IPW` — inverse-probability weighting by the generalized
//!   propensity score;
//! * `DR` — the doubly robust combination of one propensity and one
//!   outcome model;
//! * `MR` — empirical-likelihood weighting over any subset of
//!   candidate models, consistent when at least one is correct.
//!
//! Estimator names encode the model subset as bit masks over the loaded
//! family, propensity digits first: with two propensity and two outcome
//! models, `DR_1001` pairs the first propensity model with the second
//! outcome model, and `MR_1111` uses all four.

use serde::Serialize;

use crate::data::{treatment_group, Dataset};
use crate::elweights::{build_constraints, solve_rho, SolverStatus};
use crate::error::{Error, Result};
use crate::glm::{predict_or, OutcomeFit};
use crate::gps::{gps_pmf_flagged, GpsModel};

/// The four estimator kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EstimatorKind {
    Reg,
    Ipw,
    Dr,
    Mr,
}

impl EstimatorKind {
    fn label(self) -> &'static str {
        match self {
            EstimatorKind::Reg => "REG",
            EstimatorKind::Ipw => "IPW",
            EstimatorKind::Dr => "DR",
            EstimatorKind::Mr => "MR",
        }
    }
}

/// An estimator kind plus the mask of family models it uses.
///
/// Mask lengths always match the model family (J propensity, K outcome
/// models). REG selects exactly one outcome model and no propensity
/// model; IPW the reverse; DR exactly one of each; MR any non-empty
/// subset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    pub ps_mask: Vec<bool>,
    pub or_mask: Vec<bool>,
}

fn ones(mask: &[bool]) -> usize {
    mask.iter().filter(|&&b| b).count()
}

impl EstimatorSpec {
    pub fn new(kind: EstimatorKind, ps_mask: Vec<bool>, or_mask: Vec<bool>) -> Result<Self> {
        let spec = Self { kind, ps_mask, or_mask };
        let (ps, or) = (ones(&spec.ps_mask), ones(&spec.or_mask));
        let ok = match kind {
            EstimatorKind::Reg => ps == 0 && or == 1,
            EstimatorKind::Ipw => ps == 1 && or == 0,
            EstimatorKind::Dr => ps == 1 && or == 1,
            EstimatorKind::Mr => ps + or >= 1,
        };
        if !ok {
            return Err(Error::InvalidSpec(format!(
                "{} cannot use {ps} propensity and {or} outcome models",
                kind.label()
            )));
        }
        Ok(spec)
    }

    /// Canonical name: kind, underscore, then mask digits. DR/MR list
    /// propensity digits before outcome digits; REG and IPW list only
    /// the group they use.
    pub fn name(&self) -> String {
        let digits =
            |mask: &[bool]| -> String { mask.iter().map(|&b| if b { '1' } else { '0' }).collect() };
        match self.kind {
            EstimatorKind::Reg => format!("REG_{}", digits(&self.or_mask)),
            EstimatorKind::Ipw => format!("IPW_{}", digits(&self.ps_mask)),
            EstimatorKind::Dr | EstimatorKind::Mr => {
                format!("{}_{}{}", self.kind.label(), digits(&self.ps_mask), digits(&self.or_mask))
            }
        }
    }

    /// Parses a name like `MR_1101` against a family with `n_ps`
    /// propensity and `n_or` outcome models.
    pub fn parse(name: &str, n_ps: usize, n_or: usize) -> Result<Self> {
        let hint = format!(
            "expected REG_<{n_or} outcome digits>, IPW_<{n_ps} propensity digits>, or \
             DR_/MR_<{n_ps} propensity digits><{n_or} outcome digits> over {{0,1}}, \
             e.g. DR_1010 or MR_1111"
        );
        let fail = || Error::UnknownEstimator { name: name.to_string(), hint: hint.clone() };

        let (prefix, digits) = name.split_once('_').ok_or_else(fail)?;
        let kind = match prefix.to_ascii_uppercase().as_str() {
            "REG" => EstimatorKind::Reg,
            "IPW" => EstimatorKind::Ipw,
            "DR" => EstimatorKind::Dr,
            "MR" => EstimatorKind::Mr,
            _ => return Err(fail()),
        };
        let bits: Vec<bool> = digits
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(fail()),
            })
            .collect::<Result<_>>()?;

        let (ps_mask, or_mask) = match kind {
            EstimatorKind::Reg => {
                if bits.len() != n_or {
                    return Err(fail());
                }
                (vec![false; n_ps], bits)
            }
            EstimatorKind::Ipw => {
                if bits.len() != n_ps {
                    return Err(fail());
                }
                (bits, vec![false; n_or])
            }
            EstimatorKind::Dr | EstimatorKind::Mr => {
                if bits.len() != n_ps + n_or {
                    return Err(fail());
                }
                let (p, o) = bits.split_at(n_ps);
                (p.to_vec(), o.to_vec())
            }
        };
        Self::new(kind, ps_mask, or_mask).map_err(|_| fail())
    }
}

/// Diagnostics of one empirical-likelihood solve.
#[derive(Debug, Clone, Serialize)]
pub struct SolverDiagnostics {
    pub status: SolverStatus,
    pub iterations: usize,
    pub grad_norm: f64,
    pub min_slack: f64,
}

/// Numeric-safety diagnostics attached to every estimate.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Diagnostics {
    /// Generalized propensity scores that hit the floor.
    pub clamp_events: usize,
    /// Present for MR estimates only.
    pub solver: Option<SolverDiagnostics>,
}

/// One estimated average potential outcome.
#[derive(Debug, Clone, Serialize)]
pub struct ApoEstimate {
    pub estimator: String,
    pub level: usize,
    pub value: f64,
    pub sample_size: usize,
    pub diagnostics: Diagnostics,
}

/// Every estimator requires a valid level with at least one member: an
/// unobserved level identifies nothing.
fn require_members(ds: &Dataset, level: usize) -> Result<()> {
    let group = treatment_group(ds, level)?;
    if group.size() == 0 {
        return Err(Error::EmptyGroup { level });
    }
    Ok(())
}

fn check_gps_levels(ds: &Dataset, model: &GpsModel) -> Result<()> {
    if model.levels() != ds.q_levels() {
        return Err(Error::InvalidSpec(format!(
            "propensity model covers {} levels but the data have {}",
            model.levels(),
            ds.q_levels()
        )));
    }
    Ok(())
}

/// Outcome-regression estimator: mean prediction a(x_i, level) over all
/// units.
pub fn reg_apo(ds: &Dataset, or_fit: &OutcomeFit, level: usize) -> Result<ApoEstimate> {
    require_members(ds, level)?;
    let n = ds.n();
    let mut total = 0.0;
    for i in 0..n {
        total += predict_or(or_fit, ds.covariate_row(i), level)?;
    }
    Ok(ApoEstimate {
        estimator: "REG".to_string(),
        level,
        value: total / n as f64,
        sample_size: n,
        diagnostics: Diagnostics::default(),
    })
}

/// Inverse-probability-weighted estimator:
/// `(1/n) sum_i I(D_i = level) y_i / pi(level | x_i)`.
pub fn ipw_apo(ds: &Dataset, gps: &GpsModel, level: usize) -> Result<ApoEstimate> {
    require_members(ds, level)?;
    check_gps_levels(ds, gps)?;
    let n = ds.n();
    let mut total = 0.0;
    let mut clamp_events = 0;
    for i in 0..n {
        if ds.treatment(i) == level {
            let (pmf, clamped) = gps_pmf_flagged(gps, ds.covariate_row(i), level)?;
            if clamped {
                clamp_events += 1;
            }
            total += ds.outcome(i) / pmf;
        } else {
            total += 0.0;
        }
    }
    Ok(ApoEstimate {
        estimator: "IPW".to_string(),
        level,
        value: total / n as f64,
        sample_size: n,
        diagnostics: Diagnostics { clamp_events, solver: None },
    })
}

/// Doubly robust estimator:
/// `(1/n) sum_i [ I_i y_i / pi_i - (I_i - pi_i) / pi_i * a(x_i, level) ]`.
pub fn dr_apo(
    ds: &Dataset,
    gps: &GpsModel,
    or_fit: &OutcomeFit,
    level: usize,
) -> Result<ApoEstimate> {
    require_members(ds, level)?;
    check_gps_levels(ds, gps)?;
    let n = ds.n();
    let mut total = 0.0;
    let mut clamp_events = 0;
    for i in 0..n {
        let (pmf, clamped) = gps_pmf_flagged(gps, ds.covariate_row(i), level)?;
        if clamped {
            clamp_events += 1;
        }
        let prediction = predict_or(or_fit, ds.covariate_row(i), level)?;
        let indicator = if ds.treatment(i) == level { 1.0 } else { 0.0 };
        total += indicator * ds.outcome(i) / pmf - (indicator - pmf) / pmf * prediction;
    }
    Ok(ApoEstimate {
        estimator: "DR".to_string(),
        level,
        value: total / n as f64,
        sample_size: n,
        diagnostics: Diagnostics { clamp_events, solver: None },
    })
}

/// Multiply robust estimator: empirical-likelihood weighted mean of the
/// member outcomes. Fails rather than returning a point estimate when
/// the weight solve does not converge.
pub fn mr_apo(
    ds: &Dataset,
    ps_models: &[GpsModel],
    or_fits: &[OutcomeFit],
    level: usize,
) -> Result<ApoEstimate> {
    require_members(ds, level)?;
    let cs = build_constraints(ds, ps_models, or_fits, level)?;
    let solution = solve_rho(&cs)?;
    if solution.status != SolverStatus::Converged {
        return Err(Error::SolverFailed(format!(
            "status {:?} after {} iterations (grad {:.3e}, min slack {:.3e})",
            solution.status, solution.iterations, solution.grad_norm, solution.min_slack
        )));
    }
    let value: f64 = cs
        .group
        .members
        .iter()
        .zip(solution.weights.iter())
        .map(|(&i, &w)| w * ds.outcome(i))
        .sum();
    Ok(ApoEstimate {
        estimator: "MR".to_string(),
        level,
        value,
        sample_size: ds.n(),
        diagnostics: Diagnostics {
            clamp_events: cs.clamp_events,
            solver: Some(SolverDiagnostics {
                status: solution.status,
                iterations: solution.iterations,
                grad_norm: solution.grad_norm,
                min_slack: solution.min_slack,
            }),
        },
    })
}

/// Evaluates a named estimator against fitted family models. Slots are
/// optional so callers can tolerate fit failures of models the spec
/// does not select; a selected-but-missing model is an error.
pub fn evaluate(
    spec: &EstimatorSpec,
    ds: &Dataset,
    ps_models: &[Option<GpsModel>],
    or_fits: &[Option<OutcomeFit>],
    level: usize,
) -> Result<ApoEstimate> {
    if spec.ps_mask.len() != ps_models.len() || spec.or_mask.len() != or_fits.len() {
        return Err(Error::InvalidSpec(format!(
            "estimator {} masks {}+{} models but {}+{} were fitted",
            spec.name(),
            spec.ps_mask.len(),
            spec.or_mask.len(),
            ps_models.len(),
            or_fits.len()
        )));
    }
    let pick_ps = |j: usize| {
        ps_models[j].as_ref().ok_or_else(|| {
            Error::InvalidSpec(format!(
                "estimator {} needs propensity model {} which is unavailable",
                spec.name(),
                j + 1
            ))
        })
    };
    let pick_or = |k: usize| {
        or_fits[k].as_ref().ok_or_else(|| {
            Error::InvalidSpec(format!(
                "estimator {} needs outcome model {} which is unavailable",
                spec.name(),
                k + 1
            ))
        })
    };
    let picked_ps: Vec<usize> = (0..ps_models.len()).filter(|&j| spec.ps_mask[j]).collect();
    let picked_or: Vec<usize> = (0..or_fits.len()).filter(|&k| spec.or_mask[k]).collect();

    let mut estimate = match spec.kind {
        EstimatorKind::Reg => reg_apo(ds, pick_or(picked_or[0])?, level)?,
        EstimatorKind::Ipw => ipw_apo(ds, pick_ps(picked_ps[0])?, level)?,
        EstimatorKind::Dr => dr_apo(ds, pick_ps(picked_ps[0])?, pick_or(picked_or[0])?, level)?,
        EstimatorKind::Mr => {
            let ps: Vec<GpsModel> =
                picked_ps.iter().map(|&j| pick_ps(j).cloned()).collect::<Result<_>>()?;
            let or: Vec<OutcomeFit> =
                picked_or.iter().map(|&k| pick_or(k).cloned()).collect::<Result<_>>()?;
            mr_apo(ds, &ps, &or, level)?
        }
    };
    estimate.estimator = spec.name();
    Ok(estimate)
}

/// Contrast between two APO estimates from the same estimator on the
/// same sample: `value_a - value_b`.
pub fn ate(a: &ApoEstimate, b: &ApoEstimate) -> Result<f64> {
    if a.estimator != b.estimator || a.sample_size != b.sample_size {
        return Err(Error::EstimateMismatch(
            format!("{} (n = {})", a.estimator, a.sample_size),
            format!("{} (n = {})", b.estimator, b.sample_size),
        ));
    }
    Ok(a.value - b.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::{FeatureTerm, LinkFn, OutcomeModelSpec, PropensityFit, PropensityModelSpec};
    use nalgebra::DVector;

    /// Intercept-only logit propensity model with constant success
    /// probability `p` over `trials` trials.
    fn const_gps(p: f64, trials: usize) -> GpsModel {
        let spec =
            PropensityModelSpec::new(LinkFn::Logit, vec![FeatureTerm::Intercept], trials).unwrap();
        GpsModel::new(PropensityFit {
            spec,
            coefficients: DVector::from_vec(vec![LinkFn::Logit.apply(p)]),
            converged: true,
            iterations: 0,
            log_likelihood: 0.0,
            loglik_path: vec![],
        })
    }

    /// Outcome fit predicting the constant `c` regardless of (x, d).
    fn const_or(c: f64) -> OutcomeFit {
        OutcomeFit {
            spec: OutcomeModelSpec::new(vec![FeatureTerm::Intercept]).unwrap(),
            coefficients: DVector::from_vec(vec![c]),
            residual_variance: 0.0,
            converged: true,
        }
    }

    fn two_unit_dataset() -> Dataset {
        Dataset::new(vec![2.0, 5.0], vec![1, 0], vec![0.0, 0.0], 1, 2).expect("dataset")
    }

    #[test]
    fn names_round_trip() {
        for name in [
            "REG_10", "REG_01", "IPW_10", "IPW_01", "DR_1010", "DR_0110", "DR_1001", "DR_0101",
            "MR_1010", "MR_1110", "MR_1011", "MR_1111", "MR_1101", "MR_0001",
        ] {
            let spec = EstimatorSpec::parse(name, 2, 2).expect(name);
            assert_eq!(spec.name(), name);
        }
        // Lowercase prefixes normalize to the canonical name.
        assert_eq!(EstimatorSpec::parse("dr_1010", 2, 2).unwrap().name(), "DR_1010");
    }

    #[test]
    fn parse_rejects_malformed_names() {
        for bad in [
            "DR_11", "DR_1100", "MR_0000", "REG_11", "REG_1010", "IPW_0110", "FOO_1", "DR_10a0",
            "DR1010", "IPW_00",
        ] {
            let err = EstimatorSpec::parse(bad, 2, 2).unwrap_err();
            match err {
                Error::UnknownEstimator { name, hint } => {
                    assert_eq!(name, bad);
                    assert!(hint.contains("DR_"), "hint should list valid forms: {hint}");
                }
                other => panic!("{bad}: unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn reg_with_constant_model_returns_the_constant() {
        let ds = two_unit_dataset();
        let est = reg_apo(&ds, &const_or(2.5), 1).expect("estimate");
        assert_eq!(est.value, 2.5);
        assert_eq!(est.level, 1);
    }

    #[test]
    fn ipw_worked_example() {
        // Constant propensity 1/2 per level: mu(1) = (1/2)(2 / 0.5) = 2
        // and mu(0) = (1/2)(5 / 0.5) = 5.
        let ds = two_unit_dataset();
        let gps = const_gps(0.5, 1);
        assert_eq!(ipw_apo(&ds, &gps, 1).expect("estimate").value, 2.0);
        assert_eq!(ipw_apo(&ds, &gps, 0).expect("estimate").value, 5.0);
    }

    #[test]
    fn dr_worked_example() {
        // With pi = 1/2 and a = 1: the treated unit contributes
        // 2/0.5 - (0.5/0.5) * 1 = 3, the control contributes
        // 0 - (-0.5/0.5) * 1 = 1, so mu(1) = (3 + 1)/2 = 2.
        let ds = two_unit_dataset();
        let est = dr_apo(&ds, &const_gps(0.5, 1), &const_or(1.0), 1).expect("estimate");
        assert_eq!(est.value, 2.0);
    }

    #[test]
    fn dr_with_zero_outcome_model_equals_ipw_bitwise() {
        let ds = Dataset::new(
            vec![2.0, 5.0, -3.25, 0.125, 7.5],
            vec![1, 0, 1, 1, 0],
            vec![0.0; 5],
            1,
            2,
        )
        .expect("dataset");
        let gps = const_gps(0.3, 1);
        let ipw = ipw_apo(&ds, &gps, 1).expect("ipw");
        let dr = dr_apo(&ds, &gps, &const_or(0.0), 1).expect("dr");
        assert_eq!(dr.value.to_bits(), ipw.value.to_bits());
    }

    #[test]
    fn mr_with_constant_models_is_the_group_mean() {
        // Constant predictions make every centered constraint zero, so
        // the weights are uniform and MR reduces to the member mean.
        let ds = Dataset::new(
            vec![1.0, 3.0, 5.0, 7.0],
            vec![0, 1, 1, 0],
            vec![0.0, 1.0, 2.0, 3.0],
            1,
            2,
        )
        .expect("dataset");
        let est = mr_apo(&ds, &[const_gps(0.5, 1)], &[const_or(2.5)], 1).expect("estimate");
        assert_eq!(est.value, 4.0);
        let solver = est.diagnostics.solver.expect("solver diagnostics");
        assert_eq!(solver.status, SolverStatus::Converged);
    }

    #[test]
    fn mr_surfaces_degenerate_solves_as_errors() {
        // A single member whose constraint cannot be centered away.
        let ds = Dataset::new(vec![1.0, 2.0, 3.0], vec![0, 0, 1], vec![0.0, 1.0, 5.0], 1, 2)
            .expect("dataset");
        let or = OutcomeFit {
            spec: OutcomeModelSpec::new(vec![FeatureTerm::CovariatePower { j: 1, k: 1 }]).unwrap(),
            coefficients: DVector::from_vec(vec![1.0]),
            residual_variance: 0.0,
            converged: true,
        };
        assert!(matches!(mr_apo(&ds, &[], &[or], 1).unwrap_err(), Error::SolverFailed(_)));
    }

    #[test]
    fn estimators_reject_unobserved_levels() {
        let ds = Dataset::new(vec![1.0, 2.0], vec![0, 0], vec![0.0, 1.0], 1, 2).expect("dataset");
        assert!(matches!(
            reg_apo(&ds, &const_or(1.0), 1).unwrap_err(),
            Error::EmptyGroup { level: 1 }
        ));
        assert!(matches!(
            ipw_apo(&ds, &const_gps(0.5, 1), 1).unwrap_err(),
            Error::EmptyGroup { level: 1 }
        ));
        assert!(matches!(
            dr_apo(&ds, &const_gps(0.5, 1), &const_or(1.0), 1).unwrap_err(),
            Error::EmptyGroup { level: 1 }
        ));
        assert!(matches!(
            mr_apo(&ds, &[const_gps(0.5, 1)], &[], 1).unwrap_err(),
            Error::EmptyGroup { level: 1 }
        ));
        // Out-of-range levels are a different error.
        assert!(matches!(
            reg_apo(&ds, &const_or(1.0), 7).unwrap_err(),
            Error::LevelOutOfRange { level: 7, q: 2 }
        ));
    }

    #[test]
    fn evaluate_dispatches_by_mask() {
        let ds = two_unit_dataset();
        let ps_models = vec![Some(const_gps(0.5, 1)), Some(const_gps(0.25, 1))];
        let or_fits = vec![Some(const_or(1.0)), Some(const_or(10.0))];

        let spec = EstimatorSpec::parse("REG_01", 2, 2).unwrap();
        let est = evaluate(&spec, &ds, &ps_models, &or_fits, 1).expect("estimate");
        assert_eq!(est.estimator, "REG_01");
        assert_eq!(est.value, 10.0);

        let spec = EstimatorSpec::parse("IPW_01", 2, 2).unwrap();
        let est = evaluate(&spec, &ds, &ps_models, &or_fits, 1).expect("estimate");
        // pi(1) = 0.25 for the second model: (1/2)(2 / 0.25) = 4.
        assert_eq!(est.value, 4.0);

        let spec = EstimatorSpec::parse("DR_1010", 2, 2).unwrap();
        let est = evaluate(&spec, &ds, &ps_models, &or_fits, 1).expect("estimate");
        assert_eq!(est.value, 2.0);

        let spec = EstimatorSpec::parse("MR_1010", 2, 2).unwrap();
        let est = evaluate(&spec, &ds, &ps_models, &or_fits, 1).expect("estimate");
        assert_eq!(est.estimator, "MR_1010");
        assert_eq!(est.value, 2.0);

        let short_mask = EstimatorSpec::parse("DR_11", 1, 1).unwrap();
        assert!(evaluate(&short_mask, &ds, &ps_models, &or_fits, 1).is_err());
    }

    #[test]
    fn evaluate_tolerates_unselected_missing_models_only() {
        let ds = two_unit_dataset();
        // Second propensity and first outcome slots failed to fit.
        let ps_models = vec![Some(const_gps(0.5, 1)), None];
        let or_fits = vec![None, Some(const_or(1.0))];

        let spec = EstimatorSpec::parse("DR_1001", 2, 2).unwrap();
        let est = evaluate(&spec, &ds, &ps_models, &or_fits, 1).expect("estimate");
        assert_eq!(est.value, 2.0);

        let spec = EstimatorSpec::parse("DR_0110", 2, 2).unwrap();
        let err = evaluate(&spec, &ds, &ps_models, &or_fits, 1).unwrap_err();
        assert!(err.to_string().contains("unavailable"), "got: {err}");
    }

    #[test]
    fn ate_requires_matching_estimates() {
        let ds = two_unit_dataset();
        let gps = const_gps(0.5, 1);
        let a = ipw_apo(&ds, &gps, 1).expect("a");
        let b = ipw_apo(&ds, &gps, 0).expect("b");
        assert_eq!(ate(&a, &b).expect("ate"), 2.0 - 5.0);

        let reg = reg_apo(&ds, &const_or(1.0), 0).expect("reg");
        assert!(matches!(ate(&a, &reg).unwrap_err(), Error::EstimateMismatch(_, _)));
    }
}
