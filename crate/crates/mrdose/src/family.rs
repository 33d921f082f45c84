//! Model families: the candidate propensity and outcome models an
//! analysis draws its estimators from, loadable from JSON.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{validate_terms, FeatureTerm, LinkFn, OutcomeModelSpec, PropensityModelSpec};

/// One candidate propensity model: a link plus covariate-only features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsModelConfig {
    pub link: LinkFn,
    pub terms: Vec<FeatureTerm>,
}

/// One candidate outcome-regression model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrModelConfig {
    pub terms: Vec<FeatureTerm>,
}

/// An ordered family of J propensity and K outcome models. Estimator
/// masks index into these lists, so the order is part of the contract.
/// The JSON keys are `ps` and `or` to match estimator-mask shorthand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFamily {
    #[serde(rename = "ps")]
    pub propensity: Vec<PsModelConfig>,
    #[serde(rename = "or")]
    pub outcome: Vec<OrModelConfig>,
}

/// The built-in two-by-two benchmark family. The first propensity model
/// is a logit in (1, x1, x1^2) — the data-generating form — and the
/// second a cloglog in (1, x1, exp(x1)). The first outcome model is
/// linear in (1, d, d^2, x1, x1^2) — again the generating form — and
/// the second in (1, d, x1).
const BUILTIN_FAMILY_JSON: &str = r#"{
  "ps": [
    {
      "link": "logit",
      "terms": [
        { "kind": "intercept" },
        { "kind": "covpow", "j": 1, "k": 1 },
        { "kind": "covpow", "j": 1, "k": 2 }
      ]
    },
    {
      "link": "cloglog",
      "terms": [
        { "kind": "intercept" },
        { "kind": "covpow", "j": 1, "k": 1 },
        { "kind": "covexp", "j": 1 }
      ]
    }
  ],
  "or": [
    {
      "terms": [
        { "kind": "intercept" },
        { "kind": "treatpow", "k": 1 },
        { "kind": "treatpow", "k": 2 },
        { "kind": "covpow", "j": 1, "k": 1 },
        { "kind": "covpow", "j": 1, "k": 2 }
      ]
    },
    {
      "terms": [
        { "kind": "intercept" },
        { "kind": "treatpow", "k": 1 },
        { "kind": "covpow", "j": 1, "k": 1 }
      ]
    }
  ]
}"#;

impl ModelFamily {
    /// The built-in benchmark family (two propensity, two outcome
    /// models).
    pub fn benchmark() -> Self {
        Self::from_json(BUILTIN_FAMILY_JSON).expect("built-in family is valid")
    }

    /// Parses and validates a family from its JSON representation.
    pub fn from_json(text: &str) -> Result<Self> {
        let family: Self = serde_json::from_str(text)?;
        family.validate()?;
        Ok(family)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("family serializes")
    }

    /// A family must offer at least one model, propensity features may
    /// not reference the treatment, and every term list must be
    /// well-formed on its own.
    pub fn validate(&self) -> Result<()> {
        if self.propensity.is_empty() && self.outcome.is_empty() {
            return Err(Error::InvalidSpec(
                "model family needs at least one propensity or outcome model".into(),
            ));
        }
        for (j, ps) in self.propensity.iter().enumerate() {
            validate_terms(&ps.terms, false, &format!("propensity model {}", j + 1))?;
        }
        for (k, or) in self.outcome.iter().enumerate() {
            validate_terms(&or.terms, true, &format!("outcome model {}", k + 1))?;
        }
        Ok(())
    }

    pub fn num_propensity(&self) -> usize {
        self.propensity.len()
    }

    pub fn num_outcome(&self) -> usize {
        self.outcome.len()
    }

    /// Fitting spec for propensity model `j` (0-based) on data with
    /// `q_levels` treatment levels.
    pub fn propensity_spec(&self, j: usize, q_levels: usize) -> Result<PropensityModelSpec> {
        let config = self.propensity.get(j).ok_or_else(|| {
            Error::InvalidSpec(format!(
                "propensity model index {} out of range (family has {})",
                j + 1,
                self.propensity.len()
            ))
        })?;
        if q_levels < 2 {
            return Err(Error::InvalidSpec(format!(
                "propensity model needs at least 2 treatment levels, got {q_levels}"
            )));
        }
        PropensityModelSpec::new(config.link, config.terms.clone(), q_levels - 1)
    }

    /// Fitting spec for outcome model `k` (0-based).
    pub fn outcome_spec(&self, k: usize) -> Result<OutcomeModelSpec> {
        let config = self.outcome.get(k).ok_or_else(|| {
            Error::InvalidSpec(format!(
                "outcome model index {} out of range (family has {})",
                k + 1,
                self.outcome.len()
            ))
        })?;
        OutcomeModelSpec::new(config.terms.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_family_has_the_documented_shape() {
        let family = ModelFamily::benchmark();
        assert_eq!(family.num_propensity(), 2);
        assert_eq!(family.num_outcome(), 2);
        assert_eq!(family.propensity[0].link, LinkFn::Logit);
        assert_eq!(family.propensity[1].link, LinkFn::Cloglog);
        assert_eq!(family.propensity[0].terms.len(), 3);
        assert_eq!(family.propensity[1].terms.len(), 3);
        assert_eq!(family.outcome[0].terms.len(), 5);
        assert_eq!(family.outcome[1].terms.len(), 3);
        assert!(family.propensity[1].terms.contains(&FeatureTerm::CovariateExp { j: 1 }));
        assert!(family.outcome[0].terms.contains(&FeatureTerm::TreatmentPower { k: 2 }));
    }

    #[test]
    fn json_round_trip_is_identity() {
        let family = ModelFamily::benchmark();
        let text = family.to_json();
        let reparsed = ModelFamily::from_json(&text).expect("round trip");
        assert_eq!(family, reparsed);
    }

    #[test]
    fn rejects_treatment_terms_in_propensity_models() {
        let text = r#"{
          "ps": [
            { "link": "logit", "terms": [ { "kind": "treatpow", "k": 1 } ] }
          ],
          "or": []
        }"#;
        let err = ModelFamily::from_json(text).unwrap_err();
        assert!(err.to_string().contains("cannot reference the treatment"), "got: {err}");
    }

    #[test]
    fn rejects_empty_families_and_empty_term_lists() {
        let empty = r#"{ "ps": [], "or": [] }"#;
        assert!(ModelFamily::from_json(empty).is_err());

        let no_terms = r#"{
          "ps": [],
          "or": [ { "terms": [] } ]
        }"#;
        assert!(ModelFamily::from_json(no_terms).is_err());
    }

    #[test]
    fn rejects_unknown_kinds_fields_and_zero_indices() {
        let bad_kind = r#"{
          "ps": [],
          "or": [ { "terms": [ { "kind": "spline", "j": 1 } ] } ]
        }"#;
        assert!(matches!(ModelFamily::from_json(bad_kind).unwrap_err(), Error::Json(_)));

        let extra_field = r#"{
          "ps": [],
          "or": [ { "terms": [ { "kind": "intercept" } ], "weights": true } ]
        }"#;
        assert!(matches!(ModelFamily::from_json(extra_field).unwrap_err(), Error::Json(_)));

        let zero_index = r#"{
          "ps": [],
          "or": [ { "terms": [ { "kind": "covpow", "j": 0, "k": 1 } ] } ]
        }"#;
        let err = ModelFamily::from_json(zero_index).unwrap_err();
        assert!(err.to_string().contains("1-based"), "got: {err}");
    }

    #[test]
    fn specs_carry_trials_and_validate_indices() {
        let family = ModelFamily::benchmark();
        let spec = family.propensity_spec(0, 4).expect("spec");
        assert_eq!(spec.trials, 3);
        assert_eq!(spec.features.len(), 3);
        assert!(family.propensity_spec(2, 4).is_err());
        assert!(family.propensity_spec(0, 1).is_err());

        let or = family.outcome_spec(1).expect("spec");
        assert_eq!(or.features.len(), 3);
        assert!(family.outcome_spec(2).is_err());
    }
}
