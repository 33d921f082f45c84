//! Doubly and multiply robust estimation of average potential outcomes
//! (APOs) for multivalued treatments.
//!
//! The library covers the full pipeline:
//!
//! * [`data`] — observed-data model and CSV ingestion (`y,d,x1,...,xp`);
//! * [`glm`] — feature maps plus binomial (IRLS) and Gaussian (OLS) fits
//!   for the postulated propensity and outcome-regression models;
//! * [`gps`] — generalized propensity scores for binomial treatment models;
//! * [`elweights`] — empirical-likelihood weights obtained by minimizing a
//!   convex barrier objective over the multiplier domain;
//! * [`estimators`] — regression, inverse-probability, doubly robust, and
//!   multiply robust APO estimators plus treatment-effect contrasts;
//! * [`family`] — JSON-configurable families of candidate models;
//! * [`sim`] — the benchmark data-generating process and a reproducible
//!   parallel Monte Carlo harness;
//! * [`report`] — experiment summaries rendered as JSON, CSV, or text.

pub mod data;
pub mod elweights;
pub mod error;
pub mod estimators;
pub mod family;
pub mod glm;
pub mod gps;
pub mod report;
pub mod sim;

pub use error::{Error, Result};
