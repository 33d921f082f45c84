//! Observed-data model, treatment-group bookkeeping, and CSV ingestion.
//!
//! A [`Dataset`] holds `n` observations of an outcome `y`, a treatment
//! level `d` in `{0, ..., q_levels - 1}`, and a covariate vector of fixed
//! length `p`. The on-disk format is a headered CSV `y,d,x1,...,xp`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Immutable observed data: outcomes, integer treatment levels, and a
/// row-major covariate matrix.
///
/// Invariants (enforced at construction): at least one observation, all
/// outcomes and covariates finite, every treatment level below `q_levels`,
/// and `q_levels >= 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    outcomes: Vec<f64>,
    treatments: Vec<usize>,
    covariates: Vec<f64>,
    p: usize,
    q_levels: usize,
}

impl Dataset {
    /// Builds a dataset from columns, validating every invariant.
    /// `covariates` is row-major with `outcomes.len() * p` entries.
    pub fn new(
        outcomes: Vec<f64>,
        treatments: Vec<usize>,
        covariates: Vec<f64>,
        p: usize,
        q_levels: usize,
    ) -> Result<Self> {
        let n = outcomes.len();
        if n == 0 {
            return Err(Error::EmptyInput("dataset has no observations".into()));
        }
        if p == 0 {
            return Err(Error::InvalidSpec("dataset needs at least one covariate".into()));
        }
        if q_levels < 2 {
            return Err(Error::InvalidSpec(format!("q_levels must be at least 2, got {q_levels}")));
        }
        if treatments.len() != n {
            return Err(Error::InvalidSpec(format!(
                "{} treatments for {} outcomes",
                treatments.len(),
                n
            )));
        }
        if covariates.len() != n * p {
            return Err(Error::InvalidSpec(format!(
                "covariate buffer has {} entries, expected {} * {}",
                covariates.len(),
                n,
                p
            )));
        }
        for (i, y) in outcomes.iter().enumerate() {
            if !y.is_finite() {
                return Err(Error::InvalidSpec(format!("outcome {i} is not finite")));
            }
        }
        for (i, x) in covariates.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::InvalidSpec(format!(
                    "covariate entry {} (row {}) is not finite",
                    i,
                    i / p
                )));
            }
        }
        for (i, &d) in treatments.iter().enumerate() {
            if d >= q_levels {
                return Err(Error::InvalidSpec(format!(
                    "observation {i}: treatment level {d} out of range for {q_levels} levels"
                )));
            }
        }
        Ok(Self { outcomes, treatments, covariates, p, q_levels })
    }

    pub fn n(&self) -> usize {
        self.outcomes.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of treatment levels Q; observed levels live in `0..Q`.
    pub fn q_levels(&self) -> usize {
        self.q_levels
    }

    pub fn outcome(&self, i: usize) -> f64 {
        self.outcomes[i]
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn treatment(&self, i: usize) -> usize {
        self.treatments[i]
    }

    pub fn treatments(&self) -> &[usize] {
        &self.treatments
    }

    /// Covariate vector of observation `i` (length `p`).
    pub fn covariate_row(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.p..(i + 1) * self.p]
    }
}

/// Index set of the observations that received one treatment level.
///
/// `members` holds 0-based row indices in strictly ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreatmentGroup {
    pub level: usize,
    pub members: Vec<usize>,
}

impl TreatmentGroup {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// Collects the (possibly empty) index set `{i : D_i = level}`.
///
/// Errors if `level >= q_levels`; an empty group is not an error here —
/// estimators that need members reject it themselves.
pub fn treatment_group(ds: &Dataset, level: usize) -> Result<TreatmentGroup> {
    if level >= ds.q_levels() {
        return Err(Error::LevelOutOfRange { level, q: ds.q_levels() });
    }
    let members =
        ds.treatments().iter().enumerate().filter(|(_, &d)| d == level).map(|(i, _)| i).collect();
    Ok(TreatmentGroup { level, members })
}

/// Reads a `y,d,x1,...,xp` CSV, inferring `q_levels` as `1 + max(d)`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    load_csv_with_q(path, None)
}

/// Reads a `y,d,x1,...,xp` CSV with an optional explicit level count.
///
/// When `q_levels` is given it must cover every observed level; when
/// omitted the count is inferred as `1 + max(d)`.
pub fn load_csv_with_q(path: impl AsRef<Path>, q_levels: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;

    let headers = reader.headers()?.clone();
    let p = validate_header(&headers)?;

    let mut outcomes = Vec::new();
    let mut treatments = Vec::new();
    let mut covariates = Vec::new();

    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record?;
        if record.len() != p + 2 {
            return Err(Error::Cell {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", p + 2, record.len()),
            });
        }
        outcomes.push(parse_finite(&record[0], row, "y")?);
        treatments.push(parse_level(&record[1], row)?);
        for j in 0..p {
            covariates.push(parse_finite(&record[j + 2], row, &headers[j + 2])?);
        }
    }

    if outcomes.is_empty() {
        return Err(Error::EmptyInput("csv contains a header but no data rows".into()));
    }

    let max_level = *treatments.iter().max().expect("non-empty");
    let q = match q_levels {
        Some(q) => {
            if q <= max_level {
                return Err(Error::InvalidSpec(format!(
                    "declared q_levels = {q} but the data contain level {max_level}"
                )));
            }
            q
        }
        None => max_level + 1,
    };

    Dataset::new(outcomes, treatments, covariates, p, q)
}

/// Writes a dataset back out as `y,d,x1,...,xp`. Floats use the shortest
/// representation that round-trips, so `load_csv(write_csv(ds)) == ds`.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["y".to_string(), "d".to_string()];
    for j in 1..=ds.p() {
        header.push(format!("x{j}"));
    }
    writer.write_record(&header)?;

    let mut buf = String::new();
    for i in 0..ds.n() {
        let mut record = Vec::with_capacity(ds.p() + 2);
        buf.clear();
        write!(buf, "{}", ds.outcome(i)).expect("write to string");
        record.push(buf.clone());
        record.push(ds.treatment(i).to_string());
        for &x in ds.covariate_row(i) {
            buf.clear();
            write!(buf, "{x}").expect("write to string");
            record.push(buf.clone());
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

fn validate_header(headers: &csv::StringRecord) -> Result<usize> {
    if headers.len() < 3 {
        return Err(Error::Header(format!(
            "expected at least 'y,d,x1', found {} columns",
            headers.len()
        )));
    }
    if &headers[0] != "y" {
        return Err(Error::Header(format!("first column must be 'y', found '{}'", &headers[0])));
    }
    if &headers[1] != "d" {
        return Err(Error::Header(format!("second column must be 'd', found '{}'", &headers[1])));
    }
    let p = headers.len() - 2;
    for j in 0..p {
        let expected = format!("x{}", j + 1);
        if &headers[j + 2] != expected.as_str() {
            return Err(Error::Header(format!(
                "column {} must be '{}', found '{}'",
                j + 3,
                expected,
                &headers[j + 2]
            )));
        }
    }
    Ok(p)
}

fn parse_finite(field: &str, row: usize, column: &str) -> Result<f64> {
    let value: f64 = field.parse().map_err(|_| Error::Cell {
        row,
        column: column.to_string(),
        message: format!("'{field}' is not a number"),
    })?;
    if !value.is_finite() {
        return Err(Error::Cell {
            row,
            column: column.to_string(),
            message: format!("'{field}' is not finite"),
        });
    }
    Ok(value)
}

fn parse_level(field: &str, row: usize) -> Result<usize> {
    if let Ok(level) = field.parse::<usize>() {
        return Ok(level);
    }
    let message = if field.parse::<f64>().is_ok() {
        format!("treatment level '{field}' is not a non-negative integer")
    } else {
        format!("'{field}' is not a number")
    };
    Err(Error::Cell { row, column: "d".to_string(), message })
}
