//! Experiment summaries and their JSON / CSV / text renderings.

use serde::Serialize;

use crate::error::{Error, Result};

/// Per-(estimator, level) Monte Carlo statistics.
#[derive(Debug, Clone, Serialize)]
pub struct CellStats {
    pub level: usize,
    /// Replications that produced a point estimate.
    pub successes: usize,
    /// Replications whose fit or solve failed for this cell.
    pub failures: usize,
    /// Mean point estimate; absent when every replication failed.
    pub av_est: Option<f64>,
    /// Unbiased sample variance of the point estimates; 0 with the
    /// degenerate flag set when fewer than two replications succeeded.
    pub emp_var: f64,
    pub variance_degenerate: bool,
    /// Av Est minus the analytic truth for this level.
    pub bias: Option<f64>,
    /// Propensity-score floor events summed over successful runs.
    pub clamp_events: u64,
    /// Weight-solver extremes over successful runs (MR cells only).
    pub solver_iterations_max: Option<usize>,
    pub solver_grad_norm_max: Option<f64>,
    pub solver_min_slack_min: Option<f64>,
    /// Up to three distinct failure messages, for diagnosis.
    pub failure_examples: Vec<String>,
}

/// All levels of one estimator.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorSummary {
    pub name: String,
    pub cells: Vec<CellStats>,
}

/// Full result of a Monte Carlo experiment.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub n: usize,
    pub q_levels: usize,
    pub replications: usize,
    pub base_seed: u64,
    /// Analytic average potential outcome per level.
    pub truth: Vec<f64>,
    pub estimators: Vec<EstimatorSummary>,
}

impl ExperimentReport {
    pub fn estimator(&self, name: &str) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.name == name)
    }
}

/// Full-precision JSON rendering (deterministic field order).
pub fn render_json(report: &ExperimentReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

/// CSV shaped like the benchmark table: a truth row, then three rows
/// (av_est, emp_var, bias) per estimator, one column per level. Floats
/// use the shortest representation that round-trips exactly.
pub fn render_csv(report: &ExperimentReport) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["estimator".to_string(), "statistic".to_string()];
    for level in 0..report.q_levels {
        header.push(format!("level_{level}"));
    }
    writer.write_record(&header)?;

    let mut truth_row = vec!["Truth".to_string(), "value".to_string()];
    truth_row.extend(report.truth.iter().map(|v| format!("{v}")));
    writer.write_record(&truth_row)?;

    let opt = |v: Option<f64>| v.map(|v| format!("{v}")).unwrap_or_default();
    for est in &report.estimators {
        let mut av = vec![est.name.clone(), "av_est".to_string()];
        let mut var = vec![est.name.clone(), "emp_var".to_string()];
        let mut bias = vec![est.name.clone(), "bias".to_string()];
        for cell in &est.cells {
            av.push(opt(cell.av_est));
            var.push(format!("{}", cell.emp_var));
            bias.push(opt(cell.bias));
        }
        writer.write_record(&av)?;
        writer.write_record(&var)?;
        writer.write_record(&bias)?;
    }

    let bytes = writer.into_inner().map_err(|e| Error::InvalidSpec(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidSpec(e.to_string()))
}

/// Human-readable table rounded to three decimals, like the benchmark
/// presentation; cells that never succeeded print as "-".
pub fn render_table(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let name_width = report
        .estimators
        .iter()
        .map(|e| e.name.len())
        .chain(["Truth".len()])
        .max()
        .unwrap_or(8)
        .max(8);

    out.push_str(&format!("{:<name_width$} {:>8}", "", "stat", name_width = name_width));
    for level in 0..report.q_levels {
        out.push_str(&format!(" {:>9}", format!("level {level}")));
    }
    out.push('\n');

    out.push_str(&format!("{:<name_width$} {:>8}", "Truth", "", name_width = name_width));
    for v in &report.truth {
        out.push_str(&format!(" {v:>9.3}"));
    }
    out.push('\n');

    let fmt_opt = |v: Option<f64>| match v {
        Some(v) => format!(" {v:>9.3}"),
        None => format!(" {:>9}", "-"),
    };
    for est in &report.estimators {
        out.push_str(&format!(
            "{:<name_width$} {:>8}",
            est.name,
            "av_est",
            name_width = name_width
        ));
        for cell in &est.cells {
            out.push_str(&fmt_opt(cell.av_est));
        }
        out.push('\n');
        out.push_str(&format!("{:<name_width$} {:>8}", "", "emp_var", name_width = name_width));
        for cell in &est.cells {
            out.push_str(&format!(" {:>9.3}", cell.emp_var));
        }
        out.push('\n');
        out.push_str(&format!("{:<name_width$} {:>8}", "", "bias", name_width = name_width));
        for cell in &est.cells {
            out.push_str(&fmt_opt(cell.bias));
        }
        out.push('\n');
        let failures: usize = est.cells.iter().map(|c| c.failures).sum();
        if failures > 0 {
            out.push_str(&format!(
                "{:<name_width$} {:>8} {} failed cells\n",
                "",
                "!",
                failures,
                name_width = name_width
            ));
        }
    }
    out
}
