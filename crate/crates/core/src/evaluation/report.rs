//! Rendering of aggregated evaluation results and headline comparisons.

use std::fmt::Write as _;

use super::{EvalError, Metric, MetricReport};

/// Percentage change of `new` over `base`: 100·(new − base)/base. Reports
/// quote it to one decimal; the raw value is returned so callers choose the
/// formatting.
pub fn relative_improvement(new: f64, base: f64) -> Result<f64, EvalError> {
    if !new.is_finite() || !base.is_finite() {
        return Err(EvalError::Improvement(format!(
            "values must be finite, got {new} over {base}"
        )));
    }
    if base <= 0.0 {
        return Err(EvalError::Improvement(format!(
            "baseline must be positive, got {base}"
        )));
    }
    Ok(100.0 * (new - base) / base)
}

fn format_mean(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.3}"),
        None => "-".into(),
    }
}

/// Aligned-column text table: one row per model with the voted mean of each
/// metric, followed by voted-cell counts, per-metric agreement, and the
/// filter diagnostics.
pub fn render_text(report: &MetricReport) -> String {
    let label_width = report
        .rows
        .iter()
        .map(|r| r.model.len())
        .chain(["model".len(), "fleiss' kappa".len(), "voted cells".len()])
        .max()
        .unwrap_or(0);
    let widths: Vec<usize> = Metric::ALL.iter().map(|m| m.name().len().max(5)).collect();

    let mut out = String::new();
    let _ = write!(out, "{:<label_width$}", "model");
    for (metric, width) in Metric::ALL.iter().zip(&widths) {
        let _ = write!(out, "  {:>width$}", metric.name());
    }
    out.push('\n');
    for row in &report.rows {
        let _ = write!(out, "{:<label_width$}", row.model);
        for (metric, width) in Metric::ALL.iter().zip(&widths) {
            let _ = write!(out, "  {:>width$}", format_mean(row.means.get(metric).copied()));
        }
        out.push('\n');
    }

    out.push('\n');
    let _ = write!(out, "{:<label_width$}", "voted cells");
    for (metric, width) in Metric::ALL.iter().zip(&widths) {
        let _ = write!(out, "  {:>width$}", metric.name());
    }
    out.push('\n');
    for row in &report.rows {
        let _ = write!(out, "{:<label_width$}", row.model);
        for (metric, width) in Metric::ALL.iter().zip(&widths) {
            let count = row
                .cells
                .get(metric)
                .map(|c| c.to_string())
                .unwrap_or_else(|| "-".into());
            let _ = write!(out, "  {:>width$}", count);
        }
        out.push('\n');
    }

    out.push('\n');
    let _ = write!(out, "{:<label_width$}", "fleiss' kappa");
    for (metric, width) in Metric::ALL.iter().zip(&widths) {
        let _ = write!(
            out,
            "  {:>width$}",
            format_mean(report.kappa.per_metric.get(metric).copied())
        );
    }
    out.push('\n');
    match report.kappa.average {
        Some(avg) => {
            let _ = writeln!(out, "average fleiss' kappa: {avg:.3}");
        }
        None => {
            let _ = writeln!(out, "average fleiss' kappa: - (no multi-rater cells)");
        }
    }

    let d = &report.diagnostics;
    let _ = writeln!(
        out,
        "records: {} total, {} valid, {} excluded as invalid; {} empty cells; \
         {} cells outside the modal rater count",
        d.total_records,
        d.valid_records,
        d.excluded_invalid,
        d.empty_cells,
        report.kappa.skipped_cells
    );
    out
}

/// CSV twin of the text table: one row per model, a mean and voted-cell
/// column per metric. Missing cells render as empty mean and zero count.
pub fn render_csv(report: &MetricReport) -> String {
    let mut out = String::from("model");
    for metric in Metric::ALL {
        let _ = write!(out, ",{0}_mean,{0}_cells", metric.name());
    }
    out.push('\n');
    for row in &report.rows {
        out.push_str(&row.model);
        for metric in Metric::ALL {
            match row.means.get(&metric) {
                Some(mean) => {
                    let _ = write!(out, ",{mean:.3},{}", row.cells.get(&metric).copied().unwrap_or(0));
                }
                None => out.push_str(",,0"),
            }
        }
        out.push('\n');
    }
    out
}
