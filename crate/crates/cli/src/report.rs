//! Plain-text rendering of a metrics report.

use std::fmt::Write;

use semergy_core::MetricsReport;

fn cell(value: Option<f64>) -> String {
    value.map_or_else(|| "n/a".to_string(), |v| format!("{:.1}", 100.0 * v))
}

/// Aligned table, one method per row, values in percent.
pub fn render_text(report: &MetricsReport) -> String {
    let width = report
        .methods
        .iter()
        .map(|m| m.method.as_str().len())
        .max()
        .unwrap_or(0)
        .max("method".len());
    let mut out = String::new();
    let c = report.counts;
    let _ = writeln!(
        out,
        "subset={} granularity={} items={} correct={} incorrect={}",
        report.subset.as_str(),
        report.granularity.as_str(),
        c.total,
        c.positives,
        c.negatives
    );
    let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}  {:>7}", "method", "AUROC", "AUPR", "FPR95");
    for m in &report.methods {
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>7}  {:>7}",
            m.method.as_str(),
            cell(m.auroc),
            cell(m.aupr),
            cell(m.fpr95)
        );
    }
    out
}
