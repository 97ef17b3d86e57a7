use std::fmt::Write;

use serde::Serialize;

use super::metrics::{MetricMode, MetricsReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// Fixed-width table, one decimal place.
    Table,
    /// JSON document with full-precision values.
    Json,
}

#[derive(Serialize)]
struct ReportDocument<'a> {
    reports: &'a [MetricsReport],
}

/// Renders reports grouped by mode, rows sorted by level.
pub fn write_report(reports: &[MetricsReport], format: ReportFormat) -> String {
    let mut sorted: Vec<&MetricsReport> = reports.iter().collect();
    sorted.sort_by_key(|r| (mode_rank(r.mode), r.level));
    match format {
        ReportFormat::Json => {
            let owned: Vec<MetricsReport> = sorted.into_iter().cloned().collect();
            let mut out = serde_json::to_string_pretty(&ReportDocument { reports: &owned }).expect("reports serialize");
            out.push('\n');
            out
        }
        ReportFormat::Table => {
            let mut out = String::new();
            let mut current = None;
            for r in sorted {
                if current != Some(r.mode) {
                    if current.is_some() {
                        out.push('\n');
                    }
                    current = Some(r.mode);
                    writeln!(out, "Performance (%) by prompt level, {} rates", r.mode).unwrap();
                    writeln!(
                        out,
                        "{:>5} {:>6} {:>6} {:>6} {:>6} {:>6}",
                        "level", "n", "ACC", "FPR", "MDR", "UR"
                    )
                    .unwrap();
                }
                write!(
                    out,
                    "{:>5} {:>6} {:>6.1} {:>6.1} {:>6.1} {:>6.1}",
                    r.level.get(),
                    r.total,
                    r.acc,
                    r.fpr,
                    r.mdr,
                    r.ur
                )
                .unwrap();
                if r.zero_denominator && r.mode == MetricMode::ClassConditional {
                    out.push_str("  (empty class, rate reported as 0)");
                }
                out.push('\n');
            }
            out
        }
    }
}

fn mode_rank(mode: MetricMode) -> u8 {
    match mode {
        MetricMode::PopulationRelative => 0,
        MetricMode::ClassConditional => 1,
    }
}

/// Parses the numeric rows of a rendered table: `(level, n, [acc, fpr, mdr, ur])`.
pub fn parse_table_rows(table: &str) -> Vec<(u8, usize, [f64; 4])> {
    table
        .lines()
        .filter_map(|line| {
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() < 6 {
                return None;
            }
            let level = cols[0].parse().ok()?;
            let n = cols[1].parse().ok()?;
            let mut vals = [0.0; 4];
            for (v, c) in vals.iter_mut().zip(&cols[2..6]) {
                *v = c.parse().ok()?;
            }
            Some((level, n, vals))
        })
        .collect()
}
