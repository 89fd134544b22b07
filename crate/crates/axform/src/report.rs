//! CSV outputs: loss curves and metric reports.

use std::fmt::Write;

/// Fixed 17-significant-digit rendering used by every text output.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn loss_csv(train: &[f64], val: &[f64]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for (e, (t, v)) in train.iter().zip(val).enumerate() {
        writeln!(s, "{},{},{}", e + 1, fmt17(*t), fmt17(*v)).unwrap();
    }
    s
}

/// One row of a metrics report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub category: String,
    pub value: f64,
    /// Display factor matching the published tables.
    pub scale: f64,
}

pub fn report_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("metric,category,value,scale,scaled\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.metric, r.category, fmt17(r.value), fmt17(r.scale), fmt17(r.value * r.scale)).unwrap();
    }
    s
}

/// Parses a report back into rows (used by tests and tooling).
pub fn parse_report(text: &str) -> Option<Vec<MetricRow>> {
    let mut lines = text.lines();
    if lines.next()? != "metric,category,value,scale,scaled" {
        return None;
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return None;
            }
            Some(MetricRow { metric: f[0].into(), category: f[1].into(), value: f[2].parse().ok()?, scale: f[3].parse().ok()? })
        })
        .collect()
}
