//! Metrics stream: one CSV line per evaluation point.
//!
//! Every field except `wall_ms` is a pure function of (config, seed);
//! `wall_ms` is measured wall time and is the only nondeterministic column.
//! Use [`strip_wall_ms`] before byte-comparing streams.

use std::io::Write;
use std::path::Path;

pub const METRICS_HEADER: &str =
    "iteration,train_loss,val_accuracy,cder,disambiguation_rate,epsilon_spent,wall_ms";

/// One evaluation point of a training run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub cder: f64,
    pub disambiguation_rate: f64,
    /// Infinite when DP is disabled (noise multiplier 0).
    pub epsilon_spent: f64,
    pub wall_ms: u64,
}

impl MetricsRow {
    fn to_csv_line(self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            self.train_loss,
            self.val_accuracy,
            self.cder,
            self.disambiguation_rate,
            self.epsilon_spent,
            self.wall_ms
        )
    }
}

/// Render rows as a CSV document with header.
pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(rows.len() * 64 + METRICS_HEADER.len() + 1);
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

/// Write the stream to a file.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(metrics_to_csv(rows).as_bytes())
}

/// Parse a stream produced by [`metrics_to_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => return Err(format!("bad metrics header: {other:?}")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(format!("line {}: expected 7 fields, got {}", i + 2, fields.len()));
        }
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| format!("line {}: {e}", i + 2));
        rows.push(MetricsRow {
            iteration: fields[0].parse().map_err(|e| format!("line {}: {e}", i + 2))?,
            train_loss: parse_f(fields[1])?,
            val_accuracy: parse_f(fields[2])?,
            cder: parse_f(fields[3])?,
            disambiguation_rate: parse_f(fields[4])?,
            epsilon_spent: parse_f(fields[5])?,
            wall_ms: fields[6].parse().map_err(|e| format!("line {}: {e}", i + 2))?,
        });
    }
    Ok(rows)
}

/// Drop the wall_ms column from a stream, for determinism comparisons.
pub fn strip_wall_ms(text: &str) -> String {
    text.lines()
        .map(|line| match line.rfind(',') {
            Some(idx) => &line[..idx],
            None => line,
        })
        .map(|l| format!("{l}\n"))
        .collect()
}
