//! Result tables: JSON-lines machine format plus aligned text rendering.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::io::atomic_write_bytes;
use crate::synth::SparsityTier;

/// One aggregated result line: a method evaluated on one split, optionally
/// restricted to one sparsity tier (`None` pools all tiers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier: Option<SparsityTier>,
    /// Mean over scenarios of the per-scenario mean TRE (mm).
    pub mean_tre: f64,
    /// Standard deviation over scenarios of the per-scenario mean TRE (mm).
    pub std_tre: f64,
    /// Mean TRE over surface vertices; absent if no scenario has any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_tre: Option<f64>,
    /// Mean TRE over interior vertices; absent if no scenario has any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_tre: Option<f64>,
    /// Mean wall-clock registration time per scenario (s). Only the timing
    /// table carries it; deterministic result tables leave it unset because
    /// wall time is not reproducible bit-for-bit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_s: Option<f64>,
}

impl ResultRow {
    pub fn validate(&self) -> Result<()> {
        if self.method.is_empty() || self.split.is_empty() {
            return Err(Error::invalid("result row needs a method and a split name"));
        }
        let named = [
            ("mean_tre", Some(self.mean_tre)),
            ("std_tre", Some(self.std_tre)),
            ("edge_tre", self.edge_tre),
            ("inner_tre", self.inner_tre),
            ("runtime_s", self.runtime_s),
        ];
        for (name, value) in named {
            if let Some(v) = value {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::invalid(format!(
                        "result row field {name} must be finite and >= 0, got {v}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Serializes rows as one JSON object per line.
pub fn emit_jsonl(rows: &[ResultRow]) -> Result<String> {
    let mut out = String::new();
    for row in rows {
        row.validate()?;
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses rows from JSON-lines text (blank lines ignored).
pub fn parse_jsonl(text: &str) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ResultRow = serde_json::from_str(line)?;
        row.validate()?;
        rows.push(row);
    }
    Ok(rows)
}

fn fmt_opt(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    }
}

/// Renders rows as an aligned text table (presentation only; the JSON-lines
/// form is the machine-readable source of truth).
pub fn emit_text(rows: &[ResultRow]) -> String {
    let header = [
        "method", "split", "tier", "mean_tre", "std_tre", "edge_tre", "inner_tre", "runtime_s",
    ];
    let mut cells: Vec<[String; 8]> = Vec::with_capacity(rows.len());
    for r in rows {
        cells.push([
            r.method.clone(),
            r.split.clone(),
            r.tier.map_or_else(|| "all".to_string(), |t| t.to_string()),
            format!("{:.4}", r.mean_tre),
            format!("{:.4}", r.std_tre),
            fmt_opt(r.edge_tre),
            fmt_opt(r.inner_tre),
            fmt_opt(r.runtime_s),
        ]);
    }
    let mut widths: [usize; 8] = header.map(str::len);
    for row in &cells {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let render = |out: &mut String, cols: &[String; 8]| {
        for (i, (cell, w)) in cols.iter().zip(&widths).enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            out.push_str(cell);
            out.extend(std::iter::repeat(' ').take(w - cell.len()));
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    render(&mut out, &header.map(str::to_string));
    let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    out.extend(std::iter::repeat('-').take(rule));
    out.push('\n');
    for row in &cells {
        render(&mut out, row);
    }
    out
}

/// Writes `<stem>.jsonl` (machine) and `<stem>.txt` (aligned text) under
/// `dir`, atomically.
pub fn save_table(dir: &Path, stem: &str, rows: &[ResultRow]) -> Result<()> {
    atomic_write_bytes(&dir.join(format!("{stem}.jsonl")), emit_jsonl(rows)?.as_bytes())?;
    atomic_write_bytes(&dir.join(format!("{stem}.txt")), emit_text(rows).as_bytes())
}

/// Reads rows back from a `.jsonl` table file.
pub fn load_table(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path)?;
    parse_jsonl(&text).map_err(|e| match e {
        Error::Json(inner) => Error::Format {
            path: path.display().to_string(),
            detail: inner.to_string(),
        },
        other => other,
    })
}
