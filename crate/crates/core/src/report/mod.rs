//! Text and CSV renderings of decomposition results and diagnostics.
//!
//! Everything here is pure formatting: the same inputs always give the same
//! bytes.

mod manifest;
mod plots;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use manifest::{sha256_hex, ArtifactEntry, ArtifactWriter, RunManifest, MANIFEST_SCHEMA_VERSION};
pub use plots::{
    calibration_csv, component_histograms, histogram, histogram_csv, scatter_csv, scatter_sample, HistogramBin, ScatterPoint,
};

use crate::decomposition::{DecompositionResult, NeutralDecomposition, Shares, TableRow};
use crate::diagnostics::{DidMatrix, RewriteMean};
use crate::error::Result;
use crate::inference::{BootstrapSummary, DECOMPOSITION_COLUMNS};

/// Three decimals, with negative zero printed as zero.
pub fn fmt3(x: f64) -> String {
    let s = format!("{x:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

/// Estimate with its standard error in parentheses, e.g. `0.688 (0.007)`.
pub fn cell(estimate: f64, se: Option<f64>) -> String {
    match se {
        Some(se) => format!("{} ({})", fmt3(estimate), fmt3(se)),
        None => fmt3(estimate),
    }
}

/// One decomposition row ready for printing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    /// Total, content, style, tilt. `None` for a row that failed.
    pub levels: Option<[f64; 4]>,
    pub shares: Option<Shares>,
    /// Standard errors by column name.
    pub se: BTreeMap<String, f64>,
    pub note: Option<String>,
}

impl ReportRow {
    pub fn from_levels(label: &str, total: f64, content: f64, style: f64, tilt: f64) -> ReportRow {
        ReportRow {
            label: label.into(),
            levels: Some([total, content, style, tilt]),
            shares: Shares::of(total, content, style, tilt),
            se: BTreeMap::new(),
            note: None,
        }
    }

    pub fn from_result(label: &str, r: &DecompositionResult) -> ReportRow {
        ReportRow {
            shares: r.shares,
            ..ReportRow::from_levels(label, r.total_gap, r.content, r.style, r.tilt)
        }
    }

    pub fn from_table_row(row: &TableRow) -> ReportRow {
        match &row.result {
            Ok(r) => ReportRow::from_result(&row.label, r),
            Err(why) => ReportRow {
                label: row.label.clone(),
                levels: None,
                shares: None,
                se: BTreeMap::new(),
                note: Some(why.clone()),
            },
        }
    }

    /// Attach SEs for the statistics named `{label}/{column}`.
    pub fn with_bootstrap(mut self, summary: &BootstrapSummary) -> ReportRow {
        for col in DECOMPOSITION_COLUMNS {
            if let Some(s) = summary.get(&format!("{}/{col}", self.label)) {
                if s.replicates > 1 {
                    self.se.insert(col.to_string(), s.se);
                }
            }
        }
        self
    }

    /// Printed cells in [`DECOMPOSITION_COLUMNS`] order; shares are blank
    /// when suppressed.
    pub fn cells(&self) -> Vec<Option<(f64, Option<f64>)>> {
        let Some(l) = self.levels else {
            return vec![None; DECOMPOSITION_COLUMNS.len()];
        };
        let shares = self.shares.map(|s| [s.content, s.style, s.tilt]);
        DECOMPOSITION_COLUMNS
            .iter()
            .enumerate()
            .map(|(j, col)| {
                let v = if j < 4 { Some(l[j]) } else { shares.map(|s| s[j - 4]) };
                v.map(|v| (v, self.se.get(*col).copied()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionTable {
    pub title: String,
    pub rows: Vec<ReportRow>,
}

impl DecompositionTable {
    pub fn new(title: &str, rows: Vec<ReportRow>) -> Self {
        DecompositionTable {
            title: title.into(),
            rows,
        }
    }

    pub fn from_rows(title: &str, rows: &[TableRow], boot: Option<&BootstrapSummary>) -> Self {
        let rows = rows
            .iter()
            .map(|r| {
                let row = ReportRow::from_table_row(r);
                match boot {
                    Some(b) => row.with_bootstrap(b),
                    None => row,
                }
            })
            .collect();
        DecompositionTable::new(title, rows)
    }

    /// One CSV line per row; cells read `estimate (se)`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["label"];
        header.extend(DECOMPOSITION_COLUMNS);
        header.push("note");
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.label.clone()];
            rec.extend(r.cells().into_iter().map(|c| c.map(|(v, se)| cell(v, se)).unwrap_or_default()));
            rec.push(r.note.clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
        finish(w)
    }

    /// Fixed-width table with SEs on a second line beneath the estimates.
    pub fn to_text(&self) -> String {
        let label_w = self.rows.iter().map(|r| r.label.len()).chain([5]).max().unwrap_or(5);
        let col_w = DECOMPOSITION_COLUMNS.iter().map(|c| c.len()).max().unwrap_or(0).max(9);
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.title);
        let _ = write!(out, "{:label_w$}", "");
        for c in DECOMPOSITION_COLUMNS {
            let _ = write!(out, "  {c:>col_w$}");
        }
        out.push('\n');
        for r in &self.rows {
            let cells = r.cells();
            let _ = write!(out, "{:label_w$}", r.label);
            if r.levels.is_none() {
                let _ = writeln!(out, "  not estimated: {}", r.note.as_deref().unwrap_or(""));
                continue;
            }
            for c in &cells {
                let s = c.map(|(v, _)| fmt3(v)).unwrap_or_default();
                let _ = write!(out, "  {s:>col_w$}");
            }
            out.push('\n');
            if cells.iter().any(|c| matches!(c, Some((_, Some(_))))) {
                let _ = write!(out, "{:label_w$}", "");
                for c in &cells {
                    let s = match c {
                        Some((_, Some(se))) => format!("({})", fmt3(*se)),
                        _ => String::new(),
                    };
                    let _ = write!(out, "  {s:>col_w$}");
                }
                out.push('\n');
            }
        }
        out
    }
}

pub(crate) fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| crate::error::Error::Serde(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// DiD grid: one line per row level, one column per column level. Upper
/// cells read `estimate [lo, hi]` with `*` when flagged; lower cells hold
/// `|delta_H|`; the diagonal is blank.
pub fn did_grid_csv(m: &DidMatrix) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["k".to_string()];
    header.extend(m.levels.iter().map(|l| l.to_string()));
    w.write_record(&header)?;
    for &r in &m.levels {
        let mut rec = vec![r.to_string()];
        for &c in &m.levels {
            rec.push(match m.cell(r, c) {
                Some(x) if r < c => format!(
                    "{} [{}, {}]{}",
                    fmt3(x.estimate),
                    fmt3(x.ci_low),
                    fmt3(x.ci_high),
                    if x.flagged { "*" } else { "" }
                ),
                Some(x) => fmt3(x.estimate),
                None => String::new(),
            });
        }
        w.write_record(&rec)?;
    }
    finish(w)
}

/// Every DiD cell with its full detail, one line each.
pub fn did_cells_csv(m: &DidMatrix) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in &m.cells {
        w.serialize(c)?;
    }
    finish(w)
}

/// Long-format rewrite-mean profile: kind, group, n, mean, se, CI.
pub fn rewrite_means_csv(means: &[RewriteMean]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["kind", "group", "n", "mean", "se", "ci_low", "ci_high"])?;
    for m in means {
        w.write_record([
            m.kind.to_string(),
            m.group.to_string(),
            m.n.to_string(),
            m.mean.to_string(),
            m.se.to_string(),
            m.ci_low.to_string(),
            m.ci_high.to_string(),
        ])?;
    }
    finish(w)
}

/// Neutral-baseline table: the decomposition row plus the per-group style
/// premium of originals over neutral rewrites.
pub fn neutral_report(n: &NeutralDecomposition) -> Result<(DecompositionTable, String)> {
    let mut row = ReportRow::from_levels("Neutral baseline", n.total_gap, n.content, n.style, n.tilt);
    row.shares = n.shares;
    let table = DecompositionTable::new("Neutral-baseline decomposition", vec![row]);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["group", "n", "mean_original", "mean_neutral", "style_premium"])?;
    for (g, label, count) in [(0, "HIGH", n.n_high), (1, "LOW", n.n_low)] {
        w.write_record([
            label.to_string(),
            count.to_string(),
            n.mu_orig[g][0].to_string(),
            n.mu_neutral[g][0].to_string(),
            n.style_premium[g].to_string(),
        ])?;
    }
    Ok((table, finish(w)?))
}

/// Bootstrap statistics, one line each.
pub fn bootstrap_csv(s: &BootstrapSummary) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["name", "estimate", "se", "ci_low", "ci_high", "replicates", "dropped"])?;
    for st in &s.stats {
        w.write_record([
            st.name.clone(),
            st.estimate.map(|v| v.to_string()).unwrap_or_default(),
            st.se.to_string(),
            st.ci_low.to_string(),
            st.ci_high.to_string(),
            st.replicates.to_string(),
            st.dropped.to_string(),
        ])?;
    }
    finish(w)
}
