//! CSV and JSON report emission, plus the layer-report parser used by
//! `compare`. Output ordering is stable: lexicographic layer names,
//! ascending k.

use crate::CliError;
use std::fmt::Write as _;
use std::path::Path;
use timber_core::metrics::PassKCurve;
use timber_core::pipeline::{LayerAction, LayerAnalysis, LayerReport};

pub const LAYER_REPORT_FILE: &str = "layer_report.csv";
pub const ANALYZE_CSV_FILE: &str = "analyze.csv";
pub const ANALYZE_SUMMARY_FILE: &str = "analyze_summary.json";
pub const PASSK_CSV_FILE: &str = "passk.csv";
pub const PASSK_JSON_FILE: &str = "passk.json";

fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn opt_num<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

// ─────────────────────────────────────────────────────────────────────────────
// Refine reports
// ─────────────────────────────────────────────────────────────────────────────

pub fn layer_report_csv(reports: &[LayerReport]) -> String {
    let mut out = String::from("layer,rank,erank,k,energy_preserved,seconds,action,note\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{},{}",
            csv_escape(&r.name),
            opt_num(&r.rank),
            opt_num(&r.erank),
            opt_num(&r.k),
            opt_num(&r.energy_preserved),
            r.seconds,
            r.action.as_str(),
            csv_escape(r.note.as_deref().unwrap_or("")),
        );
    }
    out
}

// ─────────────────────────────────────────────────────────────────────────────
// Analyze reports
// ─────────────────────────────────────────────────────────────────────────────

/// Data rows only: tensors that were paired and selected.
pub fn analyze_csv(rows: &[LayerAnalysis]) -> String {
    let mut out = String::from("layer,rank,erank_base,erank_instruct,erank_delta,ratio\n");
    for r in rows {
        if r.action == LayerAction::CopiedUnselected {
            continue;
        }
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            csv_escape(&r.name),
            opt_num(&r.rank),
            opt_num(&r.erank_base),
            opt_num(&r.erank_instruct),
            opt_num(&r.erank_delta),
            opt_num(&r.ratio),
        );
    }
    out
}

/// Linear-interpolation percentile of an ascending-sorted slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn analyze_summary_json(rows: &[LayerAnalysis], warnings: &[String]) -> serde_json::Value {
    let mut ratios: Vec<f64> = rows.iter().filter_map(|r| r.ratio).collect();
    ratios.sort_by(f64::total_cmp);
    let ratio_stats = if ratios.is_empty() {
        serde_json::Value::Null
    } else {
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        serde_json::json!({
            "count": ratios.len(),
            "mean": mean,
            "min": ratios[0],
            "q1": percentile(&ratios, 0.25),
            "median": percentile(&ratios, 0.5),
            "q3": percentile(&ratios, 0.75),
            "max": ratios[ratios.len() - 1],
        })
    };
    let analyzed = rows
        .iter()
        .filter(|r| r.action != LayerAction::CopiedUnselected)
        .count();
    serde_json::json!({
        "tensors": rows.len(),
        "analyzed_layers": analyzed,
        "zero_delta_layers": rows.iter().filter(|r| r.action == LayerAction::CopiedZeroDelta).count(),
        "ratio": ratio_stats,
        "warnings": warnings,
    })
}

// ─────────────────────────────────────────────────────────────────────────────
// Pass@k reports
// ─────────────────────────────────────────────────────────────────────────────

pub fn passk_csv(curve: &PassKCurve) -> String {
    let mut out = String::from("k,pass_at_k\n");
    for (k, est) in curve.k_values.iter().zip(&curve.estimates) {
        let _ = writeln!(out, "{k},{est}");
    }
    out
}

pub fn passk_json(curve: &PassKCurve, mean_at_k: f64) -> serde_json::Value {
    serde_json::json!({
        "n_problems": curve.n_problems,
        "k_values": curve.k_values,
        "estimates": curve.estimates,
        "mean_at_k": mean_at_k,
    })
}

// ─────────────────────────────────────────────────────────────────────────────
// Layer-report parsing (compare)
// ─────────────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ParsedReportRow {
    pub layer: String,
    pub k: Option<f64>,
    pub energy: Option<f64>,
}

/// Minimal CSV field splitter handling the quoting `csv_escape` produces.
fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut field = String::new();
    let mut chars = line.chars().peekable();
    let mut quoted = false;
    while let Some(c) = chars.next() {
        match c {
            '"' if quoted => {
                if chars.peek() == Some(&'"') {
                    chars.next();
                    field.push('"');
                } else {
                    quoted = false;
                }
            }
            '"' if field.is_empty() => quoted = true,
            ',' if !quoted => fields.push(std::mem::take(&mut field)),
            c => field.push(c),
        }
    }
    fields.push(field);
    fields
}

pub fn parse_layer_report(path: &Path) -> Result<Vec<ParsedReportRow>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Input(format!("{} is empty", path.display())))?;
    let columns = split_csv_line(header);
    let find = |name: &str| columns.iter().position(|c| c == name);
    let (layer_col, k_col, energy_col) = match (find("layer"), find("k"), find("energy_preserved"))
    {
        (Some(l), Some(k), Some(e)) => (l, k, e),
        _ => {
            return Err(CliError::Input(format!(
                "{} lacks the layer/k/energy_preserved columns of a layer report",
                path.display()
            )))
        }
    };
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let fields = split_csv_line(line);
        let get = |i: usize| fields.get(i).map(String::as_str).unwrap_or("");
        rows.push(ParsedReportRow {
            layer: get(layer_col).to_string(),
            k: get(k_col).parse().ok(),
            energy: get(energy_col).parse().ok(),
        });
    }
    Ok(rows)
}
