use crate::args::CompareArgs;
use crate::manifest::{timestamp, RunManifest};
use crate::report::{parse_layer_report, write_file, ParsedReportRow};
use crate::CliError;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

fn label_for(path: &Path, used: &mut BTreeSet<String>) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".to_string());
    // layer_report.csv is the conventional name; disambiguate with the
    // parent directory when stems collide.
    let mut label = if stem == "layer_report" {
        path.parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or(stem.clone())
    } else {
        stem
    };
    let base = label.clone();
    let mut n = 2;
    while !used.insert(label.clone()) {
        label = format!("{base}_{n}");
        n += 1;
    }
    label
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn run(args: CompareArgs) -> Result<(), CliError> {
    let started = timestamp();
    let mut used = BTreeSet::new();
    let mut runs: Vec<(String, BTreeMap<String, ParsedReportRow>)> = Vec::new();
    for path in &args.reports {
        let label = label_for(path, &mut used);
        let rows = parse_layer_report(path)?;
        let by_layer: BTreeMap<String, ParsedReportRow> =
            rows.into_iter().map(|r| (r.layer.clone(), r)).collect();
        runs.push((label, by_layer));
    }

    // Join on the intersection; report what fell out.
    let mut common: BTreeSet<String> = runs[0].1.keys().cloned().collect();
    for (_, rows) in &runs[1..] {
        common = common
            .intersection(&rows.keys().cloned().collect())
            .cloned()
            .collect();
    }
    for (label, rows) in &runs {
        let missing: Vec<&String> = rows.keys().filter(|k| !common.contains(*k)).collect();
        if !missing.is_empty() {
            eprintln!(
                "warning: {label} has {} layers absent from the other reports (joining on the intersection)",
                missing.len()
            );
        }
    }

    let mut out = String::from("layer");
    for (label, _) in &runs {
        let _ = write!(out, ",{label}_k,{label}_energy_preserved");
    }
    out.push('\n');
    for layer in &common {
        let _ = write!(out, "{layer}");
        for (_, rows) in &runs {
            let row = &rows[layer];
            let _ = write!(out, ",{},{}", fmt_opt(row.k), fmt_opt(row.energy));
        }
        out.push('\n');
    }
    // One aggregate row per input: mean k and mean energy over the joined
    // layers, in that run's own columns.
    for (agg_idx, (label, rows)) in runs.iter().enumerate() {
        let ks: Vec<f64> = common.iter().filter_map(|l| rows[l].k).collect();
        let es: Vec<f64> = common.iter().filter_map(|l| rows[l].energy).collect();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                None
            } else {
                Some(v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        let _ = write!(out, "aggregate:{label}");
        for idx in 0..runs.len() {
            if idx == agg_idx {
                let _ = write!(out, ",{},{}", fmt_opt(mean(&ks)), fmt_opt(mean(&es)));
            } else {
                out.push_str(",,");
            }
        }
        out.push('\n');
    }

    match &args.out {
        Some(path) => {
            write_file(path, &out)?;
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                RunManifest::new(
                    "compare",
                    serde_json::json!({ "labels": used }),
                    args.reports.iter().map(|p| p.display().to_string()).collect(),
                    Some(path.display().to_string()),
                    started,
                )
                .write(dir)?;
            }
        }
        None => print!("{out}"),
    }
    eprintln!("compared {} runs over {} shared layers", runs.len(), common.len());
    Ok(())
}
