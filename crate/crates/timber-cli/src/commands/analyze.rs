use super::{ensure_out_dir, path_string};
use crate::args::AnalyzeArgs;
use crate::config::{build_config, config_to_json};
use crate::manifest::{timestamp, RunManifest};
use crate::report;
use crate::CliError;
use timber_core::checkpoint::open_checkpoint;
use timber_core::pipeline::analyze_model_pair;

pub fn run(args: AnalyzeArgs) -> Result<(), CliError> {
    let started = timestamp();
    let (config, _) = build_config(&args.shared, &args.strategy, false)?;

    let base = open_checkpoint(&args.base)?;
    let instruct = open_checkpoint(&args.instruct)?;
    let outcome = analyze_model_pair(&base, &instruct, &config)?;

    for warning in &outcome.pairing_warnings {
        eprintln!("warning: {warning}");
    }
    if args.shared.verbose {
        for row in &outcome.rows {
            eprintln!(
                "{}: action={} erank_delta={:?} ratio={:?}",
                row.name,
                row.action.as_str(),
                row.erank_delta,
                row.ratio
            );
        }
    }

    ensure_out_dir(&args.out)?;
    report::write_file(
        &args.out.join(report::ANALYZE_CSV_FILE),
        &report::analyze_csv(&outcome.rows),
    )?;
    let warnings: Vec<String> = outcome.pairing_warnings.iter().map(|w| w.to_string()).collect();
    let summary = report::analyze_summary_json(&outcome.rows, &warnings);
    report::write_file(
        &args.out.join(report::ANALYZE_SUMMARY_FILE),
        &format!("{}\n", serde_json::to_string_pretty(&summary).expect("summary serializes")),
    )?;

    RunManifest::new(
        "analyze",
        config_to_json(&config),
        vec![path_string(&args.base), path_string(&args.instruct)],
        Some(path_string(&args.out)),
        started,
    )
    .write(&args.out)?;

    eprintln!(
        "analyzed {} of {} tensors -> {}",
        summary["analyzed_layers"],
        outcome.rows.len(),
        args.out.display()
    );
    Ok(())
}
