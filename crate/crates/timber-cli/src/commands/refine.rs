use super::{ensure_out_dir, path_string};
use crate::args::RefineArgs;
use crate::config::{build_config, config_to_json};
use crate::manifest::{timestamp, RunManifest};
use crate::report;
use crate::CliError;
use timber_core::checkpoint::open_checkpoint;
use timber_core::pipeline::refine_model;

pub fn run(args: RefineArgs) -> Result<(), CliError> {
    let started = timestamp();
    let (config, _) = build_config(&args.shared, &args.strategy, args.force_f32)?;

    let base = open_checkpoint(&args.base)?;
    let instruct = open_checkpoint(&args.instruct)?;

    ensure_out_dir(&args.out)?;
    // A single-file checkpoint keeps its file name inside the output
    // directory; a sharded one reuses the directory itself.
    let checkpoint_out = if instruct.is_single_file() {
        let file_name = instruct
            .root()
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model.safetensors".to_string());
        args.out.join(file_name)
    } else {
        args.out.clone()
    };

    let outcome = refine_model(&base, &instruct, &config, &checkpoint_out)?;

    for warning in &outcome.pairing_warnings {
        eprintln!("warning: {warning}");
    }
    if args.shared.verbose {
        for r in &outcome.reports {
            eprintln!(
                "{}: {} erank={:?} k={:?} energy={:?} ({:.3}s)",
                r.name,
                r.action.as_str(),
                r.erank,
                r.k,
                r.energy_preserved,
                r.seconds
            );
        }
    }

    report::write_file(
        &args.out.join(report::LAYER_REPORT_FILE),
        &report::layer_report_csv(&outcome.reports),
    )?;
    RunManifest::new(
        "refine",
        config_to_json(&config),
        vec![path_string(&args.base), path_string(&args.instruct)],
        Some(path_string(&checkpoint_out)),
        started,
    )
    .write(&args.out)?;

    let refined = outcome
        .reports
        .iter()
        .filter(|r| r.action == timber_core::pipeline::LayerAction::Refined)
        .count();
    eprintln!(
        "refined {refined} of {} tensors with {} -> {}",
        outcome.reports.len(),
        config.strategy.tag(),
        checkpoint_out.display()
    );
    Ok(())
}
