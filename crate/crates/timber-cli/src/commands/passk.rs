use super::{ensure_out_dir, path_string};
use crate::args::PasskArgs;
use crate::manifest::{timestamp, RunManifest};
use crate::report;
use crate::CliError;
use std::fs::File;
use std::io::BufReader;
use timber_core::metrics::{mean_at_k, pass_k_curve, read_rollout_log};

pub fn run(args: PasskArgs) -> Result<(), CliError> {
    let started = timestamp();
    let file = File::open(&args.log)
        .map_err(|e| CliError::Input(format!("cannot read log {}: {e}", args.log.display())))?;
    let records = read_rollout_log(BufReader::new(file))?;
    let curve = pass_k_curve(&records, &args.k)?;
    let mean = mean_at_k(&records)?;

    let csv = report::passk_csv(&curve);
    match &args.out {
        Some(dir) => {
            ensure_out_dir(dir)?;
            report::write_file(&dir.join(report::PASSK_CSV_FILE), &csv)?;
            let json = report::passk_json(&curve, mean);
            report::write_file(
                &dir.join(report::PASSK_JSON_FILE),
                &format!("{}\n", serde_json::to_string_pretty(&json).expect("curve serializes")),
            )?;
            RunManifest::new(
                "passk",
                serde_json::json!({ "k": curve.k_values }),
                vec![path_string(&args.log)],
                Some(path_string(dir)),
                started,
            )
            .write(dir)?;
        }
        None => print!("{csv}"),
    }
    eprintln!(
        "{} problems; mean@k = {mean}; pass@k over k = {:?}",
        curve.n_problems, curve.k_values
    );
    Ok(())
}
