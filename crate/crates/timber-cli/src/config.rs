//! Flag/file/default resolution into a `RefineConfig`.

use crate::args::{SharedArgs, StrategyArgs};
use crate::CliError;
use serde::Deserialize;
use std::path::Path;
use timber_core::checkpoint::LayerSelection;
use timber_core::pipeline::{OutputDtypePolicy, RefineConfig};
use timber_core::tensor::Precision;
use timber_core::RefineStrategy;

/// Optional TOML configuration mirroring the long flags.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub gamma: Option<f64>,
    pub precision: Option<String>,
    pub include: Option<Vec<String>>,
    pub exclude: Option<Vec<String>>,
    pub strict: Option<bool>,
    pub workers: Option<usize>,
    pub strategy: Option<String>,
    pub lambda: Option<f64>,
    pub ratio: Option<f64>,
    pub energy: Option<f64>,
    pub mu: Option<f64>,
    pub force_f32: Option<bool>,
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Input(format!("bad config {}: {e}", path.display())))
}

/// Pick a strategy from flags and file, rejecting parameter flags that do
/// not belong to it.
pub fn resolve_strategy(args: &StrategyArgs, file: &FileConfig) -> Result<RefineStrategy, CliError> {
    let name = args
        .strategy
        .clone()
        .or_else(|| file.strategy.clone())
        .unwrap_or_else(|| "timber".to_string());

    let reject_foreign = |allowed: &str| -> Result<(), CliError> {
        for (flag, value) in [
            ("--lambda", args.lambda.is_some()),
            ("--ratio", args.ratio.is_some()),
            ("--energy", args.energy.is_some()),
            ("--mu", args.mu.is_some()),
        ] {
            if value && flag != allowed {
                return Err(CliError::Usage(format!(
                    "{flag} does not apply to --strategy {name}"
                )));
            }
        }
        Ok(())
    };

    let strategy = match name.as_str() {
        "timber" => {
            reject_foreign("--lambda")?;
            RefineStrategy::Timber {
                lambda: args.lambda.or(file.lambda).unwrap_or(0.2),
            }
        }
        "timber-l" => {
            reject_foreign("")?;
            RefineStrategy::TimberL
        }
        "truncate-r" => {
            reject_foreign("--ratio")?;
            let rank_ratio = args.ratio.or(file.ratio).ok_or_else(|| {
                CliError::Usage("--strategy truncate-r needs --ratio".to_string())
            })?;
            RefineStrategy::TruncateR { rank_ratio }
        }
        "truncate-e" => {
            reject_foreign("--energy")?;
            let energy_ratio = args.energy.or(file.energy).ok_or_else(|| {
                CliError::Usage("--strategy truncate-e needs --energy".to_string())
            })?;
            RefineStrategy::TruncateE { energy_ratio }
        }
        "merge" => {
            reject_foreign("--mu")?;
            let mu = args
                .mu
                .or(file.mu)
                .ok_or_else(|| CliError::Usage("--strategy merge needs --mu".to_string()))?;
            RefineStrategy::LinearMerge { mu }
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown strategy {other}; expected timber, timber-l, truncate-r, truncate-e or merge"
            )))
        }
    };
    strategy.validate().map_err(CliError::from)?;
    Ok(strategy)
}

pub fn build_config(
    shared: &SharedArgs,
    strategy_args: &StrategyArgs,
    force_f32_flag: bool,
) -> Result<(RefineConfig, FileConfig), CliError> {
    let file = load_file_config(shared.config.as_deref())?;
    let strategy = resolve_strategy(strategy_args, &file)?;

    let mut selection = LayerSelection::default();
    if let Some(include) = file.include.clone() {
        selection.include_patterns = include;
    }
    if !shared.include.is_empty() {
        selection.include_patterns = shared.include.clone();
    }
    if let Some(exclude) = file.exclude.clone() {
        selection.exclude_patterns = exclude;
    }
    if !shared.exclude.is_empty() {
        selection.exclude_patterns = shared.exclude.clone();
    }

    let precision_tag = shared
        .precision
        .clone()
        .or_else(|| file.precision.clone())
        .unwrap_or_else(|| "f64".to_string());
    let compute_precision = Precision::parse(&precision_tag)
        .ok_or_else(|| CliError::Usage(format!("unknown precision {precision_tag}")))?;

    let strict = if shared.strict {
        true
    } else if shared.lenient {
        false
    } else {
        file.strict.unwrap_or(true)
    };

    let parallelism = shared
        .workers
        .or(file.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if parallelism == 0 {
        return Err(CliError::Usage("--workers must be at least 1".to_string()));
    }

    let force_f32 = force_f32_flag || file.force_f32.unwrap_or(false);

    let config = RefineConfig {
        strategy,
        gamma: shared.gamma.or(file.gamma).unwrap_or(1.0),
        selection,
        compute_precision,
        output_dtype_policy: if force_f32 {
            OutputDtypePolicy::ForceF32
        } else {
            OutputDtypePolicy::MatchInstruct
        },
        parallelism,
        strict,
    };
    config.validate().map_err(CliError::from)?;
    Ok((config, file))
}

/// The resolved settings as a JSON object for the run manifest. The same
/// values, fed back as flags, reproduce the run.
pub fn config_to_json(config: &RefineConfig) -> serde_json::Value {
    let mut obj = serde_json::Map::new();
    obj.insert("strategy".into(), config.strategy.tag().into());
    match config.strategy {
        RefineStrategy::Timber { lambda } => {
            obj.insert("lambda".into(), lambda.into());
        }
        RefineStrategy::TimberL => {}
        RefineStrategy::TruncateR { rank_ratio } => {
            obj.insert("ratio".into(), rank_ratio.into());
        }
        RefineStrategy::TruncateE { energy_ratio } => {
            obj.insert("energy".into(), energy_ratio.into());
        }
        RefineStrategy::LinearMerge { mu } => {
            obj.insert("mu".into(), mu.into());
        }
    }
    obj.insert("gamma".into(), config.gamma.into());
    obj.insert(
        "precision".into(),
        config.compute_precision.as_str().into(),
    );
    obj.insert(
        "include".into(),
        config.selection.include_patterns.clone().into(),
    );
    obj.insert(
        "exclude".into(),
        config.selection.exclude_patterns.clone().into(),
    );
    obj.insert("strict".into(), config.strict.into());
    obj.insert("workers".into(), config.parallelism.into());
    obj.insert(
        "force_f32".into(),
        matches!(config.output_dtype_policy, OutputDtypePolicy::ForceF32).into(),
    );
    serde_json::Value::Object(obj)
}
