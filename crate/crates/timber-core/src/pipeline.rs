//! Whole-model refinement runs.
//!
//! A run walks the Instruct checkpoint shard by shard, pairs each selected
//! 2-D tensor with its Base twin, decomposes the delta, applies the
//! configured strategy, and writes a drop-in output checkpoint with the
//! same tensor set and shard layout. Everything not selected (or whose
//! delta is exactly zero) carries the Instruct values through unchanged.
//!
//! Layers are independent, so batches of them run on a worker pool; output
//! bytes and reports are emitted in a fixed order regardless of completion
//! order, and the per-layer numerics are sequential, so two runs with
//! different worker counts produce byte-identical checkpoints.

use crate::checkpoint::{
    self, CheckpointHandle, LayerSelection, OutputTensorSpec, PairingWarning,
};
use crate::delta::{apply_refined_delta, compute_delta, linear_merge};
use crate::error::{Error, Result};
use crate::spectral::{self, RefineStrategy, SingularSpectrum};
use crate::tensor::{Dtype, Precision, WeightMatrix};
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

// ─────────────────────────────────────────────────────────────────────────────
// Configuration
// ─────────────────────────────────────────────────────────────────────────────

/// Storage dtype for refined tensors in the output checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputDtypePolicy {
    /// Keep each tensor's dtype from the Instruct checkpoint.
    #[default]
    MatchInstruct,
    /// Widen every refined tensor to F32.
    ForceF32,
}

#[derive(Debug, Clone)]
pub struct RefineConfig {
    pub strategy: RefineStrategy,
    /// Scale factor of the eRank entropy weights.
    pub gamma: f64,
    pub selection: LayerSelection,
    pub compute_precision: Precision,
    pub output_dtype_policy: OutputDtypePolicy,
    /// Worker count for the per-layer pool.
    pub parallelism: usize,
    /// Strict mode aborts on pairing and numerical failures; lenient mode
    /// copies the Instruct tensor through and flags the report entry.
    pub strict: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            strategy: RefineStrategy::Timber { lambda: 0.2 },
            gamma: 1.0,
            selection: LayerSelection::default(),
            compute_precision: Precision::F64,
            output_dtype_policy: OutputDtypePolicy::MatchInstruct,
            parallelism: 1,
            strict: true,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma <= 0.0 {
            return Err(Error::Input(format!(
                "gamma must be finite and > 0, got {}",
                self.gamma
            )));
        }
        if self.parallelism == 0 {
            return Err(Error::Input("parallelism must be at least 1".into()));
        }
        self.strategy.validate()
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Reports
// ─────────────────────────────────────────────────────────────────────────────

/// What happened to one tensor during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerAction {
    Refined,
    CopiedZeroDelta,
    CopiedUnselected,
    /// Lenient-mode fallback after a failure; see the report note.
    CopiedError,
}

impl LayerAction {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerAction::Refined => "refined",
            LayerAction::CopiedZeroDelta => "copied-zero-delta",
            LayerAction::CopiedUnselected => "copied-unselected",
            LayerAction::CopiedError => "copied-error",
        }
    }
}

/// Per-tensor record of a refinement run. Spectral fields are present only
/// when the tensor was actually refined.
#[derive(Debug, Clone)]
pub struct LayerReport {
    pub name: String,
    /// `min(d_1, d_2)` for 2-D tensors.
    pub rank: Option<usize>,
    pub erank: Option<f64>,
    pub k: Option<usize>,
    pub energy_preserved: Option<f64>,
    /// Wall-clock processing time. Excluded from determinism comparisons.
    pub seconds: f64,
    pub action: LayerAction,
    pub note: Option<String>,
}

/// Per-tensor record of an analysis run: eRanks of the Base, Instruct and
/// delta spectra plus the eRank-to-rank ratio of the delta, with the
/// configured strategy's cut and retained energy evaluated hypothetically.
#[derive(Debug, Clone)]
pub struct LayerAnalysis {
    pub name: String,
    pub rank: Option<usize>,
    pub erank_base: Option<f64>,
    pub erank_instruct: Option<f64>,
    pub erank_delta: Option<f64>,
    /// `eRank(W_Δ) / rank`, in (0, 1] when present.
    pub ratio: Option<f64>,
    pub k: Option<usize>,
    pub energy_preserved: Option<f64>,
    pub action: LayerAction,
    pub note: Option<String>,
}

#[derive(Debug)]
pub struct RefineOutcome {
    /// One entry per tensor in the Instruct index, sorted by name.
    pub reports: Vec<LayerReport>,
    pub pairing_warnings: Vec<PairingWarning>,
}

#[derive(Debug)]
pub struct AnalysisOutcome {
    /// One entry per tensor in the Instruct index, sorted by name.
    pub rows: Vec<LayerAnalysis>,
    pub pairing_warnings: Vec<PairingWarning>,
}

// ─────────────────────────────────────────────────────────────────────────────
// Planning
// ─────────────────────────────────────────────────────────────────────────────

enum Task {
    /// Run the full delta-refinement path, writing the given dtype.
    Refine { dtype: Dtype },
    /// Copy the stored bytes through untouched.
    Copy { note: Option<String> },
}

fn plan_tasks(
    instruct: &CheckpointHandle,
    paired: &BTreeSet<String>,
    notes: &BTreeMap<String, String>,
    policy: OutputDtypePolicy,
) -> BTreeMap<String, Task> {
    let mut tasks = BTreeMap::new();
    for (name, info) in instruct.index() {
        let task = if paired.contains(name) {
            match (Dtype::parse(&info.dtype_tag), policy) {
                (Some(_), OutputDtypePolicy::ForceF32) => Task::Refine { dtype: Dtype::F32 },
                (Some(dt), OutputDtypePolicy::MatchInstruct) => Task::Refine { dtype: dt },
                // Selected by name/shape but not loadable as values.
                (None, _) => Task::Copy {
                    note: Some(format!(
                        "unsupported dtype {}, copied verbatim",
                        info.dtype_tag
                    )),
                },
            }
        } else {
            Task::Copy {
                note: notes.get(name).cloned(),
            }
        };
        tasks.insert(name.clone(), task);
    }
    tasks
}

fn output_spec(name: &str, instruct: &CheckpointHandle, task: &Task) -> OutputTensorSpec {
    let info = &instruct.index()[name];
    match task {
        Task::Refine { dtype } => OutputTensorSpec {
            name: name.to_string(),
            dtype_tag: dtype.as_str().to_string(),
            shape: info.shape.clone(),
            byte_len: (info.element_count() * dtype.byte_size()) as u64,
        },
        Task::Copy { .. } => OutputTensorSpec {
            name: name.to_string(),
            dtype_tag: info.dtype_tag.clone(),
            shape: info.shape.clone(),
            byte_len: info.byte_len(),
        },
    }
}

/// Spectral work shared by refinement and analysis: decompose a delta and
/// apply the strategy to its spectrum.
struct SpectralOutcome {
    erank: f64,
    k: usize,
    energy: f64,
    refined: SingularSpectrum,
    factors: spectral::SvdFactors,
}

fn refine_delta_spectrum(
    name: &str,
    dtype: Dtype,
    rows: usize,
    cols: usize,
    delta_data: &[f64],
    config: &RefineConfig,
) -> Result<SpectralOutcome> {
    let factors = spectral::svd_parts(name, dtype, rows, cols, delta_data, config.compute_precision)?;
    let erank = spectral::erank(&factors.spectrum, config.gamma)?;
    let (refined, k) = config.strategy.refine_spectrum(&factors.spectrum, config.gamma)?;
    let energy = spectral::energy_preserved(&factors.spectrum, &refined)?;
    Ok(SpectralOutcome {
        erank,
        k,
        energy,
        refined,
        factors,
    })
}

// ─────────────────────────────────────────────────────────────────────────────
// Refinement run
// ─────────────────────────────────────────────────────────────────────────────

/// Refine every paired selected layer of `instruct` against `base` and
/// write the result. For a single-file Instruct checkpoint `out_path` names
/// the output file, for a sharded one the output directory (same shard
/// file names, manifest copied verbatim).
///
/// Returns one report per Instruct tensor plus any pairing warnings. The
/// run is deterministic for fixed inputs and config, whatever
/// `config.parallelism` says.
pub fn refine_model(
    base: &CheckpointHandle,
    instruct: &CheckpointHandle,
    config: &RefineConfig,
    out_path: impl AsRef<Path>,
) -> Result<RefineOutcome> {
    config.validate()?;
    let out_path = out_path.as_ref();

    let paired_layers = checkpoint::pair_layers(base, instruct, &config.selection, config.strict)?;
    let paired: BTreeSet<String> = paired_layers.pairs.iter().map(|p| p.name.clone()).collect();
    let notes = warning_notes(&paired_layers.warnings);
    let tasks = plan_tasks(instruct, &paired, &notes, config.output_dtype_policy);

    let pool = build_pool(config.parallelism)?;

    if instruct.is_single_file() {
        if let Some(parent) = out_path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
    } else {
        std::fs::create_dir_all(out_path).map_err(|e| Error::io(out_path, e))?;
    }

    let mut reports: Vec<LayerReport> = Vec::with_capacity(instruct.tensor_count());
    for shard in instruct.shard_infos() {
        let target = if instruct.is_single_file() {
            out_path.to_path_buf()
        } else {
            out_path.join(&shard.file_name)
        };
        let specs: Vec<OutputTensorSpec> = shard
            .layout
            .iter()
            .map(|name| output_spec(name, instruct, &tasks[name]))
            .collect();
        let file = File::create(&target).map_err(|e| Error::io(&target, e))?;
        let mut writer = BufWriter::new(file);
        writer
            .write_all(&checkpoint::build_shard_header(&shard.metadata, &specs))
            .map_err(|e| Error::io(&target, e))?;

        // Batches bound peak memory to roughly `parallelism` tensors while
        // keeping the write order fixed.
        for chunk in shard.layout.chunks(config.parallelism) {
            let results: Result<Vec<(Vec<u8>, LayerReport)>> = pool.install(|| {
                use rayon::prelude::*;
                chunk
                    .par_iter()
                    .map(|name| process_layer(name, &tasks[name], base, instruct, config))
                    .collect()
            });
            for (payload, report) in results? {
                writer.write_all(&payload).map_err(|e| Error::io(&target, e))?;
                reports.push(report);
            }
        }
        writer.flush().map_err(|e| Error::io(&target, e))?;
    }

    if let Some((manifest_name, manifest)) = instruct.manifest_json() {
        let target = out_path.join(manifest_name);
        let mut text = serde_json::to_string_pretty(manifest).expect("manifest reserializes");
        text.push('\n');
        std::fs::write(&target, text).map_err(|e| Error::io(&target, e))?;
    }

    let reopened = checkpoint::open_checkpoint(out_path)?;
    if reopened.tensor_count() != instruct.tensor_count() {
        return Err(Error::Integrity(format!(
            "output indexes {} tensors, instruct had {}",
            reopened.tensor_count(),
            instruct.tensor_count()
        )));
    }

    reports.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(RefineOutcome {
        reports,
        pairing_warnings: paired_layers.warnings,
    })
}

fn warning_notes(warnings: &[PairingWarning]) -> BTreeMap<String, String> {
    // Notes attach to tensors that exist in the Instruct index.
    let mut notes = BTreeMap::new();
    for w in warnings {
        match w {
            PairingWarning::MissingInBase { name } => {
                notes.insert(name.clone(), "no matching base tensor, copied".to_string());
            }
            PairingWarning::ShapeMismatch { name, base, instruct } => {
                notes.insert(
                    name.clone(),
                    format!("shape mismatch base {base:?} vs instruct {instruct:?}, copied"),
                );
            }
            PairingWarning::MissingInInstruct { .. } => {}
        }
    }
    notes
}

fn build_pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::Input(format!("failed to build worker pool: {e}")))
}

fn process_layer(
    name: &str,
    task: &Task,
    base: &CheckpointHandle,
    instruct: &CheckpointHandle,
    config: &RefineConfig,
) -> Result<(Vec<u8>, LayerReport)> {
    let started = Instant::now();
    let info = &instruct.index()[name];
    let rank_bound = match info.shape.as_slice() {
        &[r, c] => Some(r.min(c)),
        _ => None,
    };
    let mut report = LayerReport {
        name: name.to_string(),
        rank: rank_bound,
        erank: None,
        k: None,
        energy_preserved: None,
        seconds: 0.0,
        action: LayerAction::CopiedUnselected,
        note: None,
    };

    let dtype = match task {
        Task::Copy { note } => {
            report.note = note.clone();
            let payload = checkpoint::read_tensor_bytes(instruct, name)?;
            report.seconds = started.elapsed().as_secs_f64();
            return Ok((payload, report));
        }
        Task::Refine { dtype } => *dtype,
    };

    // Failures past this point can fall back to copying the Instruct
    // values; failures loading them cannot.
    let instruct_wm = checkpoint::load_tensor(instruct, name)?;
    let outcome = refine_layer_values(name, &instruct_wm, dtype, base, config);
    let (values_dtype_tagged, mut report) = match outcome {
        Ok((wm, rep)) => (wm, rep),
        Err(err) if !config.strict => {
            let mut fallback = instruct_wm;
            fallback.set_dtype(dtype);
            report.action = LayerAction::CopiedError;
            report.note = Some(err.to_string());
            (fallback, report)
        }
        Err(err) => return Err(err),
    };
    report.rank = rank_bound;
    report.seconds = started.elapsed().as_secs_f64();
    Ok((values_dtype_tagged.to_le_bytes(), report))
}

/// The actual refinement math for one paired layer. Returns the output
/// tensor (already tagged with the output dtype) and its report.
fn refine_layer_values(
    name: &str,
    instruct_wm: &WeightMatrix,
    out_dtype: Dtype,
    base: &CheckpointHandle,
    config: &RefineConfig,
) -> Result<(WeightMatrix, LayerReport)> {
    let base_wm = checkpoint::load_tensor(base, name)?;
    let delta = compute_delta(instruct_wm, &base_wm)?;
    let (rows, cols) = instruct_wm.shape_2d().ok_or_else(|| {
        Error::Input(format!("layer {name}: refinement needs a 2-D tensor"))
    })?;

    let mut report = LayerReport {
        name: name.to_string(),
        rank: Some(rows.min(cols)),
        erank: None,
        k: None,
        energy_preserved: None,
        seconds: 0.0,
        action: LayerAction::Refined,
        note: None,
    };

    if delta.is_zero() {
        report.action = LayerAction::CopiedZeroDelta;
        let mut out = instruct_wm.clone();
        out.set_dtype(out_dtype);
        return Ok((out, report));
    }

    let spectral = refine_delta_spectrum(
        name,
        instruct_wm.dtype(),
        rows,
        cols,
        delta.matrix().data(),
        config,
    )?;
    report.erank = Some(spectral.erank);
    report.k = Some(spectral.k);
    report.energy_preserved = Some(spectral.energy);

    let mut out = match config.strategy {
        // Element-wise interpolation is exact at μ ∈ {0, 1}; the spectral
        // route only feeds the report fields.
        RefineStrategy::LinearMerge { mu } => linear_merge(instruct_wm, &base_wm, mu)?,
        _ => apply_refined_delta(&base_wm, &spectral.factors, &spectral.refined)?,
    };
    out.set_dtype(out_dtype);
    Ok((out, report))
}

// ─────────────────────────────────────────────────────────────────────────────
// Analysis run
// ─────────────────────────────────────────────────────────────────────────────

/// Compute per-layer eRank diagnostics for a checkpoint pair without
/// writing anything. The strategy in `config` is evaluated hypothetically
/// to fill the cut index and retained-energy columns.
pub fn analyze_model_pair(
    base: &CheckpointHandle,
    instruct: &CheckpointHandle,
    config: &RefineConfig,
) -> Result<AnalysisOutcome> {
    config.validate()?;
    let paired_layers = checkpoint::pair_layers(base, instruct, &config.selection, config.strict)?;
    let paired: BTreeSet<String> = paired_layers.pairs.iter().map(|p| p.name.clone()).collect();
    let notes = warning_notes(&paired_layers.warnings);

    let names: Vec<String> = instruct.tensor_names().map(str::to_string).collect();
    let pool = build_pool(config.parallelism)?;
    let mut rows = Vec::with_capacity(names.len());
    for chunk in names.chunks(config.parallelism) {
        let batch: Result<Vec<LayerAnalysis>> = pool.install(|| {
            use rayon::prelude::*;
            chunk
                .par_iter()
                .map(|name| analyze_layer(name, &paired, &notes, base, instruct, config))
                .collect()
        });
        rows.extend(batch?);
    }
    Ok(AnalysisOutcome {
        rows,
        pairing_warnings: paired_layers.warnings,
    })
}

fn spectrum_erank_or_none(wm: &WeightMatrix, config: &RefineConfig) -> Result<Option<f64>> {
    let factors = spectral::svd_with_precision(wm, config.compute_precision)?;
    if factors.spectrum.is_zero() {
        return Ok(None);
    }
    Ok(Some(spectral::erank(&factors.spectrum, config.gamma)?))
}

fn analyze_layer(
    name: &str,
    paired: &BTreeSet<String>,
    notes: &BTreeMap<String, String>,
    base: &CheckpointHandle,
    instruct: &CheckpointHandle,
    config: &RefineConfig,
) -> Result<LayerAnalysis> {
    let info = &instruct.index()[name];
    let rank_bound = match info.shape.as_slice() {
        &[r, c] => Some(r.min(c)),
        _ => None,
    };
    let mut row = LayerAnalysis {
        name: name.to_string(),
        rank: rank_bound,
        erank_base: None,
        erank_instruct: None,
        erank_delta: None,
        ratio: None,
        k: None,
        energy_preserved: None,
        action: LayerAction::CopiedUnselected,
        note: notes.get(name).cloned(),
    };
    if !paired.contains(name) {
        return Ok(row);
    }

    let filled = fill_analysis(name, &mut row, base, instruct, config);
    match filled {
        Ok(()) => Ok(row),
        Err(err) if !config.strict => {
            row.action = LayerAction::CopiedError;
            row.note = Some(err.to_string());
            Ok(row)
        }
        Err(err) => Err(err),
    }
}

fn fill_analysis(
    name: &str,
    row: &mut LayerAnalysis,
    base: &CheckpointHandle,
    instruct: &CheckpointHandle,
    config: &RefineConfig,
) -> Result<()> {
    let instruct_wm = checkpoint::load_tensor(instruct, name)?;
    let base_wm = checkpoint::load_tensor(base, name)?;
    row.erank_base = spectrum_erank_or_none(&base_wm, config)?;
    row.erank_instruct = spectrum_erank_or_none(&instruct_wm, config)?;

    let delta = compute_delta(&instruct_wm, &base_wm)?;
    if delta.is_zero() {
        row.action = LayerAction::CopiedZeroDelta;
        return Ok(());
    }
    let (rows_n, cols_n) = instruct_wm.shape_2d().expect("paired tensors are 2-D");
    let spectral = refine_delta_spectrum(
        name,
        instruct_wm.dtype(),
        rows_n,
        cols_n,
        delta.matrix().data(),
        config,
    )?;
    row.erank_delta = Some(spectral.erank);
    row.ratio = Some(spectral.erank / rows_n.min(cols_n) as f64);
    row.k = Some(spectral.k);
    row.energy_preserved = Some(spectral.energy);
    row.action = LayerAction::Refined;
    Ok(())
}

// ─────────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────────
