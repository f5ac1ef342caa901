//! Safetensors checkpoint I/O.
//!
//! Container layout:
//!
//! ```text
//! ┌──────────────┬──────────────────────┬────────────────────────┐
//! │ 8 bytes      │ N bytes              │ raw tensor data        │
//! │ header size  │ JSON header (UTF-8)  │ (little-endian)        │
//! │ (u64 LE)     │                      │                        │
//! └──────────────┴──────────────────────┴────────────────────────┘
//! ```
//!
//! The JSON header maps each tensor name to `{dtype, shape, data_offsets}`,
//! with offsets relative to the start of the data section, plus an optional
//! `__metadata__` string map. A sharded checkpoint is a directory holding
//! several containers and a `*.safetensors.index.json` manifest whose
//! `weight_map` assigns each tensor to its shard; any extra manifest keys
//! are preserved on write.
//!
//! Opening validates the whole index (bounds, overlaps, duplicate names,
//! dangling manifest entries) without touching tensor data; tensors load
//! one at a time. Unknown dtypes stay in the index and copy through
//! verbatim, but refuse to load as values.

mod selection;

pub use selection::{wildcard_match, LayerSelection};

use crate::error::{Error, Result};
use crate::tensor::{Dtype, WeightMatrix};
use serde_json::{json, Map, Value};
use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

/// Upper bound on a plausible JSON header.
const MAX_HEADER_BYTES: u64 = 100_000_000;

/// Conventional manifest name used when this crate creates a sharded
/// checkpoint.
pub const DEFAULT_INDEX_NAME: &str = "model.safetensors.index.json";

// ─────────────────────────────────────────────────────────────────────────────
// Handle types
// ─────────────────────────────────────────────────────────────────────────────

/// Where one tensor lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    /// Index into the handle's shard list.
    pub shard: usize,
    /// Raw dtype tag from the header (`"BF16"`, `"F16"`, `"F32"`, …).
    pub dtype_tag: String,
    pub shape: Vec<usize>,
    /// Byte range relative to the shard's data section.
    pub offsets: (u64, u64),
}

impl TensorInfo {
    pub fn dtype(&self, name: &str) -> Result<Dtype> {
        Dtype::parse(&self.dtype_tag).ok_or_else(|| Error::UnsupportedDtype {
            tensor: name.to_string(),
            dtype: self.dtype_tag.clone(),
        })
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.offsets.1 - self.offsets.0
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ShardInfo {
    pub(crate) path: PathBuf,
    pub(crate) file_name: String,
    /// Absolute file offset where the data section starts.
    pub(crate) data_start: u64,
    pub(crate) metadata: BTreeMap<String, String>,
    /// Tensor names in data-offset order; write layout follows it.
    pub(crate) layout: Vec<String>,
}

/// An open, validated checkpoint. Read-only and shareable across threads;
/// every tensor read opens its own file handle.
#[derive(Debug)]
pub struct CheckpointHandle {
    root: PathBuf,
    shards: Vec<ShardInfo>,
    index: BTreeMap<String, TensorInfo>,
    /// Original manifest JSON with its file name, for sharded checkpoints.
    manifest: Option<(String, Value)>,
}

impl CheckpointHandle {
    pub fn root(&self) -> &Path {
        &self.root
    }

    /// True when the checkpoint is a single container file.
    pub fn is_single_file(&self) -> bool {
        self.manifest.is_none()
    }

    pub fn shard_paths(&self) -> Vec<&Path> {
        self.shards.iter().map(|s| s.path.as_path()).collect()
    }

    pub fn tensor_count(&self) -> usize {
        self.index.len()
    }

    /// Names in lexicographic order.
    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn info(&self, name: &str) -> Option<&TensorInfo> {
        self.index.get(name)
    }

    pub fn index(&self) -> &BTreeMap<String, TensorInfo> {
        &self.index
    }

    /// Union of the shards' `__metadata__` maps.
    pub fn metadata(&self) -> BTreeMap<String, String> {
        let mut merged = BTreeMap::new();
        for shard in &self.shards {
            merged.extend(shard.metadata.clone());
        }
        merged
    }

    pub(crate) fn shard_infos(&self) -> &[ShardInfo] {
        &self.shards
    }

    pub(crate) fn manifest_json(&self) -> Option<&(String, Value)> {
        self.manifest.as_ref()
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Opening
// ─────────────────────────────────────────────────────────────────────────────

/// Open a single container file or a checkpoint directory (one container,
/// or shards plus an index manifest). The full tensor index is validated;
/// no tensor data is read.
pub fn open_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointHandle> {
    let path = path.as_ref();
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        return open_single_file(path);
    }

    let mut manifests: Vec<String> = vec![];
    let mut containers: Vec<String> = vec![];
    for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".safetensors.index.json") {
            manifests.push(name);
        } else if name.ends_with(".safetensors") {
            containers.push(name);
        }
    }
    manifests.sort();
    containers.sort();

    match manifests.len() {
        0 => match containers.len() {
            1 => open_single_file(&path.join(&containers[0])),
            0 => Err(Error::Format {
                path: path.display().to_string(),
                offset: 0,
                message: "directory holds neither a .safetensors container nor an index manifest"
                    .into(),
            }),
            n => Err(Error::Format {
                path: path.display().to_string(),
                offset: 0,
                message: format!("{n} containers present but no index manifest names them"),
            }),
        },
        1 => open_sharded(path, &manifests[0]),
        n => Err(Error::Format {
            path: path.display().to_string(),
            offset: 0,
            message: format!("{n} index manifests present, expected exactly one"),
        }),
    }
}

fn open_single_file(path: &Path) -> Result<CheckpointHandle> {
    let (shard, entries) = parse_shard(path, 0)?;
    Ok(CheckpointHandle {
        root: path.to_path_buf(),
        shards: vec![shard],
        index: entries,
        manifest: None,
    })
}

fn open_sharded(dir: &Path, manifest_name: &str) -> Result<CheckpointHandle> {
    let manifest_path = dir.join(manifest_name);
    let raw = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Value = serde_json::from_slice(&raw).map_err(|e| Error::Format {
        path: manifest_path.display().to_string(),
        offset: 0,
        message: format!("manifest is not valid JSON: {e}"),
    })?;
    let weight_map = manifest
        .get("weight_map")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::Format {
            path: manifest_path.display().to_string(),
            offset: 0,
            message: "manifest lacks a weight_map object".into(),
        })?;

    let mut assignments: BTreeMap<String, String> = BTreeMap::new();
    for (tensor, shard_file) in weight_map {
        let shard_file = shard_file.as_str().ok_or_else(|| Error::Format {
            path: manifest_path.display().to_string(),
            offset: 0,
            message: format!("weight_map entry for {tensor} is not a string"),
        })?;
        assignments.insert(tensor.clone(), shard_file.to_string());
    }

    let shard_files: Vec<String> = assignments
        .values()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut shards = Vec::with_capacity(shard_files.len());
    let mut index: BTreeMap<String, TensorInfo> = BTreeMap::new();
    for (i, file_name) in shard_files.iter().enumerate() {
        let shard_path = dir.join(file_name);
        if !shard_path.is_file() {
            return Err(Error::Integrity(format!(
                "manifest references missing shard file {file_name}"
            )));
        }
        let (shard, entries) = parse_shard(&shard_path, i)?;
        for (name, info) in entries {
            if index.contains_key(&name) {
                return Err(Error::Integrity(format!(
                    "tensor {name} appears in more than one shard"
                )));
            }
            index.insert(name, info);
        }
        shards.push(shard);
    }

    // Every manifest entry must resolve to a tensor in its assigned shard.
    for (tensor, shard_file) in &assignments {
        match index.get(tensor) {
            Some(info) if &shards[info.shard].file_name == shard_file => {}
            Some(_) => {
                return Err(Error::Integrity(format!(
                    "manifest assigns tensor {tensor} to {shard_file}, but it lives elsewhere"
                )))
            }
            None => {
                return Err(Error::Integrity(format!(
                    "manifest names tensor {tensor} which no shard provides"
                )))
            }
        }
    }

    Ok(CheckpointHandle {
        root: dir.to_path_buf(),
        shards,
        index,
        manifest: Some((manifest_name.to_string(), manifest)),
    })
}

fn parse_shard(path: &Path, shard_idx: usize) -> Result<(ShardInfo, BTreeMap<String, TensorInfo>)> {
    let display = path.display().to_string();
    let format_err = |offset: u64, message: String| Error::Format {
        path: display.clone(),
        offset,
        message,
    };

    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    if file_len < 8 {
        return Err(format_err(0, format!("file is {file_len} bytes, header length needs 8")));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(len_bytes);
    if header_len > file_len - 8 || header_len > MAX_HEADER_BYTES {
        return Err(format_err(
            0,
            format!("declared header length {header_len} exceeds file size {file_len}"),
        ));
    }

    let mut header_bytes = vec![0u8; header_len as usize];
    file.read_exact(&mut header_bytes).map_err(|e| Error::io(path, e))?;
    let header: Value = serde_json::from_slice(&header_bytes)
        .map_err(|e| format_err(8, format!("header is not valid JSON: {e}")))?;
    let entries = header
        .as_object()
        .ok_or_else(|| format_err(8, "header is not a JSON object".into()))?;

    let data_start = 8 + header_len;
    let data_len = file_len - data_start;

    let mut metadata = BTreeMap::new();
    let mut index = BTreeMap::new();
    for (name, value) in entries {
        if name == "__metadata__" {
            let map = value
                .as_object()
                .ok_or_else(|| format_err(8, "__metadata__ is not an object".into()))?;
            for (k, v) in map {
                let v = v
                    .as_str()
                    .ok_or_else(|| format_err(8, format!("__metadata__.{k} is not a string")))?;
                metadata.insert(k.clone(), v.to_string());
            }
            continue;
        }
        let entry = value
            .as_object()
            .ok_or_else(|| format_err(8, format!("entry {name} is not an object")))?;
        let dtype_tag = entry
            .get("dtype")
            .and_then(Value::as_str)
            .ok_or_else(|| format_err(8, format!("entry {name} lacks a dtype string")))?
            .to_string();
        let shape: Vec<usize> = entry
            .get("shape")
            .and_then(Value::as_array)
            .ok_or_else(|| format_err(8, format!("entry {name} lacks a shape array")))?
            .iter()
            .map(|v| {
                v.as_u64()
                    .map(|d| d as usize)
                    .ok_or_else(|| format_err(8, format!("entry {name} has a non-integer dimension")))
            })
            .collect::<Result<_>>()?;
        let offsets = entry
            .get("data_offsets")
            .and_then(Value::as_array)
            .filter(|a| a.len() == 2)
            .ok_or_else(|| format_err(8, format!("entry {name} lacks data_offsets [start, end]")))?;
        let start = offsets[0]
            .as_u64()
            .ok_or_else(|| format_err(8, format!("entry {name} has a non-integer offset")))?;
        let end = offsets[1]
            .as_u64()
            .ok_or_else(|| format_err(8, format!("entry {name} has a non-integer offset")))?;

        if start > end || end > data_len {
            return Err(Error::Integrity(format!(
                "tensor {name} spans bytes [{start}, {end}) but the data section of {} holds only {data_len}",
                display
            )));
        }
        if let Some(dtype) = Dtype::parse(&dtype_tag) {
            let expected = (shape.iter().product::<usize>() * dtype.byte_size()) as u64;
            if end - start != expected {
                return Err(Error::Integrity(format!(
                    "tensor {name}: shape {shape:?} as {dtype_tag} needs {expected} bytes, region has {}",
                    end - start
                )));
            }
        }
        index.insert(
            name.clone(),
            TensorInfo {
                shard: shard_idx,
                dtype_tag,
                shape,
                offsets: (start, end),
            },
        );
    }

    // Region overlap check across the shard.
    let mut regions: Vec<(&String, &TensorInfo)> = index.iter().collect();
    regions.sort_by_key(|(_, info)| info.offsets);
    for pair in regions.windows(2) {
        let (a_name, a) = pair[0];
        let (b_name, b) = pair[1];
        if a.offsets.1 > b.offsets.0 {
            return Err(Error::Integrity(format!(
                "tensors {a_name} and {b_name} overlap in {display}"
            )));
        }
    }
    let layout: Vec<String> = regions.iter().map(|(name, _)| (*name).clone()).collect();

    Ok((
        ShardInfo {
            path: path.to_path_buf(),
            file_name: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            data_start,
            metadata,
            layout,
        },
        index,
    ))
}

// ─────────────────────────────────────────────────────────────────────────────
// Reading tensors
// ─────────────────────────────────────────────────────────────────────────────

/// Raw little-endian bytes of one tensor, exactly as stored.
pub fn read_tensor_bytes(handle: &CheckpointHandle, name: &str) -> Result<Vec<u8>> {
    let info = handle
        .index
        .get(name)
        .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
    let shard = &handle.shards[info.shard];
    let mut file = File::open(&shard.path).map_err(|e| Error::io(&shard.path, e))?;
    file.seek(SeekFrom::Start(shard.data_start + info.offsets.0))
        .map_err(|e| Error::io(&shard.path, e))?;
    let mut buf = vec![0u8; info.byte_len() as usize];
    file.read_exact(&mut buf).map_err(|e| {
        Error::Integrity(format!(
            "tensor {name}: shard {} ended early: {e}",
            shard.path.display()
        ))
    })?;
    Ok(buf)
}

/// Load one tensor, upcast to `f64` values. The storage dtype must be one
/// of BF16/F16/F32.
pub fn load_tensor(handle: &CheckpointHandle, name: &str) -> Result<WeightMatrix> {
    let info = handle
        .index
        .get(name)
        .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
    let dtype = info.dtype(name)?;
    let bytes = read_tensor_bytes(handle, name)?;
    WeightMatrix::from_le_bytes(name, info.shape.clone(), dtype, &bytes)
}

// ─────────────────────────────────────────────────────────────────────────────
// Pairing
// ─────────────────────────────────────────────────────────────────────────────

/// One tensor present and selected in both checkpoints with equal shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedTensor {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PairingWarning {
    /// Selected in the Instruct checkpoint, absent from the Base.
    MissingInBase { name: String },
    /// Selected in the Base checkpoint, absent from the Instruct.
    MissingInInstruct { name: String },
    /// Present in both with different shapes (lenient mode only).
    ShapeMismatch {
        name: String,
        base: Vec<usize>,
        instruct: Vec<usize>,
    },
}

impl std::fmt::Display for PairingWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PairingWarning::MissingInBase { name } => {
                write!(f, "{name}: selected but missing from the base checkpoint")
            }
            PairingWarning::MissingInInstruct { name } => {
                write!(f, "{name}: selected but missing from the instruct checkpoint")
            }
            PairingWarning::ShapeMismatch { name, base, instruct } => {
                write!(f, "{name}: shape differs between base {base:?} and instruct {instruct:?}")
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PairedLayers {
    /// Name-sorted tensors eligible for refinement.
    pub pairs: Vec<PairedTensor>,
    pub warnings: Vec<PairingWarning>,
}

/// Match selected tensors across two checkpoints. Output order is
/// lexicographic by name and byte-stable across runs. In strict mode a
/// shape mismatch on a shared selected name is an error; in lenient mode it
/// becomes a warning and the tensor is skipped.
pub fn pair_layers(
    base: &CheckpointHandle,
    instruct: &CheckpointHandle,
    selection: &LayerSelection,
    strict: bool,
) -> Result<PairedLayers> {
    let selected = |handle: &CheckpointHandle| -> BTreeMap<String, Vec<usize>> {
        handle
            .index
            .iter()
            .filter(|(name, info)| selection.selects(name, &info.shape))
            .map(|(name, info)| (name.clone(), info.shape.clone()))
            .collect()
    };
    let base_sel = selected(base);
    let instruct_sel = selected(instruct);

    let mut out = PairedLayers::default();
    let names: BTreeSet<&String> = base_sel.keys().chain(instruct_sel.keys()).collect();
    for name in names {
        match (base_sel.get(name), instruct_sel.get(name)) {
            (Some(b_shape), Some(i_shape)) => {
                if b_shape == i_shape {
                    out.pairs.push(PairedTensor {
                        name: name.clone(),
                        shape: i_shape.clone(),
                    });
                } else if strict {
                    return Err(Error::Pairing(format!(
                        "layer {name}: shape differs between base {b_shape:?} and instruct {i_shape:?}"
                    )));
                } else {
                    out.warnings.push(PairingWarning::ShapeMismatch {
                        name: name.clone(),
                        base: b_shape.clone(),
                        instruct: i_shape.clone(),
                    });
                }
            }
            (Some(_), None) => out.warnings.push(PairingWarning::MissingInInstruct {
                name: name.clone(),
            }),
            (None, Some(_)) => out.warnings.push(PairingWarning::MissingInBase {
                name: name.clone(),
            }),
            (None, None) => unreachable!(),
        }
    }
    Ok(out)
}

// ─────────────────────────────────────────────────────────────────────────────
// Writing
// ─────────────────────────────────────────────────────────────────────────────

/// Layout entry for one tensor in an output shard.
#[derive(Debug, Clone)]
pub(crate) struct OutputTensorSpec {
    pub(crate) name: String,
    pub(crate) dtype_tag: String,
    pub(crate) shape: Vec<usize>,
    pub(crate) byte_len: u64,
}

/// Serialize the header (length prefix + JSON) for a shard whose tensors
/// will be laid out contiguously in `specs` order.
pub(crate) fn build_shard_header(
    metadata: &BTreeMap<String, String>,
    specs: &[OutputTensorSpec],
) -> Vec<u8> {
    let mut entries = Map::new();
    if !metadata.is_empty() {
        let meta: Map<String, Value> = metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        entries.insert("__metadata__".into(), Value::Object(meta));
    }
    let mut cursor = 0u64;
    for spec in specs {
        let end = cursor + spec.byte_len;
        entries.insert(
            spec.name.clone(),
            json!({
                "dtype": spec.dtype_tag,
                "shape": spec.shape,
                "data_offsets": [cursor, end],
            }),
        );
        cursor = end;
    }
    let header = Value::Object(entries).to_string().into_bytes();
    let mut out = Vec::with_capacity(8 + header.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out
}

/// Copy `len` raw bytes of a stored tensor region into `dst`.
pub(crate) fn copy_region(
    shard: &ShardInfo,
    offsets: (u64, u64),
    dst: &mut impl Write,
) -> Result<()> {
    let mut file = File::open(&shard.path).map_err(|e| Error::io(&shard.path, e))?;
    file.seek(SeekFrom::Start(shard.data_start + offsets.0))
        .map_err(|e| Error::io(&shard.path, e))?;
    let mut taken = file.take(offsets.1 - offsets.0);
    let copied = std::io::copy(&mut taken, dst).map_err(|e| Error::io(&shard.path, e))?;
    if copied != offsets.1 - offsets.0 {
        return Err(Error::Integrity(format!(
            "shard {} ended early while copying a tensor region",
            shard.path.display()
        )));
    }
    Ok(())
}

/// Write a full checkpoint with some tensors substituted.
///
/// Every original tensor appears in the output: replaced ones are cast to
/// their replacement's dtype, everything else is copied byte-for-byte.
/// Shard layout (which tensor lives in which file, and in what order) and
/// header metadata are preserved; a sharded input writes its index manifest
/// verbatim, extra keys included. The output is re-opened and validated
/// before returning.
///
/// For a single-file checkpoint `out_path` names the output file; for a
/// sharded one it names the output directory.
pub fn write_checkpoint(
    handle: &CheckpointHandle,
    replacements: &BTreeMap<String, WeightMatrix>,
    out_path: impl AsRef<Path>,
) -> Result<()> {
    let out_path = out_path.as_ref();
    for (name, replacement) in replacements {
        let info = handle
            .index
            .get(name)
            .ok_or_else(|| Error::Input(format!("replacement {name} is not in the checkpoint")))?;
        if replacement.dims() != info.shape {
            return Err(Error::Input(format!(
                "replacement {name}: shape {:?} does not match stored {:?}",
                replacement.dims(),
                info.shape
            )));
        }
    }

    let single = handle.is_single_file();
    if single {
        if let Some(parent) = out_path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
    } else {
        fs::create_dir_all(out_path).map_err(|e| Error::io(out_path, e))?;
    }

    for shard in &handle.shards {
        let target = if single {
            out_path.to_path_buf()
        } else {
            out_path.join(&shard.file_name)
        };
        let specs: Vec<OutputTensorSpec> = shard
            .layout
            .iter()
            .map(|name| {
                let info = &handle.index[name];
                match replacements.get(name) {
                    Some(r) => OutputTensorSpec {
                        name: name.clone(),
                        dtype_tag: r.dtype().as_str().to_string(),
                        shape: info.shape.clone(),
                        byte_len: (r.element_count() * r.dtype().byte_size()) as u64,
                    },
                    None => OutputTensorSpec {
                        name: name.clone(),
                        dtype_tag: info.dtype_tag.clone(),
                        shape: info.shape.clone(),
                        byte_len: info.byte_len(),
                    },
                }
            })
            .collect();

        let file = File::create(&target).map_err(|e| Error::io(&target, e))?;
        let mut writer = BufWriter::new(file);
        writer
            .write_all(&build_shard_header(&shard.metadata, &specs))
            .map_err(|e| Error::io(&target, e))?;
        for name in &shard.layout {
            match replacements.get(name) {
                Some(r) => writer
                    .write_all(&r.to_le_bytes())
                    .map_err(|e| Error::io(&target, e))?,
                None => copy_region(shard, handle.index[name].offsets, &mut writer)?,
            }
        }
        writer.flush().map_err(|e| Error::io(&target, e))?;
    }

    if let Some((manifest_name, manifest)) = &handle.manifest {
        let target = out_path.join(manifest_name);
        let mut text = serde_json::to_string_pretty(manifest).expect("manifest reserializes");
        text.push('\n');
        fs::write(&target, text).map_err(|e| Error::io(&target, e))?;
    }

    // The output must re-open and validate.
    let reopened = open_checkpoint(out_path)?;
    if reopened.tensor_count() != handle.tensor_count() {
        return Err(Error::Integrity(format!(
            "written checkpoint indexes {} tensors, source had {}",
            reopened.tensor_count(),
            handle.tensor_count()
        )));
    }
    Ok(())
}

/// Create a single-file checkpoint from scratch (fixtures, conversions,
/// small exports). Tensors are laid out in the given order.
pub fn save_tensors(path: impl AsRef<Path>, tensors: &[WeightMatrix]) -> Result<()> {
    let path = path.as_ref();
    let mut seen = BTreeSet::new();
    for t in tensors {
        if !seen.insert(t.name()) {
            return Err(Error::Input(format!("duplicate tensor name {}", t.name())));
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let specs: Vec<OutputTensorSpec> = tensors
        .iter()
        .map(|t| OutputTensorSpec {
            name: t.name().to_string(),
            dtype_tag: t.dtype().as_str().to_string(),
            shape: t.dims().to_vec(),
            byte_len: (t.element_count() * t.dtype().byte_size()) as u64,
        })
        .collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    writer
        .write_all(&build_shard_header(&BTreeMap::new(), &specs))
        .map_err(|e| Error::io(path, e))?;
    for t in tensors {
        writer.write_all(&t.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Create a sharded checkpoint: one container per `(file_name, tensors)`
/// entry plus a `model.safetensors.index.json` manifest.
pub fn save_sharded(dir: impl AsRef<Path>, shards: &[(String, Vec<WeightMatrix>)]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut weight_map = Map::new();
    for (file_name, tensors) in shards {
        for t in tensors {
            if weight_map
                .insert(t.name().to_string(), Value::String(file_name.clone()))
                .is_some()
            {
                return Err(Error::Input(format!("duplicate tensor name {}", t.name())));
            }
        }
        save_tensors(dir.join(file_name), tensors)?;
    }
    let manifest = json!({ "metadata": {}, "weight_map": Value::Object(weight_map) });
    let target = dir.join(DEFAULT_INDEX_NAME);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&target, text).map_err(|e| Error::io(&target, e))?;
    Ok(())
}

// ─────────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn wm(name: &str, dims: &[usize], dtype: Dtype, values: Vec<f64>) -> WeightMatrix {
        WeightMatrix::new(name, dims.to_vec(), dtype, values).unwrap()
    }

    /// Four-tensor fixture exercising all three dtypes and a 1-D bias.
    fn fixture_tensors() -> Vec<WeightMatrix> {
        vec![
            wm(
                "model.layers.0.self_attn.q_proj.weight",
                &[4, 4],
                Dtype::F32,
                (0..16).map(|v| v as f64 * 0.25).collect(),
            ),
            wm(
                "model.layers.0.mlp.up_proj.weight",
                &[4, 2],
                Dtype::Bf16,
                (0..8).map(|v| v as f64 * 0.5).collect(),
            ),
            wm(
                "model.layers.0.mlp.down_proj.weight",
                &[2, 4],
                Dtype::F16,
                (0..8).map(|v| v as f64 * 0.125).collect(),
            ),
            wm(
                "model.layers.0.self_attn.q_proj.bias",
                &[4],
                Dtype::F32,
                vec![0.5, -0.5, 1.0, 0.0],
            ),
        ]
    }

    #[test]
    fn single_file_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.safetensors");
        save_tensors(&path, &fixture_tensors()).unwrap();

        let handle = open_checkpoint(&path).unwrap();
        assert!(handle.is_single_file());
        assert_eq!(handle.tensor_count(), 4);
        let q = load_tensor(&handle, "model.layers.0.self_attn.q_proj.weight").unwrap();
        assert_eq!(q.shape_2d(), Some((4, 4)));
        assert_eq!(q.values()[5], 1.25);
        // 1-D bias loads fine
        let bias = load_tensor(&handle, "model.layers.0.self_attn.q_proj.bias").unwrap();
        assert_eq!(bias.dims(), &[4]);
        // all dtypes survive
        for t in fixture_tensors() {
            let loaded = load_tensor(&handle, t.name()).unwrap();
            assert_eq!(loaded.values(), t.values(), "{}", t.name());
            assert_eq!(loaded.dtype(), t.dtype());
        }
    }

    #[test]
    fn unknown_tensor_is_a_lookup_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.safetensors");
        save_tensors(&path, &fixture_tensors()).unwrap();
        let handle = open_checkpoint(&path).unwrap();
        assert!(matches!(
            load_tensor(&handle, "nope"),
            Err(Error::UnknownTensor(_))
        ));
    }

    #[test]
    fn sharded_roundtrip_with_union_index() {
        let dir = tempdir().unwrap();
        let tensors = fixture_tensors();
        save_sharded(
            dir.path(),
            &[
                ("model-00001-of-00002.safetensors".into(), tensors[..2].to_vec()),
                ("model-00002-of-00002.safetensors".into(), tensors[2..].to_vec()),
            ],
        )
        .unwrap();

        let handle = open_checkpoint(dir.path()).unwrap();
        assert!(!handle.is_single_file());
        assert_eq!(handle.tensor_count(), 4);
        assert_eq!(handle.shard_paths().len(), 2);
        for t in &tensors {
            let loaded = load_tensor(&handle, t.name()).unwrap();
            assert_eq!(loaded.values(), t.values());
        }
    }

    #[test]
    fn directory_without_container_or_manifest_fails() {
        let dir = tempdir().unwrap();
        fs::write(dir.path().join("notes.txt"), "hi").unwrap();
        assert!(matches!(
            open_checkpoint(dir.path()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn directory_with_lone_container_opens_as_single() {
        let dir = tempdir().unwrap();
        save_tensors(dir.path().join("model.safetensors"), &fixture_tensors()).unwrap();
        let handle = open_checkpoint(dir.path()).unwrap();
        assert!(handle.is_single_file());
        assert_eq!(handle.tensor_count(), 4);
    }

    #[test]
    fn truncated_shard_is_an_integrity_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.safetensors");
        save_tensors(&path, &fixture_tensors()).unwrap();
        let full = fs::read(&path).unwrap();
        fs::write(&path, &full[..full.len() - 10]).unwrap();
        assert!(matches!(open_checkpoint(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn garbled_header_is_a_format_error_with_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.safetensors");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&20u64.to_le_bytes());
        bytes.extend_from_slice(b"this is not json :-("); // 20 bytes
        fs::write(&path, &bytes).unwrap();
        match open_checkpoint(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("expected format error, got {other:?}"),
        }
        // header length pointing past the file
        fs::write(&path, 1_000u64.to_le_bytes()).unwrap();
        match open_checkpoint(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_dtype_is_indexed_but_refuses_to_load() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.safetensors");
        let header = br#"{"counts":{"dtype":"I64","shape":[2],"data_offsets":[0,16]}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 16]);
        fs::write(&path, &bytes).unwrap();
        let handle = open_checkpoint(&path).unwrap();
        assert!(handle.contains("counts"));
        assert!(matches!(
            load_tensor(&handle, "counts"),
            Err(Error::UnsupportedDtype { .. })
        ));
    }

    #[test]
    fn dangling_manifest_entry_names_the_tensor() {
        let dir = tempdir().unwrap();
        save_tensors(dir.path().join("shard.safetensors"), &fixture_tensors()[..1]).unwrap();
        let manifest = json!({
            "weight_map": {
                "model.layers.0.self_attn.q_proj.weight": "shard.safetensors",
                "ghost.weight": "shard.safetensors",
            }
        });
        fs::write(
            dir.path().join(DEFAULT_INDEX_NAME),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        match open_checkpoint(dir.path()) {
            Err(Error::Integrity(msg)) => assert!(msg.contains("ghost.weight"), "{msg}"),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_tensor_across_shards_is_rejected() {
        let dir = tempdir().unwrap();
        let t = fixture_tensors();
        save_tensors(dir.path().join("a.safetensors"), &t[..1]).unwrap();
        save_tensors(dir.path().join("b.safetensors"), &t[..1]).unwrap();
        let manifest = json!({
            "weight_map": { t[0].name(): "a.safetensors", "other": "b.safetensors" }
        });
        fs::write(
            dir.path().join(DEFAULT_INDEX_NAME),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        assert!(matches!(open_checkpoint(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn write_with_no_replacements_preserves_bytes_and_index() {
        let dir = tempdir().unwrap();
        let src = dir.path().join("model.safetensors");
        save_tensors(&src, &fixture_tensors()).unwrap();
        let handle = open_checkpoint(&src).unwrap();
        let out = dir.path().join("copy.safetensors");
        write_checkpoint(&handle, &BTreeMap::new(), &out).unwrap();

        let copy = open_checkpoint(&out).unwrap();
        assert_eq!(copy.index(), handle.index());
        for name in handle.tensor_names() {
            assert_eq!(
                read_tensor_bytes(&handle, name).unwrap(),
                read_tensor_bytes(&copy, name).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn replace_tensor_with_itself_is_value_stable() {
        let dir = tempdir().unwrap();
        let src = dir.path().join("model.safetensors");
        save_tensors(&src, &fixture_tensors()).unwrap();
        let handle = open_checkpoint(&src).unwrap();
        let name = "model.layers.0.mlp.down_proj.weight";
        let original = load_tensor(&handle, name).unwrap();
        let mut replacements = BTreeMap::new();
        replacements.insert(name.to_string(), original.clone());
        let out = dir.path().join("self.safetensors");
        write_checkpoint(&handle, &replacements, &out).unwrap();
        let reopened = open_checkpoint(&out).unwrap();
        assert_eq!(load_tensor(&reopened, name).unwrap().values(), original.values());
    }

    #[test]
    fn replace_one_tensor_with_zeros_leaves_others_untouched() {
        let dir = tempdir().unwrap();
        let src = dir.path().join("model.safetensors");
        save_tensors(&src, &fixture_tensors()).unwrap();
        let handle = open_checkpoint(&src).unwrap();

        let name = "model.layers.0.mlp.up_proj.weight";
        let zeros = wm(name, &[4, 2], Dtype::Bf16, vec![0.0; 8]);
        let mut replacements = BTreeMap::new();
        replacements.insert(name.to_string(), zeros);
        let out = dir.path().join("zeroed.safetensors");
        write_checkpoint(&handle, &replacements, &out).unwrap();

        let reopened = open_checkpoint(&out).unwrap();
        let z = load_tensor(&reopened, name).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
        for other in handle.tensor_names().filter(|n| *n != name) {
            assert_eq!(
                read_tensor_bytes(&handle, other).unwrap(),
                read_tensor_bytes(&reopened, other).unwrap()
            );
        }
    }

    #[test]
    fn replacement_shape_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let src = dir.path().join("model.safetensors");
        save_tensors(&src, &fixture_tensors()).unwrap();
        let handle = open_checkpoint(&src).unwrap();
        let mut replacements = BTreeMap::new();
        replacements.insert(
            "model.layers.0.mlp.up_proj.weight".to_string(),
            wm("model.layers.0.mlp.up_proj.weight", &[2, 4], Dtype::Bf16, vec![0.0; 8]),
        );
        assert!(matches!(
            write_checkpoint(&handle, &replacements, dir.path().join("x.safetensors")),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn sharded_write_preserves_layout_and_extra_manifest_keys() {
        let dir = tempdir().unwrap();
        let tensors = fixture_tensors();
        save_sharded(
            dir.path().join("src"),
            &[
                ("model-00001-of-00002.safetensors".into(), tensors[..2].to_vec()),
                ("model-00002-of-00002.safetensors".into(), tensors[2..].to_vec()),
            ],
        )
        .unwrap();
        // decorate the manifest with an extra key
        let manifest_path = dir.path().join("src").join(DEFAULT_INDEX_NAME);
        let mut manifest: Value =
            serde_json::from_slice(&fs::read(&manifest_path).unwrap()).unwrap();
        manifest["metadata"] = json!({"total_size": 123, "custom": "kept"});
        fs::write(&manifest_path, serde_json::to_string(&manifest).unwrap()).unwrap();

        let handle = open_checkpoint(dir.path().join("src")).unwrap();
        let out = dir.path().join("out");
        write_checkpoint(&handle, &BTreeMap::new(), &out).unwrap();

        let copied: Value =
            serde_json::from_slice(&fs::read(out.join(DEFAULT_INDEX_NAME)).unwrap()).unwrap();
        assert_eq!(copied["metadata"]["custom"], "kept");
        assert_eq!(copied["metadata"]["total_size"], 123);
        let reopened = open_checkpoint(&out).unwrap();
        assert_eq!(reopened.shard_paths().len(), 2);
        assert_eq!(reopened.index(), handle.index());
    }

    #[test]
    fn pairing_on_identical_checkpoints_selects_projections() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.safetensors");
        save_tensors(&a, &fixture_tensors()).unwrap();
        let base = open_checkpoint(&a).unwrap();
        let instruct = open_checkpoint(&a).unwrap();
        let paired = pair_layers(&base, &instruct, &LayerSelection::default(), true).unwrap();
        let names: Vec<&str> = paired.pairs.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "model.layers.0.mlp.down_proj.weight",
                "model.layers.0.mlp.up_proj.weight",
                "model.layers.0.self_attn.q_proj.weight",
            ]
        );
        assert!(paired.warnings.is_empty());
    }

    #[test]
    fn missing_tensor_becomes_a_warning() {
        let dir = tempdir().unwrap();
        let full = fixture_tensors();
        let a = dir.path().join("a.safetensors");
        let b = dir.path().join("b.safetensors");
        save_tensors(&a, &full).unwrap();
        save_tensors(&b, &full[1..]).unwrap(); // q_proj missing
        let base = open_checkpoint(&a).unwrap();
        let instruct = open_checkpoint(&b).unwrap();
        let paired = pair_layers(&base, &instruct, &LayerSelection::default(), true).unwrap();
        assert_eq!(paired.pairs.len(), 2);
        assert_eq!(
            paired.warnings,
            vec![PairingWarning::MissingInInstruct {
                name: "model.layers.0.self_attn.q_proj.weight".into()
            }]
        );
    }

    #[test]
    fn excluding_mlp_drops_ffn_tensors() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.safetensors");
        save_tensors(&a, &fixture_tensors()).unwrap();
        let handle = open_checkpoint(&a).unwrap();
        let mut sel = LayerSelection::default();
        sel.exclude_patterns.push("*.mlp.*".into());
        let paired = pair_layers(&handle, &handle, &sel, true).unwrap();
        let names: Vec<&str> = paired.pairs.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, vec!["model.layers.0.self_attn.q_proj.weight"]);
    }

    #[test]
    fn shape_mismatch_errors_in_strict_mode_warns_in_lenient() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.safetensors");
        let b = dir.path().join("b.safetensors");
        let mut other = fixture_tensors();
        other[0] = wm(
            "model.layers.0.self_attn.q_proj.weight",
            &[2, 8],
            Dtype::F32,
            (0..16).map(|v| v as f64).collect(),
        );
        save_tensors(&a, &fixture_tensors()).unwrap();
        save_tensors(&b, &other).unwrap();
        let base = open_checkpoint(&a).unwrap();
        let instruct = open_checkpoint(&b).unwrap();
        assert!(matches!(
            pair_layers(&base, &instruct, &LayerSelection::default(), true),
            Err(Error::Pairing(_))
        ));
        let lenient = pair_layers(&base, &instruct, &LayerSelection::default(), false).unwrap();
        assert_eq!(lenient.pairs.len(), 2);
        assert!(matches!(
            lenient.warnings[0],
            PairingWarning::ShapeMismatch { .. }
        ));
    }
}
