//! Quantized-artifact and calibration directories built on the tensor
//! container.
//!
//! A quantized artifact holds, per layer `L`:
//!
//! | tensor          | dtype     | shape                      |
//! |-----------------|-----------|----------------------------|
//! | `L.qweight`     | u4packed  | `[rows, cols]`             |
//! | `L.scales`      | f32       | `[rows, ceil(cols / G)]`   |
//! | `L.zeros`       | u8        | `[rows, ceil(cols / G)]`   |
//!
//! and `quant_manifest.json` with the config echo, FP8 scales, permutation
//! record and hashes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::container::{f32_bytes, read_json, write_json, DType, TensorContainer, TensorWriter};
use crate::calib::ActivationScaleSet;
use crate::dpq::{Compensation, QuantizedLayer, QuantizerConfig};
use crate::error::{DpqError, Result};
use crate::gar::{GarPermutation, ReorderMode};
use crate::numerics::Fp8Variant;
use crate::quant_params::{Fp8TensorScale, Int4GroupParams, PackedInt4Tensor, Q_MAX};

pub const QUANT_MANIFEST_FILE: &str = "quant_manifest.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const QUANT_FORMAT: &str = "dpq-w4a8";
pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationRecord {
    pub mode: ReorderMode,
    pub order: Vec<usize>,
    pub group_order: Vec<usize>,
    pub group_ranks: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub weight_tensor: String,
    pub rows: usize,
    pub cols: usize,
    pub group_size: usize,
    pub packed: String,
    pub scales: String,
    pub zero_points: String,
    pub fp8_scale: Fp8TensorScale,
    pub activation_scale: Option<Fp8TensorScale>,
    pub permutation: PermutationRecord,
    /// Parameter slot of each column, present only when groups are not
    /// contiguous in storage order.
    pub column_groups: Option<Vec<usize>>,
    pub compensation: Compensation,
    pub reconstruction_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantManifest {
    pub format: String,
    pub schema_version: u32,
    pub tool_version: String,
    pub config: QuantizerConfig,
    pub config_hash: String,
    pub seed: u64,
    pub calibration: Option<CalibrationSources>,
    pub layers: Vec<LayerEntry>,
    /// SHA-256 over every tensor name and blob, in manifest layer order.
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSources {
    pub hessian_activations: String,
    pub scale_activations: String,
    pub damp_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedLayer {
    pub name: String,
    pub dim: usize,
    pub sample_count: u64,
    pub hessian_tensor: String,
}

/// Contents of `calibration.json` next to the Hessian blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationManifest {
    pub schema_version: u32,
    pub sources: CalibrationSources,
    pub fp8_variant: Fp8Variant,
    pub pow2_scales: bool,
    pub layers: Vec<CalibratedLayer>,
    pub activation_scales: ActivationScaleSet,
}

impl CalibrationManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(CALIBRATION_FILE))
    }

    pub fn store(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(CALIBRATION_FILE), self)
    }
}

pub fn tensor_names(layer: &str) -> (String, String, String) {
    (
        format!("{layer}.qweight"),
        format!("{layer}.scales"),
        format!("{layer}.zeros"),
    )
}

/// Writes one layer's blobs and returns its manifest entry.
pub fn write_layer(
    writer: &TensorWriter,
    layer: &QuantizedLayer,
    weight_tensor: &str,
    activation_scale: Option<Fp8TensorScale>,
) -> Result<LayerEntry> {
    let p = &layer.packed;
    p.validate()?;
    let (packed, scales, zeros) = tensor_names(&layer.name);
    let groups = p.groups_per_row();
    writer.add(&packed, DType::U4packed, &[p.rows, p.cols], &p.data)?;
    let scale_values: Vec<f64> = p.params.iter().map(|q| q.scale).collect();
    writer.add(&scales, DType::F32, &[p.rows, groups], &f32_bytes(&scale_values))?;
    let zp: Vec<u8> = p.params.iter().map(|q| q.zero_point).collect();
    writer.add(&zeros, DType::U8, &[p.rows, groups], &zp)?;
    let perm = &layer.permutation;
    Ok(LayerEntry {
        name: layer.name.clone(),
        weight_tensor: weight_tensor.to_string(),
        rows: p.rows,
        cols: p.cols,
        group_size: p.group_size,
        packed,
        scales,
        zero_points: zeros,
        fp8_scale: p.fp8_scale.clone(),
        activation_scale,
        permutation: PermutationRecord {
            mode: perm.mode,
            order: perm.order.clone(),
            group_order: perm.group_order.clone(),
            group_ranks: perm.group_ranks.clone(),
        },
        column_groups: layer.column_groups.clone(),
        compensation: layer.compensation,
        reconstruction_error: layer.reconstruction_error,
    })
}

pub fn content_hash(container: &TensorContainer, layers: &[LayerEntry]) -> Result<String> {
    let mut hasher = Sha256::new();
    for entry in layers {
        for name in [&entry.packed, &entry.scales, &entry.zero_points] {
            let bytes = container.read_bytes(name)?;
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(&bytes);
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

/// A validated artifact directory.
#[derive(Debug, Clone)]
pub struct LoadedArtifact {
    pub manifest: QuantManifest,
    pub layers: Vec<QuantizedLayer>,
}

impl LoadedArtifact {
    pub fn layer(&self, name: &str) -> Option<(&LayerEntry, &QuantizedLayer)> {
        self.manifest
            .layers
            .iter()
            .zip(&self.layers)
            .find(|(e, _)| e.name == name)
    }
}

fn expect_shape(container: &TensorContainer, name: &str, dtype: DType, shape: &[usize]) -> Result<()> {
    let entry = container.entry(name)?;
    if entry.dtype != dtype {
        return Err(DpqError::validation(name, format!("dtype {:?}, expected {dtype:?}", entry.dtype)));
    }
    if entry.shape != shape {
        return Err(DpqError::validation(
            name,
            format!("shape {:?}, expected {shape:?} (rows x ceil(cols / group_size))", entry.shape),
        ));
    }
    Ok(())
}

/// Reads and validates `quant_manifest.json` and every referenced tensor.
pub fn load_artifact(dir: &Path) -> Result<LoadedArtifact> {
    let container = TensorContainer::open(dir)?;
    let manifest: QuantManifest = read_json(&dir.join(QUANT_MANIFEST_FILE))?;
    if manifest.format != QUANT_FORMAT {
        return Err(DpqError::validation(QUANT_MANIFEST_FILE, format!("unknown format `{}`", manifest.format)));
    }
    if manifest.config_hash != manifest.config.config_hash() {
        return Err(DpqError::validation(QUANT_MANIFEST_FILE, "config hash does not match config"));
    }
    manifest.config.validate()?;

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for e in &manifest.layers {
        if e.group_size == 0 {
            return Err(DpqError::validation(&e.name, "group_size must be >= 1"));
        }
        let groups = e.cols.div_ceil(e.group_size);
        expect_shape(&container, &e.packed, DType::U4packed, &[e.rows, e.cols])?;
        expect_shape(&container, &e.scales, DType::F32, &[e.rows, groups])?;
        expect_shape(&container, &e.zero_points, DType::U8, &[e.rows, groups])?;

        let (_, scales) = container.read_floats(&e.scales)?;
        let zeros = container.read_bytes(&e.zero_points)?;
        let mut params = Vec::with_capacity(e.rows * groups);
        for (i, (&s, &z)) in scales.iter().zip(&zeros).enumerate() {
            if !(s > 0.0) || !s.is_finite() {
                return Err(DpqError::validation(&e.scales, format!("non-positive scale at index {i}")));
            }
            if z > Q_MAX {
                return Err(DpqError::validation(&e.zero_points, format!("zero-point {z} at index {i}")));
            }
            params.push(Int4GroupParams::new(s, z).at(i / groups, i % groups));
        }

        let expected_scales = match e.fp8_scale.granularity {
            crate::quant_params::ScaleGranularity::PerTensor => 1,
            crate::quant_params::ScaleGranularity::PerChannel => e.rows,
        };
        if e.fp8_scale.scales.len() != expected_scales || e.fp8_scale.scales.iter().any(|s| !(*s > 0.0)) {
            return Err(DpqError::validation(&e.name, "invalid fp8 weight scale"));
        }

        let perm = permutation_from_record(&e.name, &e.permutation, e.cols, e.group_size)?;
        if let Some(map) = &e.column_groups {
            if map.len() != e.cols || map.iter().any(|&g| g >= groups) {
                return Err(DpqError::validation(&e.name, "invalid column group map"));
            }
        } else if perm.mode == ReorderMode::Full {
            return Err(DpqError::validation(&e.name, "full reordering requires a column group map"));
        }

        let packed = PackedInt4Tensor {
            rows: e.rows,
            cols: e.cols,
            group_size: e.group_size,
            data: container.read_bytes(&e.packed)?,
            params,
            fp8_scale: e.fp8_scale.clone(),
        };
        packed.validate()?;
        layers.push(QuantizedLayer {
            name: e.name.clone(),
            packed,
            compensation: e.compensation,
            permutation: perm,
            column_groups: e.column_groups.clone(),
            reconstruction_error: e.reconstruction_error,
            redequant: manifest.config.redequant_round.then(|| manifest.config.fp8_grid()),
            config_hash: manifest.config_hash.clone(),
        });
    }

    let hash = content_hash(&container, &manifest.layers)?;
    if hash != manifest.content_hash {
        return Err(DpqError::validation(QUANT_MANIFEST_FILE, "content hash does not match tensor blobs"));
    }
    Ok(LoadedArtifact { manifest, layers })
}

fn permutation_from_record(
    layer: &str,
    rec: &PermutationRecord,
    cols: usize,
    group_size: usize,
) -> Result<GarPermutation> {
    if rec.order.len() != cols {
        return Err(DpqError::validation(layer, "permutation length differs from column count"));
    }
    let mut positions = vec![usize::MAX; cols];
    for (k, &i) in rec.order.iter().enumerate() {
        if i >= cols || positions[i] != usize::MAX {
            return Err(DpqError::validation(layer, "permutation is not a bijection"));
        }
        positions[i] = k;
    }
    let perm = GarPermutation {
        order: rec.order.clone(),
        positions,
        group_size,
        group_ranks: rec.group_ranks.clone(),
        group_order: rec.group_order.clone(),
        mode: rec.mode,
    };
    if perm.mode == ReorderMode::Gar {
        let mut seen = rec.group_order.clone();
        seen.sort_unstable();
        if seen != (0..perm.num_groups()).collect::<Vec<_>>() || !perm.has_group_block_structure() {
            return Err(DpqError::validation(layer, "GAR permutation lost its group block structure"));
        }
    }
    Ok(perm)
}
