//! Directory-based tensor container: `manifest.json` plus one raw
//! little-endian, row-major blob per tensor.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{DpqError, Result};
use crate::linalg::Matrix;
use crate::numerics::{bf16_nearest, Bf16Grid};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BYTE_ORDER: &str = "little-endian";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    Bf16,
    U4packed,
    U8,
}

impl DType {
    /// Byte length of a tensor of this dtype and shape.
    pub fn byte_len(self, shape: &[usize]) -> Option<usize> {
        let count: usize = shape.iter().product();
        match self {
            DType::F32 => Some(count * 4),
            DType::Bf16 => Some(count * 2),
            DType::U8 => Some(count),
            DType::U4packed => match shape {
                [rows, cols] => Some(rows * cols.div_ceil(2)),
                _ => None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub file: String,
    pub byte_order: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerManifest {
    pub tensors: Vec<TensorEntry>,
}

pub fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn bf16_bytes(values: &[f64]) -> Vec<u8> {
    let grid = Bf16Grid;
    values
        .iter()
        .flat_map(|&v| grid.to_bits(bf16_nearest(v)).to_le_bytes())
        .collect()
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-' | '@'))
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| DpqError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DpqError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| DpqError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| DpqError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Incrementally writes a container; safe to share across worker threads.
#[derive(Debug)]
pub struct TensorWriter {
    root: PathBuf,
    entries: Mutex<Vec<TensorEntry>>,
}

impl TensorWriter {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| DpqError::io(&root, e))?;
        Ok(TensorWriter {
            root,
            entries: Mutex::new(Vec::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn add(&self, name: &str, dtype: DType, shape: &[usize], bytes: &[u8]) -> Result<()> {
        if !valid_name(name) {
            return Err(DpqError::validation(name, "invalid tensor name"));
        }
        let expected = dtype
            .byte_len(shape)
            .ok_or_else(|| DpqError::validation(name, "u4packed tensors must be 2-D"))?;
        if expected != bytes.len() {
            return Err(DpqError::validation(
                name,
                format!("{} bytes given, shape {shape:?} needs {expected}", bytes.len()),
            ));
        }
        let file = format!("{name}.bin");
        {
            let entries = self.entries.lock().expect("writer lock");
            if entries.iter().any(|e| e.name == name) {
                return Err(DpqError::validation(name, "duplicate tensor name"));
            }
        }
        write_atomic(&self.root.join(&file), bytes)?;
        self.entries.lock().expect("writer lock").push(TensorEntry {
            name: name.to_string(),
            dtype,
            shape: shape.to_vec(),
            file,
            byte_order: BYTE_ORDER.to_string(),
        });
        Ok(())
    }

    pub fn add_matrix_f32(&self, name: &str, m: &Matrix) -> Result<()> {
        self.add(name, DType::F32, &[m.rows(), m.cols()], &f32_bytes(m.as_slice()))
    }

    /// Writes `manifest.json` with entries sorted by name.
    pub fn finish(self) -> Result<ContainerManifest> {
        let mut tensors = self.entries.into_inner().expect("writer lock");
        tensors.sort_by(|a, b| a.name.cmp(&b.name));
        let manifest = ContainerManifest { tensors };
        write_json(&self.root.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone)]
pub struct TensorContainer {
    root: PathBuf,
    manifest: ContainerManifest,
}

impl TensorContainer {
    /// Opens and validates a container: unique names, known byte order and
    /// blob sizes matching the declared shape.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let manifest: ContainerManifest = read_json(&root.join(MANIFEST_FILE))?;
        let mut seen = HashSet::new();
        for t in &manifest.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(DpqError::validation(&t.name, "duplicate tensor name"));
            }
            if t.byte_order != BYTE_ORDER {
                return Err(DpqError::validation(&t.name, format!("unsupported byte order `{}`", t.byte_order)));
            }
            if t.file.contains('/') || t.file.contains('\\') || t.file.starts_with('.') {
                return Err(DpqError::validation(&t.name, format!("bad blob file name `{}`", t.file)));
            }
            let expected = t
                .dtype
                .byte_len(&t.shape)
                .ok_or_else(|| DpqError::validation(&t.name, "u4packed tensors must be 2-D"))?;
            let path = root.join(&t.file);
            let meta = fs::metadata(&path)
                .map_err(|_| DpqError::validation(&t.name, format!("blob `{}` is missing", t.file)))?;
            if meta.len() as usize != expected {
                return Err(DpqError::validation(
                    &t.name,
                    format!("blob has {} bytes, shape {:?} needs {expected}", meta.len(), t.shape),
                ));
            }
        }
        Ok(TensorContainer { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &ContainerManifest {
        &self.manifest
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.manifest.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| DpqError::validation(name, "tensor not found in container"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.manifest.tensors.iter().any(|t| t.name == name)
    }

    pub fn read_bytes(&self, name: &str) -> Result<Vec<u8>> {
        let entry = self.entry(name)?;
        let path = self.root.join(&entry.file);
        fs::read(&path).map_err(|e| DpqError::io(path, e))
    }

    /// Floating-point tensor as `f64` values (f32 or bf16 storage).
    pub fn read_floats(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let entry = self.entry(name)?.clone();
        let bytes = self.read_bytes(name)?;
        let values = match entry.dtype {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect(),
            DType::Bf16 => bytes
                .chunks_exact(2)
                .map(|b| Bf16Grid.from_bits(u16::from_le_bytes([b[0], b[1]])))
                .collect(),
            other => {
                return Err(DpqError::validation(name, format!("expected a float tensor, found {other:?}")));
            }
        };
        Ok((entry.shape, values))
    }

    pub fn read_matrix(&self, name: &str) -> Result<Matrix> {
        let (shape, values) = self.read_floats(name)?;
        match shape.as_slice() {
            [rows, cols] => Matrix::from_vec(*rows, *cols, values),
            _ => Err(DpqError::validation(name, format!("expected a 2-D tensor, shape is {shape:?}"))),
        }
    }
}
