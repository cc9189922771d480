//! Flat little-endian `f32` arrays with a JSON sidecar describing the shape.
//!
//! `name.bin` holds the raw values in row-major order; `name.json` holds an
//! [`ArrayHeader`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, UdvdError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Names of the axes, outermost first.
    #[serde(default)]
    pub axes: Vec<String>,
    #[serde(default)]
    pub description: String,
}

impl ArrayHeader {
    pub fn new(shape: Vec<usize>, axes: &[&str]) -> Self {
        Self {
            shape,
            dtype: "f32le".into(),
            axes: axes.iter().map(|s| s.to_string()).collect(),
            description: String::new(),
        }
    }

    pub fn with_description(mut self, text: impl Into<String>) -> Self {
        self.description = text.into();
        self
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Write `data` to `path` (conventionally `*.bin`) and the header next to it.
pub fn write_array(path: &Path, header: &ArrayHeader, data: &[f32]) -> Result<()> {
    if header.len() != data.len() {
        return Err(UdvdError::shape(format!(
            "header shape {:?} holds {} values, data has {}",
            header.shape,
            header.len(),
            data.len()
        )));
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| UdvdError::io(path, e))?;
    let json = serde_json::to_string_pretty(header)?;
    let side = sidecar(path);
    fs::write(&side, json).map_err(|e| UdvdError::io(side, e))
}

pub fn read_array(path: &Path) -> Result<(ArrayHeader, Vec<f32>)> {
    let side = sidecar(path);
    let text = fs::read_to_string(&side).map_err(|e| UdvdError::io(&side, e))?;
    let header: ArrayHeader = serde_json::from_str(&text)?;
    if header.dtype != "f32le" {
        return Err(UdvdError::Format(format!(
            "{}: unsupported dtype {}",
            side.display(),
            header.dtype
        )));
    }
    let bytes = fs::read(path).map_err(|e| UdvdError::io(path, e))?;
    if bytes.len() != header.len() * 4 {
        return Err(UdvdError::Format(format!(
            "{}: expected {} bytes for shape {:?}, found {}",
            path.display(),
            header.len() * 4,
            header.shape,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((header, data))
}
