//! Versioned tensor container: a little-endian u32 header length, a JSON
//! header listing name/shape/dtype per tensor, then raw little-endian f32
//! data in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

/// Writes named tensors in order. Values are rounded to f32.
pub fn save(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        version: FORMAT_VERSION,
        tensors: entries
            .iter()
            .map(|(name, t)| TensorMeta {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".to_string(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.write_all(&header_bytes).map_err(|e| Error::io(path, e))?;
    for (_, t) in entries {
        for &v in t.as_standard_layout().iter() {
            w.write_all(&(v as f32).to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads every tensor, in header order.
pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::CheckpointFormat(format!("bad header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported container version {}",
            header.version
        )));
    }
    let mut out = Vec::with_capacity(header.tensors.len());
    for meta in header.tensors {
        if meta.dtype != "f32" {
            return Err(Error::CheckpointFormat(format!(
                "tensor {} has unsupported dtype {}",
                meta.name, meta.dtype
            )));
        }
        let count: usize = meta.shape.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut buf = [0u8; 4];
        for _ in 0..count {
            r.read_exact(&mut buf)
                .map_err(|_| Error::CheckpointFormat(format!("truncated tensor {}", meta.name)))?;
            data.push(f64::from(f32::from_le_bytes(buf)));
        }
        let t = Tensor::from_shape_vec(IxDyn(&meta.shape), data)
            .map_err(|e| Error::CheckpointFormat(format!("tensor {}: {e}", meta.name)))?;
        out.push((meta.name, t));
    }
    Ok(out)
}

/// Collects a parameter set's tensors under `prefix.name` entries.
pub fn params_entries(prefix: &str, params: &ParamSet) -> Vec<(String, Tensor)> {
    params
        .iter()
        .map(|(name, t)| (format!("{prefix}.{name}"), t.clone()))
        .collect()
}

/// Restores a parameter set from loaded entries; every parameter must be
/// present with a matching shape.
pub fn apply_params(
    prefix: &str,
    params: &mut ParamSet,
    entries: &[(String, Tensor)],
) -> Result<()> {
    for (name, value) in params.iter_mut() {
        let key = format!("{prefix}.{name}");
        let found = entries
            .iter()
            .find(|(n, _)| *n == key)
            .ok_or_else(|| Error::CheckpointFormat(format!("missing tensor {key}")))?;
        if found.1.shape() != value.shape() {
            return Err(Error::CheckpointFormat(format!(
                "tensor {key} has shape {:?}, expected {:?}",
                found.1.shape(),
                value.shape()
            )));
        }
        value.assign(&found.1);
    }
    Ok(())
}
