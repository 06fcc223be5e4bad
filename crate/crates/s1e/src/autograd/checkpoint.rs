//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "S1E1"
//! version u32      currently 1
//! count   u32      number of named tensors
//! then per tensor, in ParamSet registration order:
//!   name_len u32, name (UTF-8), rank u32, dims (u64 each), payload (f64 LE each)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::optim::ParamSet;
use super::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"S1E1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match model: {0}")]
    ModelMismatch(String),
}

pub fn save(params: &ParamSet, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params.iter_named() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((name, dims, data));
    }
    Ok(out)
}

/// Load a checkpoint into an already-initialized parameter set; every name
/// must exist with a matching shape.
pub fn restore(params: &mut ParamSet, path: &Path) -> Result<(), CheckpointError> {
    let loaded = load(path)?;
    if loaded.len() != params.len() {
        return Err(CheckpointError::ModelMismatch(format!(
            "checkpoint has {} tensors, model has {}",
            loaded.len(),
            params.len()
        )));
    }
    for (name, dims, data) in loaded {
        let id = params.lookup(&name).ok_or_else(|| {
            CheckpointError::ModelMismatch(format!("unknown tensor {name}"))
        })?;
        if params.get(id).shape() != dims.as_slice() {
            return Err(CheckpointError::ModelMismatch(format!(
                "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                dims,
                params.get(id).shape()
            )));
        }
        params
            .set_value(id, data)
            .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[allow(dead_code)]
fn unused_tensor_hint(_t: &Tensor) {}
