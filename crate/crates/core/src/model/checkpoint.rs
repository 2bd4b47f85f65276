//! GRLW checkpoint container.
//!
//! Layout: magic `"GRLW"`, u8 version (=1), u32 LE parameter count, then per
//! parameter: u16 LE name length, UTF-8 name, and a GRLT tensor record.
//! A JSON sidecar next to the checkpoint (same stem, `.json`) carries the
//! full network configuration plus whatever extra sections the writer adds
//! (the trainer stores its own config there).

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GRLConfig, Model};
use crate::error::{Error, Result};
use crate::tensor::{io as tio, Scalar};
use crate::util::atomic_write;

pub const MAGIC: &[u8; 4] = b"GRLW";
pub const VERSION: u8 = 1;

/// Sidecar schema. `extra` round-trips unknown sections untouched.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub model: GRLConfig,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

/// Write checkpoint + sidecar atomically.
pub fn save<T: Scalar>(model: &Model<T>, path: &Path, extra: serde_json::Map<String, serde_json::Value>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in model.params.entries() {
        let name = p.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("parameter name too long: {}", p.name)));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        tio::write_tensor(&mut buf, &p.value)?;
    }
    atomic_write(path, &buf)?;

    let sidecar = Sidecar {
        model: model.config,
        extra,
    };
    let json = serde_json::to_vec_pretty(&sidecar)?;
    atomic_write(&sidecar_path(path), &json)?;
    Ok(())
}

/// Load a checkpoint. The parameter registry is rebuilt from the sidecar
/// config, then every stored tensor is matched by name and shape, so a
/// structural mismatch (missing, extra, or reshaped parameters) is an error.
pub fn load<T: Scalar>(path: &Path) -> Result<(Model<T>, Sidecar)> {
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    sidecar.model.validate()?;
    let mut model = Model::<T>::init(sidecar.model, 0)?;

    let bytes = fs::read(path)?;
    let mut r: &[u8] = &bytes;
    let mut head = [0u8; 9];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("truncated GRLW header".into()))?;
    if &head[0..4] != MAGIC {
        return Err(Error::Format("bad GRLW magic".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported GRLW version {}", head[4])));
    }
    let count = u32::from_le_bytes(head[5..9].try_into().unwrap()) as usize;
    if count != model.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} parameters, config implies {}",
            model.params.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let mut nlen = [0u8; 2];
        r.read_exact(&mut nlen)
            .map_err(|_| Error::Format("truncated GRLW name length".into()))?;
        let nlen = u16::from_le_bytes(nlen) as usize;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name)
            .map_err(|_| Error::Format("truncated GRLW name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("non-UTF-8 parameter name".into()))?;
        let tensor = tio::read_tensor::<T>(&mut r)?;
        let idx = model
            .params
            .idx(&name)
            .map_err(|_| Error::Format(format!("unexpected parameter {name} in checkpoint")))?;
        if seen[idx] {
            return Err(Error::Format(format!("duplicate parameter {name} in checkpoint")));
        }
        seen[idx] = true;
        let p = &mut model.params.entries_mut()[idx];
        if p.value.shape() != tensor.shape() {
            return Err(Error::Format(format!(
                "parameter {name} has shape {:?}, config implies {:?}",
                tensor.shape(),
                p.value.shape()
            )));
        }
        p.value = tensor;
    }
    Ok((model, sidecar))
}
