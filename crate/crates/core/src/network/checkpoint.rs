//! Checkpoint files.
//!
//! ```text
//! b"DCLM1"
//! u32 count
//! count × { u32 name_len | name (UTF-8) | u32 rank | u32 extent × rank }   manifest
//! count × DCLT tensor record, in manifest order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DCLM1";

pub fn write_checkpoint<T: Real, W: Write>(out: &mut W, params: &ModelParams<T>) -> std::io::Result<()> {
    let mut header = Vec::new();
    header.extend_from_slice(CHECKPOINT_MAGIC);
    header.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        header.extend_from_slice(&(name.len() as u32).to_le_bytes());
        header.extend_from_slice(name.as_bytes());
        header.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            header.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    out.write_all(&header)?;
    for (_, t) in params.iter() {
        write_tensor(out, t)?;
    }
    Ok(())
}

fn u32_le<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated checkpoint manifest: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<T: Real, R: Read>(r: &mut R) -> Result<ModelParams<T>> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("not a checkpoint: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let count = u32_le(r)? as usize;
    if count > 10_000 {
        return Err(Error::Format(format!("implausible tensor count {count}")));
    }
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_le(r)? as usize;
        if len > 1024 {
            return Err(Error::Format(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated checkpoint manifest: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = u32_le(r)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("implausible rank {rank} for `{name}`")));
        }
        let shape = (0..rank).map(|_| u32_le(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        manifest.push((name, shape));
    }
    let mut tensors = BTreeMap::new();
    for (name, shape) in manifest {
        let t: Tensor<T> = read_tensor(r).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        if t.shape() != shape {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {:?}, manifest says {shape:?}",
                t.shape()
            )));
        }
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::Format(e.to_string()))?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", rest.len())));
    }
    Ok(ModelParams::from_map(tensors))
}

pub fn save_checkpoint<T: Real>(path: &Path, params: &ModelParams<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params).expect("writing to memory");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ModelParams<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut &bytes[..])
}
