//! Checkpoint file:
//!
//! ```text
//! b"SDCKPT1\n"
//! u32 LE   entry count
//! entries  u32 LE byte length + UTF-8 name     (the name table)
//! u32 LE   meta byte length + UTF-8 JSON meta  (model config, step, epoch)
//! tensors  one RDT1 record per name, in table order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_params, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{read_tensor_from, write_tensor_to};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SDCKPT1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub step: u64,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
}

fn write_u32<W: Write>(w: &mut W, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Contract(format!("{what} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &ParamStore<T>, meta: &CheckpointMeta) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut w, params.len(), "parameter count")?;
    for name in params.names() {
        write_u32(&mut w, name.len(), "name length")?;
        w.write_all(name.as_bytes())?;
    }
    let meta = serde_json::to_string_pretty(meta).map_err(|e| Error::Contract(format!("meta serialization: {e}")))?;
    write_u32(&mut w, meta.len(), "meta length")?;
    w.write_all(meta.as_bytes())?;
    for (_, t) in params.iter() {
        write_tensor_to(t, &mut w)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, path: &Path, what: &str) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::format(path, format!("truncated {what}: {e}")))?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_utf8<R: Read>(r: &mut R, path: &Path, len: usize, what: &str) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)
        .map_err(|e| Error::format(path, format!("truncated {what}: {e}")))?;
    String::from_utf8(b).map_err(|_| Error::format(path, format!("{what} is not UTF-8")))
}

/// Reads a checkpoint without checking it against a model layout.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|e| Error::format(path, format!("cannot open checkpoint: {e}")))?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| Error::format(path, format!("truncated header: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint file (bad magic)"));
    }
    let count = read_u32(&mut r, path, "entry count")?;
    let mut names = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u32(&mut r, path, "name length")?;
        names.push(read_utf8(&mut r, path, len, "name")?);
    }
    let meta_len = read_u32(&mut r, path, "meta length")?;
    let meta_text = read_utf8(&mut r, path, meta_len, "meta block")?;
    let meta: CheckpointMeta =
        serde_json::from_str(&meta_text).map_err(|e| Error::format(path, format!("bad meta block: {e}")))?;
    let mut params = ParamStore::new();
    for name in names {
        let t = read_tensor_from::<f32, _>(&mut r, path)?;
        params.insert(name, t);
    }
    Ok(Checkpoint { meta, params })
}

/// Reads a checkpoint and checks every parameter its model config needs is
/// present with the expected shape.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ck = read_checkpoint(path)?;
    let expected = init_params::<f32>(&ck.meta.model, 0).map_err(|e| Error::format(path, e.to_string()))?;
    let missing: Vec<&str> = expected.names().filter(|n| ck.params.get(n).is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::format(path, format!("missing parameters: {}", missing.join(", "))));
    }
    for (name, t) in expected.iter() {
        let got = ck.params.get(name).expect("checked above");
        if got.shape() != t.shape() {
            return Err(Error::format(
                path,
                format!("parameter `{name}` has shape {:?}, expected {:?}", got.shape(), t.shape()),
            ));
        }
    }
    Ok(ck)
}
