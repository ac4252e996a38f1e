//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! `b"DFTMODEL"`, version `u32`, `n_layers`, `hidden_size`, `n_heads`,
//! `vocab_size`, `max_seq_len`, `ffn_mult` as `u32`, `tie_output_head` as
//! `u8`, `seed` as `u64`, tensor count `u32`, then per tensor: name length
//! `u32`, UTF-8 name, rank `u32`, extents `u32` each, and the data as `f64`.

use super::{ModelConfig, ModelParams};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DFTMODEL";

pub(crate) fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated file".into())
    } else {
        Error::Io(e)
    }
}

pub(crate) fn put_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    put_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    put_u32(w, t.shape().len() as u32)?;
    for &e in t.shape() {
        put_u32(w, e as u32)?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn get_tensor(r: &mut impl Read) -> Result<(String, Tensor)> {
    let n = get_u32(r)? as usize;
    if n > 1 << 16 {
        return Err(Error::Format(format!("tensor name length {n}")));
    }
    let mut name = vec![0u8; n];
    r.read_exact(&mut name).map_err(truncated)?;
    let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name not utf-8".into()))?;
    let rank = get_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("tensor {name}: rank {rank}")));
    }
    let shape = (0..rank).map(|_| get_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let len: usize = shape.iter().product();
    let mut raw = vec![0u8; len * 8];
    r.read_exact(&mut raw).map_err(truncated)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((name, Tensor::new(shape, data)?))
}

pub fn write_checkpoint(w: &mut impl Write, params: &ModelParams) -> Result<()> {
    let c = &params.config;
    w.write_all(MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    for v in [c.n_layers, c.hidden_size, c.n_heads, c.vocab_size, c.max_seq_len, c.ffn_mult] {
        put_u32(w, v as u32)?;
    }
    w.write_all(&[c.tie_output_head as u8])?;
    put_u64(w, params.seed)?;
    let named = params.named_tensors();
    put_u32(w, named.len() as u32)?;
    for (name, _, t) in named {
        put_tensor(w, &name, t)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ModelParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = get_u32(r)? as usize;
    }
    let mut tie = [0u8; 1];
    r.read_exact(&mut tie).map_err(truncated)?;
    let seed = get_u64(r)?;
    let config = ModelConfig {
        n_layers: dims[0],
        hidden_size: dims[1],
        n_heads: dims[2],
        vocab_size: dims[3],
        max_seq_len: dims[4],
        ffn_mult: dims[5],
        tie_output_head: tie[0] != 0,
    };
    config.validate()?;
    let count = get_u32(r)? as usize;
    let mut named = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = get_tensor(r)?;
        if named.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    ModelParams::from_named(&config, seed, named)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}
