//! Versioned flat binary checkpoints.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! "SPCK" version
//! config_len  config bytes (UTF-8 `key = value` lines)
//! tensor_count
//! repeated: name_len name rank dims[rank] f32 payload
//! ```
//!
//! The config block is the manifest: it records the model configuration the
//! tensors belong to. Writes go to a temporary sibling and are renamed into
//! place.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::nn::ParamSet;

pub const MAGIC: &[u8; 4] = b"SPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_checkpoint(config: &str, params: &ParamSet<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, config.len());
    out.extend_from_slice(config.as_bytes());
    put_u32(&mut out, params.len());
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed(format!("invalid UTF-8 at byte {at}")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(String, ParamSet<f32>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::Magic)? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let config = r.string()?;
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        if rank == 0 || rank > 4 {
            return Err(CheckpointError::Malformed(format!("tensor `{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n.checked_mul(4).ok_or(CheckpointError::Truncated(r.pos))?)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if params.index_of(&name).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate tensor `{name}`")));
        }
        params.insert(name, Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((config, params))
}

/// Write via a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn write_checkpoint(path: &Path, config: &str, params: &ParamSet<f32>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(config, params))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(String, ParamSet<f32>)> {
    decode_checkpoint(&fs::read(path)?)
}
