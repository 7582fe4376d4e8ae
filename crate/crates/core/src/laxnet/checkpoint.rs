//! `VOLTCKPT` files: magic, u32 version, length-prefixed JSON header, then
//! `(name, rank, dims, f32 payload)` parameter entries, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpolant::Schedule;

use super::model::ArchConfig;
use super::nets::{LossMode, VoltModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VOLTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: ArchConfig,
    pub loss_mode: LossMode,
    pub schedule: Schedule,
    pub param_count: usize,
    /// Global clean maximum used to normalize volumes to `[0, 1]`.
    pub clean_max: f64,
    pub step: usize,
    pub val_loss: f64,
    pub train_config: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(w: &mut W, model: &VoltModel<f32>, header: &CheckpointHeader) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    let entries = model.params.entries();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for &d in &e.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::io("<checkpoint>", e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                expected: self.pos + n,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(VoltModel<f32>, CheckpointHeader)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io("<checkpoint>", e))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic("checkpoint".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let jl = c.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(c.take(jl)?)?;
    let mut model = VoltModel::<f32>::new(&header.arch, header.loss_mode, header.schedule, 0)?;
    let n = c.u32()? as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let nl = c.u32()? as usize;
        let name = String::from_utf8(c.take(nl)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 parameter name".into()))?;
        let rank = c.u32()? as usize;
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let values = c
            .take(count * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        entries.push((name, dims, values));
    }
    if c.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    model.params.load_entries(entries)?;
    if model.param_count() != header.param_count {
        return Err(Error::Checkpoint(format!(
            "header records {} parameters, architecture has {}",
            header.param_count,
            model.param_count()
        )));
    }
    Ok((model, header))
}

pub fn save_checkpoint(path: &Path, model: &VoltModel<f32>, header: &CheckpointHeader) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, model, header)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(VoltModel<f32>, CheckpointHeader)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(f))
}
