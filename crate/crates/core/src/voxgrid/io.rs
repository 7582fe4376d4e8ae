use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Grid, Volume};
use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 8] = b"VOLT0001";
const HEADER_LEN: usize = 8 + 4 * 4 + 3 * 8;
const DTYPE_F32: u32 = 0;

/// Serializes `v` into the VOLT0001 layout.
pub fn write_volume<W: Write>(v: &Volume, mut w: W) -> std::io::Result<()> {
    let g = v.grid();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * v.len());
    buf.extend_from_slice(VOLUME_MAGIC);
    for n in [g.nx, g.ny, g.nz] {
        buf.extend_from_slice(&(n as u32).to_le_bytes());
    }
    buf.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for s in [g.dx, g.dy, g.dz] {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    for &x in v.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

/// Parses a VOLT0001 byte stream. `name` is used in error messages.
pub fn read_volume<R: Read>(mut r: R, name: &str) -> Result<Volume> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(name, e))?;
    if bytes.len() < 8 || &bytes[..8] != VOLUME_MAGIC {
        return Err(Error::BadMagic(name.to_string()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let (nx, ny, nz) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    let dtype = u32_at(20);
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let grid = Grid::new(nx, ny, nz, f64_at(24), f64_at(32), f64_at(40))?;
    let expected = HEADER_LEN + 4 * grid.len();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[HEADER_LEN..expected]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Volume::from_vec(grid, data)
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let g = v.grid();
    let limit = 1usize << 31;
    if g.nx >= limit || g.ny >= limit || g.nz >= limit {
        return Err(Error::InvalidDims(format!(
            "dimension exceeds 2^31: {:?}",
            g.dims()
        )));
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_volume(v, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_volume(std::io::BufReader::new(f), &path.display().to_string())
}
