//! MELB matrix file format.
//!
//! Layout: magic `MELB`, version u32 = 1, n_frames u32, n_bins u32, then
//! row-major 32-bit IEEE-754 little-endian values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::VcError;
use crate::Result;

const MAGIC: &[u8; 4] = b"MELB";
const VERSION: u32 = 1;

pub fn write_melb(path: &Path, data: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(data.nrows() as u32).to_le_bytes())?;
    w.write_all(&(data.ncols() as u32).to_le_bytes())?;
    for &v in data.iter() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_melb(path: &Path) -> Result<Array2<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(VcError::BadMagic(path.display().to_string()));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(VcError::VersionMismatch {
            kind: "MELB",
            found: version,
            expected: VERSION,
        });
    }
    let rows = read_u32(&mut r, path)? as usize;
    let cols = read_u32(&mut r, path)? as usize;
    let mut buf = vec![0u8; rows * cols * 4];
    read_exact(&mut r, &mut buf, path)?;
    let values: Vec<f64> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| VcError::Data(format!("{}: {e}", path.display())))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| VcError::Truncated(path.display().to_string()))
}
