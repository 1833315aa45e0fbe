//! MELSPEC container: magic `MSPC`, version `0x01`, rows and cols as
//! 32-bit little-endian unsigned, then rows*cols 32-bit LE IEEE-754 reals
//! in row-major order. One file per recording.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::MelSpectrogram;

#[derive(Debug, Error)]
pub enum SpecFileError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("dimension overflow: {rows} x {cols}")]
    DimensionOverflow { rows: u64, cols: u64 },
    #[error("truncated payload")]
    Truncated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const MAGIC: &[u8; 4] = b"MSPC";
const VERSION: u8 = 0x01;

pub fn write_spec_to<W: Write>(spec: &MelSpectrogram, w: &mut W) -> Result<(), SpecFileError> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    let rows = u32::try_from(spec.rows()).map_err(|_| SpecFileError::DimensionOverflow {
        rows: spec.rows() as u64,
        cols: spec.cols() as u64,
    })?;
    let cols = u32::try_from(spec.cols()).map_err(|_| SpecFileError::DimensionOverflow {
        rows: spec.rows() as u64,
        cols: spec.cols() as u64,
    })?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    for &v in spec.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_spec_from<R: Read>(r: &mut R) -> Result<MelSpectrogram, SpecFileError> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(SpecFileError::BadMagic);
    }
    let mut version = [0u8; 1];
    read_exact(r, &mut version)?;
    if version[0] != VERSION {
        return Err(SpecFileError::BadVersion(version[0]));
    }
    let rows = read_u32(r)? as u64;
    let cols = read_u32(r)? as u64;
    let total = rows
        .checked_mul(cols)
        .filter(|&t| t > 0 && t <= u64::from(u32::MAX))
        .ok_or(SpecFileError::DimensionOverflow { rows, cols })?;
    let mut bytes = vec![0u8; (total * 4) as usize];
    read_exact(r, &mut bytes)?;
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect::<Vec<f32>>();
    // The container carries no flag; treat a unit-range matrix as normalized.
    let normalized = values.iter().all(|&v| (0.0..=1.0).contains(&v));
    Ok(MelSpectrogram::new(
        rows as usize,
        cols as usize,
        values,
        normalized,
    ))
}

pub fn write_spec(spec: &MelSpectrogram, path: &Path) -> Result<(), SpecFileError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_spec_to(spec, &mut file)
}

pub fn read_spec(path: &Path) -> Result<MelSpectrogram, SpecFileError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_spec_from(&mut file)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), SpecFileError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            SpecFileError::Truncated
        } else {
            SpecFileError::Io(e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, SpecFileError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
