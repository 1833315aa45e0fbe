//! Model checkpoint container.
//!
//! Binary layout: magic `PMDL`, version byte `0x01`, entry count as 32-bit
//! little-endian unsigned, then per entry: name length + UTF-8 bytes, rank,
//! extents (all 32-bit LE unsigned) and the payload as 32-bit LE IEEE-754
//! reals. Parameters, running batchnorm statistics and optimizer moments
//! are all stored as named entries.

use std::io::{Read, Write};

use thiserror::Error;

use super::{Real, Tensor};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("truncated payload")]
    Truncated,
    #[error("dimension overflow")]
    DimensionOverflow,
    #[error("entry name is not UTF-8")]
    BadName,
    #[error("missing entry {0}")]
    MissingEntry(String),
    #[error("entry {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const MAGIC: &[u8; 4] = b"PMDL";
const VERSION: u8 = 0x01;

/// Ordered named-entry container; order is preserved so rewrites are
/// byte-identical.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries
            .push((name.to_string(), shape.to_vec(), data));
    }

    pub fn put_tensor<T: Real>(&mut self, name: &str, tensor: &Tensor<T>) {
        self.put(
            name,
            tensor.shape(),
            tensor.values().iter().map(|v| v.to_f64() as f32).collect(),
        );
    }

    pub fn put_scalar(&mut self, name: &str, value: f32) {
        self.put(name, &[1], vec![value]);
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn tensor<T: Real>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>, CheckpointError> {
        let (found, data) = self
            .get(name)
            .ok_or_else(|| CheckpointError::MissingEntry(name.to_string()))?;
        if found != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: found.to_vec(),
            });
        }
        Ok(Tensor::new(
            shape,
            data.iter().map(|&v| T::from_f64(f64::from(v))).collect(),
        ))
    }

    pub fn scalar(&self, name: &str) -> Result<f32, CheckpointError> {
        let (_, data) = self
            .get(name)
            .ok_or_else(|| CheckpointError::MissingEntry(name.to_string()))?;
        data.first().copied().ok_or(CheckpointError::Truncated)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&u32::try_from(self.entries.len()).map_err(|_| CheckpointError::DimensionOverflow)?.to_le_bytes())?;
        for (name, shape, data) in &self.entries {
            let name_bytes = name.as_bytes();
            w.write_all(
                &u32::try_from(name_bytes.len())
                    .map_err(|_| CheckpointError::DimensionOverflow)?
                    .to_le_bytes(),
            )?;
            w.write_all(name_bytes)?;
            w.write_all(
                &u32::try_from(shape.len())
                    .map_err(|_| CheckpointError::DimensionOverflow)?
                    .to_le_bytes(),
            )?;
            for &extent in shape {
                w.write_all(
                    &u32::try_from(extent)
                        .map_err(|_| CheckpointError::DimensionOverflow)?
                        .to_le_bytes(),
                )?;
            }
            for &v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut version = [0u8; 1];
        read_exact(r, &mut version)?;
        if version[0] != VERSION {
            return Err(CheckpointError::BadVersion(version[0]));
        }
        let count = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(r, &mut name_bytes)?;
            let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::BadName)?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut total: u64 = 1;
            for _ in 0..rank {
                let extent = read_u32(r)? as usize;
                total = total
                    .checked_mul(extent as u64)
                    .ok_or(CheckpointError::DimensionOverflow)?;
                shape.push(extent);
            }
            if total > u64::from(u32::MAX) {
                return Err(CheckpointError::DimensionOverflow);
            }
            let mut data = vec![0f32; total as usize];
            for v in &mut data {
                let mut buf = [0u8; 4];
                read_exact(r, &mut buf)?;
                *v = f32::from_le_bytes(buf);
            }
            entries.push((name, shape, data));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut file)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_named_entries() {
        let mut ck = Checkpoint::new();
        ck.put("conv.weight", &[3, 3, 1, 2], (0..18).map(|i| i as f32).collect());
        ck.put_scalar("adam.t", 7.0);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(ck, back);
        assert_eq!(back.scalar("adam.t").unwrap(), 7.0);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut buf = Vec::new();
        Checkpoint::new().write_to(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            Checkpoint::read_from(&mut buf.as_slice()),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut ck = Checkpoint::new();
        ck.put("w", &[4], vec![1.0; 4]);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            Checkpoint::read_from(&mut buf.as_slice()),
            Err(CheckpointError::Truncated)
        ));
    }
}
