//! Binary checkpoint format.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic            4 bytes  "SLMC"
//! version          u32      currently 1
//! config_len       u32      byte length of the UTF-8 config block
//! config           config_len bytes (flat `key = value` text)
//! param_count      u32
//! per parameter (sorted by name):
//!   name_len       u32
//!   name           name_len bytes (UTF-8)
//!   rank           u32
//!   dims           rank × u64
//!   data           product(dims) × f32
//! ```
//!
//! Values are stored as 32-bit floats. The loader rejects unknown versions,
//! truncated files, and non-finite values; the writer refuses to write
//! non-finite parameters in the first place.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::tensor::{Scalar, Tensor};
use super::ParamSet;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SLMC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an SLMC checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated or corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("non-finite value in parameter {0:?}")]
    NonFinite(String),
}

pub fn write_checkpoint<F: Scalar>(
    path: &Path,
    config_block: &str,
    params: &ParamSet<F>,
) -> Result<(), CheckpointError> {
    for (name, entry) in params.iter() {
        if !entry.value.all_finite() {
            return Err(CheckpointError::NonFinite(name.clone()));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = config_block.as_bytes();
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, entry) in params.iter() {
        let name_b = name.as_bytes();
        w.write_all(&(name_b.len() as u32).to_le_bytes())?;
        w.write_all(name_b)?;
        let shape = entry.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in entry.value.to_f32_vec() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(String, Vec<(String, Tensor<f32>)>), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let cfg_len = read_u32(&mut r, "config length")? as usize;
    let mut cfg = vec![0u8; cfg_len];
    read_exact(&mut r, &mut cfg, "config block")?;
    let config = String::from_utf8(cfg)
        .map_err(|_| CheckpointError::Corrupt("config block is not UTF-8".into()))?;
    let count = read_u32(&mut r, "parameter count")? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, "name length")? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b, "dimension")?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b, "parameter data")?;
            let v = f32::from_le_bytes(b);
            if !v.is_finite() {
                return Err(CheckpointError::NonFinite(name));
            }
            data.push(v);
        }
        let tensor = Tensor::from_vec(&shape, data)
            .map_err(|_| CheckpointError::Corrupt("inconsistent tensor shape".into()))?;
        params.push((name, tensor));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok((config, params))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
    r.read_exact(buf)
        .map_err(|_| CheckpointError::Corrupt(format!("unexpected end of file in {what}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.insert("b.bias", Tensor::from_vec(&[3], vec![0.5, -1.5, 2.0]).unwrap());
        p.insert(
            "a.weight",
            Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        p
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.slmc");
        let params = sample_params();
        write_checkpoint(&path, "d-model = 4\n", &params).unwrap();
        let (cfg, loaded) = read_checkpoint(&path).unwrap();
        assert_eq!(cfg, "d-model = 4\n");
        // sorted by name
        assert_eq!(loaded[0].0, "a.weight");
        assert_eq!(loaded[0].1.shape(), &[2, 2]);
        assert_eq!(loaded[1].0, "b.bias");
        assert_eq!(loaded[1].1.data(), &[0.5, -1.5, 2.0]);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.slmc");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(CheckpointError::BadMagic)));
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(CheckpointError::UnsupportedVersion(99))
        ));
    }

    #[test]
    fn rejects_truncation_and_nonfinite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.slmc");
        write_checkpoint(&path, "", &sample_params()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(CheckpointError::Corrupt(_))));

        let mut params: ParamSet<f32> = ParamSet::new();
        params.insert("w", Tensor::from_vec(&[1], vec![f32::NAN]).unwrap());
        assert!(matches!(
            write_checkpoint(&path, "", &params),
            Err(CheckpointError::NonFinite(_))
        ));
    }

    #[test]
    fn deterministic_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("1.slmc"), dir.path().join("2.slmc"));
        write_checkpoint(&p1, "cfg", &sample_params()).unwrap();
        write_checkpoint(&p2, "cfg", &sample_params()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
