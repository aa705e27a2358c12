//! Named-tensor checkpoint files ("ABFK").
//!
//! Layout (little-endian throughout): magic "ABFK", u32 version, u32 entry
//! count, then per entry: u16 name length, UTF-8 name, u8 rank, rank u64
//! dims, raw f64 data.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ABFK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error: {0}")]
    Format(String),
}

/// Write named tensors in the order given; order is preserved on load.
pub fn save(entries: &[(String, Tensor)], path: &Path) -> Result<(), CheckpointError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(CheckpointError::Format(format!("name too long: {name}")));
        }
        f.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        f.write_all(name_bytes)?;
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(CheckpointError::Format("rank exceeds u8".into()));
        }
        f.write_all(&[shape.len() as u8])?;
        for &d in shape {
            f.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in tensor.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *pos + n > bytes.len() {
            return Err(CheckpointError::Format(format!(
                "truncated at byte {} (need {n} more)",
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|e| CheckpointError::Format(format!("invalid name utf-8: {e}")))?
            .to_string();
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            shape.push(d);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_vec(&shape, data)
            .map_err(|e| CheckpointError::Format(format!("entry {name}: {e}")))?;
        out.push((name, tensor));
    }
    if pos != bytes.len() {
        return Err(CheckpointError::Format(format!(
            "{} trailing bytes after last entry",
            bytes.len() - pos
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(11);
        let entries: Vec<(String, Tensor)> = vec![
            ("w.0".into(), Tensor::rand_uniform(&[3, 4], 1.0, &mut rng)),
            ("b".into(), Tensor::rand_uniform(&[4], 1.0, &mut rng)),
            ("s".into(), Tensor::scalar(-0.25)),
        ];
        let path = dir.path().join("m.abfk");
        save(&entries, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(entries.len(), back.len());
        for ((n0, t0), (n1, t1)) in entries.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            for (a, b) in t0.data().iter().zip(t1.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // byte-identical rewrite
        let path2 = dir.path().join("m2.abfk");
        save(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corruption_detected() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![("x".to_string(), Tensor::scalar(1.0))];
        let path = dir.path().join("m.abfk");
        save(&entries, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let bad_path = dir.path().join("bad.abfk");
        // wrong magic
        let mut bad = bytes.clone();
        bad[1] = b'Z';
        std::fs::write(&bad_path, &bad).unwrap();
        assert!(load(&bad_path).is_err());
        // truncation
        std::fs::write(&bad_path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load(&bad_path).is_err());
        // trailing garbage
        let mut long = bytes.clone();
        long.extend_from_slice(&[0, 1, 2]);
        std::fs::write(&bad_path, &long).unwrap();
        assert!(load(&bad_path).is_err());
    }
}
