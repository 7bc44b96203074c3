//! Self-contained checkpoint files: one JSON header line describing the
//! payload, the named arrays as raw little-endian IEEE-754 bytes in header
//! order, and a SHA-256 digest of everything before it.
//!
//! The format is deliberately dependency-free to read: `head -1 file` shows
//! the metadata, and the digest makes truncation or bit-rot loud.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: u64,
    pub seed: u64,
    /// Snapshot of the run configuration that produced this state.
    pub config: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(epoch: u64, seed: u64, config: serde_json::Value) -> Self {
        Checkpoint { epoch, seed, config, arrays: Vec::new() }
    }

    pub fn push_f32(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.arrays.push(NamedArray { name: name.into(), shape, data: ArrayData::F32(data) });
    }

    pub fn push_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.arrays.push(NamedArray { name: name.into(), shape, data: ArrayData::F64(data) });
    }

    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::CheckpointFormat(format!("array `{name}` missing")))
    }

    pub fn f32_values(&self, name: &str) -> Result<&[f32]> {
        match &self.array(name)?.data {
            ArrayData::F32(v) => Ok(v),
            other => Err(Error::CheckpointFormat(format!(
                "array `{name}` is {}, expected f32",
                other.dtype()
            ))),
        }
    }

    pub fn f64_scalar(&self, name: &str) -> Result<f64> {
        match &self.array(name)?.data {
            ArrayData::F64(v) if v.len() == 1 => Ok(v[0]),
            other => Err(Error::CheckpointFormat(format!(
                "array `{name}` is not an f64 scalar (dtype {}, len {})",
                other.dtype(),
                other.len()
            ))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    epoch: u64,
    seed: u64,
    config: serde_json::Value,
    arrays: Vec<HeaderEntry>,
}

struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    for a in &ckpt.arrays {
        let expected: usize = a.shape.iter().product();
        if expected != a.data.len() {
            return Err(Error::CheckpointFormat(format!(
                "array `{}` has {} elements but shape {:?}",
                a.name,
                a.data.len(),
                a.shape
            )));
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        epoch: ckpt.epoch,
        seed: ckpt.seed,
        config: ckpt.config.clone(),
        arrays: ckpt
            .arrays
            .iter()
            .map(|a| HeaderEntry {
                name: a.name.clone(),
                shape: a.shape.clone(),
                dtype: a.data.dtype().to_string(),
            })
            .collect(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = HashingWriter { inner: BufWriter::new(file), hasher: Sha256::new() };
    let io_err = |e: std::io::Error| Error::io(path, e);
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::CheckpointFormat(format!("header serialization: {e}")))?;
    w.write_all(&header_bytes).map_err(io_err)?;
    w.write_all(b"\n").map_err(io_err)?;
    for a in &ckpt.arrays {
        match &a.data {
            ArrayData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes()).map_err(io_err)?;
                }
            }
            ArrayData::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes()).map_err(io_err)?;
                }
            }
        }
    }
    let digest = w.hasher.clone().finalize();
    w.inner.write_all(&digest).map_err(io_err)?;
    w.inner.flush().map_err(io_err)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::CheckpointFormat("no header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::CheckpointFormat(format!("header parse: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let mut data_len = 0usize;
    for entry in &header.arrays {
        let count: usize = entry.shape.iter().product();
        let size = match entry.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => {
                return Err(Error::CheckpointFormat(format!(
                    "array `{}` has unknown dtype `{other}`",
                    entry.name
                )))
            }
        };
        data_len += count * size;
    }
    let expected_len = newline + 1 + data_len + 32;
    if bytes.len() < expected_len {
        return Err(Error::CheckpointIntegrity(format!(
            "file truncated: {} bytes, expected {expected_len}",
            bytes.len()
        )));
    }
    if bytes.len() > expected_len {
        return Err(Error::CheckpointIntegrity(format!(
            "{} trailing bytes after checksum",
            bytes.len() - expected_len
        )));
    }
    let digest = Sha256::digest(&bytes[..expected_len - 32]);
    if digest.as_slice() != &bytes[expected_len - 32..] {
        return Err(Error::CheckpointIntegrity("checksum mismatch".into()));
    }

    let mut offset = newline + 1;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for entry in header.arrays {
        let count: usize = entry.shape.iter().product();
        let data = match entry.dtype.as_str() {
            "f32" => {
                let vals = bytes[offset..offset + count * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                offset += count * 4;
                ArrayData::F32(vals)
            }
            _ => {
                let vals = bytes[offset..offset + count * 8]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                offset += count * 8;
                ArrayData::F64(vals)
            }
        };
        arrays.push(NamedArray { name: entry.name, shape: entry.shape, data });
    }
    Ok(Checkpoint {
        epoch: header.epoch,
        seed: header.seed,
        config: header.config,
        arrays,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ckpt = Checkpoint::new(17, 42, serde_json::json!({"lr": 1e-4}));
        ckpt.push_f32(
            "weights",
            vec![2, 3],
            vec![1.0, -0.0, f32::MIN_POSITIVE, 1e-40, f32::MAX, -2.25],
        );
        ckpt.push_f32("bias", vec![2], vec![0.125, -7.0]);
        ckpt.push_f64("adam.step", vec![1], vec![12345.0]);
        ckpt
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample();
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.epoch, 17);
        assert_eq!(loaded.seed, 42);
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.arrays, ckpt.arrays);
        // Bit-exactness down to subnormals and signed zero.
        let w = loaded.f32_values("weights").unwrap();
        assert_eq!(w[1].to_bits(), (-0.0f32).to_bits());
        assert_eq!(w[3].to_bits(), 1e-40f32.to_bits());
        assert_eq!(loaded.f64_scalar("adam.step").unwrap(), 12345.0);
    }

    #[test]
    fn truncation_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointIntegrity(_))
        ));
    }

    #[test]
    fn corruption_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() - 40; // inside the last array, before the digest
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointIntegrity(_))
        ));
    }

    #[test]
    fn unknown_version_is_a_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()])
            .replace("\"format_version\":1", "\"format_version\":9");
        let mut rewritten = text.into_bytes();
        rewritten.push(b'\n');
        rewritten.extend_from_slice(&bytes[bytes.iter().position(|&b| b == b'\n').unwrap() + 1..]);
        std::fs::write(&path, &rewritten).unwrap();
        match load_checkpoint(&path) {
            Err(Error::CheckpointVersion { found, expected }) => {
                assert_eq!(found, 9);
                assert_eq!(expected, FORMAT_VERSION);
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn garbage_header_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        std::fs::write(&path, b"not json\nrest").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointFormat(_))
        ));
        std::fs::write(&path, b"no newline at all").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointFormat(_))
        ));
    }

    #[test]
    fn mismatched_shape_is_rejected_at_save() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ckpt = Checkpoint::new(0, 0, serde_json::Value::Null);
        ckpt.push_f32("bad", vec![4], vec![1.0, 2.0]);
        assert!(matches!(
            save_checkpoint(&path, &ckpt),
            Err(Error::CheckpointFormat(_))
        ));
    }
}
