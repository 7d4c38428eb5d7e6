//! Binary container shared by checkpoints, trace sets, and adapter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! [0..8)    magic (8 ASCII bytes, distinguishes the artifact kind)
//! [8..12)   u32 format version (currently 1)
//! [12..16)  u32 length of the JSON header
//! ...       JSON header bytes (artifact-specific metadata)
//! u32       tensor count
//! per tensor:
//!   u16     name length, then name bytes (UTF-8)
//!   u8      rank, then rank × u32 dims
//!   f32 × n payload, row-major
//! ```
//!
//! Payloads are always stored as f32 regardless of the in-memory element
//! type. Read errors identify the absolute byte offset at which parsing
//! failed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const FORMAT_VERSION: u32 = 1;

/// Refuse to allocate tensors beyond this element count when reading; a
/// corrupt length field should fail cleanly, not abort on OOM.
const MAX_TENSOR_NUMEL: u64 = 1 << 32;

/// A parsed container: JSON header plus named f32 tensors in file order.
pub struct Blob {
    pub header_json: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Blob {
    /// Look up a tensor by name.
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

/// Serialize named tensors with a JSON header under the given magic.
pub fn write_blob<T: Scalar>(
    path: &Path,
    magic: &[u8; 8],
    header_json: &str,
    tensors: &[(&str, &Tensor<T>)],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);

    w.write_all(magic).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    let header = header_json.as_bytes();
    w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(header).map_err(io)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Contract(format!("tensor name too long: {name}")));
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(name_bytes).map_err(io)?;
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::Contract(format!("tensor rank too large: {name}")));
        }
        w.write_all(&[shape.len() as u8]).map_err(io)?;
        for &d in shape {
            if d > u32::MAX as usize {
                return Err(Error::Contract(format!("dimension too large in {name}")));
            }
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        let mut payload = Vec::with_capacity(tensor.numel() * 4);
        for &v in tensor.data() {
            payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
        w.write_all(&payload).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Read a container, checking the magic and version.
pub fn read_blob(path: &Path, magic: &[u8; 8]) -> Result<Blob> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Offset::new(BufReader::new(file));

    let mut got_magic = [0u8; 8];
    r.read_exact_at(path, &mut got_magic)?;
    if &got_magic != magic {
        return Err(format_err(path, 0, format!(
            "magic {:?} does not match expected {:?}",
            String::from_utf8_lossy(&got_magic),
            String::from_utf8_lossy(magic),
        )));
    }
    let version = r.read_u32(path)?;
    if version != FORMAT_VERSION {
        return Err(format_err(path, 8, format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = r.read_u32(path)? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact_at(path, &mut header)?;
    let header_json = String::from_utf8(header)
        .map_err(|_| format_err(path, 16, "JSON header is not UTF-8".into()))?;

    let count = r.read_u32(path)? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let at = r.offset;
        let name_len = r.read_u16(path)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact_at(path, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| format_err(path, at, "tensor name is not UTF-8".into()))?;
        let rank = r.read_u8(path)? as usize;
        if rank == 0 {
            return Err(format_err(path, at, format!("tensor {name} has rank 0")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = r.read_u32(path)? as u64;
            numel = numel.saturating_mul(d);
            shape.push(d as usize);
        }
        if numel > MAX_TENSOR_NUMEL {
            return Err(format_err(path, at, format!(
                "tensor {name} claims {numel} elements"
            )));
        }
        let mut payload = vec![0u8; numel as usize * 4];
        r.read_exact_at(path, &mut payload)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(data, shape)
            .map_err(|_| format_err(path, at, format!("inconsistent dims for {name}")))?;
        tensors.push((name, tensor));
    }

    // Trailing garbage means the file is not what its header claims.
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe).map_err(|e| Error::io(path, e))? != 0 {
        return Err(format_err(path, r.offset, "trailing bytes after last tensor".into()));
    }

    Ok(Blob { header_json, tensors })
}

fn format_err(path: &Path, offset: u64, msg: String) -> Error {
    Error::Format {
        path: path.display().to_string(),
        offset,
        msg,
    }
}

/// Reader wrapper that tracks the absolute byte offset for error reporting.
struct Offset<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Offset<R> {
    fn new(inner: R) -> Self {
        Offset { inner, offset: 0 }
    }

    fn read_exact_at(&mut self, path: &Path, buf: &mut [u8]) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                format_err(path, at, "unexpected end of file".into())
            } else {
                Error::io(path, e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u8(&mut self, path: &Path) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact_at(path, &mut b)?;
        Ok(b[0])
    }

    fn read_u16(&mut self, path: &Path) -> Result<u16> {
        let mut b = [0u8; 2];
        self.read_exact_at(path, &mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn read_u32(&mut self, path: &Path) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(path, &mut b)?;
        Ok(u32::from_le_bytes(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TESTBLB1";

    fn roundtrip_dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn roundtrip_preserves_names_shapes_values() {
        let dir = roundtrip_dir();
        let path = dir.path().join("x.bin");
        let a = Tensor::new(vec![1.0f32, -2.5, 3.25], vec![3]).unwrap();
        let b = Tensor::new((0..6).map(|i| i as f32).collect(), vec![2, 3]).unwrap();
        write_blob(&path, MAGIC, r#"{"k":1}"#, &[("alpha", &a), ("beta.w", &b)]).unwrap();

        let blob = read_blob(&path, MAGIC).unwrap();
        assert_eq!(blob.header_json, r#"{"k":1}"#);
        assert_eq!(blob.tensors.len(), 2);
        assert_eq!(blob.tensor("alpha").unwrap().data(), a.data());
        assert_eq!(blob.tensor("beta.w").unwrap().shape(), &[2, 3]);
        assert_eq!(blob.tensor("beta.w").unwrap().data(), b.data());
        assert!(blob.tensor("gamma").is_none());
    }

    #[test]
    fn f64_payloads_are_stored_as_f32() {
        let dir = roundtrip_dir();
        let path = dir.path().join("x.bin");
        let t = Tensor::new(vec![1.0f64 + 1e-12], vec![1]).unwrap();
        write_blob(&path, MAGIC, "{}", &[("t", &t)]).unwrap();
        let blob = read_blob(&path, MAGIC).unwrap();
        assert_eq!(blob.tensor("t").unwrap().data()[0], 1.0f32);
    }

    #[test]
    fn wrong_magic_fails_at_offset_zero() {
        let dir = roundtrip_dir();
        let path = dir.path().join("x.bin");
        let t = Tensor::new(vec![0.0f32], vec![1]).unwrap();
        write_blob(&path, MAGIC, "{}", &[("t", &t)]).unwrap();
        match read_blob(&path, b"OTHERMAG") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn truncation_reports_an_offset() {
        let dir = roundtrip_dir();
        let path = dir.path().join("x.bin");
        let t = Tensor::new(vec![1.0f32; 100], vec![100]).unwrap();
        write_blob(&path, MAGIC, "{}", &[("t", &t)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        match read_blob(&path, MAGIC) {
            Err(Error::Format { offset, msg, .. }) => {
                assert!(offset > 0);
                assert!(msg.contains("end of file"));
            }
            other => panic!("expected format error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = roundtrip_dir();
        let path = dir.path().join("x.bin");
        let t = Tensor::new(vec![1.0f32], vec![1]).unwrap();
        write_blob(&path, MAGIC, "{}", &[("t", &t)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_blob(&path, MAGIC), Err(Error::Format { .. })));
    }

    #[test]
    fn oversized_tensor_claim_fails_cleanly() {
        let dir = roundtrip_dir();
        let path = dir.path().join("x.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(b"{}");
        bytes.extend_from_slice(&1u32.to_le_bytes()); // one tensor
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b't');
        bytes.push(2); // rank 2
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match read_blob(&path, MAGIC) {
            Err(Error::Format { msg, .. }) => assert!(msg.contains("elements")),
            other => panic!("expected format error, got {:?}", other.map(|_| ())),
        }
    }
}
