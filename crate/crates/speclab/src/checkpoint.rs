//! Versioned binary tensor container.
//!
//! Layout: magic `SPFG`, format version u32, then a sequence of records to
//! end of file. Record: name length u16, name bytes, rank u8, extents u32
//! each, row-major f32 payload. All integers and floats little-endian.
//! Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::meter::AllocCategory;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPFG";
pub const VERSION: u32 = 1;

/// Serialize named tensors in the given order.
pub fn to_bytes(entries: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("tensor name too long: {name}")));
        }
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::Checkpoint(format!("rank {} too large", shape.len())));
        }
        out.push(shape.len() as u8);
        for &e in shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated container: wanted {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parse a container image into named tensors (allocated as parameters).
pub fn from_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let mut entries = Vec::new();
    while !cur.done() {
        let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("tensor name not utf-8: {e}")))?;
        let rank = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = cur.take(numel * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::from_vec(&shape, data, AllocCategory::Parameter)));
    }
    Ok(entries)
}

pub fn write_file(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let bytes = to_bytes(entries)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

/// Look up one tensor by name.
pub fn find<'a>(entries: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor: {name}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = SeedRng::new(9);
        let a = Tensor::randn(&[3, 5], 1.0, &mut rng, AllocCategory::Parameter);
        let b = Tensor::randn(&[7], 0.5, &mut rng, AllocCategory::Parameter);
        let scalar = Tensor::scalar(-0.0, AllocCategory::Parameter);
        let entries = vec![
            ("alpha".to_string(), &a),
            ("beta.gamma".to_string(), &b),
            ("neg_zero".to_string(), &scalar),
        ];
        let bytes = to_bytes(&entries).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 3);
        for ((name, orig), (rname, read)) in entries.iter().zip(&back) {
            assert_eq!(name, rname);
            assert_eq!(orig.shape(), read.shape());
            // Bit-level comparison, not float comparison.
            for (x, y) in orig.data().iter().zip(read.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let bytes2 = to_bytes(&back.iter().map(|(n, t)| (n.clone(), t)).collect::<Vec<_>>())
            .unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = to_bytes(&[]).unwrap();
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncation_detected() {
        let mut rng = SeedRng::new(1);
        let a = Tensor::randn(&[4, 4], 1.0, &mut rng, AllocCategory::Parameter);
        let bytes = to_bytes(&[("a".to_string(), &a)]).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(from_bytes(cut), Err(Error::Checkpoint(_))));
    }
}
