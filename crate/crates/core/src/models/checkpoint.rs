//! Binary tensor-collection checkpoints.
//!
//! Layout: an ASCII header line `<MAGIC> <tag> <param-count>\n`, where
//! `param-count` is the total number of scalars, followed by one record per
//! named tensor: name length (`u32` LE), name bytes, rank (`u32` LE), each
//! dimension (`u32` LE), then the payload as `f64` LE. Records appear in name
//! order.

use std::path::Path;

use super::Params;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub magic: String,
    pub tag: String,
    pub tensors: Params,
}

impl Checkpoint {
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

pub fn encode_checkpoint(magic: &str, tag: &str, tensors: &Params) -> Vec<u8> {
    let count: usize = tensors.values().map(Tensor::len).sum();
    let mut out = format!("{magic} {tag} {count}\n").into_bytes();
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.bytes.len(), format!("truncated: needed {n} bytes at offset {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Decodes a checkpoint, requiring the header magic to equal `magic`.
pub fn decode_checkpoint(bytes: &[u8], magic: &str) -> Result<Checkpoint> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(bytes.len(), "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::format(0, "header is not UTF-8"))?;
    let parts: Vec<&str> = header.split(' ').collect();
    if parts.len() != 3 || parts[0] != magic {
        return Err(Error::format(0, format!("expected `{magic} <tag> <count>` header, found `{header}`")));
    }
    let declared: usize = parts[2]
        .parse()
        .map_err(|_| Error::format(parts[0].len() + parts[1].len() + 2, "invalid parameter count"))?;

    let mut r = Reader { bytes, pos: nl + 1 };
    let mut tensors = Params::new();
    while r.pos < bytes.len() {
        let start = r.pos;
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(start + 4, "tensor name is not UTF-8"))?
            .to_owned();
        let rank = r.u32()?;
        if rank > 8 {
            return Err(Error::format(r.pos - 4, format!("implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(8 * n)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(start, e.to_string()))?;
        tensors.insert(name, t);
    }
    let cp = Checkpoint {
        magic: magic.to_owned(),
        tag: parts[1].to_owned(),
        tensors,
    };
    if cp.param_count() != declared {
        return Err(Error::format(
            nl,
            format!("header declares {declared} parameters, payload holds {}", cp.param_count()),
        ));
    }
    Ok(cp)
}

pub fn write_checkpoint(path: &Path, magic: &str, tag: &str, tensors: &Params) -> Result<()> {
    Ok(std::fs::write(path, encode_checkpoint(magic, tag, tensors))?)
}

pub fn read_checkpoint(path: &Path, magic: &str) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?, magic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Arch, DepthNet};

    #[test]
    fn header_and_round_trip() {
        let net = DepthNet::new(Arch::A, 3);
        let bytes = encode_checkpoint("DAVNET", "arch-A", &net.params);
        let header = format!("DAVNET arch-A {}\n", net.param_count());
        assert!(bytes.starts_with(header.as_bytes()));
        let cp = decode_checkpoint(&bytes, "DAVNET").unwrap();
        assert_eq!(cp.tag, "arch-A");
        assert_eq!(cp.tensors, net.params);
    }

    #[test]
    fn record_layout() {
        let mut p = Params::new();
        p.insert("ab".into(), Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
        let bytes = encode_checkpoint("DAVUAP", "delta", &p);
        let body = &bytes[b"DAVUAP delta 2\n".len()..];
        let mut expected = vec![2, 0, 0, 0, b'a', b'b', 1, 0, 0, 0, 2, 0, 0, 0];
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        expected.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(body, expected.as_slice());
    }

    #[test]
    fn rejects_corruption() {
        let net = DepthNet::new(Arch::B, 3);
        let bytes = encode_checkpoint("DAVNET", "arch-B", &net.params);
        assert!(decode_checkpoint(&bytes, "DAVUAP").is_err());
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3], "DAVNET"),
            Err(Error::Format { .. })
        ));
        let mut wrong = bytes.clone();
        wrong.extend_from_slice(&[1, 0, 0, 0, b'z', 0, 0, 0, 0]);
        wrong.extend_from_slice(&0.0f64.to_le_bytes());
        assert!(decode_checkpoint(&wrong, "DAVNET").is_err());
    }
}
