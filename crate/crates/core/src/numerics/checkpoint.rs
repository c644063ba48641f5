//! Versioned binary checkpoint container: a JSON header followed by named
//! parameter tensors with little-endian 64-bit payloads. Round-trips
//! bit-exactly.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TLBCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free-form JSON header text (model/config metadata).
    pub header: String,
    pub params: BTreeMap<String, Tensor>,
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let header = ckpt.header.as_bytes();
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Parse("not a checkpoint file (bad magic)".into()));
    }
    let header_len = r.u32()? as usize;
    let header = String::from_utf8(r.take(header_len)?.to_vec())
        .map_err(|_| Error::Parse("checkpoint header is not UTF-8".into()))?;
    let num_params = r.u32()? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..num_params {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Parse("checkpoint parameter name is not UTF-8".into()))?;
        let ndims = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        params.insert(name, Tensor::new(shape, data));
    }
    Ok(Checkpoint { header, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_exact_round_trip() {
        let ckpt = Checkpoint {
            header: r#"{"version":1,"model":"tri"}"#.into(),
            params: BTreeMap::from([
                ("a.w".to_string(), Tensor::matrix(2, 3, vec![0.1, -2.5, f64::MIN_POSITIVE, 3.0, 0.0, 1e300])),
                ("b".to_string(), Tensor::scalar(-0.0)),
            ]),
        };
        let bytes = write_checkpoint(&ckpt);
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(write_checkpoint(&back), bytes);
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(read_checkpoint(b"NOTACKPT____").is_err());
    }

    #[test]
    fn truncation_rejected() {
        let ckpt = Checkpoint {
            header: "{}".into(),
            params: BTreeMap::from([("w".to_string(), Tensor::zeros(&[4]))]),
        };
        let bytes = write_checkpoint(&ckpt);
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }
}
