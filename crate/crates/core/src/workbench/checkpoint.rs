use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VARP";
pub const VERSION: u32 = 1;

/// Serialises name-sorted tensors followed by a CRC32 of all preceding bytes.
pub fn encode_checkpoint(tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt("unexpected end of checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("not a VARP checkpoint".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let count = r.u32()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= body.len()))
            .ok_or_else(|| Error::Corrupt(format!("`{name}`: implausible extents")))?;
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(e.to_string()))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Corrupt(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes before checksum".into()));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(tensors))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, Tensor> {
        BTreeMap::from([
            (
                "b".to_string(),
                Tensor::new([2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap(),
            ),
            ("a".to_string(), Tensor::scalar(7.0)),
        ])
    }

    #[test]
    fn round_trip_is_bitwise() {
        let t = sample();
        let back = decode_checkpoint(&encode_checkpoint(&t)).unwrap();
        assert_eq!(back.len(), 2);
        for (k, v) in &t {
            assert!(back[k].bit_eq(v));
            assert_eq!(back[k].shape(), v.shape());
        }
    }

    #[test]
    fn damage_is_detected() {
        let bytes = encode_checkpoint(&sample());
        for cut in [0, 5, 20, bytes.len() - 1] {
            assert!(matches!(
                decode_checkpoint(&bytes[..cut]),
                Err(Error::Corrupt(_))
            ));
        }
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(matches!(
            decode_checkpoint(&flipped),
            Err(Error::Corrupt(_))
        ));
        let mut v2 = bytes[..bytes.len() - 4].to_vec();
        v2[4] = 2;
        let crc = crc32fast::hash(&v2);
        v2.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_checkpoint(&v2), Err(Error::Version(2))));
    }
}
