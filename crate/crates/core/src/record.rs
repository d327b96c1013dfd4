//! Named-tensor record format shared by checkpoints and dataset samples.
//!
//! Layout: the magic `SKGE`, a little-endian `u32` format version, then for
//! each tensor its name length, UTF-8 name, rank, extents (all `u32` LE) and
//! the `f32` LE payload, repeated until the end of the buffer.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SKGE";
pub const VERSION: u32 = 1;

pub fn encode(records: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let payload: usize = records
        .iter()
        .map(|(n, t)| 8 + n.len() + 4 * t.rank() + 4 * t.numel())
        .sum();
    let mut out = Vec::with_capacity(8 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Corrupt(format!("truncated {what} at byte {} (need {n}, have {})", self.pos, self.buf.len() - self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Corrupt("bad magic (expected SKGE)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Corrupt(format!("unsupported format version {version}")));
    }
    let mut out = Vec::new();
    while r.pos < buf.len() {
        let len = r.u32("name length")? as usize;
        let name = core::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Corrupt(format!("tensor name at byte {} is not UTF-8", r.pos - len)))?
            .into();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| Error::Corrupt(format!("tensor {name}: extents {shape:?} overflow")))?;
        let bytes = r.take(numel * 4, "payload")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Corrupt(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample() -> Vec<(String, Tensor<f32>)> {
        vec![
            ("a.weight".into(), Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap()),
            ("b".into(), Tensor::scalar(7.0)),
            ("c.3d".into(), Tensor::from_fn(&[2, 1, 2], |i| i as f32 * 1e-3)),
        ]
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let recs = sample();
        let bytes = encode(&recs);
        assert_eq!(&bytes[..4], b"SKGE");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), recs.len());
        for ((n0, t0), (n1, t1)) in recs.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let b0: Vec<u32> = t0.data().iter().map(|v| v.to_bits()).collect();
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b0, b1);
        }
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn hand_laid_bytes() {
        let bytes = encode(&[("x".into(), Tensor::new(&[1], vec![1.0]).unwrap())]);
        let want = [
            b'S', b'K', b'G', b'E', 1, 0, 0, 0, 1, 0, 0, 0, b'x', 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0x80, 0x3f,
        ];
        assert_eq!(bytes, want);
    }

    #[test]
    fn every_truncation_is_corrupt() {
        let recs = sample();
        let bytes = encode(&recs);
        let boundaries: Vec<usize> = (0..=recs.len()).map(|k| encode(&recs[..k]).len()).collect();
        for cut in 0..bytes.len() {
            let r = decode(&bytes[..cut]);
            match boundaries.iter().position(|&b| b == cut) {
                Some(k) => assert_eq!(r.unwrap().len(), k),
                None => assert!(matches!(r, Err(Error::Corrupt(_))), "cut {cut}: {r:?}"),
            }
        }
    }

    #[test]
    fn bad_header_or_name() {
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Corrupt(_))));
        let mut bytes = encode(&sample());
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::Corrupt(_))));
        let mut bytes = encode(&sample());
        bytes[12] = 0xff;
        assert!(matches!(decode(&bytes), Err(Error::Corrupt(_))));
        let mut huge = encode(&[]);
        huge.extend_from_slice(&[0, 0, 0, 0, 2, 0, 0, 0, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff]);
        assert!(matches!(decode(&huge), Err(Error::Corrupt(_))));
    }
}
