//! Bit-exact blob layout (all integers little-endian):
//!
//! ```text
//! "ACZ1" | u8 version=1 | u8 predictor | u8 rank | u64 extents[rank]
//! f64 eb | u32 quant_radius | u32 outlier_count
//! u16 symbol_count | (u32 symbol, u8 code_len)[symbol_count]   canonical order
//! u64 bit_len | bitstream bytes (ceil(bit_len / 8))
//! (u64 index, f32 value)[outlier_count]
//! ```
//!
//! A full 65536-entry codebook is written with `symbol_count = 0`; a codebook
//! is never empty so the value is unambiguous.

use super::huffman::{BitStream, Codebook};
use super::{CodecParams, CompressedTensor, Predictor};
use crate::error::{Error, Result};

pub const BLOB_MAGIC: &[u8; 4] = b"ACZ1";
const VERSION: u8 = 1;

pub(super) fn serialized_len(c: &CompressedTensor) -> usize {
    4 + 1
        + 1
        + 1
        + 8 * c.shape.len()
        + 8
        + 4
        + 4
        + 2
        + 5 * c.codebook.len()
        + 8
        + c.bitstream.bytes.len()
        + 12 * c.outliers.len()
}

pub(super) fn serialize(c: &CompressedTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(serialized_len(c));
    out.extend_from_slice(BLOB_MAGIC);
    out.push(VERSION);
    out.push(c.params.predictor.id());
    out.push(c.shape.len() as u8);
    for &d in &c.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&c.params.eb.to_le_bytes());
    out.extend_from_slice(&c.params.quant_radius.to_le_bytes());
    out.extend_from_slice(&(c.outliers.len() as u32).to_le_bytes());
    let n_sym = c.codebook.len();
    debug_assert!(n_sym <= 1 << 16);
    out.extend_from_slice(&((n_sym & 0xffff) as u16).to_le_bytes());
    for &(s, l) in c.codebook.entries() {
        out.extend_from_slice(&s.to_le_bytes());
        out.push(l);
    }
    out.extend_from_slice(&c.bitstream.bit_len.to_le_bytes());
    out.extend_from_slice(&c.bitstream.bytes);
    for &(i, v) in &c.outliers {
        out.extend_from_slice(&i.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.pos, format!("truncated {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub(super) fn deserialize(bytes: &[u8]) -> Result<CompressedTensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != BLOB_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"ACZ1\""));
    }
    let version = cur.u8("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let pred_id = cur.u8("predictor id")?;
    let predictor = Predictor::from_id(pred_id)
        .ok_or_else(|| Error::format(5, format!("unknown predictor id {pred_id}")))?;
    let rank = cur.u8("rank")? as usize;
    if rank == 0 {
        return Err(Error::format(6, "rank must be at least 1"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let at = cur.pos;
        let d = cur.u64("extent")?;
        let d = usize::try_from(d)
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::format(at, format!("invalid extent {d}")))?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::format(at, "shape overflows"))?;
        shape.push(d);
    }
    let eb_at = cur.pos;
    let eb = f64::from_le_bytes(cur.take(8, "error bound")?.try_into().unwrap());
    let quant_radius = cur.u32("quant radius")?;
    let params = CodecParams {
        eb,
        quant_radius,
        predictor,
    };
    params
        .validate()
        .map_err(|e| Error::format(eb_at, e.to_string()))?;
    let n_outliers = cur.u32("outlier count")? as usize;

    let n_sym = match cur.u16("symbol count")? {
        0 => 1 << 16,
        n => n as usize,
    };
    let book_at = cur.pos;
    let mut entries = Vec::with_capacity(n_sym);
    for _ in 0..n_sym {
        let s = cur.u32("codebook symbol")?;
        let l = cur.u8("codebook length")?;
        entries.push((s, l));
    }
    if entries
        .windows(2)
        .any(|w| (w[0].1, w[0].0) >= (w[1].1, w[1].0))
    {
        return Err(Error::format(book_at, "codebook not in canonical order"));
    }
    let codebook =
        Codebook::from_lengths(entries).map_err(|e| Error::format(book_at, e.to_string()))?;

    let bit_len = cur.u64("bit length")?;
    let n_bytes = usize::try_from(bit_len.div_ceil(8))
        .map_err(|_| Error::format(cur.pos, "bit length too large"))?;
    let payload = cur.take(n_bytes, "bitstream")?.to_vec();

    let mut outliers = Vec::with_capacity(n_outliers.min(bytes.len() / 12 + 1));
    for _ in 0..n_outliers {
        let at = cur.pos;
        let i = cur.u64("outlier index")?;
        let v = f32::from_le_bytes(cur.take(4, "outlier value")?.try_into().unwrap());
        if i >= count as u64 {
            return Err(Error::format(at, format!("outlier index {i} out of range")));
        }
        if let Some(&(prev, _)) = outliers.last() {
            if i <= prev {
                return Err(Error::format(
                    at,
                    format!("outlier index {i} not increasing"),
                ));
            }
        }
        if !v.is_finite() {
            return Err(Error::format(at + 8, "non-finite outlier value"));
        }
        outliers.push((i, v));
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(
            cur.pos,
            format!("{} trailing bytes", bytes.len() - cur.pos),
        ));
    }
    Ok(CompressedTensor {
        shape,
        params,
        codebook,
        bitstream: BitStream {
            bytes: payload,
            bit_len,
        },
        outliers,
    })
}
