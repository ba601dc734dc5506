//! Canonical Huffman coding over `u32` symbols.
//!
//! Codes are packed MSB-first. The codebook only stores `(symbol, length)`
//! pairs in canonical order (length, then symbol); code words are reassigned
//! from the lengths on both sides so the serialized form is deterministic.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use crate::error::{Error, Result};

/// Longest code word the coder will emit.
pub const MAX_CODE_LEN: u8 = 32;

const DENSE_SYMBOL_LIMIT: u32 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codebook {
    /// `(symbol, code length)` in canonical order.
    entries: Vec<(u32, u8)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitStream {
    pub bytes: Vec<u8>,
    pub bit_len: u64,
}

impl Codebook {
    /// Builds a length-limited Huffman codebook from `(symbol, count)` pairs.
    pub fn from_frequencies(freqs: &[(u32, u64)]) -> Result<Self> {
        let mut freqs: Vec<(u32, u64)> = freqs.iter().copied().filter(|&(_, c)| c > 0).collect();
        if freqs.is_empty() {
            return Err(Error::Parameter(
                "cannot build a codebook for an empty stream".into(),
            ));
        }
        freqs.sort_unstable_by_key(|&(s, _)| s);
        if freqs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Parameter(
                "duplicate symbol in frequency table".into(),
            ));
        }
        if freqs.len() == 1 {
            return Ok(Codebook {
                entries: vec![(freqs[0].0, 1)],
            });
        }
        let mut counts: Vec<u64> = freqs.iter().map(|&(_, c)| c).collect();
        loop {
            let lengths = tree_lengths(&counts);
            if lengths.iter().all(|&l| l <= MAX_CODE_LEN as u32) {
                let entries = freqs
                    .iter()
                    .zip(lengths)
                    .map(|(&(s, _), l)| (s, l as u8))
                    .collect();
                return Self::from_lengths(entries);
            }
            // Flatten the distribution until the tree fits.
            for c in &mut counts {
                *c = (*c >> 1).max(1);
            }
        }
    }

    /// Builds a codebook from explicit code lengths, validating that they form
    /// a prefix code.
    pub fn from_lengths(mut entries: Vec<(u32, u8)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Decode("empty codebook".into()));
        }
        entries.sort_unstable_by_key(|&(s, l)| (l, s));
        if entries.iter().any(|&(_, l)| l == 0 || l > MAX_CODE_LEN) {
            return Err(Error::Decode("code length out of range".into()));
        }
        let mut symbols: Vec<u32> = entries.iter().map(|&(s, _)| s).collect();
        symbols.sort_unstable();
        if symbols.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Decode("duplicate symbol in codebook".into()));
        }
        // Kraft sum scaled by 2^MAX_CODE_LEN.
        let kraft: u128 = entries
            .iter()
            .map(|&(_, l)| 1u128 << (MAX_CODE_LEN - l))
            .sum();
        if kraft > 1u128 << MAX_CODE_LEN {
            return Err(Error::Decode(
                "code lengths violate the Kraft inequality".into(),
            ));
        }
        Ok(Codebook { entries })
    }

    pub fn entries(&self) -> &[(u32, u8)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Canonical code words, parallel to [`Self::entries`].
    fn code_words(&self) -> Vec<u32> {
        let mut words = Vec::with_capacity(self.entries.len());
        let mut code: u64 = 0;
        let mut prev_len = self.entries[0].1;
        for (i, &(_, len)) in self.entries.iter().enumerate() {
            if i > 0 {
                code = (code + 1) << (len - prev_len);
            }
            prev_len = len;
            words.push(code as u32);
        }
        words
    }

    /// Expected code length in bits under the given symbol counts.
    pub fn total_bits(&self, freqs: &[(u32, u64)]) -> u64 {
        let lens: HashMap<u32, u8> = self.entries.iter().copied().collect();
        freqs
            .iter()
            .map(|&(s, c)| c * lens.get(&s).copied().unwrap_or(0) as u64)
            .sum()
    }
}

/// Code lengths of an (unlimited) Huffman tree. Ties break on node creation
/// order so the result is a pure function of `counts`.
fn tree_lengths(counts: &[u64]) -> Vec<u32> {
    let n = counts.len();
    let mut parent = vec![usize::MAX; 2 * n - 1];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| Reverse((c, i)))
        .collect();
    let mut next = n;
    while heap.len() > 1 {
        let Reverse((ca, a)) = heap.pop().unwrap();
        let Reverse((cb, b)) = heap.pop().unwrap();
        parent[a] = next;
        parent[b] = next;
        heap.push(Reverse((ca + cb, next)));
        next += 1;
    }
    // Internal nodes are created after their children, so a reverse sweep
    // sees every parent's depth before its children.
    let root = next - 1;
    let mut depth = vec![0u32; 2 * n - 1];
    for node in (0..root).rev() {
        depth[node] = depth[parent[node]] + 1;
    }
    depth.truncate(n);
    depth
}

/// Symbol counts in ascending symbol order.
pub fn symbol_frequencies(symbols: &[u32]) -> Vec<(u32, u64)> {
    let max = symbols.iter().copied().max().unwrap_or(0);
    if max < DENSE_SYMBOL_LIMIT {
        let mut counts = vec![0u64; max as usize + 1];
        for &s in symbols {
            counts[s as usize] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .filter(|&(_, c)| c > 0)
            .map(|(s, c)| (s as u32, c))
            .collect()
    } else {
        let mut counts: HashMap<u32, u64> = HashMap::new();
        for &s in symbols {
            *counts.entry(s).or_default() += 1;
        }
        let mut v: Vec<_> = counts.into_iter().collect();
        v.sort_unstable();
        v
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    acc_bits: u32,
    total: u64,
}

impl BitWriter {
    fn with_capacity(bytes: usize) -> Self {
        BitWriter {
            bytes: Vec::with_capacity(bytes),
            acc: 0,
            acc_bits: 0,
            total: 0,
        }
    }

    #[inline]
    fn put(&mut self, code: u32, len: u8) {
        self.acc = (self.acc << len) | code as u64;
        self.acc_bits += len as u32;
        self.total += len as u64;
        while self.acc_bits >= 8 {
            self.acc_bits -= 8;
            self.bytes.push((self.acc >> self.acc_bits) as u8);
        }
        self.acc &= (1u64 << self.acc_bits) - 1;
    }

    fn finish(mut self) -> BitStream {
        if self.acc_bits > 0 {
            self.bytes.push((self.acc << (8 - self.acc_bits)) as u8);
        }
        BitStream {
            bytes: self.bytes,
            bit_len: self.total,
        }
    }
}

enum CodeTable {
    Dense(Vec<(u32, u8)>),
    Sparse(HashMap<u32, (u32, u8)>),
}

impl CodeTable {
    fn new(book: &Codebook) -> Self {
        let words = book.code_words();
        let max = book.entries.iter().map(|&(s, _)| s).max().unwrap();
        if max < DENSE_SYMBOL_LIMIT {
            let mut dense = vec![(0u32, 0u8); max as usize + 1];
            for (&(s, l), &w) in book.entries.iter().zip(&words) {
                dense[s as usize] = (w, l);
            }
            CodeTable::Dense(dense)
        } else {
            CodeTable::Sparse(
                book.entries
                    .iter()
                    .zip(&words)
                    .map(|(&(s, l), &w)| (s, (w, l)))
                    .collect(),
            )
        }
    }

    #[inline]
    fn get(&self, s: u32) -> Option<(u32, u8)> {
        match self {
            CodeTable::Dense(v) => v.get(s as usize).copied().filter(|&(_, l)| l > 0),
            CodeTable::Sparse(m) => m.get(&s).copied(),
        }
    }
}

/// Encodes `symbols` with an existing codebook.
pub fn encode_with(book: &Codebook, symbols: &[u32]) -> Result<BitStream> {
    let table = CodeTable::new(book);
    let mut w = BitWriter::with_capacity(symbols.len() / 2 + 8);
    for &s in symbols {
        let (code, len) = table
            .get(s)
            .ok_or_else(|| Error::Parameter(format!("symbol {s} missing from codebook")))?;
        w.put(code, len);
    }
    Ok(w.finish())
}

pub fn huffman_encode(symbols: &[u32]) -> Result<(Codebook, BitStream)> {
    let book = Codebook::from_frequencies(&symbol_frequencies(symbols))?;
    let bits = encode_with(&book, symbols)?;
    Ok((book, bits))
}

/// Decodes exactly `count` symbols. The stream must be consumed exactly.
pub fn huffman_decode(book: &Codebook, bits: &BitStream, count: usize) -> Result<Vec<u32>> {
    if bits.bit_len > bits.bytes.len() as u64 * 8 {
        return Err(Error::Decode(format!(
            "bit length {} exceeds {} payload bytes",
            bits.bit_len,
            bits.bytes.len()
        )));
    }
    let max_len = book.entries.last().map(|&(_, l)| l).unwrap_or(0) as usize;
    // Per-length canonical tables: first code word and index of its symbol.
    let mut first_code = vec![0u64; max_len + 2];
    let mut first_index = vec![0usize; max_len + 2];
    let mut len_count = vec![0u64; max_len + 2];
    for &(_, l) in &book.entries {
        len_count[l as usize] += 1;
    }
    let mut code = 0u64;
    let mut index = 0usize;
    for l in 1..=max_len {
        first_code[l] = code;
        first_index[l] = index;
        code = (code + len_count[l]) << 1;
        index += len_count[l] as usize;
    }

    let mut out = Vec::with_capacity(count);
    let mut pos: u64 = 0;
    for _ in 0..count {
        let mut code = 0u64;
        let mut len = 0usize;
        loop {
            if pos >= bits.bit_len {
                return Err(Error::Decode("truncated bitstream".into()));
            }
            let byte = bits.bytes[(pos >> 3) as usize];
            let bit = (byte >> (7 - (pos & 7))) & 1;
            pos += 1;
            code = (code << 1) | bit as u64;
            len += 1;
            if len > max_len {
                return Err(Error::Decode("invalid code word".into()));
            }
            let offset = code.wrapping_sub(first_code[len]);
            if code >= first_code[len] && offset < len_count[len] {
                out.push(book.entries[first_index[len] + offset as usize].0);
                break;
            }
        }
    }
    if pos != bits.bit_len {
        return Err(Error::Decode(format!(
            "{} trailing bits after {count} symbols",
            bits.bit_len - pos
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn skewed_stream_compresses() {
        let x = [0, 0, 0, 0, 0, 0, 0, 1];
        let (book, bits) = huffman_encode(&x).unwrap();
        assert!(bits.bit_len < 8 * 32);
        assert_eq!(huffman_decode(&book, &bits, x.len()).unwrap(), x);
    }

    #[test]
    fn single_symbol_uses_one_bit() {
        let x = [3, 3, 3];
        let (book, bits) = huffman_encode(&x).unwrap();
        assert_eq!(book.entries(), &[(3, 1)]);
        assert_eq!(bits.bit_len, 3);
        assert_eq!(huffman_decode(&book, &bits, 3).unwrap(), x);
    }

    #[test]
    fn geometric_stream_is_near_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = 0.3f64;
        let symbols: Vec<u32> = (0..100_000)
            .map(|_| {
                let u: f64 = rng.random();
                ((1.0 - u).ln() / (1.0 - p).ln()).floor() as u32
            })
            .collect();
        let (book, bits) = huffman_encode(&symbols).unwrap();
        assert_eq!(
            huffman_decode(&book, &bits, symbols.len()).unwrap(),
            symbols
        );

        let freqs = symbol_frequencies(&symbols);
        let n = symbols.len() as f64;
        let entropy: f64 = freqs
            .iter()
            .map(|&(_, c)| {
                let q = c as f64 / n;
                -q * q.log2()
            })
            .sum();
        let mean_bits = bits.bit_len as f64 / n;
        assert!(mean_bits >= entropy - 1e-9);
        assert!(
            mean_bits <= entropy + 1.0 + 0.1,
            "{mean_bits} vs H={entropy}"
        );
    }

    #[test]
    fn truncated_stream_is_a_decode_error() {
        let x: Vec<u32> = (0..100).map(|i| i % 7).collect();
        let (book, mut bits) = huffman_encode(&x).unwrap();
        bits.bit_len -= 3;
        assert!(matches!(
            huffman_decode(&book, &bits, x.len()),
            Err(Error::Decode(_))
        ));
        // Asking for more symbols than were written.
        let (book, bits) = huffman_encode(&x).unwrap();
        assert!(huffman_decode(&book, &bits, x.len() + 1).is_err());
    }

    #[test]
    fn rejects_invalid_codebooks() {
        assert!(Codebook::from_lengths(vec![(0, 1), (1, 1), (2, 1)]).is_err());
        assert!(Codebook::from_lengths(vec![(0, 1), (0, 2)]).is_err());
        assert!(Codebook::from_lengths(vec![(0, 0)]).is_err());
    }

    #[test]
    fn lengths_are_limited() {
        // Fibonacci counts produce a maximally deep tree.
        let mut fib = vec![1u64, 1];
        while fib.len() < 45 {
            let n = fib[fib.len() - 1] + fib[fib.len() - 2];
            fib.push(n);
        }
        let freqs: Vec<(u32, u64)> = fib
            .iter()
            .enumerate()
            .map(|(i, &c)| (i as u32, c))
            .collect();
        let book = Codebook::from_frequencies(&freqs).unwrap();
        assert!(book.entries().iter().all(|&(_, l)| l <= MAX_CODE_LEN));
        let symbols: Vec<u32> = (0..45).collect();
        let bits = encode_with(&book, &symbols).unwrap();
        assert_eq!(huffman_decode(&book, &bits, 45).unwrap(), symbols);
    }

    #[test]
    fn sparse_symbols_round_trip() {
        let x = [u32::MAX, 5, u32::MAX, 1 << 30];
        let (book, bits) = huffman_encode(&x).unwrap();
        assert_eq!(huffman_decode(&book, &bits, 4).unwrap(), x);
    }

    proptest! {
        #[test]
        fn round_trip_identity(x in prop::collection::vec(0u32..300, 1..2000)) {
            let (book, bits) = huffman_encode(&x).unwrap();
            prop_assert_eq!(huffman_decode(&book, &bits, x.len()).unwrap(), x);
        }
    }
}
