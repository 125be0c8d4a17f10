//! Canonical Huffman coding of quantization symbols.
//!
//! Codes are fully determined by the per-symbol length table, which is what
//! the container stores. Bits are packed most-significant first.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{format, param, Result};

/// Longest code the decoder accepts. Huffman depth grows with the logarithm
/// of the total count (base golden ratio), so this only trips on corrupt tables.
pub const MAX_CODE_LEN: u16 = 60;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BitStream {
    pub bytes: Vec<u8>,
    pub bit_len: u64,
}

#[derive(Default)]
struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    pending: u32,
    total: u64,
}

impl BitWriter {
    fn push(&mut self, code: u64, len: u32) {
        let mut remaining = len;
        while remaining > 0 {
            let take = remaining.min(32);
            let chunk = (code >> (remaining - take)) & ((1u64 << take) - 1);
            self.acc = (self.acc << take) | chunk;
            self.pending += take;
            remaining -= take;
            while self.pending >= 8 {
                self.pending -= 8;
                self.bytes.push((self.acc >> self.pending) as u8);
            }
            self.acc &= (1u64 << self.pending) - 1;
        }
        self.total += len as u64;
    }

    fn finish(mut self) -> BitStream {
        if self.pending > 0 {
            self.bytes.push((self.acc << (8 - self.pending)) as u8);
        }
        BitStream {
            bytes: self.bytes,
            bit_len: self.total,
        }
    }
}

/// Code lengths for the given symbol frequencies. A single used symbol gets a
/// 1-bit code; unused symbols get length 0.
pub fn code_lengths(freqs: &[u64]) -> Vec<u16> {
    let mut lengths = vec![0u16; freqs.len()];
    let used: Vec<usize> = (0..freqs.len()).filter(|&s| freqs[s] > 0).collect();
    match used.len() {
        0 => return lengths,
        1 => {
            lengths[used[0]] = 1;
            return lengths;
        }
        _ => {}
    }
    // Nodes 0..used.len() are leaves; parents are appended. Ties break on
    // node id so the tree is deterministic.
    let mut parent: Vec<usize> = vec![usize::MAX; used.len()];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = used
        .iter()
        .enumerate()
        .map(|(node, &s)| Reverse((freqs[s], node)))
        .collect();
    while heap.len() > 1 {
        let Reverse((fa, a)) = heap.pop().unwrap();
        let Reverse((fb, b)) = heap.pop().unwrap();
        let id = parent.len();
        parent.push(usize::MAX);
        parent[a] = id;
        parent[b] = id;
        heap.push(Reverse((fa + fb, id)));
    }
    // Parents always have larger ids than children, so one reverse sweep
    // computes depths.
    let mut depth = vec![0u16; parent.len()];
    for node in (0..parent.len() - 1).rev() {
        depth[node] = depth[parent[node]] + 1;
    }
    for (leaf, &s) in used.iter().enumerate() {
        lengths[s] = depth[leaf];
    }
    lengths
}

/// Canonical code words: symbols sorted by (length, symbol) receive
/// consecutive codes, shifted left whenever the length grows.
pub fn canonical_codes(lengths: &[u16]) -> Result<Vec<u64>> {
    let mut order: Vec<usize> = (0..lengths.len()).filter(|&s| lengths[s] > 0).collect();
    order.sort_by_key(|&s| (lengths[s], s));
    let mut codes = vec![0u64; lengths.len()];
    let mut code = 0u64;
    let mut prev = 0u16;
    for (k, &s) in order.iter().enumerate() {
        let len = lengths[s];
        if len > MAX_CODE_LEN {
            return Err(format(format!("code length {len} exceeds {MAX_CODE_LEN}")));
        }
        if k > 0 {
            code += 1;
        }
        code <<= len - prev;
        prev = len;
        if len < 64 && code >> len != 0 {
            return Err(format("code lengths violate the Kraft inequality"));
        }
        codes[s] = code;
    }
    Ok(codes)
}

pub fn huffman_encode(symbols: &[u32], alphabet_size: usize) -> Result<(Vec<u16>, BitStream)> {
    let mut freqs = vec![0u64; alphabet_size];
    for &s in symbols {
        let slot = freqs
            .get_mut(s as usize)
            .ok_or_else(|| param(format!("symbol {s} outside alphabet of {alphabet_size}")))?;
        *slot += 1;
    }
    let lengths = code_lengths(&freqs);
    let codes = canonical_codes(&lengths)?;
    let mut w = BitWriter::default();
    for &s in symbols {
        w.push(codes[s as usize], lengths[s as usize] as u32);
    }
    Ok((lengths, w.finish()))
}

struct DecodeTable {
    /// Indexed by length: first canonical code, number of codes, and offset
    /// into `sorted`.
    first: Vec<u64>,
    count: Vec<u64>,
    offset: Vec<usize>,
    sorted: Vec<u32>,
    max_len: usize,
}

impl DecodeTable {
    fn new(lengths: &[u16]) -> Result<Self> {
        canonical_codes(lengths)?;
        let max_len = lengths.iter().copied().max().unwrap_or(0) as usize;
        let mut count = vec![0u64; max_len + 1];
        for &l in lengths {
            if l > 0 {
                count[l as usize] += 1;
            }
        }
        let mut sorted: Vec<u32> = (0..lengths.len() as u32).filter(|&s| lengths[s as usize] > 0).collect();
        sorted.sort_by_key(|&s| (lengths[s as usize], s));
        let mut first = vec![0u64; max_len + 1];
        let mut offset = vec![0usize; max_len + 1];
        let mut code = 0u64;
        let mut seen = 0usize;
        for len in 1..=max_len {
            first[len] = code;
            offset[len] = seen;
            seen += count[len] as usize;
            code = (code + count[len]) << 1;
        }
        Ok(DecodeTable {
            first,
            count,
            offset,
            sorted,
            max_len,
        })
    }
}

pub fn huffman_decode(lengths: &[u16], bits: &BitStream, count: usize) -> Result<Vec<u32>> {
    if (bits.bit_len + 7) / 8 > bits.bytes.len() as u64 {
        return Err(format("bit length exceeds payload bytes"));
    }
    let table = DecodeTable::new(lengths)?;
    if count > 0 && table.sorted.is_empty() {
        return Err(format("empty code table for a non-empty stream"));
    }
    let mut out = Vec::with_capacity(count.min(bits.bit_len as usize + 1));
    let mut pos = 0u64;
    while out.len() < count {
        let mut code = 0u64;
        let mut len = 0usize;
        loop {
            if pos >= bits.bit_len {
                return Err(format(format!(
                    "bitstream exhausted after {} of {count} symbols",
                    out.len()
                )));
            }
            let byte = bits.bytes[(pos / 8) as usize];
            let bit = (byte >> (7 - (pos % 8))) & 1;
            pos += 1;
            code = (code << 1) | bit as u64;
            len += 1;
            if len > table.max_len {
                return Err(format("invalid code in bitstream"));
            }
            let rel = code.wrapping_sub(table.first[len]);
            if code >= table.first[len] && rel < table.count[len] {
                out.push(table.sorted[table.offset[len] + rel as usize]);
                break;
            }
        }
    }
    Ok(out)
}

/// Empirical entropy of the symbol histogram in bits per symbol.
pub fn entropy_bits(symbols: &[u32], alphabet_size: usize) -> f64 {
    if symbols.is_empty() {
        return 0.0;
    }
    let mut freqs = vec![0u64; alphabet_size];
    for &s in symbols {
        if let Some(f) = freqs.get_mut(s as usize) {
            *f += 1;
        }
    }
    let n = symbols.len() as f64;
    freqs
        .iter()
        .filter(|&&f| f > 0)
        .map(|&f| {
            let p = f as f64 / n;
            -p * p.log2()
        })
        .sum()
}
