//! Canonical Huffman coding over bytes.
//!
//! The code is described by 256 code lengths (0 = symbol absent). When only
//! one symbol occurs it gets length 1 in the table but costs no bits in the
//! stream: the decoder repeats it `count` times.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

pub const ALPHABET: usize = 256;
/// Longest code the bit buffer can hold.
pub const MAX_CODE_LENGTH: u8 = 57;

pub fn frequencies(data: &[u8]) -> [u64; ALPHABET] {
    let mut f = [0u64; ALPHABET];
    for &b in data {
        f[b as usize] += 1;
    }
    f
}

/// Optimal code lengths for `freqs`. Ties break on the smallest symbol so the
/// result is deterministic.
pub fn code_lengths(freqs: &[u64; ALPHABET]) -> [u8; ALPHABET] {
    let mut lengths = [0u8; ALPHABET];
    let present: Vec<usize> = (0..ALPHABET).filter(|&s| freqs[s] > 0).collect();
    match present.len() {
        0 => return lengths,
        1 => {
            lengths[present[0]] = 1;
            return lengths;
        }
        _ => {}
    }
    // Node arena: leaves first, then internal nodes; parent links give depths.
    let mut parent: Vec<usize> = vec![usize::MAX; present.len()];
    let mut heap: BinaryHeap<Reverse<(u64, usize, usize)>> = present
        .iter()
        .enumerate()
        .map(|(node, &s)| Reverse((freqs[s], s, node)))
        .collect();
    while heap.len() > 1 {
        let Reverse((wa, ka, a)) = heap.pop().expect("len > 1");
        let Reverse((wb, kb, b)) = heap.pop().expect("len > 1");
        let node = parent.len();
        parent.push(usize::MAX);
        parent[a] = node;
        parent[b] = node;
        heap.push(Reverse((wa + wb, ka.min(kb), node)));
    }
    for (leaf, &s) in present.iter().enumerate() {
        let mut depth = 0u32;
        let mut n = leaf;
        while parent[n] != usize::MAX {
            n = parent[n];
            depth += 1;
        }
        lengths[s] = depth.min(255) as u8;
    }
    lengths
}

pub fn kraft_sum(lengths: &[u8; ALPHABET]) -> f64 {
    lengths.iter().filter(|&&l| l > 0).map(|&l| 0.5f64.powi(l as i32)).sum()
}

/// Canonical codewords: `(code, length)` per symbol, assigned in order of
/// (length, symbol).
pub fn canonical_codes(lengths: &[u8; ALPHABET]) -> Result<[(u64, u8); ALPHABET]> {
    let mut codes = [(0u64, 0u8); ALPHABET];
    let mut order: Vec<usize> = (0..ALPHABET).filter(|&s| lengths[s] > 0).collect();
    if order.iter().any(|&s| lengths[s] > MAX_CODE_LENGTH) {
        return Err(Error::Integrity("huffman code length exceeds limit".into()));
    }
    if kraft_sum(lengths) > 1.0 {
        return Err(Error::Integrity("huffman lengths violate the Kraft inequality".into()));
    }
    order.sort_by_key(|&s| (lengths[s], s));
    let mut code = 0u64;
    let mut prev_len = 0u8;
    for (i, &s) in order.iter().enumerate() {
        let len = lengths[s];
        if i > 0 {
            code = (code + 1) << (len - prev_len);
        } else {
            code <<= len;
        }
        codes[s] = (code, len);
        prev_len = len;
    }
    Ok(codes)
}

fn single_symbol(lengths: &[u8; ALPHABET]) -> Option<u8> {
    let mut it = (0..ALPHABET).filter(|&s| lengths[s] > 0);
    match (it.next(), it.next()) {
        (Some(s), None) => Some(s as u8),
        _ => None,
    }
}

/// Packs `data` MSB-first. Every byte of `data` must have a nonzero length.
pub fn encode(data: &[u8], lengths: &[u8; ALPHABET]) -> Result<Vec<u8>> {
    if single_symbol(lengths).is_some() {
        return Ok(Vec::new());
    }
    let codes = canonical_codes(lengths)?;
    let mut out = Vec::new();
    let mut acc: u64 = 0;
    let mut nbits: u32 = 0;
    for &b in data {
        let (code, len) = codes[b as usize];
        if len == 0 {
            return Err(Error::invalid("huffman", format!("symbol {b} has no code")));
        }
        acc = (acc << len) | code;
        nbits += len as u32;
        while nbits >= 8 {
            nbits -= 8;
            out.push((acc >> nbits) as u8);
        }
        acc &= (1u64 << nbits) - 1;
    }
    if nbits > 0 {
        out.push((acc << (8 - nbits)) as u8);
    }
    Ok(out)
}

/// Decodes exactly `count` symbols.
pub fn decode(bytes: &[u8], lengths: &[u8; ALPHABET], count: usize) -> Result<Vec<u8>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if let Some(s) = single_symbol(lengths) {
        return Ok(vec![s; count]);
    }
    let codes = canonical_codes(lengths)?;
    // Canonical decode tables: for each length, first code and the symbols in order.
    let max_len = lengths.iter().copied().max().unwrap_or(0) as usize;
    if max_len == 0 {
        return Err(Error::Integrity("empty huffman table with nonempty stream".into()));
    }
    let mut first_code = vec![0u64; max_len + 1];
    let mut first_index = vec![0usize; max_len + 1];
    let mut count_of = vec![0usize; max_len + 1];
    let mut sorted: Vec<usize> = (0..ALPHABET).filter(|&s| lengths[s] > 0).collect();
    sorted.sort_by_key(|&s| (lengths[s], s));
    for &s in &sorted {
        count_of[lengths[s] as usize] += 1;
    }
    let mut idx = 0;
    for len in 1..=max_len {
        first_index[len] = idx;
        if let Some(&s) = sorted.get(idx) {
            if lengths[s] as usize == len {
                first_code[len] = codes[s].0;
            }
        }
        idx += count_of[len];
    }
    let mut out = Vec::with_capacity(count);
    let mut code = 0u64;
    let mut len = 0usize;
    'bytes: for &byte in bytes {
        for bit in (0..8).rev() {
            code = (code << 1) | u64::from((byte >> bit) & 1);
            len += 1;
            if len > max_len {
                return Err(Error::Integrity("invalid huffman codeword".into()));
            }
            if count_of[len] > 0 && code >= first_code[len] && code - first_code[len] < count_of[len] as u64 {
                out.push(sorted[first_index[len] + (code - first_code[len]) as usize] as u8);
                code = 0;
                len = 0;
                if out.len() == count {
                    break 'bytes;
                }
            }
        }
    }
    if out.len() != count {
        return Err(Error::Integrity(format!(
            "huffman stream ended after {} of {count} symbols",
            out.len()
        )));
    }
    Ok(out)
}

/// Encoded size in bits of data with these frequencies under `lengths`.
pub fn encoded_bits(freqs: &[u64; ALPHABET], lengths: &[u8; ALPHABET]) -> u64 {
    if single_symbol(lengths).is_some() {
        return 0;
    }
    freqs.iter().zip(lengths).map(|(&f, &l)| f * l as u64).sum()
}
