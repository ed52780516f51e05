//! Canonical Huffman coder over a static [`FrequencyTable`].
//!
//! Code lengths come from a deterministic merge (ties broken by the
//! smallest contained slot), codes are assigned canonically by
//! `(length, slot)`, and bits are packed MSB-first with zero padding.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::entropy::FrequencyTable;
use crate::error::{Error, Result};

/// Code length per table slot (0 for absent symbols).
pub fn code_lengths(table: &FrequencyTable) -> Result<Vec<u32>> {
    table.validate()?;
    let mut lengths = vec![0u32; table.counts.len()];
    let live: Vec<usize> = (0..table.counts.len())
        .filter(|&i| table.counts[i] > 0)
        .collect();
    if live.len() == 1 {
        lengths[live[0]] = 1;
        return Ok(lengths);
    }
    // Node arena: leaves first, then internal nodes with their children.
    let mut parent: Vec<usize> = vec![usize::MAX; live.len()];
    let mut heap: BinaryHeap<Reverse<(u64, usize, usize)>> = live
        .iter()
        .enumerate()
        .map(|(node, &slot)| Reverse((table.counts[slot] as u64, slot, node)))
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
    for (leaf, &slot) in live.iter().enumerate() {
        let mut depth = 0;
        let mut n = leaf;
        while parent[n] != usize::MAX {
            n = parent[n];
            depth += 1;
        }
        lengths[slot] = depth;
    }
    if lengths.iter().any(|&l| l > 63) {
        return Err(Error::Encode("Huffman code longer than 63 bits".into()));
    }
    Ok(lengths)
}

struct Canonical {
    /// `(slot, length, code)` per slot; absent symbols have length 0.
    codes: Vec<(u32, u64)>,
    /// Slots sorted by `(length, slot)`.
    sorted: Vec<usize>,
    /// Per length: first code, number of codes, offset into `sorted`.
    first: Vec<u64>,
    count: Vec<u64>,
    offset: Vec<usize>,
}

fn canonical(table: &FrequencyTable) -> Result<Canonical> {
    let lengths = code_lengths(table)?;
    let max_len = *lengths.iter().max().unwrap_or(&0) as usize;
    let mut sorted: Vec<usize> = (0..lengths.len()).filter(|&i| lengths[i] > 0).collect();
    sorted.sort_by_key(|&i| (lengths[i], i));
    let mut codes = vec![(0u32, 0u64); lengths.len()];
    let mut first = vec![0u64; max_len + 1];
    let mut count = vec![0u64; max_len + 1];
    let mut offset = vec![0usize; max_len + 1];
    let mut code = 0u64;
    let mut len = 0u32;
    for (k, &slot) in sorted.iter().enumerate() {
        let l = lengths[slot];
        if l != len {
            code <<= l - len;
            len = l;
            first[l as usize] = code;
            offset[l as usize] = k;
        }
        codes[slot] = (l, code);
        count[l as usize] += 1;
        code += 1;
    }
    Ok(Canonical {
        codes,
        sorted,
        first,
        count,
        offset,
    })
}

/// Total payload bits for the stream described by `table`.
pub fn huffman_bits(table: &FrequencyTable) -> Result<u64> {
    let lengths = code_lengths(table)?;
    Ok(table
        .counts
        .iter()
        .zip(&lengths)
        .map(|(&c, &l)| c as u64 * l as u64)
        .sum())
}

pub fn huffman_encode(stream: &[i64], table: &FrequencyTable) -> Result<Vec<u8>> {
    if stream.is_empty() {
        return Ok(Vec::new());
    }
    let canon = canonical(table)?;
    let mut out = Vec::new();
    let mut acc = 0u8;
    let mut used = 0u32;
    for (pos, &s) in stream.iter().enumerate() {
        let slot = s - table.symbol_min as i64;
        let entry = usize::try_from(slot)
            .ok()
            .and_then(|k| canon.codes.get(k))
            .filter(|(l, _)| *l > 0)
            .ok_or_else(|| {
                Error::Encode(format!(
                    "symbol {s} at position {pos} is not in the frequency table"
                ))
            })?;
        let (len, code) = *entry;
        for b in (0..len).rev() {
            acc = (acc << 1) | ((code >> b) & 1) as u8;
            used += 1;
            if used == 8 {
                out.push(acc);
                acc = 0;
                used = 0;
            }
        }
    }
    if used > 0 {
        out.push(acc << (8 - used));
    }
    Ok(out)
}

pub fn huffman_decode(bytes: &[u8], table: &FrequencyTable, n: usize) -> Result<Vec<i64>> {
    if n as u64 != table.total {
        return Err(Error::Decode(format!(
            "requested {n} symbols but the table describes {}",
            table.total
        )));
    }
    if n == 0 {
        return if bytes.is_empty() {
            Ok(Vec::new())
        } else {
            Err(Error::Decode("payload present for an empty stream".into()))
        };
    }
    let canon = canonical(table).map_err(|e| Error::Decode(e.to_string()))?;
    let max_len = canon.first.len() - 1;
    let total_bits = bytes.len() as u64 * 8;
    let mut bit = 0u64;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut code = 0u64;
        let mut len = 0usize;
        loop {
            if bit >= total_bits {
                return Err(Error::Decode(format!(
                    "payload truncated after {} of {n} symbols",
                    out.len()
                )));
            }
            let b = (bytes[(bit / 8) as usize] >> (7 - bit % 8)) & 1;
            bit += 1;
            code = (code << 1) | b as u64;
            len += 1;
            if len > max_len {
                return Err(Error::Decode("invalid Huffman code".into()));
            }
            if canon.count[len] > 0 && code >= canon.first[len] && code - canon.first[len] < canon.count[len] {
                let slot = canon.sorted[canon.offset[len] + (code - canon.first[len]) as usize];
                out.push(table.symbol_min as i64 + slot as i64);
                break;
            }
        }
    }
    if bytes.len() as u64 != bit.div_ceil(8) {
        return Err(Error::Decode(format!(
            "{} trailing payload bytes",
            bytes.len() as u64 - bit.div_ceil(8)
        )));
    }
    let pad = (total_bits - bit) as u32;
    if pad > 0 && bytes[bytes.len() - 1] & ((1u8 << pad) - 1) != 0 {
        return Err(Error::Decode("non-zero padding bits".into()));
    }
    Ok(out)
}
