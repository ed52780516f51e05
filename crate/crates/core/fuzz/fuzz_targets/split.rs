//! Input layout shared by the decoder targets:
//! `[alphabet k] [k count bytes] [n: u16 le] [payload ...]`.

use l2c_core::entropy::FrequencyTable;

pub fn split(data: &[u8]) -> Option<(FrequencyTable, usize, &[u8])> {
    let (&k, rest) = data.split_first()?;
    let k = (k as usize % 64) + 1;
    if rest.len() < k + 2 {
        return None;
    }
    let (counts, rest) = rest.split_at(k);
    let counts: Vec<u32> = counts.iter().map(|&c| c as u32).collect();
    let total = counts.iter().map(|&c| c as u64).sum();
    let table = FrequencyTable {
        symbol_min: -(k as i32 / 2),
        counts,
        total,
    };
    table.validate().ok()?;
    let n = u16::from_le_bytes([rest[0], rest[1]]) as usize;
    Some((table, n, &rest[2..]))
}
