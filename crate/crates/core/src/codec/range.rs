//! Static-model range coder.
//!
//! 33-bit `low` in a `u64`, 32-bit `range`, byte-wise renormalization with
//! carry propagation through a cached byte and a run of pending `0xFF`s. The
//! always-zero leading byte of the classic formulation is not emitted.
//!
//! Frequencies are used exactly when the table total fits in
//! [`PRECISION_BITS`]; larger tables are rescaled deterministically so the
//! decoder rebuilds the same cumulative table from the stored counts.

use crate::entropy::FrequencyTable;
use crate::error::{Error, Result};

pub const PRECISION_BITS: u32 = 16;
const TOP: u32 = 1 << 24;

/// Cumulative model derived from a [`FrequencyTable`].
#[derive(Clone, Debug)]
pub(crate) struct CodingModel {
    total: u32,
    /// Scaled frequency per table slot.
    freq: Vec<u32>,
    /// Cumulative start per table slot (in coding order).
    cum: Vec<u32>,
    /// Table slots in coding order; the most frequent slot is last and
    /// absorbs the rounding slack of `range / total`.
    order: Vec<usize>,
    /// `cum` of `order[k]`, ascending.
    starts: Vec<u32>,
}

impl CodingModel {
    pub fn new(table: &FrequencyTable) -> Result<Self> {
        table.validate().map_err(|e| Error::Encode(e.to_string()))?;
        if table.total > u32::MAX as u64 {
            return Err(Error::Encode(format!("table total {} exceeds u32", table.total)));
        }
        let limit = 1u64 << PRECISION_BITS;
        let nonzero: Vec<usize> = (0..table.counts.len())
            .filter(|&i| table.counts[i] > 0)
            .collect();
        if nonzero.len() as u64 > limit / 2 {
            return Err(Error::Encode(format!(
                "{} distinct symbols exceed the coder precision",
                nonzero.len()
            )));
        }
        let mut freq = vec![0u32; table.counts.len()];
        let total = if table.total <= limit {
            for &i in &nonzero {
                freq[i] = table.counts[i];
            }
            table.total as u32
        } else {
            let mut sum: i64 = 0;
            for &i in &nonzero {
                let f = ((table.counts[i] as u64 * limit) / table.total).max(1);
                freq[i] = f as u32;
                sum += f as i64;
            }
            let mut diff = limit as i64 - sum;
            let mut by_size = nonzero.clone();
            by_size.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
            if diff > 0 {
                freq[by_size[0]] += diff as u32;
            }
            for &i in &by_size {
                if diff >= 0 {
                    break;
                }
                let take = (freq[i] as i64 - 1).min(-diff);
                freq[i] -= take as u32;
                diff += take;
            }
            limit as u32
        };
        let last = *nonzero
            .iter()
            .max_by(|&&a, &&b| freq[a].cmp(&freq[b]).then(b.cmp(&a)))
            .expect("validated non-empty");
        let mut order: Vec<usize> = nonzero.iter().copied().filter(|&i| i != last).collect();
        order.push(last);
        let mut cum = vec![0u32; table.counts.len()];
        let mut starts = Vec::with_capacity(order.len());
        let mut acc = 0u32;
        for &i in &order {
            cum[i] = acc;
            starts.push(acc);
            acc += freq[i];
        }
        debug_assert_eq!(acc, total);
        Ok(CodingModel {
            total,
            freq,
            cum,
            order,
            starts,
        })
    }

    fn last(&self) -> usize {
        *self.order.last().expect("non-empty")
    }
}

struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    started: bool,
    out: Vec<u8>,
}

impl Encoder {
    fn new() -> Self {
        Encoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            started: false,
            out: Vec::new(),
        }
    }

    fn emit(&mut self, b: u8) {
        if self.started {
            self.out.push(b);
        } else {
            debug_assert_eq!(b, 0, "leading byte is always zero");
            self.started = true;
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.emit(temp.wrapping_add(carry));
                temp = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn encode(&mut self, cum: u32, freq: u32, total: u32, is_last: bool) {
        let r = self.range / total;
        self.low += r as u64 * cum as u64;
        self.range = if is_last {
            self.range - r * cum
        } else {
            r * freq
        };
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub fn range_encode(stream: &[i64], table: &FrequencyTable) -> Result<Vec<u8>> {
    if stream.is_empty() {
        return Ok(Vec::new());
    }
    let model = CodingModel::new(table)?;
    let last = model.last();
    let mut enc = Encoder::new();
    for (pos, &s) in stream.iter().enumerate() {
        let slot = s - table.symbol_min as i64;
        if slot < 0 || slot as usize >= model.freq.len() || model.freq[slot as usize] == 0 {
            return Err(Error::Encode(format!(
                "symbol {s} at position {pos} is not in the frequency table"
            )));
        }
        let slot = slot as usize;
        enc.encode(model.cum[slot], model.freq[slot], model.total, slot == last);
    }
    Ok(enc.finish())
}

pub fn range_decode(bytes: &[u8], table: &FrequencyTable, n: usize) -> Result<Vec<i64>> {
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
    let model = CodingModel::new(table).map_err(|e| Error::Decode(e.to_string()))?;
    let last_pos = model.order.len() - 1;
    let mut pos = 0usize;
    let mut next = || -> Result<u8> {
        let b = *bytes
            .get(pos)
            .ok_or_else(|| Error::Decode(format!("payload truncated at byte {pos}")))?;
        pos += 1;
        Ok(b)
    };
    let mut code: u32 = 0;
    for _ in 0..4 {
        code = (code << 8) | next()? as u32;
    }
    let mut range = u32::MAX;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let r = range / model.total;
        let v = code / r;
        let k = if v >= model.starts[last_pos] {
            last_pos
        } else {
            model.starts.partition_point(|&c| c <= v) - 1
        };
        let slot = model.order[k];
        let cum = model.starts[k];
        code -= r * cum;
        range = if k == last_pos {
            range - r * cum
        } else {
            r * model.freq[slot]
        };
        if code >= range {
            return Err(Error::Decode("payload is corrupt".into()));
        }
        while range < TOP {
            code = (code << 8) | next()? as u32;
            range <<= 8;
        }
        out.push(table.symbol_min as i64 + slot as i64);
    }
    if pos != bytes.len() {
        return Err(Error::Decode(format!(
            "{} trailing payload bytes",
            bytes.len() - pos
        )));
    }
    Ok(out)
}
