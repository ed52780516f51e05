//! Per-layer statistics of an archive, as CSV or JSON.

use serde::Serialize;

use crate::codec::archive::CompressedArchive;
use crate::entropy::{exact_coding_length_bits, exact_table};
use crate::error::Result;

pub const CSV_HEADER: &str = "layer,numel,sparsity,entropy_bits_per_weight,distinct_symbols,nominal_bits,layer_cr";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerRow {
    pub layer: String,
    pub numel: u64,
    /// Fraction of symbols equal to zero.
    pub sparsity: f64,
    /// Exact empirical entropy of the symbols, in bits per weight.
    pub entropy_bits_per_weight: f64,
    pub distinct_symbols: u64,
    /// `ceil(log2 distinct)`.
    pub nominal_bits: u32,
    /// 32-bit size of the tensor over its record size in the archive.
    pub layer_cr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArchiveReport {
    pub layers: Vec<LayerRow>,
    /// Totals over the whole file. `numel` counts every tensor, biases
    /// included, and `layer_cr` is the file-level ratio.
    pub total: LayerRow,
    pub file_bytes: u64,
    pub original_bits: u64,
}

pub fn nominal_bits(distinct: u64) -> u32 {
    if distinct <= 1 {
        0
    } else {
        64 - (distinct - 1).leading_zeros()
    }
}

pub fn report(archive: &CompressedArchive) -> Result<ArchiveReport> {
    let breakdown = archive.breakdown()?;
    let file_bytes = breakdown.total();
    let streams = archive.decode_streams()?;
    let mut rows = Vec::with_capacity(streams.len());
    let (mut zeros, mut coded, mut entropy_bits) = (0u64, 0u64, 0.0);
    for (stream, size) in streams.iter().zip(&breakdown.layers) {
        let numel = stream.symbols.len() as u64;
        let table = exact_table(&stream.symbols)?;
        let bits = exact_coding_length_bits(&table);
        let z = stream.symbols.iter().filter(|&&q| q == 0).count() as u64;
        let distinct = table.distinct() as u64;
        zeros += z;
        coded += numel;
        entropy_bits += bits;
        rows.push(LayerRow {
            layer: stream.name.clone(),
            numel,
            sparsity: z as f64 / numel.max(1) as f64,
            entropy_bits_per_weight: bits / numel.max(1) as f64,
            distinct_symbols: distinct,
            nominal_bits: nominal_bits(distinct),
            layer_cr: 32.0 * numel as f64 / (8.0 * (size.header + size.payload) as f64),
        });
    }
    let all_numel: u64 = archive
        .topology
        .tensors
        .iter()
        .map(|t| t.dims.iter().product::<usize>() as u64)
        .sum();
    let original_bits = 32 * all_numel;
    let max_distinct = rows.iter().map(|r| r.distinct_symbols).max().unwrap_or(0);
    let total = LayerRow {
        layer: "TOTAL".into(),
        numel: all_numel,
        sparsity: zeros as f64 / coded.max(1) as f64,
        entropy_bits_per_weight: entropy_bits / coded.max(1) as f64,
        distinct_symbols: max_distinct,
        nominal_bits: nominal_bits(max_distinct),
        layer_cr: original_bits as f64 / (8.0 * file_bytes as f64),
    };
    Ok(ArchiveReport {
        layers: rows,
        total,
        file_bytes,
        original_bits,
    })
}

impl ArchiveReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in self.layers.iter().chain(std::iter::once(&self.total)) {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{},{:.6}\n",
                r.layer, r.numel, r.sparsity, r.entropy_bits_per_weight, r.distinct_symbols, r.nominal_bits, r.layer_cr
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
