//! Synthetic symbol streams for comparing the two coders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Zipf};
use serde::Serialize;

use crate::codec::{huffman_encode, range_encode};
use crate::entropy::{exact_coding_length_bits, exact_table};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Source {
    /// Rounded `N(0, σ²)`.
    Gaussian { sigma: f64 },
    /// Rounded Laplace with scale `b`.
    Laplacian { b: f64 },
    /// Zipf over `1..=n` with exponent `s`.
    Zipf { n: u32, s: f64 },
    /// Uniform over `0..n`.
    Uniform { n: u32 },
}

impl Source {
    pub fn family(&self) -> &'static str {
        match self {
            Source::Gaussian { .. } => "gaussian",
            Source::Laplacian { .. } => "laplacian",
            Source::Zipf { .. } => "zipf",
            Source::Uniform { .. } => "uniform",
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Source::Gaussian { sigma } => format!("sigma={sigma}"),
            Source::Laplacian { b } => format!("b={b}"),
            Source::Zipf { n, s } => format!("n={n},s={s}"),
            Source::Uniform { n } => format!("n={n}"),
        }
    }

    pub fn sample(&self, len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<i64>> {
        let bad = |e: &dyn std::fmt::Display| Error::Parameter(format!("{}: {e}", self.label()));
        if let Source::Gaussian { sigma: scale } | Source::Laplacian { b: scale } = *self {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(bad(&"scale must be positive"));
            }
        }
        Ok(match *self {
            Source::Gaussian { sigma } => {
                let d = Normal::new(0.0, sigma).map_err(|e| bad(&e))?;
                (0..len).map(|_| d.sample(rng).round() as i64).collect()
            }
            Source::Laplacian { b } => {
                let d = Exp::new(1.0 / b).map_err(|e| bad(&e))?;
                (0..len)
                    .map(|_| (d.sample(rng) - d.sample(rng)).round() as i64)
                    .collect()
            }
            Source::Zipf { n, s } => {
                let d = Zipf::new(n as f64, s).map_err(|e| bad(&e))?;
                (0..len).map(|_| d.sample(rng) as i64).collect()
            }
            Source::Uniform { n } => {
                if n == 0 {
                    return Err(bad(&"empty alphabet"));
                }
                (0..len).map(|_| rng.random_range(0..n as i64)).collect()
            }
        })
    }
}

/// The sources `bench-codec` reports by default, from flat to heavily skewed.
pub fn default_sources() -> Vec<Source> {
    let mut v = vec![Source::Uniform { n: 256 }];
    v.extend([16.0, 4.0, 1.0, 0.3].map(|sigma| Source::Gaussian { sigma }));
    v.extend([16.0, 4.0, 1.0, 0.3].map(|b| Source::Laplacian { b }));
    v.extend([0.8, 1.1, 1.5, 2.5].map(|s| Source::Zipf { n: 64, s }));
    v
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub family: &'static str,
    pub params: String,
    pub symbols: usize,
    pub distinct: usize,
    /// Exact empirical entropy of the stream, in bytes.
    pub entropy_bytes: f64,
    pub huffman_bytes: usize,
    pub range_bytes: usize,
}

pub fn bench_source(source: Source, len: usize, seed: u64) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream = source.sample(len, &mut rng)?;
    let table = exact_table(&stream)?;
    Ok(BenchRow {
        family: source.family(),
        params: source.label(),
        symbols: len,
        distinct: table.distinct(),
        entropy_bytes: exact_coding_length_bits(&table) / 8.0,
        huffman_bytes: huffman_encode(&stream, &table)?.len(),
        range_bytes: range_encode(&stream, &table)?.len(),
    })
}
