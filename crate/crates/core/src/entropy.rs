//! Exact and kernel-relaxed symbol counting.
//!
//! The relaxed counter replaces the step function in `C(w̄, x) = #{w̄_j ≤ x}`
//! by the CDF of a compact kernel of half-width `δ`, which makes the
//! empirical probability mass of each rounded symbol differentiable with
//! respect to the unrounded values `w̄`.

use std::f64::consts::{FRAC_PI_2, LN_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{round_half_away, Graph, NodeId, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Cosine,
    /// Uniform density on `[−δ, δ]` (ramp CDF).
    Linear,
    /// Triangular density on `[−δ, δ]`.
    Triangle,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::Cosine, Kernel::Linear, Kernel::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Cosine => "cosine",
            Kernel::Linear => "linear",
            Kernel::Triangle => "triangle",
        }
    }

    /// CDF at `u`; `delta` must be positive.
    #[inline]
    pub fn cdf(self, u: f64, delta: f64) -> f64 {
        if u <= -delta {
            return 0.0;
        }
        if u >= delta {
            return 1.0;
        }
        match self {
            Kernel::Cosine => 0.5 * (1.0 + (FRAC_PI_2 * u / delta).sin()),
            Kernel::Linear => (u + delta) / (2.0 * delta),
            Kernel::Triangle => {
                if u <= 0.0 {
                    let t = u + delta;
                    t * t / (2.0 * delta * delta)
                } else {
                    let t = delta - u;
                    1.0 - t * t / (2.0 * delta * delta)
                }
            }
        }
    }

    /// Density at `u`.
    #[inline]
    pub fn density(self, u: f64, delta: f64) -> f64 {
        if u < -delta || u > delta {
            return 0.0;
        }
        match self {
            Kernel::Cosine => PI / (4.0 * delta) * (FRAC_PI_2 * u / delta).cos(),
            Kernel::Linear => 1.0 / (2.0 * delta),
            Kernel::Triangle => (delta - u.abs()) / (delta * delta),
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Kernel::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown kernel `{s}`")))
    }
}

pub fn kernel_cdf(u: f64, delta: f64, kernel: Kernel) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::Parameter(format!("relaxation factor must be positive, got {delta}")));
    }
    Ok(kernel.cdf(u, delta))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CounterConfig {
    pub kernel: Kernel,
    /// `δ = (max w̄ − min w̄) / resolution`.
    pub resolution: u32,
    /// Layers with more elements are counted on a stride subsample.
    pub sample_cap: usize,
    pub seed: u64,
    pub prob_floor: f64,
}

impl Default for CounterConfig {
    fn default() -> Self {
        CounterConfig {
            kernel: Kernel::Cosine,
            resolution: 64,
            sample_cap: 1 << 14,
            seed: 0,
            prob_floor: 1e-12,
        }
    }
}

impl CounterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::Parameter("resolution must be at least 2".into()));
        }
        if self.sample_cap == 0 {
            return Err(Error::Parameter("sample cap must be at least 1".into()));
        }
        if !(self.prob_floor > 0.0) {
            return Err(Error::Parameter("probability floor must be positive".into()));
        }
        Ok(())
    }

    /// Relaxation factor for values spanning `[min, max]`. A zero span falls
    /// back to `1 / resolution` so that identical values still count exactly.
    pub fn delta_for(&self, min: f64, max: f64) -> f64 {
        let span = max - min;
        if span > 0.0 && span.is_finite() {
            span / self.resolution as f64
        } else {
            1.0 / self.resolution as f64
        }
    }
}

/// Exact symbol counts over a contiguous range starting at `symbol_min`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyTable {
    pub symbol_min: i32,
    pub counts: Vec<u32>,
    pub total: u64,
}

/// Widest alphabet a table may span.
pub const MAX_ALPHABET: usize = 1 << 24;

impl FrequencyTable {
    pub fn alphabet(&self) -> usize {
        self.counts.len()
    }

    pub fn count_of(&self, symbol: i64) -> u32 {
        let k = symbol - self.symbol_min as i64;
        if k < 0 {
            return 0;
        }
        self.counts.get(k as usize).copied().unwrap_or(0)
    }

    pub fn symbol_max(&self) -> i64 {
        self.symbol_min as i64 + self.counts.len() as i64 - 1
    }

    pub fn distinct(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.is_empty() || self.counts.len() > MAX_ALPHABET {
            return Err(Error::Contract(format!(
                "alphabet size {} out of range",
                self.counts.len()
            )));
        }
        let sum: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if sum != self.total || sum == 0 {
            return Err(Error::Contract(format!(
                "table counts sum to {sum}, total says {}",
                self.total
            )));
        }
        if self.symbol_max() > i32::MAX as i64 {
            return Err(Error::Contract("table exceeds the i32 symbol range".into()));
        }
        Ok(())
    }
}

pub fn exact_table(symbols: &[i64]) -> Result<FrequencyTable> {
    let (&first, rest) = symbols
        .split_first()
        .ok_or_else(|| Error::Contract("cannot tabulate an empty symbol stream".into()))?;
    let (mut lo, mut hi) = (first, first);
    for &s in rest {
        lo = lo.min(s);
        hi = hi.max(s);
    }
    if lo < i32::MIN as i64 || hi > i32::MAX as i64 {
        return Err(Error::Contract(format!("symbols [{lo}, {hi}] exceed i32")));
    }
    let width = (hi - lo + 1) as usize;
    if width > MAX_ALPHABET {
        return Err(Error::Contract(format!("alphabet width {width} is too large")));
    }
    let mut counts = vec![0u32; width];
    for &s in symbols {
        let c = &mut counts[(s - lo) as usize];
        *c = c
            .checked_add(1)
            .ok_or_else(|| Error::Contract("symbol count exceeds u32".into()))?;
    }
    Ok(FrequencyTable {
        symbol_min: lo as i32,
        counts,
        total: symbols.len() as u64,
    })
}

/// `−Σ_q n_q · log2(n_q / n)`.
pub fn exact_coding_length_bits(table: &FrequencyTable) -> f64 {
    let total = table.total as f64;
    table
        .counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let c = c as f64;
            -c * (c / total).log2()
        })
        .sum()
}

/// Kernel-relaxed cumulative counter over a (possibly subsampled) sorted
/// copy of the values.
#[derive(Clone, Debug)]
pub struct RelaxedCounter {
    sorted: Vec<f64>,
    /// Original index of each entry of `sorted`.
    origin: Vec<usize>,
    /// `numel / sample size`; 1 when no sampling happened.
    scale: f64,
    numel: usize,
    delta: f64,
    kernel: Kernel,
    sampled: bool,
}

impl RelaxedCounter {
    /// Builds a counter from unsorted values.
    pub fn new(values: &[f64], cfg: &CounterConfig) -> Result<Self> {
        cfg.validate()?;
        if values.is_empty() {
            return Err(Error::Contract("cannot count an empty tensor".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite value passed to counter".into()));
        }
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
        Ok(Self::build(sorted, order, cfg))
    }

    /// Builds a counter from values already sorted ascending.
    pub fn from_sorted(sorted: &[f64], cfg: &CounterConfig) -> Result<Self> {
        cfg.validate()?;
        if sorted.is_empty() {
            return Err(Error::Contract("cannot count an empty tensor".into()));
        }
        if let Some(i) = sorted.windows(2).position(|p| !(p[0] <= p[1])) {
            return Err(Error::Contract(format!(
                "counter input is not sorted at index {}",
                i + 1
            )));
        }
        Ok(Self::build(sorted.to_vec(), (0..sorted.len()).collect(), cfg))
    }

    fn build(sorted: Vec<f64>, origin: Vec<usize>, cfg: &CounterConfig) -> Self {
        let numel = sorted.len();
        let delta = cfg.delta_for(sorted[0], sorted[numel - 1]);
        if numel <= cfg.sample_cap {
            return RelaxedCounter {
                sorted,
                origin,
                scale: 1.0,
                numel,
                delta,
                kernel: cfg.kernel,
                sampled: false,
            };
        }
        // Fixed stride over the sorted values with a seeded phase.
        let cap = cfg.sample_cap;
        let stride = numel as f64 / cap as f64;
        let phase: f64 = ChaCha8Rng::seed_from_u64(cfg.seed).random_range(0.0..1.0);
        let mut s = Vec::with_capacity(cap);
        let mut o = Vec::with_capacity(cap);
        for k in 0..cap {
            let idx = (((k as f64 + phase) * stride) as usize).min(numel - 1);
            s.push(sorted[idx]);
            o.push(origin[idx]);
        }
        RelaxedCounter {
            sorted: s,
            origin: o,
            scale: numel as f64 / cap as f64,
            numel,
            delta,
            kernel: cfg.kernel,
            sampled: true,
        }
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn numel(&self) -> usize {
        self.numel
    }

    pub fn is_sampled(&self) -> bool {
        self.sampled
    }

    /// Replaces the relaxation factor.
    pub fn with_delta(mut self, delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::Parameter(format!("relaxation factor must be positive, got {delta}")));
        }
        self.delta = delta;
        Ok(self)
    }

    /// Range of sorted indices within `δ` of `x`; everything before it is
    /// fully counted.
    #[inline]
    fn window(&self, x: f64) -> (usize, usize) {
        let lo = self.sorted.partition_point(|&v| v < x - self.delta);
        let hi = lo + self.sorted[lo..].partition_point(|&v| v <= x + self.delta);
        (lo, hi)
    }

    /// Relaxed number of values below `x`.
    pub fn count(&self, x: f64) -> f64 {
        let (lo, hi) = self.window(x);
        let mut acc = lo as f64;
        for &v in &self.sorted[lo..hi] {
            acc += self.kernel.cdf(x - v, self.delta);
        }
        acc * self.scale
    }

    /// `∂count/∂x`.
    pub fn density(&self, x: f64) -> f64 {
        let (lo, hi) = self.window(x);
        let mut acc = 0.0;
        for &v in &self.sorted[lo..hi] {
            acc += self.kernel.density(x - v, self.delta);
        }
        acc * self.scale
    }

    /// Unclamped mass of the unit interval centred on `centre`.
    pub fn raw_mass(&self, centre: f64) -> f64 {
        (self.count(centre + 0.5) - self.count(centre - 0.5)) / self.numel as f64
    }
}

/// Relaxed count of values below `x`; `sorted` must be ascending.
pub fn relaxed_count(sorted: &[f64], x: f64, cfg: &CounterConfig) -> Result<f64> {
    Ok(RelaxedCounter::from_sorted(sorted, cfg)?.count(x))
}

/// Relaxed probability of symbol `q`, floored at `cfg.prob_floor`.
pub fn prob_mass(sorted: &[f64], q: i64, cfg: &CounterConfig) -> Result<f64> {
    let c = RelaxedCounter::from_sorted(sorted, cfg)?;
    Ok(c.raw_mass(q as f64).max(cfg.prob_floor))
}

/// Values to hold fixed while evaluating the relaxed coding length.
#[derive(Clone, Debug, Default)]
pub struct Frozen {
    /// Relaxation factor to use instead of the one implied by min/max.
    pub delta: Option<f64>,
    /// Per-element rounding residuals `⌊w̄⌉ − w̄`. When present the query
    /// points are `w̄_i + r_i ± 0.5` and move with `w̄_i`.
    pub residuals: Option<Vec<f64>>,
}

/// Coding length and its gradient split by path.
#[derive(Clone, Debug)]
pub struct LengthEval {
    pub bits: f64,
    /// Through the counted values (the kernel side).
    pub grad_data: Vec<f64>,
    /// Through the query points `⌊w̄_i⌉ ± 0.5` via straight-through rounding.
    pub grad_query: Vec<f64>,
    pub delta: f64,
}

impl LengthEval {
    pub fn grad(&self) -> Vec<f64> {
        self.grad_data
            .iter()
            .zip(&self.grad_query)
            .map(|(a, b)| a + b)
            .collect()
    }
}

/// `−Σ_i log2 P(⌊w̄_i⌉)` with gradients.
pub fn coding_length_eval(wbar: &[f64], cfg: &CounterConfig, frozen: &Frozen) -> Result<LengthEval> {
    let mut counter = RelaxedCounter::new(wbar, cfg)?;
    if let Some(d) = frozen.delta {
        counter = counter.with_delta(d)?;
    }
    let n = wbar.len();
    let centres: Vec<f64> = match &frozen.residuals {
        Some(r) => {
            if r.len() != n {
                return Err(Error::Contract("residual count does not match tensor".into()));
            }
            wbar.iter().zip(r).map(|(w, r)| w + r).collect()
        }
        None => wbar.iter().map(|&w| round_half_away(w)).collect(),
    };

    // Group elements by query centre.
    let mut by_centre: Vec<usize> = (0..n).collect();
    by_centre.sort_by(|&a, &b| centres[a].total_cmp(&centres[b]).then(a.cmp(&b)));
    struct Group {
        centre: f64,
        /// `∂bits/∂P` summed over the group.
        weight: f64,
    }
    let inv_n = 1.0 / n as f64;
    let mut groups: Vec<Group> = Vec::new();
    let mut bits = 0.0;
    let mut grad_query = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let c = centres[by_centre[i]];
        let mut j = i + 1;
        while j < n && centres[by_centre[j]] == c {
            j += 1;
        }
        let m = (j - i) as f64;
        let raw = counter.raw_mass(c);
        let (p, live) = if raw > cfg.prob_floor {
            (raw, true)
        } else {
            (cfg.prob_floor, false)
        };
        bits -= m * p.log2();
        let dbits_dp = if live { -1.0 / (p * LN_2) } else { 0.0 };
        let query = if live {
            dbits_dp * (counter.density(c + 0.5) - counter.density(c - 0.5)) * inv_n
        } else {
            0.0
        };
        for &k in &by_centre[i..j] {
            grad_query[k] = query;
        }
        groups.push(Group {
            centre: c,
            weight: m * dbits_dp,
        });
        i = j;
    }

    // Kernel-side gradient: ∂P_c/∂v = scale·[K(c − ½ − v) − K(c + ½ − v)] / n.
    let delta = counter.delta;
    let reach = delta + 0.5;
    let mut grad_data = vec![0.0; n];
    for (v, &orig) in counter.sorted.iter().zip(&counter.origin) {
        let lo = groups.partition_point(|g| g.centre < v - reach);
        let mut acc = 0.0;
        for g in &groups[lo..] {
            if g.centre > v + reach {
                break;
            }
            if g.weight == 0.0 {
                continue;
            }
            let k = counter.kernel.density(g.centre - 0.5 - v, delta)
                - counter.kernel.density(g.centre + 0.5 - v, delta);
            acc += g.weight * k;
        }
        grad_data[orig] += acc * counter.scale * inv_n;
    }
    Ok(LengthEval {
        bits,
        grad_data,
        grad_query,
        delta,
    })
}

/// Relaxed coding length in bits of `⌊w̄⌉`.
pub fn relaxed_coding_length_bits(wbar: &[f64], cfg: &CounterConfig) -> Result<f64> {
    Ok(coding_length_eval(wbar, cfg, &Frozen::default())?.bits)
}

/// `max(0, total_bits − original_bits / cr_target)`.
pub fn cr_regularizer(total_bits: f64, original_bits: u64, cr_target: f64) -> Result<f64> {
    if !(cr_target > 0.0) {
        return Err(Error::Parameter(format!("target ratio must be positive, got {cr_target}")));
    }
    Ok((total_bits - original_bits as f64 / cr_target).max(0.0))
}

/// Graph node computing the relaxed coding length of `wbar` (a scalar).
///
/// The relaxation factor and the rounding residuals are pinned on the graph,
/// so a replaying graph evaluates the same straight-through surrogate.
pub fn coding_length_node(g: &mut Graph, wbar: NodeId, cfg: &CounterConfig) -> Result<NodeId> {
    let data = g.value(wbar).data.clone();
    let replaying = g.is_replaying();
    let pinned = g.pin(|| {
        let (lo, hi) = data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let mut p = vec![cfg.delta_for(lo, hi)];
        p.extend(data.iter().map(|&v| round_half_away(v) - v));
        p
    });
    let frozen = Frozen {
        delta: Some(pinned[0]),
        residuals: replaying.then(|| pinned[1..].to_vec()),
    };
    let eval = coding_length_eval(&data, cfg, &frozen)?;
    let grad = eval.grad();
    let dims = g.value(wbar).dims.clone();
    Ok(g.custom(&[wbar], Tensor::scalar(eval.bits), move |up| {
        let u = up.item();
        if u == 0.0 {
            return vec![Some(Tensor::zeros(&dims))];
        }
        vec![Some(Tensor::new(
            dims.clone(),
            grad.iter().map(|v| v * u).collect(),
        ))]
    }))
}
