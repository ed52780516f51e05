//! Per-layer lossy transforms `T`, with `ŵ = T⁻¹(⌊T(w)⌉)`.
//!
//! Every transform is odd, continuous and strictly increasing, so rounding in
//! the transformed domain and mapping back realizes uniform quantization
//! (`Linear`), non-uniform quantization (`Log`, `Exp`), magnitude pruning
//! (`Prune`) or both at once (`Joint`). Symbol 0 is always the value 0.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{round_half_away, Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Thresholds below this are clamped during optimization.
pub const MIN_THRESHOLD: f64 = 1e-12;
/// Thresholds below this are reported as "no pruning".
pub const NO_PRUNING_BELOW: f64 = 1e-8;
/// Largest symbol magnitude the codec accepts.
pub const MAX_SYMBOL: f64 = (1u64 << 30) as f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Linear,
    Log,
    Exp,
    Prune,
    Joint,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Linear,
        Variant::Log,
        Variant::Exp,
        Variant::Prune,
        Variant::Joint,
    ];

    /// Archive id byte.
    pub fn id(self) -> u8 {
        match self {
            Variant::Linear => 0,
            Variant::Log => 1,
            Variant::Exp => 2,
            Variant::Prune => 3,
            Variant::Joint => 4,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Variant::ALL.get(id as usize).copied()
    }

    pub fn param_count(self) -> usize {
        match self {
            Variant::Linear | Variant::Prune => 1,
            Variant::Log | Variant::Exp | Variant::Joint => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Linear => "linear",
            Variant::Log => "log",
            Variant::Exp => "exp",
            Variant::Prune => "prune",
            Variant::Joint => "joint",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown transform `{s}`")))
    }
}

/// A transform with concrete parameters.
///
/// Parameter order (also the archive order): `Linear(s)`, `Log(s, β)`,
/// `Exp(s, α)`, `Prune(e)`, `Joint(e, s)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TransformSpec {
    /// `w / s`
    Linear { s: f64 },
    /// `sign(w)·ln(1 + |w|/β) / s`
    Log { s: f64, beta: f64 },
    /// `sign(w)·(exp(|w|/α) − 1) / s`
    Exp { s: f64, alpha: f64 },
    /// Dead zone `(−e, e)` mapped onto `(−0.5, 0.5)`, unit step outside.
    Prune { e: f64 },
    /// Dead zone `(−e, e)` mapped onto `(−0.5, 0.5)`, step `s` outside.
    Joint { e: f64, s: f64 },
}

#[inline]
fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl TransformSpec {
    pub fn variant(&self) -> Variant {
        match self {
            TransformSpec::Linear { .. } => Variant::Linear,
            TransformSpec::Log { .. } => Variant::Log,
            TransformSpec::Exp { .. } => Variant::Exp,
            TransformSpec::Prune { .. } => Variant::Prune,
            TransformSpec::Joint { .. } => Variant::Joint,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            TransformSpec::Linear { s } => vec![s],
            TransformSpec::Log { s, beta } => vec![s, beta],
            TransformSpec::Exp { s, alpha } => vec![s, alpha],
            TransformSpec::Prune { e } => vec![e],
            TransformSpec::Joint { e, s } => vec![e, s],
        }
    }

    pub fn from_params(variant: Variant, p: &[f64]) -> Result<Self> {
        if p.len() != variant.param_count() {
            return Err(Error::Parameter(format!(
                "{variant} takes {} parameters, got {}",
                variant.param_count(),
                p.len()
            )));
        }
        let spec = match variant {
            Variant::Linear => TransformSpec::Linear { s: p[0] },
            Variant::Log => TransformSpec::Log { s: p[0], beta: p[1] },
            Variant::Exp => TransformSpec::Exp { s: p[0], alpha: p[1] },
            Variant::Prune => TransformSpec::Prune { e: p[0] },
            Variant::Joint => TransformSpec::Joint { e: p[0], s: p[1] },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks the parameter domain. `e == 0` is allowed here; it is rejected
    /// when the transform is applied.
    pub fn validate(&self) -> Result<()> {
        let p = self.params();
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("non-finite parameter in {self:?}")));
        }
        let ok = match *self {
            TransformSpec::Linear { s } => s > 0.0,
            TransformSpec::Log { s, beta } => s > 0.0 && beta > 0.0,
            TransformSpec::Exp { s, alpha } => s > 0.0 && alpha > 0.0,
            TransformSpec::Prune { e } => e >= 0.0,
            TransformSpec::Joint { e, s } => e >= 0.0 && s > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("parameter out of domain in {self:?}")))
        }
    }

    /// Pruning threshold, if the variant has one.
    pub fn threshold(&self) -> Option<f64> {
        match *self {
            TransformSpec::Prune { e } | TransformSpec::Joint { e, .. } => Some(e),
            _ => None,
        }
    }

    fn check_applicable(&self) -> Result<()> {
        self.validate()?;
        if self.threshold() == Some(0.0) {
            return Err(Error::DegenerateThreshold);
        }
        Ok(())
    }

    /// Dead-zone threshold and outer step for the piecewise variants.
    fn piecewise(&self) -> Option<(f64, f64)> {
        match *self {
            TransformSpec::Prune { e } => Some((e, 1.0)),
            TransformSpec::Joint { e, s } => Some((e, s)),
            _ => None,
        }
    }

    /// `T(w)` for one element. Assumes the parameters are applicable.
    pub fn forward_one(&self, w: f64) -> f64 {
        if let Some((e, s)) = self.piecewise() {
            let a = w.abs();
            return if a < e {
                0.5 / e * w
            } else {
                sgn(w) * ((a - e) / s + 0.5)
            };
        }
        match *self {
            TransformSpec::Linear { s } => w / s,
            TransformSpec::Log { s, beta } => sgn(w) * (w.abs() / beta).ln_1p() / s,
            TransformSpec::Exp { s, alpha } => sgn(w) * (w.abs() / alpha).exp_m1() / s,
            _ => unreachable!(),
        }
    }

    /// `T⁻¹(q)` for one element.
    pub fn inverse_one(&self, q: f64) -> f64 {
        if let Some((e, s)) = self.piecewise() {
            let a = q.abs();
            return if a < 0.5 {
                2.0 * e * q
            } else {
                sgn(q) * (e + (a - 0.5) * s)
            };
        }
        match *self {
            TransformSpec::Linear { s } => q * s,
            TransformSpec::Log { s, beta } => sgn(q) * beta * (q.abs() * s).exp_m1(),
            TransformSpec::Exp { s, alpha } => sgn(q) * alpha * (q.abs() * s).ln_1p(),
            _ => unreachable!(),
        }
    }

    /// `(∂T/∂w, ∂T/∂p)` with `p` in [`TransformSpec::params`] order.
    pub fn forward_partials(&self, w: f64) -> (f64, [f64; 2]) {
        let a = w.abs();
        match *self {
            TransformSpec::Linear { s } => (1.0 / s, [-w / (s * s), 0.0]),
            TransformSpec::Log { s, beta } => {
                let t = self.forward_one(w);
                (
                    1.0 / (s * (beta + a)),
                    [-t / s, -w / (s * beta * (beta + a))],
                )
            }
            TransformSpec::Exp { s, alpha } => {
                let t = self.forward_one(w);
                let ex = (a / alpha).exp();
                (ex / (alpha * s), [-t / s, -w * ex / (alpha * alpha * s)])
            }
            TransformSpec::Prune { e } => {
                if a < e {
                    (0.5 / e, [-0.5 * w / (e * e), 0.0])
                } else {
                    (1.0, [-sgn(w), 0.0])
                }
            }
            TransformSpec::Joint { e, s } => {
                if a < e {
                    (0.5 / e, [-0.5 * w / (e * e), 0.0])
                } else {
                    (1.0 / s, [-sgn(w) / s, -sgn(w) * (a - e) / (s * s)])
                }
            }
        }
    }

    /// `(∂T⁻¹/∂q, ∂T⁻¹/∂p)` with `p` in [`TransformSpec::params`] order.
    pub fn inverse_partials(&self, q: f64) -> (f64, [f64; 2]) {
        let a = q.abs();
        match *self {
            TransformSpec::Linear { s } => (s, [q, 0.0]),
            TransformSpec::Log { s, beta } => {
                let ex = (a * s).exp();
                (beta * s * ex, [q * beta * ex, sgn(q) * (a * s).exp_m1()])
            }
            TransformSpec::Exp { s, alpha } => {
                let d = 1.0 + a * s;
                (alpha * s / d, [q * alpha / d, sgn(q) * (a * s).ln_1p()])
            }
            TransformSpec::Prune { e } => {
                if a < 0.5 {
                    (2.0 * e, [2.0 * q, 0.0])
                } else {
                    (1.0, [sgn(q), 0.0])
                }
            }
            TransformSpec::Joint { e, s } => {
                if a < 0.5 {
                    (2.0 * e, [2.0 * q, 0.0])
                } else {
                    (s, [sgn(q), sgn(q) * (a - 0.5)])
                }
            }
        }
    }

    /// Log-space parametrization used by the optimizer.
    pub fn to_log_params(&self) -> Vec<f64> {
        self.params()
            .into_iter()
            .map(|p| p.max(MIN_THRESHOLD).ln())
            .collect()
    }

    /// Inverse of [`TransformSpec::to_log_params`]; thresholds are clamped to
    /// at least [`MIN_THRESHOLD`].
    pub fn from_log_params(variant: Variant, rho: &[f64]) -> Result<Self> {
        let p: Vec<f64> = rho.iter().map(|r| r.exp().max(MIN_THRESHOLD)).collect();
        TransformSpec::from_params(variant, &p)
    }
}

pub fn t_forward(w: &[f64], spec: &TransformSpec) -> Result<Vec<f64>> {
    spec.check_applicable()?;
    Ok(w.iter().map(|&v| spec.forward_one(v)).collect())
}

pub fn t_inverse(q: &[f64], spec: &TransformSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    Ok(q.iter().map(|&v| spec.inverse_one(v)).collect())
}

/// Symbol for one transformed value.
pub fn symbol_of(t: f64) -> Result<i64> {
    let r = round_half_away(t);
    if !r.is_finite() || r.abs() > MAX_SYMBOL {
        return Err(Error::Parameter(format!(
            "transformed value {t} is outside the codable symbol range"
        )));
    }
    Ok(r as i64)
}

/// `(ŵ, symbols)` with `symbols = ⌊T(w)⌉` and `ŵ = T⁻¹(symbols)`.
pub fn apply_compress(w: &[f64], spec: &TransformSpec) -> Result<(Vec<f64>, Vec<i64>)> {
    spec.check_applicable()?;
    let mut out = Vec::with_capacity(w.len());
    let mut symbols = Vec::with_capacity(w.len());
    for &v in w {
        let q = symbol_of(spec.forward_one(v))?;
        symbols.push(q);
        out.push(spec.inverse_one(q as f64));
    }
    Ok((out, symbols))
}

/// Dequantizes a symbol stream.
pub fn dequantize(symbols: &[i64], spec: &TransformSpec) -> Vec<f64> {
    symbols.iter().map(|&q| spec.inverse_one(q as f64)).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct InitConfig {
    /// Target bit width: the largest |w| maps to `2^(bits−1) − 1`.
    pub bits: u32,
    /// Fraction of weights inside the initial dead zone.
    pub prune_fraction: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            bits: 8,
            prune_fraction: 0.05,
        }
    }
}

/// Linear-interpolated quantile of `values` (which need not be sorted).
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn init_spec(w: &[f64], variant: Variant, cfg: &InitConfig) -> Result<TransformSpec> {
    if w.is_empty() {
        return Err(Error::Parameter("cannot initialize a transform for an empty tensor".into()));
    }
    let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let top = ((1u64 << (cfg.bits.clamp(2, 31) - 1)) - 1) as f64;
    if max == 0.0 {
        return Ok(match variant {
            Variant::Linear => TransformSpec::Linear { s: 1.0 },
            Variant::Log => TransformSpec::Log { s: 1.0, beta: 1.0 },
            Variant::Exp => TransformSpec::Exp { s: 1.0, alpha: 1.0 },
            Variant::Prune => TransformSpec::Prune { e: 0.0 },
            Variant::Joint => TransformSpec::Joint { e: 0.0, s: 1.0 },
        });
    }
    let threshold = || {
        let abs: Vec<f64> = w.iter().map(|v| v.abs()).collect();
        quantile(&abs, cfg.prune_fraction).max(max * 1e-6)
    };
    let spec = match variant {
        Variant::Linear => TransformSpec::Linear { s: max / top },
        Variant::Log => {
            let beta = max / 16.0;
            TransformSpec::Log {
                s: (max / beta).ln_1p() / top,
                beta,
            }
        }
        Variant::Exp => TransformSpec::Exp {
            s: 1f64.exp_m1() / top,
            alpha: max,
        },
        Variant::Prune => TransformSpec::Prune { e: threshold() },
        Variant::Joint => {
            let e = threshold();
            let mut s = (max - e) / (top - 0.5);
            if s <= 0.0 {
                s = max / (top - 0.5);
            }
            TransformSpec::Joint { e, s }
        }
    };
    spec.validate()?;
    Ok(spec)
}

/// Graph node for `T(w; p)` with `p = exp(ρ)`.
///
/// `rho` holds the log-space parameters. Thresholds are clamped at
/// [`MIN_THRESHOLD`], where the gradient w.r.t. ρ is zero.
pub fn forward_node(g: &mut Graph, variant: Variant, w: NodeId, rho: NodeId) -> Result<NodeId> {
    let spec = TransformSpec::from_log_params(variant, &g.value(rho).data)?;
    let rho_v = g.value(rho).data.clone();
    let wv = g.value(w).clone();
    let n = variant.param_count();
    let mut out = Vec::with_capacity(wv.numel());
    let mut dw = Vec::with_capacity(wv.numel());
    let mut dp = Vec::with_capacity(wv.numel());
    for &v in &wv.data {
        out.push(spec.forward_one(v));
        let (a, b) = spec.forward_partials(v);
        dw.push(a);
        dp.push(b);
    }
    let scale = log_scale(&rho_v);
    let dims = wv.dims.clone();
    Ok(g.custom(&[w, rho], Tensor::new(dims.clone(), out), move |up| {
        let gw = up.data.iter().zip(&dw).map(|(u, d)| u * d).collect();
        let mut gp = vec![0.0; n];
        for (u, d) in up.data.iter().zip(&dp) {
            for k in 0..n {
                gp[k] += u * d[k];
            }
        }
        for k in 0..n {
            gp[k] *= scale[k];
        }
        vec![Some(Tensor::new(dims.clone(), gw)), Some(Tensor::new(vec![n], gp))]
    }))
}

/// Graph node for `T⁻¹(q; p)` with `p = exp(ρ)`.
pub fn inverse_node(g: &mut Graph, variant: Variant, q: NodeId, rho: NodeId) -> Result<NodeId> {
    let spec = TransformSpec::from_log_params(variant, &g.value(rho).data)?;
    let rho_v = g.value(rho).data.clone();
    let qv = g.value(q).clone();
    let n = variant.param_count();
    let mut out = Vec::with_capacity(qv.numel());
    let mut dq = Vec::with_capacity(qv.numel());
    let mut dp = Vec::with_capacity(qv.numel());
    for &v in &qv.data {
        out.push(spec.inverse_one(v));
        let (a, b) = spec.inverse_partials(v);
        dq.push(a);
        dp.push(b);
    }
    let scale = log_scale(&rho_v);
    let dims = qv.dims.clone();
    Ok(g.custom(&[q, rho], Tensor::new(dims.clone(), out), move |up| {
        let gq = up.data.iter().zip(&dq).map(|(u, d)| u * d).collect();
        let mut gp = vec![0.0; n];
        for (u, d) in up.data.iter().zip(&dp) {
            for k in 0..n {
                gp[k] += u * d[k];
            }
        }
        for k in 0..n {
            gp[k] *= scale[k];
        }
        vec![Some(Tensor::new(dims.clone(), gq)), Some(Tensor::new(vec![n], gp))]
    }))
}

/// `dp/dρ` for `p = max(exp(ρ), MIN_THRESHOLD)`.
fn log_scale(rho: &[f64]) -> Vec<f64> {
    rho.iter()
        .map(|r| {
            let p = r.exp();
            if p > MIN_THRESHOLD {
                p
            } else {
                0.0
            }
        })
        .collect()
}

/// Builds `(w̄, ŵ)` for one layer: `w̄ = T(w)` and `ŵ = T⁻¹(ste_round(w̄))`.
pub fn compress_nodes(
    g: &mut Graph,
    variant: Variant,
    w: NodeId,
    rho: NodeId,
) -> Result<(NodeId, NodeId)> {
    let wbar = forward_node(g, variant, w, rho)?;
    let q = g.ste_round(wbar);
    let what = inverse_node(g, variant, q, rho)?;
    Ok((wbar, what))
}
