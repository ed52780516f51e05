//! Weight containers: the `L2RM` model file and the `L2CA` calibration file.
//!
//! Both formats are little-endian. A model file holds the raw tensors
//! followed by a JSON block describing the op chain and distillation points.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bytes::{Reader, Writer};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"L2RM";
pub const CALIB_MAGIC: &[u8; 4] = b"L2CA";
pub const MODEL_VERSION: u16 = 1;
pub const CALIB_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TensorKind {
    DenseWeight,
    ConvWeight,
    Bias,
    Other,
}

impl TensorKind {
    pub fn to_byte(self) -> u8 {
        match self {
            TensorKind::DenseWeight => 0,
            TensorKind::ConvWeight => 1,
            TensorKind::Bias => 2,
            TensorKind::Other => 3,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => TensorKind::DenseWeight,
            1 => TensorKind::ConvWeight,
            2 => TensorKind::Bias,
            3 => TensorKind::Other,
            _ => return None,
        })
    }
}

/// A named, shaped, row-major array of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTensor {
    pub name: String,
    pub kind: TensorKind,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl WeightTensor {
    pub fn new(
        name: impl Into<String>,
        kind: TensorKind,
        dims: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<Self> {
        let t = WeightTensor {
            name: name.into(),
            kind,
            dims,
            data,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Model(format!("tensor `{}` has a zero dim", self.name)));
        }
        let product: usize = self.dims.iter().product();
        if product != self.data.len() {
            return Err(Error::Model(format!(
                "tensor `{}`: dims {:?} imply {} elements, found {}",
                self.name,
                self.dims,
                product,
                self.data.len()
            )));
        }
        if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: self.name.clone(),
                index,
                offset: 0,
            });
        }
        Ok(())
    }
}

/// One step of the linear op chain. Tensor references are by name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Op {
    /// `y = x · Wᵀ`, weight dims `[out, in]`.
    Dense { weight: String },
    /// 3×3, stride 1, zero padding 1; weight dims `[out_c, in_c, 3, 3]`.
    Conv2d { weight: String },
    /// Adds a per-feature (or per-channel) bias.
    BiasAdd { bias: String },
    Relu,
    Flatten,
}

impl Op {
    pub fn tensor_ref(&self) -> Option<&str> {
        match self {
            Op::Dense { weight } | Op::Conv2d { weight } => Some(weight),
            Op::BiasAdd { bias } => Some(bias),
            Op::Relu | Op::Flatten => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct TopologyBlock {
    input_dims: Vec<usize>,
    ops: Vec<Op>,
    distill_points: BTreeSet<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelManifest {
    pub layers: Vec<WeightTensor>,
    /// Per-sample input dims (no batch axis).
    pub input_dims: Vec<usize>,
    pub topology: Vec<Op>,
    /// Op indices whose outputs join the distillation loss. The final op is
    /// always included implicitly (see [`ModelManifest::output_points`]).
    pub distill_points: BTreeSet<usize>,
}

impl ModelManifest {
    pub fn tensor(&self, name: &str) -> Option<&WeightTensor> {
        self.layers.iter().find(|t| t.name == name)
    }

    pub fn tensor_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|t| t.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashMap::new();
        for t in &self.layers {
            t.validate()?;
            if seen.insert(t.name.as_str(), ()).is_some() {
                return Err(Error::Model(format!("duplicate tensor name `{}`", t.name)));
            }
        }
        for (i, op) in self.topology.iter().enumerate() {
            if let Some(name) = op.tensor_ref() {
                if !seen.contains_key(name) {
                    return Err(Error::Model(format!(
                        "op {i} references unknown tensor `{name}`"
                    )));
                }
            }
        }
        if let Some(&bad) = self
            .distill_points
            .iter()
            .find(|&&p| p >= self.topology.len())
        {
            return Err(Error::Model(format!(
                "distill point {bad} out of range ({} ops)",
                self.topology.len()
            )));
        }
        Ok(())
    }

    /// Activation indices that feed the loss: `k` is the output of op `k - 1`,
    /// `0` is the input. Always ends with the final output.
    pub fn output_points(&self) -> Vec<usize> {
        let mut pts: BTreeSet<usize> = self.distill_points.iter().map(|p| p + 1).collect();
        pts.insert(self.topology.len());
        pts.into_iter().collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = Writer::default();
        w.bytes(MODEL_MAGIC);
        w.u16(MODEL_VERSION);
        w.u32(u32::try_from(self.layers.len()).map_err(|_| Error::Model("too many tensors".into()))?);
        for t in &self.layers {
            w.name(&t.name)?;
            w.u8(t.kind.to_byte());
            let rank = u8::try_from(t.dims.len())
                .map_err(|_| Error::Model(format!("tensor `{}` rank too large", t.name)))?;
            w.u8(rank);
            for &d in &t.dims {
                w.u32(u32::try_from(d).map_err(|_| Error::Model("dim exceeds u32".into()))?);
            }
            w.buf.reserve(t.data.len() * 4);
            for v in &t.data {
                w.bytes(&v.to_le_bytes());
            }
        }
        w.blob(&self.topology_json()?);
        Ok(w.buf)
    }

    pub(crate) fn topology_json(&self) -> Result<Vec<u8>> {
        let block = TopologyBlock {
            input_dims: self.input_dims.clone(),
            ops: self.topology.clone(),
            distill_points: self.distill_points.clone(),
        };
        serde_json::to_vec(&block).map_err(|e| Error::Model(e.to_string()))
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(MODEL_MAGIC)?;
        let at = r.offset();
        let version = r.u16("version")?;
        if version != MODEL_VERSION {
            return Err(Error::format(at, format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut layers = Vec::new();
        for _ in 0..count {
            layers.push(read_tensor(&mut r)?);
        }
        let at = r.offset();
        let json = r.blob("topology block")?;
        let block: TopologyBlock = serde_json::from_slice(json)
            .map_err(|e| Error::format(at, format!("topology JSON: {e}")))?;
        if !r.is_empty() {
            return Err(Error::format(r.offset(), "trailing bytes after topology block"));
        }
        let m = ModelManifest {
            layers,
            input_dims: block.input_dims,
            topology: block.ops,
            distill_points: block.distill_points,
        };
        m.validate().map_err(|e| match e {
            Error::Model(msg) => Error::format(at, msg),
            other => other,
        })?;
        Ok(m)
    }
}

fn read_tensor(r: &mut Reader<'_>) -> Result<WeightTensor> {
    let name = r.name("tensor name")?;
    let at = r.offset();
    let kind = TensorKind::from_byte(r.u8("tensor kind")?)
        .ok_or_else(|| Error::format(at, format!("unknown kind for tensor `{name}`")))?;
    let rank = r.u8("rank")? as usize;
    let mut dims = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let at = r.offset();
        let d = r.u32("dim")? as usize;
        if d == 0 {
            return Err(Error::format(at, format!("zero dim in tensor `{name}`")));
        }
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::format(at, format!("tensor `{name}` is too large")))?;
        dims.push(d);
    }
    let start = r.offset();
    let bytes_needed = numel
        .checked_mul(4)
        .ok_or_else(|| Error::format(start, format!("tensor `{name}` is too large")))?;
    let raw = r.take(bytes_needed, "tensor payload")?;
    let mut data = Vec::with_capacity(numel);
    for (index, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                tensor: name,
                index,
                offset: start + 4 * index as u64,
            });
        }
        data.push(v);
    }
    Ok(WeightTensor {
        name,
        kind,
        dims,
        data,
    })
}

pub fn load_raw_model(path: impl AsRef<Path>) -> Result<ModelManifest> {
    ModelManifest::from_bytes(&fs::read(path)?)
}

pub fn save_raw_model(manifest: &ModelManifest, path: impl AsRef<Path>) -> Result<()> {
    let bytes = manifest.to_bytes()?;
    fs::write(path, bytes)?;
    Ok(())
}

/// `32 × Σ numel` over every tensor (weights and biases).
pub fn original_bits(manifest: &ModelManifest) -> u64 {
    manifest.layers.iter().map(|t| 32 * t.numel() as u64).sum()
}

/// Calibration inputs, stored flat: sample `i` is
/// `data[i * sample_len() .. (i + 1) * sample_len()]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl CalibrationSet {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let set = CalibrationSet { dims, data };
        set.validate()?;
        Ok(set)
    }

    pub fn sample_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn count(&self) -> usize {
        match self.sample_len() {
            0 => 0,
            n => self.data.len() / n,
        }
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Keeps only the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        let keep = n.min(self.count()) * self.sample_len();
        self.data.truncate(keep);
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.sample_len();
        if self.dims.contains(&0) || n == 0 {
            return Err(Error::Model("calibration dims must be positive".into()));
        }
        if self.data.is_empty() || !self.data.len().is_multiple_of(n) {
            return Err(Error::Model(format!(
                "calibration data length {} is not a positive multiple of {n}",
                self.data.len()
            )));
        }
        if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: "calibration".into(),
                index,
                offset: 0,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = Writer::default();
        w.bytes(CALIB_MAGIC);
        w.u16(CALIB_VERSION);
        w.u32(u32::try_from(self.count()).map_err(|_| Error::Model("too many samples".into()))?);
        w.u8(u8::try_from(self.dims.len()).map_err(|_| Error::Model("rank too large".into()))?);
        for &d in &self.dims {
            w.u32(u32::try_from(d).map_err(|_| Error::Model("dim exceeds u32".into()))?);
        }
        for v in &self.data {
            w.bytes(&v.to_le_bytes());
        }
        Ok(w.buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(CALIB_MAGIC)?;
        let at = r.offset();
        let version = r.u16("version")?;
        if version != CALIB_VERSION {
            return Err(Error::format(at, format!("unsupported version {version}")));
        }
        let at = r.offset();
        let count = r.u32("sample count")? as usize;
        if count == 0 {
            return Err(Error::format(at, "calibration set is empty"));
        }
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut total = count;
        for _ in 0..rank {
            let at = r.offset();
            let d = r.u32("dim")? as usize;
            if d == 0 {
                return Err(Error::format(at, "zero dim"));
            }
            total = total
                .checked_mul(d)
                .ok_or_else(|| Error::format(at, "calibration set is too large"))?;
            dims.push(d);
        }
        if rank == 0 {
            return Err(Error::format(r.offset(), "rank must be at least 1"));
        }
        let start = r.offset();
        let raw = r.take(
            total
                .checked_mul(4)
                .ok_or_else(|| Error::format(start, "calibration set is too large"))?,
            "calibration payload",
        )?;
        let mut data = Vec::with_capacity(total);
        for (index, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    tensor: "calibration".into(),
                    index,
                    offset: start + 4 * index as u64,
                });
            }
            data.push(v);
        }
        if !r.is_empty() {
            return Err(Error::format(r.offset(), "trailing bytes"));
        }
        Ok(CalibrationSet { dims, data })
    }
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<CalibrationSet> {
    CalibrationSet::from_bytes(&fs::read(path)?)
}

pub fn save_calibration(set: &CalibrationSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, set.to_bytes()?)?;
    Ok(())
}
