//! The `L2CM` archive container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "L2CM" | version u16 | layer count u32 | topology JSON (u64 len + bytes)
//! per layer:  name (u16 len + UTF-8) | transform id u8 | param count u8
//!             | params f64×P | symbol_min i32 | K u32 | counts u32×K
//!             | payload len u64 | payload | FNV-1a 64 of payload u64
//! bias count u32
//! per bias:   name | scale f64 | count u32 | i8×count
//! ```

use std::collections::BTreeSet;
use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::bytes::{Reader, Writer};
use crate::codec::range::{range_decode, range_encode};
use crate::entropy::{exact_table, FrequencyTable, MAX_ALPHABET};
use crate::error::{Error, Result};
use crate::model_io::{ModelManifest, Op, TensorKind, WeightTensor};
use crate::transform::{dequantize, TransformSpec, Variant};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"L2CM";
pub const ARCHIVE_VERSION: u16 = 1;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// The f32 weights a symbol stream decodes to.
pub fn layer_weights(spec: &TransformSpec, symbols: &[i64]) -> Vec<f32> {
    dequantize(symbols, spec).into_iter().map(|v| v as f32).collect()
}

/// A bias tensor linearly quantized to signed 8-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedBias {
    pub name: String,
    pub scale: f64,
    pub values: Vec<i8>,
}

impl QuantizedBias {
    pub fn quantize(name: impl Into<String>, data: &[f32]) -> Self {
        let max = data.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
        let scale = if max > 0.0 { max / 127.0 } else { 1.0 };
        let values = data
            .iter()
            .map(|&v| (v as f64 / scale).round().clamp(-127.0, 127.0) as i8)
            .collect();
        QuantizedBias {
            name: name.into(),
            scale,
            values,
        }
    }

    pub fn dequantize(&self) -> Vec<f32> {
        self.values
            .iter()
            .map(|&q| (q as f64 * self.scale) as f32)
            .collect()
    }
}

/// Symbols of one transformed tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStream {
    pub name: String,
    pub spec: TransformSpec,
    pub symbols: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorDesc {
    pub name: String,
    pub kind: TensorKind,
    pub dims: Vec<usize>,
}

/// Everything needed to rebuild the model skeleton.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveTopology {
    pub tensors: Vec<TensorDesc>,
    pub input_dims: Vec<usize>,
    pub ops: Vec<Op>,
    pub distill_points: BTreeSet<usize>,
}

/// JSON form of [`ArchiveTopology`]. Every byte here counts against the
/// compression ratio of small models, so tensors are `[name, kind, dims]`
/// triples and ops are strings such as `"dense:fc0.w"` or `"relu"`.
#[derive(Serialize, Deserialize)]
struct CompactTopology {
    input: Vec<usize>,
    tensors: Vec<(String, String, Vec<usize>)>,
    ops: Vec<String>,
    distill: BTreeSet<usize>,
}

fn kind_code(k: TensorKind) -> &'static str {
    match k {
        TensorKind::DenseWeight => "d",
        TensorKind::ConvWeight => "c",
        TensorKind::Bias => "b",
        TensorKind::Other => "o",
    }
}

fn op_code(op: &Op) -> String {
    match op {
        Op::Dense { weight } => format!("dense:{weight}"),
        Op::Conv2d { weight } => format!("conv2d:{weight}"),
        Op::BiasAdd { bias } => format!("bias-add:{bias}"),
        Op::Relu => "relu".into(),
        Op::Flatten => "flatten".into(),
    }
}

fn parse_op(s: &str) -> Option<Op> {
    Some(match s.split_once(':') {
        Some(("dense", w)) => Op::Dense { weight: w.into() },
        Some(("conv2d", w)) => Op::Conv2d { weight: w.into() },
        Some(("bias-add", b)) => Op::BiasAdd { bias: b.into() },
        None if s == "relu" => Op::Relu,
        None if s == "flatten" => Op::Flatten,
        _ => return None,
    })
}

impl ArchiveTopology {
    pub fn of(manifest: &ModelManifest) -> Self {
        ArchiveTopology {
            tensors: manifest
                .layers
                .iter()
                .map(|t| TensorDesc {
                    name: t.name.clone(),
                    kind: t.kind,
                    dims: t.dims.clone(),
                })
                .collect(),
            input_dims: manifest.input_dims.clone(),
            ops: manifest.topology.clone(),
            distill_points: manifest.distill_points.clone(),
        }
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let c = CompactTopology {
            input: self.input_dims.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| (t.name.clone(), kind_code(t.kind).to_string(), t.dims.clone()))
                .collect(),
            ops: self.ops.iter().map(op_code).collect(),
            distill: self.distill_points.clone(),
        };
        serde_json::to_vec(&c).map_err(|e| Error::Encode(e.to_string()))
    }

    pub fn from_json(bytes: &[u8]) -> std::result::Result<Self, String> {
        let c: CompactTopology = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
        let tensors = c
            .tensors
            .into_iter()
            .map(|(name, kind, dims)| {
                let kind = match kind.as_str() {
                    "d" => TensorKind::DenseWeight,
                    "c" => TensorKind::ConvWeight,
                    "b" => TensorKind::Bias,
                    "o" => TensorKind::Other,
                    other => return Err(format!("unknown tensor kind `{other}`")),
                };
                Ok(TensorDesc { name, kind, dims })
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        let ops = c
            .ops
            .iter()
            .map(|s| parse_op(s).ok_or_else(|| format!("unknown op `{s}`")))
            .collect::<std::result::Result<Vec<_>, String>>()?;
        Ok(ArchiveTopology {
            tensors,
            input_dims: c.input,
            ops,
            distill_points: c.distill,
        })
    }

    fn numel_of(&self, name: &str) -> Option<u64> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .and_then(|t| t.dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub spec: TransformSpec,
    pub table: FrequencyTable,
    pub payload: Vec<u8>,
}

impl LayerRecord {
    pub fn checksum(&self) -> u64 {
        fnv1a64(&self.payload)
    }

    pub fn decode(&self) -> Result<Vec<i64>> {
        range_decode(&self.payload, &self.table, self.table.total as usize)
    }

    fn header_bytes(&self) -> u64 {
        // name, id, count, params, symbol_min, K, counts, payload len, checksum
        2 + self.name.len() as u64
            + 1
            + 1
            + 8 * self.spec.params().len() as u64
            + 4
            + 4
            + 4 * self.table.counts.len() as u64
            + 8
            + 8
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedArchive {
    pub topology: ArchiveTopology,
    pub layers: Vec<LayerRecord>,
    pub biases: Vec<QuantizedBias>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerSize {
    pub name: String,
    pub header: u64,
    pub payload: u64,
}

/// Byte accounting of a serialized archive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SizeBreakdown {
    /// Magic, version, layer count.
    pub preamble: u64,
    /// Topology length prefix and JSON.
    pub topology: u64,
    pub layers: Vec<LayerSize>,
    /// Bias count and all bias records.
    pub biases: u64,
}

impl SizeBreakdown {
    pub fn total(&self) -> u64 {
        self.preamble
            + self.topology
            + self.biases
            + self.layers.iter().map(|l| l.header + l.payload).sum::<u64>()
    }
}

/// Fixed bytes per layer record besides name, params, counts and payload.
pub const LAYER_FIXED_BYTES: u64 = 2 + 1 + 1 + 4 + 4 + 8 + 8;

/// Bytes a bias record occupies.
pub fn bias_record_bytes(name: &str, count: usize) -> u64 {
    2 + name.len() as u64 + 8 + 4 + count as u64
}

/// Range codes every stream and assembles the archive. Each tensor of
/// `manifest` must appear exactly once, in `streams` or in `biases`.
pub fn pack_archive(
    manifest: &ModelManifest,
    streams: &[LayerStream],
    biases: &[QuantizedBias],
) -> Result<CompressedArchive> {
    manifest.validate()?;
    let mut covered = BTreeSet::new();
    for name in streams
        .iter()
        .map(|s| &s.name)
        .chain(biases.iter().map(|b| &b.name))
    {
        let t = manifest
            .tensor(name)
            .ok_or_else(|| Error::Encode(format!("no tensor named `{name}`")))?;
        if !covered.insert(name.as_str()) {
            return Err(Error::Encode(format!("tensor `{name}` packed twice")));
        }
        let len = streams
            .iter()
            .find(|s| &s.name == name)
            .map(|s| s.symbols.len())
            .or_else(|| biases.iter().find(|b| &b.name == name).map(|b| b.values.len()))
            .unwrap_or(0);
        if len != t.numel() {
            return Err(Error::Encode(format!(
                "tensor `{name}` has {} elements, stream has {len}",
                t.numel()
            )));
        }
    }
    if let Some(t) = manifest.layers.iter().find(|t| !covered.contains(t.name.as_str())) {
        return Err(Error::Encode(format!("tensor `{}` is not packed", t.name)));
    }
    let mut layers = Vec::with_capacity(streams.len());
    for s in streams {
        s.spec.validate()?;
        let table = exact_table(&s.symbols)?;
        let payload = range_encode(&s.symbols, &table)?;
        layers.push(LayerRecord {
            name: s.name.clone(),
            spec: s.spec,
            table,
            payload,
        });
    }
    Ok(CompressedArchive {
        topology: ArchiveTopology::of(manifest),
        layers,
        biases: biases.to_vec(),
    })
}

pub fn unpack_archive(bytes: &[u8]) -> Result<CompressedArchive> {
    CompressedArchive::from_bytes(bytes)
}

impl CompressedArchive {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(ARCHIVE_MAGIC);
        w.u16(ARCHIVE_VERSION);
        w.u32(
            u32::try_from(self.layers.len())
                .map_err(|_| Error::Encode("too many layers".into()))?,
        );
        w.blob(&self.topology.to_json()?);
        for l in &self.layers {
            w.name(&l.name)?;
            let params = l.spec.params();
            w.u8(l.spec.variant().id());
            w.u8(params.len() as u8);
            for p in params {
                w.f64(p);
            }
            w.i32(l.table.symbol_min);
            w.u32(l.table.counts.len() as u32);
            for &c in &l.table.counts {
                w.u32(c);
            }
            w.blob(&l.payload);
            w.u64(l.checksum());
        }
        w.u32(
            u32::try_from(self.biases.len())
                .map_err(|_| Error::Encode("too many bias records".into()))?,
        );
        for b in &self.biases {
            w.name(&b.name)?;
            w.f64(b.scale);
            w.u32(
                u32::try_from(b.values.len())
                    .map_err(|_| Error::Encode("bias too long".into()))?,
            );
            w.bytes(&b.values.iter().map(|&v| v as u8).collect::<Vec<_>>());
        }
        Ok(w.buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(ARCHIVE_MAGIC)?;
        let at = r.offset();
        let version = r.u16("version")?;
        if version != ARCHIVE_VERSION {
            return Err(Error::format(at, format!("unsupported archive version {version}")));
        }
        let count = r.u32("layer count")?;
        let at = r.offset();
        let topology = ArchiveTopology::from_json(r.blob("topology")?)
            .map_err(|e| Error::format(at, format!("topology JSON: {e}")))?;
        let mut layers: Vec<LayerRecord> = Vec::new();
        for _ in 0..count {
            let name = r.name("layer name")?;
            let at = r.offset();
            let variant = Variant::from_id(r.u8("transform id")?)
                .ok_or_else(|| Error::format(at, format!("unknown transform for `{name}`")))?;
            let at = r.offset();
            let pc = r.u8("param count")? as usize;
            if pc != variant.param_count() {
                return Err(Error::format(at, format!("bad parameter count for `{name}`")));
            }
            let mut params = Vec::with_capacity(pc);
            for _ in 0..pc {
                params.push(r.f64("transform parameter")?);
            }
            let spec = TransformSpec::from_params(variant, &params)
                .map_err(|e| Error::format(at, format!("layer `{name}`: {e}")))?;
            let symbol_min = r.i32("symbol_min")?;
            let at = r.offset();
            let k = r.u32("alphabet size")? as usize;
            if k == 0 || k > MAX_ALPHABET {
                return Err(Error::format(at, format!("alphabet size {k} for `{name}`")));
            }
            let raw = r.take(4 * k, "frequency counts")?;
            let counts: Vec<u32> = raw
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let total = counts.iter().map(|&c| c as u64).sum();
            let table = FrequencyTable {
                symbol_min,
                counts,
                total,
            };
            table
                .validate()
                .map_err(|e| Error::format(at, format!("layer `{name}`: {e}")))?;
            if topology.numel_of(&name) != Some(total) {
                return Err(Error::format(
                    at,
                    format!("layer `{name}` does not match the topology"),
                ));
            }
            let payload = r.blob("payload")?.to_vec();
            let stored = r.u64("checksum")?;
            let rec = LayerRecord {
                name,
                spec,
                table,
                payload,
            };
            if rec.checksum() != stored {
                return Err(Error::Checksum { layer: rec.name });
            }
            layers.push(rec);
        }
        let n_bias = r.u32("bias count")?;
        let mut biases = Vec::new();
        for _ in 0..n_bias {
            let name = r.name("bias name")?;
            let at = r.offset();
            let scale = r.f64("bias scale")?;
            if !scale.is_finite() || scale <= 0.0 {
                return Err(Error::format(at, format!("bad scale for bias `{name}`")));
            }
            let n = r.u32("bias length")? as usize;
            let values = r.take(n, "bias values")?.iter().map(|&b| b as i8).collect();
            biases.push(QuantizedBias {
                name,
                scale,
                values,
            });
        }
        if !r.is_empty() {
            return Err(Error::format(r.offset(), "trailing bytes after bias records"));
        }
        Ok(CompressedArchive {
            topology,
            layers,
            biases,
        })
    }

    /// Decodes every payload.
    pub fn decode_streams(&self) -> Result<Vec<LayerStream>> {
        self.layers
            .iter()
            .map(|l| {
                Ok(LayerStream {
                    name: l.name.clone(),
                    spec: l.spec,
                    symbols: l
                        .decode()
                        .map_err(|e| Error::Decode(format!("layer `{}`: {e}", l.name)))?,
                })
            })
            .collect()
    }

    /// Rebuilds the model with dequantized weights.
    pub fn to_manifest(&self) -> Result<ModelManifest> {
        let streams = self.decode_streams()?;
        let mut layers = Vec::with_capacity(self.topology.tensors.len());
        for desc in &self.topology.tensors {
            let data = if let Some(s) = streams.iter().find(|s| s.name == desc.name) {
                layer_weights(&s.spec, &s.symbols)
            } else if let Some(b) = self.biases.iter().find(|b| b.name == desc.name) {
                b.dequantize()
            } else {
                return Err(Error::Decode(format!("tensor `{}` missing from archive", desc.name)));
            };
            layers.push(WeightTensor::new(desc.name.clone(), desc.kind, desc.dims.clone(), data)?);
        }
        let m = ModelManifest {
            layers,
            input_dims: self.topology.input_dims.clone(),
            topology: self.topology.ops.clone(),
            distill_points: self.topology.distill_points.clone(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn breakdown(&self) -> Result<SizeBreakdown> {
        Ok(SizeBreakdown {
            preamble: 4 + 2 + 4,
            topology: 8 + self.topology.to_json()?.len() as u64,
            layers: self
                .layers
                .iter()
                .map(|l| LayerSize {
                    name: l.name.clone(),
                    header: l.header_bytes(),
                    payload: l.payload.len() as u64,
                })
                .collect(),
            biases: 4 + self
                .biases
                .iter()
                .map(|b| bias_record_bytes(&b.name, b.values.len()))
                .sum::<u64>(),
        })
    }

    /// Byte length of the serialized archive, without serializing payloads.
    pub fn byte_len(&self) -> Result<u64> {
        Ok(self.breakdown()?.total())
    }
}
