//! End-to-end compress / decompress / verify.

use crate::autodiff::{batch_tensor, forward, Tensor};
use crate::calibrate::{compressed_model, run_schedule, CalibConfig, CalibrationResult};
use crate::codec::archive::{pack_archive, unpack_archive, ArchiveTopology, CompressedArchive};
use crate::codec::range::range_encode;
use crate::entropy::exact_table;
use crate::error::{Error, Result};
use crate::model_io::{original_bits, CalibrationSet, ModelManifest};

#[derive(Clone, Debug)]
pub struct CompressOutcome {
    pub archive: CompressedArchive,
    pub bytes: Vec<u8>,
    pub result: CalibrationResult,
    pub original_bits: u64,
    /// The model the archive decodes to, built in memory.
    pub compressed: ModelManifest,
}

impl CompressOutcome {
    /// `original_bits / (8 · archive bytes)`.
    pub fn file_cr(&self) -> f64 {
        self.original_bits as f64 / (8.0 * self.bytes.len() as f64)
    }

    /// `original_bits / exact entropy bits` of the coded layers.
    pub fn entropy_cr(&self) -> f64 {
        self.original_bits as f64 / self.result.achieved_bits.max(f64::MIN_POSITIVE)
    }
}

pub fn compress(manifest: &ModelManifest, calib: &CalibrationSet, cfg: &CalibConfig) -> Result<CompressOutcome> {
    let result = run_schedule(manifest, calib, cfg)?;
    let archive = pack_archive(manifest, &result.streams, &result.biases)?;
    let bytes = archive.to_bytes()?;
    let compressed = compressed_model(manifest, &result.streams, &result.biases)?;
    Ok(CompressOutcome {
        archive,
        bytes,
        result,
        original_bits: original_bits(manifest),
        compressed,
    })
}

pub fn decompress(bytes: &[u8]) -> Result<ModelManifest> {
    unpack_archive(bytes)?.to_manifest()
}

fn calib_input(calib: &CalibrationSet) -> Tensor {
    let samples: Vec<&[f32]> = (0..calib.count()).map(|i| calib.sample(i)).collect();
    batch_tensor(&calib.dims, &samples)
}

/// Largest absolute difference between two lists of output tensors.
pub fn max_abs_deviation(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data.iter().zip(&y.data).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    /// First layer whose payload, table or decoded outputs disagree.
    pub mismatch: Option<(String, String)>,
    /// Final-output deviation of the decoded model from the original.
    pub max_abs_deviation: f64,
    pub mse: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.mismatch.is_none()
    }
}

/// Re-encodes every decoded stream and compares it with the stored payload,
/// then compares the decoded model's outputs with the model rebuilt from the
/// original skeleton.
pub fn verify(bytes: &[u8], original: &ModelManifest, calib: &CalibrationSet) -> Result<VerifyReport> {
    let archive = unpack_archive(bytes)?;
    let mismatch = |layer: &str, why: String| {
        Ok(VerifyReport {
            mismatch: Some((layer.to_string(), why)),
            max_abs_deviation: f64::NAN,
            mse: f64::NAN,
        })
    };
    if archive.topology != ArchiveTopology::of(original) {
        return mismatch("<topology>", "archive does not describe this model".into());
    }
    let mut streams = Vec::with_capacity(archive.layers.len());
    for layer in &archive.layers {
        let symbols = match layer.decode() {
            Ok(s) => s,
            Err(e) => return mismatch(&layer.name, format!("payload does not decode: {e}")),
        };
        if exact_table(&symbols)? != layer.table {
            return mismatch(&layer.name, "stored frequency table does not match the decoded symbols".into());
        }
        if range_encode(&symbols, &layer.table)? != layer.payload {
            return mismatch(&layer.name, "re-encoded payload differs".into());
        }
        streams.push(crate::codec::archive::LayerStream {
            name: layer.name.clone(),
            spec: layer.spec,
            symbols,
        });
    }
    let decoded = archive.to_manifest()?;
    let rebuilt = compressed_model(original, &streams, &archive.biases)?;
    let input = calib_input(calib);
    let out_decoded = forward(&decoded, &input)?;
    let out_rebuilt = forward(&rebuilt, &input)?;
    for (k, (a, b)) in out_decoded.iter().zip(&out_rebuilt).enumerate() {
        if a != b {
            return mismatch(&format!("<output point {k}>"), "decoded outputs differ".into());
        }
    }
    let reference = forward(original, &input)?;
    let (last_d, last_r) = (
        out_decoded.last().expect("final output"),
        reference.last().expect("final output"),
    );
    let n = last_d.numel().max(1) as f64;
    let mse = last_d
        .data
        .iter()
        .zip(&last_r.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok(VerifyReport {
        mismatch: None,
        max_abs_deviation: max_abs_deviation(&out_decoded[out_decoded.len() - 1..], &reference[reference.len() - 1..]),
        mse,
    })
}

/// Forward outputs of `manifest` on the whole calibration set.
pub fn outputs_on(manifest: &ModelManifest, calib: &CalibrationSet) -> Result<Vec<Tensor>> {
    if calib.dims != manifest.input_dims {
        return Err(Error::Shape {
            op: 0,
            message: format!(
                "calibration dims {:?} do not match model input dims {:?}",
                calib.dims, manifest.input_dims
            ),
        });
    }
    forward(manifest, &calib_input(calib))
}
