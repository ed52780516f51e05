//! Post-training calibration: alternating transform training and weight
//! fine-tuning against distillation MSE plus a size regularizer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{adam_step, batch_tensor, build_chain, forward, AdamState, Graph, NodeId, Tensor};
use crate::codec::archive::{
    bias_record_bytes, layer_weights, ArchiveTopology, LayerStream, QuantizedBias, LAYER_FIXED_BYTES,
};
use crate::entropy::{coding_length_node, exact_coding_length_bits, exact_table, CounterConfig};
use crate::error::{Error, Result};
use crate::model_io::{original_bits, CalibrationSet, ModelManifest, TensorKind};
use crate::transform::{apply_compress, compress_nodes, init_spec, InitConfig, TransformSpec, Variant};

/// Bytes reserved per layer for range-coder flush and rounding.
pub const PAYLOAD_SLACK_BYTES: u64 = 4;

#[derive(Clone, Debug)]
pub struct CalibConfig {
    pub cr_target: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub transform_iters: usize,
    pub finetune_iters: usize,
    pub batch_size: usize,
    pub lr_transform: f64,
    pub lr_weights: f64,
    pub counter: CounterConfig,
    pub budget_margin: f64,
    pub variant: Variant,
    pub init: InitConfig,
    /// Seeds the batch order (the counter has its own seed).
    pub seed: u64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig {
            cr_target: 8.0,
            lambda: 64.0,
            epochs: 5,
            transform_iters: 300,
            finetune_iters: 1000,
            batch_size: 32,
            lr_transform: 1e-2,
            lr_weights: 1e-4,
            counter: CounterConfig::default(),
            budget_margin: 0.02,
            variant: Variant::Joint,
            init: InitConfig::default(),
            seed: 0,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("target ratio", self.cr_target),
            ("transform learning rate", self.lr_transform),
            ("weight learning rate", self.lr_weights),
        ];
        for (what, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Parameter(format!("{what} must be positive, got {v}")));
            }
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Parameter(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.budget_margin) {
            return Err(Error::Parameter(format!(
                "budget margin must lie in [0, 1), got {}",
                self.budget_margin
            )));
        }
        self.counter.validate()
    }
}

/// Outputs of the original model at every output point, for every
/// calibration sample. `outputs[k]` has dims `[N, ...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct References {
    pub points: Vec<usize>,
    pub outputs: Vec<Tensor>,
}

impl References {
    fn rows(&self, k: usize, batch: &[usize]) -> Tensor {
        let t = &self.outputs[k];
        let row: usize = t.dims[1..].iter().product();
        let mut dims = t.dims.clone();
        dims[0] = batch.len();
        let mut data = Vec::with_capacity(batch.len() * row);
        for &i in batch {
            data.extend_from_slice(&t.data[i * row..(i + 1) * row]);
        }
        Tensor::new(dims, data)
    }
}

fn check_dims(manifest: &ModelManifest, calib: &CalibrationSet) -> Result<()> {
    if calib.dims != manifest.input_dims {
        return Err(Error::Shape {
            op: 0,
            message: format!(
                "calibration dims {:?} do not match model input dims {:?}",
                calib.dims, manifest.input_dims
            ),
        });
    }
    Ok(())
}

pub fn cache_references(manifest: &ModelManifest, calib: &CalibrationSet) -> Result<References> {
    check_dims(manifest, calib)?;
    let samples: Vec<&[f32]> = (0..calib.count()).map(|i| calib.sample(i)).collect();
    let input = batch_tensor(&calib.dims, &samples);
    Ok(References {
        points: manifest.output_points(),
        outputs: forward(manifest, &input)?,
    })
}

/// Trainable state of one transformed tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub name: String,
    pub dims: Vec<usize>,
    pub weights: Vec<f64>,
    /// Log-space transform parameters.
    pub rho: Vec<f64>,
}

impl LayerParams {
    pub fn spec(&self, variant: Variant) -> Result<TransformSpec> {
        TransformSpec::from_log_params(variant, &self.rho)
    }
}

#[derive(Clone, Debug)]
pub struct CalibState {
    pub manifest: ModelManifest,
    pub variant: Variant,
    pub layers: Vec<LayerParams>,
    pub biases: Vec<QuantizedBias>,
    pub lambda: f64,
    pub history: Vec<f64>,
    order: Vec<usize>,
    cursor: usize,
    original_bits: u64,
    /// Archive bytes that do not depend on the symbols.
    fixed_overhead: u64,
}

impl CalibState {
    pub fn init(manifest: &ModelManifest, calib: &CalibrationSet, cfg: &CalibConfig) -> Result<Self> {
        cfg.validate()?;
        manifest.validate()?;
        check_dims(manifest, calib)?;
        if calib.count() == 0 {
            return Err(Error::Parameter("calibration set is empty".into()));
        }
        let mut layers = Vec::new();
        let mut biases = Vec::new();
        for t in &manifest.layers {
            if t.kind == TensorKind::Bias {
                biases.push(QuantizedBias::quantize(&t.name, &t.data));
            } else {
                let w: Vec<f64> = t.data.iter().map(|&v| v as f64).collect();
                let spec = init_spec(&w, cfg.variant, &cfg.init)?;
                layers.push(LayerParams {
                    name: t.name.clone(),
                    dims: t.dims.clone(),
                    weights: w,
                    rho: spec.to_log_params(),
                });
            }
        }
        let topo = ArchiveTopology::of(manifest).to_json()?;
        let fixed_overhead = 10
            + 8
            + topo.len() as u64
            + 4
            + biases
                .iter()
                .map(|b| bias_record_bytes(&b.name, b.values.len()))
                .sum::<u64>()
            + layers
                .iter()
                .map(|l| {
                    LAYER_FIXED_BYTES
                        + l.name.len() as u64
                        + 8 * cfg.variant.param_count() as u64
                        + PAYLOAD_SLACK_BYTES
                })
                .sum::<u64>();
        let mut order: Vec<usize> = (0..calib.count()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        Ok(CalibState {
            manifest: manifest.clone(),
            variant: cfg.variant,
            layers,
            biases,
            lambda: cfg.lambda,
            history: Vec::new(),
            order,
            cursor: 0,
            original_bits: original_bits(manifest),
            fixed_overhead,
        })
    }

    pub fn original_bits(&self) -> u64 {
        self.original_bits
    }

    pub fn specs(&self) -> Result<Vec<TransformSpec>> {
        self.layers.iter().map(|l| l.spec(self.variant)).collect()
    }

    pub fn streams(&self) -> Result<Vec<LayerStream>> {
        self.layers
            .iter()
            .map(|l| {
                let spec = l.spec(self.variant)?;
                let (_, symbols) = apply_compress(&l.weights, &spec)?;
                Ok(LayerStream {
                    name: l.name.clone(),
                    spec,
                    symbols,
                })
            })
            .collect()
    }

    /// The model with every tensor replaced by what the archive decodes to.
    pub fn compressed_manifest(&self) -> Result<ModelManifest> {
        let streams = self.streams()?;
        compressed_model(&self.manifest, &streams, &self.biases)
    }

    /// Archive bytes that depend neither on the symbols nor on the
    /// alphabet sizes, plus the per-layer payload slack.
    pub fn fixed_overhead_bytes(&self) -> u64 {
        self.fixed_overhead
    }

    /// Bits available to the count tables and payloads together.
    pub fn budget_bits(&self, cfg: &CalibConfig) -> f64 {
        (1.0 - cfg.budget_margin) * self.original_bits as f64 / cfg.cr_target
            - 8.0 * self.fixed_overhead as f64
    }

    /// The next batch in the fixed shuffled order, wrapping around.
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let n = self.order.len();
        let batch = (0..size.min(n))
            .map(|k| self.order[(self.cursor + k) % n])
            .collect();
        self.cursor = (self.cursor + size.min(n)) % n;
        batch
    }
}

/// Replaces transformed tensors by their dequantized streams and biases by
/// their 8-bit reconstruction.
pub fn compressed_model(
    manifest: &ModelManifest,
    streams: &[LayerStream],
    biases: &[QuantizedBias],
) -> Result<ModelManifest> {
    let mut m = manifest.clone();
    for t in &mut m.layers {
        if let Some(s) = streams.iter().find(|s| s.name == t.name) {
            t.data = layer_weights(&s.spec, &s.symbols);
        } else if let Some(b) = biases.iter().find(|b| b.name == t.name) {
            t.data = b.dequantize();
        } else {
            return Err(Error::Model(format!("tensor `{}` has no compressed form", t.name)));
        }
    }
    Ok(m)
}

/// Bits of one stored count table, `32·(⌊max w̄⌉ − ⌊min w̄⌉ + 1)`, with
/// straight-through gradients on the two extreme elements.
pub fn table_bits_node(g: &mut Graph, wbar: NodeId) -> NodeId {
    let data = g.value(wbar).data.clone();
    let pinned = g.pin(|| {
        let mut imax = 0;
        let mut imin = 0;
        for (i, &v) in data.iter().enumerate() {
            if v > data[imax] {
                imax = i;
            }
            if v < data[imin] {
                imin = i;
            }
        }
        vec![
            imax as f64,
            imin as f64,
            data[imax].round() - data[imax],
            data[imin].round() - data[imin],
        ]
    });
    let (imax, imin) = (pinned[0] as usize, pinned[1] as usize);
    let hi = data[imax] + pinned[2];
    let lo = data[imin] + pinned[3];
    let n = data.len();
    let dims = g.value(wbar).dims.clone();
    g.custom(&[wbar], Tensor::scalar(32.0 * (hi - lo + 1.0)), move |up| {
        let mut d = vec![0.0; n];
        d[imax] += 32.0 * up.item();
        d[imin] -= 32.0 * up.item();
        vec![Some(Tensor::new(dims.clone(), d))]
    })
}

/// Handles into a loss graph built by [`build_loss`].
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub loss: NodeId,
    pub rho: Vec<NodeId>,
    pub weights: Vec<NodeId>,
    pub mse: f64,
    /// Relaxed entropy of all layers.
    pub bits: f64,
    /// Count-table bits of all layers.
    pub table_bits: f64,
    pub budget: f64,
    pub regularizer: f64,
}

/// `Σ_p MSE_p + λ·ReLU(bits + table bits − budget) / budget` on one
/// batch.
pub fn build_loss(
    g: &mut Graph,
    state: &CalibState,
    batch: &[usize],
    calib: &CalibrationSet,
    refs: &References,
    cfg: &CalibConfig,
) -> Result<LossGraph> {
    let samples: Vec<&[f32]> = batch.iter().map(|&i| calib.sample(i)).collect();
    let x = g.constant(batch_tensor(&calib.dims, &samples));
    let mut rho_ids = Vec::with_capacity(state.layers.len());
    let mut w_ids = Vec::with_capacity(state.layers.len());
    let mut bit_nodes = Vec::with_capacity(state.layers.len());
    let mut table_nodes = Vec::with_capacity(state.layers.len());
    let mut resolved = Vec::with_capacity(state.layers.len());
    for l in &state.layers {
        let w = g.param(Tensor::new(l.dims.clone(), l.weights.clone()));
        let rho = g.param(Tensor::new(vec![l.rho.len()], l.rho.clone()));
        let (wbar, what) = compress_nodes(g, state.variant, w, rho)?;
        table_nodes.push(table_bits_node(g, wbar));
        bit_nodes.push(coding_length_node(g, wbar, &cfg.counter)?);
        rho_ids.push(rho);
        w_ids.push(w);
        resolved.push((l.name.clone(), what));
    }
    for b in &state.biases {
        let t = state
            .manifest
            .tensor(&b.name)
            .ok_or_else(|| Error::Model(format!("unknown bias `{}`", b.name)))?;
        let id = g.constant(Tensor::from_f32(&t.dims, &b.dequantize()));
        resolved.push((b.name.clone(), id));
    }
    let acts = build_chain(g, &state.manifest.topology, x, |_, name| {
        resolved.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    })?;
    let mut terms = Vec::with_capacity(refs.points.len() + 1);
    for (k, &p) in refs.points.iter().enumerate() {
        terms.push(g.mse(acts[p], &refs.rows(k, batch))?);
    }
    let mse_node = g.add(&terms)?;
    let mse = g.value(mse_node).item();

    let entropy_node = g.add(&bit_nodes)?;
    let bits = g.value(entropy_node).item();
    let tables_node = g.add(&table_nodes)?;
    let table_bits = g.value(tables_node).item();
    let size_node = g.add(&[entropy_node, tables_node])?;
    let budget = state.budget_bits(cfg);
    // Relative excess over the budget, so λ means the same thing at every
    // target ratio.
    let norm = budget.max(1.0);
    let reg_value = (bits + table_bits - budget).max(0.0) / norm;
    let active = bits + table_bits > budget;
    let reg = g.custom(&[size_node], Tensor::scalar(reg_value), move |up| {
        let d = if active { up.item() / norm } else { 0.0 };
        vec![Some(Tensor::scalar(d))]
    });
    let weighted = g.scalar_mul(reg, state.lambda);
    let loss = g.add(&[mse_node, weighted])?;
    Ok(LossGraph {
        loss,
        rho: rho_ids,
        weights: w_ids,
        mse,
        bits,
        table_bits,
        budget,
        regularizer: reg_value,
    })
}

/// Loss value and gradients for one batch.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub mse: f64,
    pub bits: f64,
    pub table_bits: f64,
    pub budget: f64,
    pub regularizer: f64,
    pub grad_rho: Vec<Vec<f64>>,
    pub grad_weights: Vec<Vec<f64>>,
}

pub fn total_loss(
    state: &CalibState,
    batch: &[usize],
    calib: &CalibrationSet,
    refs: &References,
    cfg: &CalibConfig,
) -> Result<LossEval> {
    let mut g = Graph::new();
    let lg = build_loss(&mut g, state, batch, calib, refs, cfg)?;
    let loss = g.value(lg.loss).item();
    g.backward(lg.loss)?;
    let eval = LossEval {
        loss,
        mse: lg.mse,
        bits: lg.bits,
        table_bits: lg.table_bits,
        budget: lg.budget,
        regularizer: lg.regularizer,
        grad_rho: lg.rho.iter().map(|&id| g.grad_or_zero(id).data).collect(),
        grad_weights: lg.weights.iter().map(|&id| g.grad_or_zero(id).data).collect(),
    };
    let finite = eval.loss.is_finite()
        && eval
            .grad_rho
            .iter()
            .chain(&eval.grad_weights)
            .all(|g| g.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::Diverged(format!(
            "non-finite loss or gradient at iteration {} (loss {}, mse {}, bits {})",
            state.history.len(),
            eval.loss,
            eval.mse,
            eval.bits
        )));
    }
    Ok(eval)
}

/// Adam on the transform parameters only; weights stay fixed.
pub fn train_transform_phase(
    state: &mut CalibState,
    calib: &CalibrationSet,
    refs: &References,
    cfg: &CalibConfig,
) -> Result<()> {
    let sizes: Vec<usize> = state.layers.iter().map(|l| l.rho.len()).collect();
    let mut adam = AdamState::new(cfg.lr_transform, &sizes);
    for _ in 0..cfg.transform_iters {
        let batch = state.next_batch(cfg.batch_size);
        let eval = total_loss(state, &batch, calib, refs, cfg)?;
        state.history.push(eval.loss);
        let mut params: Vec<&mut [f64]> = state.layers.iter_mut().map(|l| l.rho.as_mut_slice()).collect();
        let grads: Vec<&[f64]> = eval.grad_rho.iter().map(|g| g.as_slice()).collect();
        adam_step(&mut adam, &mut params, &grads)?;
    }
    Ok(())
}

/// Adam on the weights only, with straight-through gradients; transform
/// parameters stay fixed.
pub fn finetune_weights_phase(
    state: &mut CalibState,
    calib: &CalibrationSet,
    refs: &References,
    cfg: &CalibConfig,
) -> Result<()> {
    let sizes: Vec<usize> = state.layers.iter().map(|l| l.weights.len()).collect();
    let mut adam = AdamState::new(cfg.lr_weights, &sizes);
    for _ in 0..cfg.finetune_iters {
        let batch = state.next_batch(cfg.batch_size);
        let eval = total_loss(state, &batch, calib, refs, cfg)?;
        state.history.push(eval.loss);
        let mut params: Vec<&mut [f64]> = state
            .layers
            .iter_mut()
            .map(|l| l.weights.as_mut_slice())
            .collect();
        let grads: Vec<&[f64]> = eval.grad_weights.iter().map(|g| g.as_slice()).collect();
        adam_step(&mut adam, &mut params, &grads)?;
    }
    Ok(())
}

/// Exact entropy and table size of the current symbols against the budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BudgetStatus {
    pub bits: f64,
    pub table_bits: f64,
    pub budget: f64,
}

impl BudgetStatus {
    pub fn met(&self) -> bool {
        self.bits + self.table_bits <= self.budget
    }
}

pub fn budget_status(state: &CalibState, cfg: &CalibConfig) -> Result<BudgetStatus> {
    let mut bits = 0.0;
    let mut table_bits = 0.0;
    for s in state.streams()? {
        let t = exact_table(&s.symbols)?;
        bits += exact_coding_length_bits(&t);
        table_bits += 32.0 * t.alphabet() as f64;
    }
    Ok(BudgetStatus {
        bits,
        table_bits,
        budget: state.budget_bits(cfg),
    })
}

#[derive(Clone, Debug)]
pub struct EpochSummary {
    pub lambda: f64,
    pub status: BudgetStatus,
}

#[derive(Clone, Debug)]
pub struct CalibrationResult {
    pub specs: Vec<TransformSpec>,
    pub weights: Vec<LayerParams>,
    pub streams: Vec<LayerStream>,
    pub biases: Vec<QuantizedBias>,
    /// Exact entropy of the final symbols.
    pub achieved_bits: f64,
    /// Size of the final count tables.
    pub table_bits: f64,
    /// Bits available to tables and payloads.
    pub budget_bits: f64,
    pub target_missed: bool,
    pub lambda: f64,
    pub history: Vec<f64>,
    pub epochs: Vec<EpochSummary>,
}

pub fn run_schedule(
    manifest: &ModelManifest,
    calib: &CalibrationSet,
    cfg: &CalibConfig,
) -> Result<CalibrationResult> {
    let refs = cache_references(manifest, calib)?;
    let mut state = CalibState::init(manifest, calib, cfg)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        train_transform_phase(&mut state, calib, &refs, cfg)?;
        finetune_weights_phase(&mut state, calib, &refs, cfg)?;
        let status = budget_status(&state, cfg)?;
        epochs.push(EpochSummary {
            lambda: state.lambda,
            status,
        });
        if !status.met() {
            state.lambda *= 2.0;
        }
    }
    let status = budget_status(&state, cfg)?;
    Ok(CalibrationResult {
        specs: state.specs()?,
        streams: state.streams()?,
        weights: state.layers,
        biases: state.biases,
        achieved_bits: status.bits,
        table_bits: status.table_bits,
        budget_bits: status.budget,
        target_missed: !status.met(),
        lambda: state.lambda,
        history: state.history,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Pinned;
    use crate::model_io::{Op, WeightTensor};
    use crate::toy::{train_toy, ToyConfig};

    fn small_toy() -> (ModelManifest, CalibrationSet) {
        let art = train_toy(&ToyConfig {
            hidden: 8,
            train_per_class: 30,
            eval_per_class: 5,
            calib_count: 24,
            steps: 150,
            ..ToyConfig::default()
        })
        .unwrap();
        (art.model, art.calib)
    }

    fn quick(cr: f64) -> CalibConfig {
        CalibConfig {
            cr_target: cr,
            epochs: 1,
            transform_iters: 10,
            finetune_iters: 10,
            batch_size: 8,
            ..CalibConfig::default()
        }
    }

    fn full_mse(state: &CalibState, calib: &CalibrationSet, refs: &References) -> f64 {
        let all: Vec<usize> = (0..calib.count()).collect();
        let cfg = CalibConfig {
            lambda: 0.0,
            ..CalibConfig::default()
        };
        total_loss(state, &all, calib, refs, &cfg).unwrap().mse
    }

    #[test]
    fn references_are_plain_forward_outputs() {
        let (m, c) = small_toy();
        let refs = cache_references(&m, &c).unwrap();
        assert_eq!(refs.points, m.output_points());
        let again = cache_references(&m, &c).unwrap();
        assert_eq!(refs, again);
        // one sample at a time gives the same rows
        let one = CalibrationSet::new(c.dims.clone(), c.sample(3).to_vec()).unwrap();
        let single = cache_references(&m, &one).unwrap();
        for (k, t) in single.outputs.iter().enumerate() {
            assert_eq!(t.data, refs.rows(k, &[3]).data);
        }
    }

    #[test]
    fn calibration_dims_must_match() {
        let (m, _) = small_toy();
        let bad = CalibrationSet::new(vec![3], vec![0.0; 6]).unwrap();
        assert!(cache_references(&m, &bad).is_err());
        assert!(CalibState::init(&m, &bad, &quick(8.0)).is_err());
    }

    #[test]
    fn fine_transforms_without_lambda_give_zero_loss() {
        let (mut m, c) = small_toy();
        // biases are always 8-bit, so compare against a model that already has them
        for t in m.layers.iter_mut().filter(|t| t.kind == TensorKind::Bias) {
            t.data = QuantizedBias::quantize(&t.name, &t.data).dequantize();
        }
        let cfg = CalibConfig {
            lambda: 0.0,
            ..quick(8.0)
        };
        let refs = cache_references(&m, &c).unwrap();
        let mut state = CalibState::init(&m, &c, &cfg).unwrap();
        for l in &mut state.layers {
            l.rho = TransformSpec::Joint { e: 1e-12, s: 1e-9 }.to_log_params();
        }
        let all: Vec<usize> = (0..c.count()).collect();
        let eval = total_loss(&state, &all, &c, &refs, &cfg).unwrap();
        assert!(eval.loss < 1e-12, "loss {}", eval.loss);
    }

    #[test]
    fn hand_built_single_layer_loss() {
        let w = [0.3f32, -0.2];
        let m = ModelManifest {
            layers: vec![WeightTensor::new("w", TensorKind::DenseWeight, vec![1, 2], w.to_vec()).unwrap()],
            input_dims: vec![2],
            topology: vec![Op::Dense { weight: "w".into() }],
            distill_points: Default::default(),
        };
        let c = CalibrationSet::new(vec![2], vec![1.0, 0.0, 0.5, 2.0]).unwrap();
        let cfg = CalibConfig {
            variant: Variant::Linear,
            lambda: 0.25,
            cr_target: 1.0,
            ..CalibConfig::default()
        };
        let refs = cache_references(&m, &c).unwrap();
        let mut state = CalibState::init(&m, &c, &cfg).unwrap();
        let s = 0.1;
        state.layers[0].rho = TransformSpec::Linear { s }.to_log_params();
        let s = state.layers[0].spec(Variant::Linear).unwrap().params()[0];
        let eval = total_loss(&state, &[0, 1], &c, &refs, &cfg).unwrap();

        let wf: Vec<f64> = w.iter().map(|&v| v as f64).collect();
        let what: Vec<f64> = wf.iter().map(|v| (v / s).round() * s).collect();
        let xs = [[1.0, 0.0], [0.5, 2.0]];
        let mse = xs
            .iter()
            .map(|x| {
                let y = x[0] * what[0] + x[1] * what[1];
                let r = x[0] * wf[0] + x[1] * wf[1];
                (y - r) * (y - r)
            })
            .sum::<f64>()
            / 2.0;
        // symbols 3 and -2: two bits in total, table covers -2..=3
        let bits = 2.0;
        let table = 32.0 * 6.0;
        let budget = (1.0 - cfg.budget_margin) * 64.0 / cfg.cr_target - 8.0 * state.fixed_overhead_bytes() as f64;
        let reg = (bits + table - budget).max(0.0) / budget.max(1.0);
        assert!((eval.mse - mse).abs() < 1e-15);
        assert!((eval.bits - bits).abs() < 1e-9, "bits {}", eval.bits);
        assert_eq!(eval.table_bits, table);
        assert_eq!(eval.budget, budget);
        assert!((eval.loss - (mse + cfg.lambda * reg)).abs() < 1e-9 * (1.0 + reg));
    }

    #[test]
    fn regularizer_gradient_vanishes_when_budget_met() {
        let (m, c) = small_toy();
        let refs = cache_references(&m, &c).unwrap();
        let batch: Vec<usize> = (0..8).collect();
        let loose = |lambda| CalibConfig {
            lambda,
            init: InitConfig {
                bits: 2,
                prune_fraction: 0.5,
            },
            ..quick(0.25)
        };
        let cfg = loose(1.0);
        let mut state = CalibState::init(&m, &c, &cfg).unwrap();
        let at = |state: &CalibState, lambda: f64, cfg: &CalibConfig| {
            let mut s = state.clone();
            s.lambda = lambda;
            total_loss(&s, &batch, &c, &refs, cfg).unwrap()
        };
        let a = at(&state, 0.0, &cfg);
        let b = at(&state, 1e9, &cfg);
        assert!(a.bits + a.table_bits < a.budget);
        assert_eq!(b.regularizer, 0.0);
        assert_eq!(a.grad_rho, b.grad_rho);
        assert_eq!(a.grad_weights, b.grad_weights);
        // the same state against a far tighter target: the term is live
        let tight = CalibConfig {
            cr_target: 200.0,
            ..cfg
        };
        state.lambda = 1.0;
        let t0 = at(&state, 0.0, &tight);
        let t1 = at(&state, 1.0, &tight);
        assert!(t1.regularizer > 0.0);
        assert_ne!(t0.grad_rho, t1.grad_rho);
        assert_ne!(t0.grad_weights, t1.grad_weights);
    }

    fn loss_at(state: &CalibState, batch: &[usize], c: &CalibrationSet, refs: &References, cfg: &CalibConfig, pinned: &Pinned) -> f64 {
        let mut g = Graph::replaying(pinned.clone());
        let lg = build_loss(&mut g, state, batch, c, refs, cfg).unwrap();
        g.value(lg.loss).item()
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (m, c) = small_toy();
        let refs = cache_references(&m, &c).unwrap();
        // a positive budget keeps the loss near unit scale
        let cfg = CalibConfig {
            lambda: 0.05,
            ..quick(0.5)
        };
        let state = CalibState::init(&m, &c, &cfg).unwrap();
        assert!(state.budget_bits(&cfg) > 0.0);
        let batch: Vec<usize> = (0..12).collect();
        let mut g = Graph::new();
        let lg = build_loss(&mut g, &state, &batch, &c, &refs, &cfg).unwrap();
        assert!(lg.regularizer > 0.0);
        g.backward(lg.loss).unwrap();
        let pinned = g.pinned().clone();
        // the replayed loss is smooth, so a moderate step keeps round-off small
        let h = 1e-4;
        let (mut checked, mut good) = (0, 0);
        for (li, l) in state.layers.iter().enumerate() {
            let grho = g.grad_or_zero(lg.rho[li]).data;
            let gw = g.grad_or_zero(lg.weights[li]).data;
            for j in 0..l.rho.len() {
                let mut p = state.clone();
                p.layers[li].rho[j] += h;
                let mut q = state.clone();
                q.layers[li].rho[j] -= h;
                let fd = (loss_at(&p, &batch, &c, &refs, &cfg, &pinned) - loss_at(&q, &batch, &c, &refs, &cfg, &pinned)) / (2.0 * h);
                checked += 1;
                if (fd - grho[j]).abs() <= 1e-4 * fd.abs().max(grho[j].abs()).max(1e-6) {
                    good += 1;
                }
            }
            // a weight step moves w̄ by about h_w / s
            let hw = 1e-3 * l.spec(state.variant).unwrap().params()[1];
            for j in 0..l.weights.len() {
                let mut p = state.clone();
                p.layers[li].weights[j] += hw;
                let mut q = state.clone();
                q.layers[li].weights[j] -= hw;
                let fd = (loss_at(&p, &batch, &c, &refs, &cfg, &pinned) - loss_at(&q, &batch, &c, &refs, &cfg, &pinned)) / (2.0 * hw);
                checked += 1;
                if (fd - gw[j]).abs() <= 1e-4 * fd.abs().max(gw[j].abs()).max(1e-6) {
                    good += 1;
                }
            }
        }
        assert!(good as f64 >= 0.99 * checked as f64, "{good}/{checked}");
    }

    #[test]
    fn zero_iteration_phases_change_nothing() {
        let (m, c) = small_toy();
        let cfg = CalibConfig {
            transform_iters: 0,
            finetune_iters: 0,
            ..quick(8.0)
        };
        let refs = cache_references(&m, &c).unwrap();
        let mut state = CalibState::init(&m, &c, &cfg).unwrap();
        let before = state.layers.clone();
        train_transform_phase(&mut state, &c, &refs, &cfg).unwrap();
        finetune_weights_phase(&mut state, &c, &refs, &cfg).unwrap();
        assert_eq!(state.layers, before);
        assert!(state.history.is_empty());
    }

    #[test]
    fn strong_pressure_shrinks_entropy() {
        let (m, c) = small_toy();
        let cfg = CalibConfig {
            lambda: 1e6,
            transform_iters: 40,
            ..quick(64.0)
        };
        let refs = cache_references(&m, &c).unwrap();
        let mut state = CalibState::init(&m, &c, &cfg).unwrap();
        let before = budget_status(&state, &cfg).unwrap().bits;
        train_transform_phase(&mut state, &c, &refs, &cfg).unwrap();
        let after = budget_status(&state, &cfg).unwrap().bits;
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn without_lambda_the_transform_phase_only_chases_mse() {
        let (m, c) = small_toy();
        let refs = cache_references(&m, &c).unwrap();
        let cfg = CalibConfig {
            lambda: 0.0,
            ..quick(64.0)
        };
        let state = CalibState::init(&m, &c, &cfg).unwrap();
        let batch: Vec<usize> = (0..8).collect();
        let eval = total_loss(&state, &batch, &c, &refs, &cfg).unwrap();
        assert!(eval.regularizer > 0.0);
        assert_eq!(eval.loss, eval.mse);
    }

    #[test]
    fn finetuning_does_not_raise_mse() {
        let (m, c) = small_toy();
        let refs = cache_references(&m, &c).unwrap();
        let cfg = CalibConfig {
            lambda: 0.0,
            finetune_iters: 30,
            batch_size: c.count(),
            lr_weights: 1e-5,
            init: InitConfig {
                bits: 3,
                prune_fraction: 0.2,
            },
            ..quick(8.0)
        };
        let mut state = CalibState::init(&m, &c, &cfg).unwrap();
        let before = full_mse(&state, &c, &refs);
        finetune_weights_phase(&mut state, &c, &refs, &cfg).unwrap();
        let after = full_mse(&state, &c, &refs);
        assert!(after <= before, "{before} -> {after}");
    }

    #[test]
    fn weights_without_signal_stay_put() {
        let (m, c) = small_toy();
        // the second input feature is always zero, so its column of fc0.w
        // never influences the outputs
        let mut data = c.data.clone();
        data.iter_mut().skip(1).step_by(2).for_each(|v| *v = 0.0);
        let c = CalibrationSet::new(c.dims.clone(), data).unwrap();
        let refs = cache_references(&m, &c).unwrap();
        let cfg = CalibConfig {
            lambda: 0.0,
            finetune_iters: 20,
            ..quick(8.0)
        };
        let mut state = CalibState::init(&m, &c, &cfg).unwrap();
        let before = state.layers[0].weights.clone();
        finetune_weights_phase(&mut state, &c, &refs, &cfg).unwrap();
        let after = &state.layers[0].weights;
        for (j, (a, b)) in before.iter().zip(after).enumerate() {
            if j % 2 == 1 {
                assert_eq!(a, b, "coordinate {j}");
            }
        }
        assert_ne!(&before, after);
    }

    #[test]
    fn schedule_is_deterministic() {
        let (m, c) = small_toy();
        let cfg = quick(8.0);
        let a = run_schedule(&m, &c, &cfg).unwrap();
        let b = run_schedule(&m, &c, &cfg).unwrap();
        assert_eq!(a.streams, b.streams);
        assert_eq!(a.history, b.history);
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn zero_epochs_return_the_initialisation() {
        let (m, c) = small_toy();
        let cfg = CalibConfig {
            epochs: 0,
            ..quick(8.0)
        };
        let res = run_schedule(&m, &c, &cfg).unwrap();
        assert!(res.history.is_empty() && res.epochs.is_empty());
        for (s, t) in res.streams.iter().zip(m.layers.iter().filter(|t| t.kind != TensorKind::Bias)) {
            let w: Vec<f64> = t.data.iter().map(|&v| v as f64).collect();
            let spec = init_spec(&w, cfg.variant, &cfg.init).unwrap();
            assert_eq!(s.name, t.name);
            assert_eq!(s.symbols, apply_compress(&w, &spec).unwrap().1);
        }
    }

    #[test]
    fn lambda_doubles_while_over_budget() {
        let (m, c) = small_toy();
        let cfg = CalibConfig {
            epochs: 3,
            transform_iters: 2,
            finetune_iters: 2,
            lambda: 1e-9,
            ..quick(10_000.0)
        };
        let res = run_schedule(&m, &c, &cfg).unwrap();
        assert!(res.target_missed);
        let lambdas: Vec<f64> = res.epochs.iter().map(|e| e.lambda).collect();
        assert_eq!(lambdas, vec![1e-9, 2e-9, 4e-9]);
        assert_eq!(res.lambda, 8e-9);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            CalibConfig { cr_target: 0.0, ..CalibConfig::default() },
            CalibConfig { lambda: -1.0, ..CalibConfig::default() },
            CalibConfig { batch_size: 0, ..CalibConfig::default() },
            CalibConfig { budget_margin: 1.0, ..CalibConfig::default() },
            CalibConfig { lr_weights: f64::NAN, ..CalibConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
        assert!(CalibConfig::default().validate().is_ok());
    }
}
