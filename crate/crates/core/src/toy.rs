//! A small self-contained fixture: a 2-64-64-3 ReLU MLP trained on a
//! seeded three-arm spiral.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{adam_step, batch_tensor, build_chain, forward, AdamState, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::model_io::{
    load_calibration, save_calibration, save_raw_model, CalibrationSet, ModelManifest, Op, TensorKind,
    WeightTensor,
};

pub const MODEL_FILE: &str = "toy.l2rm";
pub const CALIB_FILE: &str = "calib.l2ca";
pub const EVAL_INPUTS_FILE: &str = "eval_inputs.l2ca";
pub const EVAL_LABELS_FILE: &str = "eval_labels.l2ca";

pub const CLASSES: usize = 3;

#[derive(Clone, Debug)]
pub struct ToyConfig {
    pub seed: u64,
    pub hidden: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub calib_count: usize,
    pub noise: f64,
    pub steps: usize,
    pub lr: f64,
    pub target_accuracy: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            seed: 0,
            hidden: 64,
            train_per_class: 200,
            eval_per_class: 100,
            calib_count: 256,
            noise: 0.25,
            steps: 800,
            lr: 1e-2,
            target_accuracy: 0.95,
        }
    }
}

/// `n` points per class. A point at radius `r ~ U(0, 1)` on arm `j` has
/// angle `4(j + r)` plus Gaussian noise.
pub fn spiral(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<usize>) {
    let jitter = Normal::new(0.0, noise.max(0.0)).expect("finite std");
    let mut xs = Vec::with_capacity(2 * n * CLASSES);
    let mut labels = Vec::with_capacity(n * CLASSES);
    for class in 0..CLASSES {
        for _ in 0..n {
            let radius: f64 = rng.random();
            let t = 4.0 * (class as f64 + radius) + jitter.sample(rng);
            xs.push((radius * t.sin()) as f32);
            xs.push((radius * t.cos()) as f32);
            labels.push(class);
        }
    }
    (xs, labels)
}

fn mlp_manifest(hidden: usize, rng: &mut ChaCha8Rng) -> Result<ModelManifest> {
    let widths = [2, hidden, hidden, CLASSES];
    let mut layers = Vec::new();
    let mut topology = Vec::new();
    for i in 0..3 {
        let (fan_in, fan_out) = (widths[i], widths[i + 1]);
        let he = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let w: Vec<f32> = (0..fan_in * fan_out).map(|_| he.sample(rng) as f32).collect();
        let wname = format!("fc{i}.w");
        let bname = format!("fc{i}.b");
        layers.push(WeightTensor::new(&wname, TensorKind::DenseWeight, vec![fan_out, fan_in], w)?);
        layers.push(WeightTensor::new(&bname, TensorKind::Bias, vec![fan_out], vec![0.0; fan_out])?);
        topology.push(Op::Dense { weight: wname });
        topology.push(Op::BiasAdd { bias: bname });
        if i < 2 {
            topology.push(Op::Relu);
        }
    }
    // Every hidden activation joins the distillation loss.
    let distill_points: BTreeSet<usize> = topology
        .iter()
        .enumerate()
        .filter(|(_, op)| matches!(op, Op::Relu))
        .map(|(k, _)| k)
        .collect();
    let m = ModelManifest {
        layers,
        input_dims: vec![2],
        topology,
        distill_points,
    };
    m.validate()?;
    Ok(m)
}

/// Mean softmax cross-entropy of `[B, C]` logits.
fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> NodeId {
    let t = g.value(logits).clone();
    let c = t.dims[1];
    let b = labels.len();
    let mut probs = vec![0.0; t.data.len()];
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &t.data[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for k in 0..c {
            probs[i * c + k] = (row[k] - m).exp() / z;
        }
        loss -= (row[y] - m) - z.ln();
    }
    let labels = labels.to_vec();
    let dims = t.dims.clone();
    g.custom(&[logits], Tensor::scalar(loss / b as f64), move |up| {
        let u = up.item() / b as f64;
        let mut d = probs.clone();
        for (i, &y) in labels.iter().enumerate() {
            d[i * c + y] -= 1.0;
        }
        d.iter_mut().for_each(|v| *v *= u);
        vec![Some(Tensor::new(dims.clone(), d))]
    })
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn accuracy(manifest: &ModelManifest, inputs: &CalibrationSet, labels: &[usize]) -> Result<f64> {
    if inputs.count() != labels.len() || labels.is_empty() {
        return Err(Error::Parameter("inputs and labels differ in count".into()));
    }
    let samples: Vec<&[f32]> = (0..inputs.count()).map(|i| inputs.sample(i)).collect();
    let out = forward(manifest, &batch_tensor(&inputs.dims, &samples))?;
    let logits = out.last().expect("final output");
    let c = logits.dims[1];
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &logits.data[i * c..(i + 1) * c];
            let best = (0..c).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            best == y
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Clone, Debug)]
pub struct ToyArtifacts {
    pub model: ModelManifest,
    pub calib: CalibrationSet,
    pub eval_inputs: CalibrationSet,
    pub eval_labels: Vec<usize>,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

impl ToyArtifacts {
    pub fn reached_target(&self, cfg: &ToyConfig) -> bool {
        self.train_accuracy >= cfg.target_accuracy
    }
}

pub fn train_toy(cfg: &ToyConfig) -> Result<ToyArtifacts> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train_x, train_y) = spiral(cfg.train_per_class, cfg.noise, &mut rng);
    let (eval_x, eval_y) = spiral(cfg.eval_per_class, cfg.noise, &mut rng);
    let (calib_x, _) = spiral(cfg.calib_count.div_ceil(CLASSES), cfg.noise, &mut rng);
    let mut model = mlp_manifest(cfg.hidden, &mut rng)?;

    let train = CalibrationSet::new(vec![2], train_x)?;
    let samples: Vec<&[f32]> = (0..train.count()).map(|i| train.sample(i)).collect();
    let input = batch_tensor(&train.dims, &samples);
    let mut params: Vec<Vec<f64>> = model
        .layers
        .iter()
        .map(|t| t.data.iter().map(|&v| v as f64).collect())
        .collect();
    let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
    let mut adam = AdamState::new(cfg.lr, &sizes);
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let ids: Vec<NodeId> = model
            .layers
            .iter()
            .zip(&params)
            .map(|(t, p)| g.param(Tensor::new(t.dims.clone(), p.clone())))
            .collect();
        let acts = build_chain(&mut g, &model.topology, x, |_, name| {
            model.tensor_index(name).map(|k| ids[k])
        })?;
        let loss = cross_entropy(&mut g, *acts.last().expect("output"), &train_y);
        if !g.value(loss).item().is_finite() {
            return Err(Error::Diverged("toy training loss is not finite".into()));
        }
        g.backward(loss)?;
        let grads: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad_or_zero(id).data).collect();
        let mut views: Vec<&mut [f64]> = params.iter_mut().map(|p| p.as_mut_slice()).collect();
        let gviews: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        adam_step(&mut adam, &mut views, &gviews)?;
    }
    for (t, p) in model.layers.iter_mut().zip(&params) {
        t.data = p.iter().map(|&v| v as f32).collect();
    }
    model.validate()?;

    let mut calib = CalibrationSet::new(vec![2], calib_x)?;
    calib.truncate(cfg.calib_count);
    let eval_inputs = CalibrationSet::new(vec![2], eval_x)?;
    let train_accuracy = accuracy(&model, &train, &train_y)?;
    let eval_accuracy = accuracy(&model, &eval_inputs, &eval_y)?;
    Ok(ToyArtifacts {
        model,
        calib,
        eval_inputs,
        eval_labels: eval_y,
        train_accuracy,
        eval_accuracy,
    })
}

pub fn write_toy(dir: impl AsRef<Path>, art: &ToyArtifacts) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    save_raw_model(&art.model, dir.join(MODEL_FILE))?;
    save_calibration(&art.calib, dir.join(CALIB_FILE))?;
    save_calibration(&art.eval_inputs, dir.join(EVAL_INPUTS_FILE))?;
    let labels = CalibrationSet::new(vec![1], art.eval_labels.iter().map(|&y| y as f32).collect())?;
    save_calibration(&labels, dir.join(EVAL_LABELS_FILE))
}

/// Reads the held-out set written by [`write_toy`].
pub fn load_eval(dir: impl AsRef<Path>) -> Result<(CalibrationSet, Vec<usize>)> {
    let dir = dir.as_ref();
    let inputs = load_calibration(dir.join(EVAL_INPUTS_FILE))?;
    let labels = load_calibration(dir.join(EVAL_LABELS_FILE))?;
    if labels.dims != [1] {
        return Err(Error::Model("label file must have dims [1]".into()));
    }
    let labels = labels
        .data
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < CLASSES {
                Ok(v as usize)
            } else {
                Err(Error::Model(format!("invalid label {v}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((inputs, labels))
}
