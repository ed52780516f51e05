//! A small reverse-mode tape over `f64` tensors.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and `backward` simply walks the tape in reverse. The op
//! set is exactly what the calibration loop needs; anything more exotic goes
//! through [`Graph::custom`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model_io::{ModelManifest, Op};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor { dims, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            dims: Vec::new(),
            data: vec![v],
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_f32(dims: &[usize], data: &[f32]) -> Self {
        Tensor::new(dims.to_vec(), data.iter().map(|&v| v as f64).collect())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

enum NodeOp {
    Leaf,
    MatMul { x: NodeId, w: NodeId },
    Conv2d { x: NodeId, w: NodeId },
    BiasAdd { x: NodeId, b: NodeId },
    Relu(NodeId),
    Flatten(NodeId),
    Mse { x: NodeId, target: Vec<f64> },
    Add(Vec<NodeId>),
    ScalarAdd(NodeId),
    ScalarMul(NodeId, f64),
    SteRound(NodeId),
    Custom { inputs: Vec<NodeId>, backward: BackwardFn },
}

struct Node {
    op: NodeOp,
    value: Tensor,
    requires_grad: bool,
}

/// Values pinned on one evaluation and replayed on later ones.
///
/// Rounding residuals (and anything else a node declares piecewise-constant)
/// are recorded in order. Replaying them turns the straight-through surrogate
/// into an ordinary smooth function, which is what finite-difference checks
/// of the STE gradients need.
#[derive(Clone, Debug, Default)]
pub struct Pinned {
    pub values: Vec<Vec<f64>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    record: Pinned,
    replay: Option<(Pinned, usize)>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// A graph that replays pinned values instead of recomputing them.
    pub fn replaying(pinned: Pinned) -> Self {
        Graph {
            replay: Some((pinned, 0)),
            ..Graph::default()
        }
    }

    pub fn is_replaying(&self) -> bool {
        self.replay.is_some()
    }

    /// Everything pinned so far on this graph.
    pub fn pinned(&self) -> &Pinned {
        &self.record
    }

    /// Returns the next replayed vector, or evaluates `f` and records it.
    pub fn pin(&mut self, f: impl FnOnce() -> Vec<f64>) -> Vec<f64> {
        let v = match &mut self.replay {
            Some((p, cursor)) => {
                let v = p.values[*cursor].clone();
                *cursor += 1;
                v
            }
            None => f(),
        };
        self.record.values.push(v.clone());
        v
    }

    fn push(&mut self, op: NodeOp, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.backward_done = false;
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(NodeOp::Leaf, t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(NodeOp::Leaf, t, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `x: [B, in]`, `w: [out, in]` → `[B, out]`.
    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.dims.len() != 2 || wv.dims.len() != 2 || xv.dims[1] != wv.dims[1] {
            return Err(Error::Shape {
                op: 0,
                message: format!("matmul {:?} x {:?}ᵀ", xv.dims, wv.dims),
            });
        }
        let (b, n_in, n_out) = (xv.dims[0], xv.dims[1], wv.dims[0]);
        // Accumulate over `k` in order for every output at once; each output
        // sees the same summation order as a plain dot product.
        let mut wt = vec![0.0; n_in * n_out];
        for o in 0..n_out {
            for k in 0..n_in {
                wt[k * n_out + o] = wv.data[o * n_in + k];
            }
        }
        let mut out = vec![0.0; b * n_out];
        for i in 0..b {
            let row = &xv.data[i * n_in..(i + 1) * n_in];
            let acc = &mut out[i * n_out..(i + 1) * n_out];
            for (k, &xk) in row.iter().enumerate() {
                let wk = &wt[k * n_out..(k + 1) * n_out];
                for (a, &w) in acc.iter_mut().zip(wk) {
                    *a += xk * w;
                }
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(NodeOp::MatMul { x, w }, Tensor::new(vec![b, n_out], out), rg))
    }

    /// 3×3, stride 1, zero padding 1. `x: [B, Ci, H, W]`, `w: [Co, Ci, 3, 3]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.dims.len() != 4
            || wv.dims.len() != 4
            || wv.dims[2] != 3
            || wv.dims[3] != 3
            || xv.dims[1] != wv.dims[1]
        {
            return Err(Error::Shape {
                op: 0,
                message: format!("conv2d {:?} with kernel {:?}", xv.dims, wv.dims),
            });
        }
        let (b, ci, h, wd) = (xv.dims[0], xv.dims[1], xv.dims[2], xv.dims[3]);
        let co = wv.dims[0];
        let mut out = vec![0.0; b * co * h * wd];
        for n in 0..b {
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let ix = xx as isize + kx as isize - 1;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += xv.data[((n * ci + c) * h + iy as usize) * wd + ix as usize]
                                        * wv.data[((o * ci + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        out[((n * co + o) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            NodeOp::Conv2d { x, w },
            Tensor::new(vec![b, co, h, wd], out),
            rg,
        ))
    }

    /// Adds `b: [C]` along axis 1 of `x: [B, C, ...]`.
    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.dims.len() < 2 || bv.dims.len() != 1 || xv.dims[1] != bv.dims[0] {
            return Err(Error::Shape {
                op: 0,
                message: format!("bias-add {:?} + {:?}", xv.dims, bv.dims),
            });
        }
        let c = bv.dims[0];
        let inner: usize = xv.dims[2..].iter().product();
        let mut out = xv.data.clone();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bv.data[(i / inner) % c];
        }
        let dims = xv.dims.clone();
        let rg = self.rg(&[x, b]);
        Ok(self.push(NodeOp::BiasAdd { x, b }, Tensor::new(dims, out), rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let out = Tensor::new(
            xv.dims.clone(),
            xv.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        );
        let rg = self.rg(&[x]);
        self.push(NodeOp::Relu(x), out, rg)
    }

    /// `[B, ...] → [B, Π ...]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.dims.is_empty() {
            return Err(Error::Shape {
                op: 0,
                message: "flatten of a scalar".into(),
            });
        }
        let b = xv.dims[0];
        let rest = xv.dims[1..].iter().product();
        let out = Tensor::new(vec![b, rest], xv.data.clone());
        let rg = self.rg(&[x]);
        Ok(self.push(NodeOp::Flatten(x), out, rg))
    }

    /// Mean over all elements of `(x - target)²`.
    pub fn mse(&mut self, x: NodeId, target: &Tensor) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.dims != target.dims {
            return Err(Error::Shape {
                op: 0,
                message: format!("mse {:?} vs {:?}", xv.dims, target.dims),
            });
        }
        let n = xv.numel() as f64;
        let mut acc = 0.0;
        for (a, b) in xv.data.iter().zip(&target.data) {
            acc += (a - b) * (a - b);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            NodeOp::Mse {
                x,
                target: target.data.clone(),
            },
            Tensor::scalar(acc / n),
            rg,
        ))
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn add(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("add of zero terms".into()))?;
        let dims = self.value(*first).dims.clone();
        let mut out = vec![0.0; self.value(*first).numel()];
        for p in parts {
            let v = self.value(*p);
            if v.dims != dims {
                return Err(Error::Shape {
                    op: 0,
                    message: format!("add {:?} vs {:?}", dims, v.dims),
                });
            }
            for (o, x) in out.iter_mut().zip(&v.data) {
                *o += x;
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(NodeOp::Add(parts.to_vec()), Tensor::new(dims, out), rg))
    }

    pub fn scalar_add(&mut self, x: NodeId, c: f64) -> NodeId {
        let xv = self.value(x);
        let out = Tensor::new(xv.dims.clone(), xv.data.iter().map(|v| v + c).collect());
        let rg = self.rg(&[x]);
        self.push(NodeOp::ScalarAdd(x), out, rg)
    }

    pub fn scalar_mul(&mut self, x: NodeId, c: f64) -> NodeId {
        let xv = self.value(x);
        let out = Tensor::new(xv.dims.clone(), xv.data.iter().map(|v| v * c).collect());
        let rg = self.rg(&[x]);
        self.push(NodeOp::ScalarMul(x, c), out, rg)
    }

    /// Rounds half away from zero; the backward pass is the identity.
    ///
    /// On a replaying graph the output is `x + r` with the pinned residual
    /// `r`, otherwise it is exactly `⌊x⌉`.
    pub fn ste_round(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data.clone();
        let replaying = self.is_replaying();
        let residual = self.pin(|| data.iter().map(|&v| round_half_away(v) - v).collect());
        let xv = self.value(x);
        let out = if replaying {
            xv.data.iter().zip(&residual).map(|(v, r)| v + r).collect()
        } else {
            xv.data.iter().map(|&v| round_half_away(v)).collect()
        };
        let out = Tensor::new(xv.dims.clone(), out);
        let rg = self.rg(&[x]);
        self.push(NodeOp::SteRound(x), out, rg)
    }

    /// A node with caller-supplied value and vector-Jacobian product.
    ///
    /// `backward` receives the upstream gradient (same dims as `value`) and
    /// returns one optional gradient per input, in `inputs` order.
    pub fn custom(
        &mut self,
        inputs: &[NodeId],
        value: Tensor,
        backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> NodeId {
        let rg = self.rg(inputs);
        self.push(
            NodeOp::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            value,
            rg,
        )
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or zeros if nothing flowed into it.
    pub fn grad_or_zero(&self, id: NodeId) -> Tensor {
        self.grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.value(id).dims))
    }

    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(format!(
                "node {} has no forward value (graph has {} nodes)",
                loss.0,
                self.nodes.len()
            )));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::State("loss must be a scalar".into()));
        }
        if self.backward_done {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::new(
            self.nodes[loss.0].value.dims.clone(),
            vec![1.0],
        ));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(acc) => {
                for (a, b) in acc.data.iter_mut().zip(&g.data) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let mut out: Vec<(NodeId, Tensor)> = Vec::new();
        match &self.nodes[i].op {
            NodeOp::Leaf => {}
            NodeOp::MatMul { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (b, n_in, n_out) = (xv.dims[0], xv.dims[1], wv.dims[0]);
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; b * n_in];
                    for r in 0..b {
                        let dxr = &mut dx[r * n_in..(r + 1) * n_in];
                        for o in 0..n_out {
                            let go = g.data[r * n_out + o];
                            if go == 0.0 {
                                continue;
                            }
                            let wr = &wv.data[o * n_in..(o + 1) * n_in];
                            for (d, &w) in dxr.iter_mut().zip(wr) {
                                *d += go * w;
                            }
                        }
                    }
                    out.push((*x, Tensor::new(xv.dims.clone(), dx)));
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![0.0; n_out * n_in];
                    for r in 0..b {
                        let xr = &xv.data[r * n_in..(r + 1) * n_in];
                        for o in 0..n_out {
                            let go = g.data[r * n_out + o];
                            if go == 0.0 {
                                continue;
                            }
                            let dwo = &mut dw[o * n_in..(o + 1) * n_in];
                            for (d, &x) in dwo.iter_mut().zip(xr) {
                                *d += go * x;
                            }
                        }
                    }
                    out.push((*w, Tensor::new(wv.dims.clone(), dw)));
                }
            }
            NodeOp::Conv2d { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (b, ci, h, wd) = (xv.dims[0], xv.dims[1], xv.dims[2], xv.dims[3]);
                let co = wv.dims[0];
                let mut dx = vec![0.0; xv.numel()];
                let mut dw = vec![0.0; wv.numel()];
                for n in 0..b {
                    for o in 0..co {
                        for y in 0..h {
                            for xx in 0..wd {
                                let go = g.data[((n * co + o) * h + y) * wd + xx];
                                if go == 0.0 {
                                    continue;
                                }
                                for c in 0..ci {
                                    for ky in 0..3 {
                                        let iy = y as isize + ky as isize - 1;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..3 {
                                            let ix = xx as isize + kx as isize - 1;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            let xi = ((n * ci + c) * h + iy as usize) * wd + ix as usize;
                                            let wi = ((o * ci + c) * 3 + ky) * 3 + kx;
                                            dx[xi] += go * wv.data[wi];
                                            dw[wi] += go * xv.data[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                out.push((*x, Tensor::new(xv.dims.clone(), dx)));
                out.push((*w, Tensor::new(wv.dims.clone(), dw)));
            }
            NodeOp::BiasAdd { x, b } => {
                let xv = self.value(*x);
                let c = self.value(*b).dims[0];
                let inner: usize = xv.dims[2..].iter().product();
                let mut db = vec![0.0; c];
                for (k, v) in g.data.iter().enumerate() {
                    db[(k / inner) % c] += v;
                }
                out.push((*x, g.clone()));
                out.push((*b, Tensor::new(vec![c], db)));
            }
            NodeOp::Relu(x) => {
                let xv = self.value(*x);
                let d = xv
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                out.push((*x, Tensor::new(xv.dims.clone(), d)));
            }
            NodeOp::Flatten(x) => {
                let dims = self.value(*x).dims.clone();
                out.push((*x, Tensor::new(dims, g.data.clone())));
            }
            NodeOp::Mse { x, target } => {
                let xv = self.value(*x);
                let scale = 2.0 * g.item() / xv.numel() as f64;
                let d = xv
                    .data
                    .iter()
                    .zip(target)
                    .map(|(a, b)| scale * (a - b))
                    .collect();
                out.push((*x, Tensor::new(xv.dims.clone(), d)));
            }
            NodeOp::Add(parts) => {
                for p in parts {
                    out.push((*p, g.clone()));
                }
            }
            NodeOp::ScalarAdd(x) | NodeOp::SteRound(x) => out.push((*x, g.clone())),
            NodeOp::ScalarMul(x, c) => {
                out.push((
                    *x,
                    Tensor::new(g.dims.clone(), g.data.iter().map(|v| v * c).collect()),
                ));
            }
            NodeOp::Custom { inputs, backward } => {
                for (id, grad) in inputs.iter().zip(backward(g)) {
                    if let Some(grad) = grad {
                        out.push((*id, grad));
                    }
                }
            }
        }
        for (id, grad) in out {
            self.accumulate(id, grad);
        }
    }
}

/// Round to nearest, ties away from zero.
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// Builds the op chain on top of `input`, resolving tensor references
/// through `tensor`. Returns every activation: index 0 is the input and
/// index `k` is the output of op `k - 1`.
pub fn build_chain(
    g: &mut Graph,
    ops: &[Op],
    input: NodeId,
    mut tensor: impl FnMut(&mut Graph, &str) -> Option<NodeId>,
) -> Result<Vec<NodeId>> {
    let mut acts = vec![input];
    for (i, op) in ops.iter().enumerate() {
        let x = *acts.last().expect("non-empty");
        let mut resolve = |g: &mut Graph, name: &str| {
            tensor(g, name).ok_or_else(|| Error::Shape {
                op: i,
                message: format!("unresolved tensor `{name}`"),
            })
        };
        let at = |e: Error| match e {
            Error::Shape { message, .. } => Error::Shape { op: i, message },
            other => other,
        };
        let y = match op {
            Op::Dense { weight } => {
                let w = resolve(g, weight)?;
                g.matmul(x, w).map_err(at)?
            }
            Op::Conv2d { weight } => {
                let w = resolve(g, weight)?;
                g.conv2d(x, w).map_err(at)?
            }
            Op::BiasAdd { bias } => {
                let b = resolve(g, bias)?;
                g.bias_add(x, b).map_err(at)?
            }
            Op::Relu => g.relu(x),
            Op::Flatten => g.flatten(x).map_err(at)?,
        };
        acts.push(y);
    }
    Ok(acts)
}

/// Stacks samples into a `[B, ...dims]` batch tensor.
pub fn batch_tensor(dims: &[usize], samples: &[&[f32]]) -> Tensor {
    let mut full = vec![samples.len()];
    full.extend_from_slice(dims);
    let mut data = Vec::with_capacity(full.iter().product());
    for s in samples {
        data.extend(s.iter().map(|&v| v as f64));
    }
    Tensor::new(full, data)
}

/// Plain (non-differentiable) forward pass of a manifest with its stored
/// `f32` weights. Returns the tensors at [`ModelManifest::output_points`].
pub fn forward(manifest: &ModelManifest, input: &Tensor) -> Result<Vec<Tensor>> {
    if input.dims.get(1..) != Some(manifest.input_dims.as_slice()) && !manifest.topology.is_empty()
    {
        return Err(Error::Shape {
            op: 0,
            message: format!(
                "input {:?} does not match model input dims {:?}",
                input.dims, manifest.input_dims
            ),
        });
    }
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let mut cache: HashMap<String, NodeId> = HashMap::new();
    let acts = build_chain(&mut g, &manifest.topology, x, |g, name| {
        if let Some(id) = cache.get(name) {
            return Some(*id);
        }
        let t = manifest.tensor(name)?;
        let id = g.constant(Tensor::from_f32(&t.dims, &t.data));
        cache.insert(name.to_string(), id);
        Some(id)
    })?;
    Ok(manifest
        .output_points()
        .into_iter()
        .map(|p| g.value(acts[p]).clone())
        .collect())
}

/// Adam optimizer state for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
    if params.len() != state.first.len() || grads.len() != params.len() {
        return Err(Error::Shape {
            op: 0,
            message: "adam: parameter list does not match optimizer state".into(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.first[k], &mut state.second[k]);
        if p.len() != m.len() || g.len() != m.len() {
            return Err(Error::Shape {
                op: k,
                message: "adam: parameter size changed".into(),
            });
        }
        for i in 0..p.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= state.lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn dense_scalar() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1], vec![3.0]));
        let w = g.param(Tensor::new(vec![1, 1], vec![2.0]));
        let y = g.matmul(x, w).unwrap();
        assert_eq!(g.value(y).data, vec![6.0]);
    }

    #[test]
    fn identity_relu_passthrough() {
        let mut g = Graph::new();
        let input = vec![0.0, 1.5, 2.0, 0.25];
        let x = g.constant(Tensor::new(vec![2, 2], input.clone()));
        let w = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let y = g.matmul(x, w).unwrap();
        let y = g.relu(y);
        assert_eq!(g.value(y).data, input);
    }

    #[test]
    fn mlp_matches_hand_rolled_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[5, 2]);
        let w1 = rand_tensor(&mut rng, &[4, 2]);
        let w2 = rand_tensor(&mut rng, &[2, 4]);
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let a = g.constant(w1.clone());
        let b = g.constant(w2.clone());
        let h = g.matmul(xi, a).unwrap();
        let h = g.relu(h);
        let y = g.matmul(h, b).unwrap();
        for r in 0..5 {
            let mut hid = [0.0; 4];
            for o in 0..4 {
                hid[o] = (x.data[r * 2] * w1.data[o * 2] + x.data[r * 2 + 1] * w1.data[o * 2 + 1]).max(0.0);
            }
            for o in 0..2 {
                let want: f64 = (0..4).map(|k| hid[k] * w2.data[o * 4 + k]).sum();
                assert!((g.value(y).data[r * 2 + o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mse_gradient_mean_convention() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]));
        let l = g.mse(x, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(g.value(l).item(), 2.5);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data, vec![1.0, 2.0]);
    }

    #[test]
    fn relu_negative_has_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![1, 2], vec![-0.5, 0.5]));
        let y = g.relu(x);
        let l = g.mse(y, &Tensor::zeros(&[1, 2])).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data, vec![0.0, 0.5]);
    }

    #[test]
    fn backward_state_errors() {
        let mut g = Graph::new();
        let err = g.backward(NodeId(0)).unwrap_err();
        assert!(matches!(err, Error::State(_)));
        let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::State(_))));
    }

    #[test]
    fn ste_round_ties_and_passthrough() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![4], vec![0.5, -0.5, 3.1, 2.5]));
        let r = g.ste_round(x);
        assert_eq!(g.value(r).data, vec![1.0, -1.0, 3.0, 3.0]);
        let total: f64 = g.value(r).data.iter().sum();
        let sum = g.custom(&[r], Tensor::scalar(total), |up| {
            vec![Some(Tensor::new(vec![4], vec![up.item(); 4]))]
        });
        g.backward(sum).unwrap();
        assert_eq!(g.grad(x).unwrap().data, vec![1.0; 4]);
    }

    #[test]
    fn ste_learned_step_size_gradient() {
        // d/ds [round(w/s) * s] at w = 0.26, s = 0.1 under STE.
        let mut g = Graph::new();
        let s = g.param(Tensor::scalar(0.1));
        let w = 0.26;
        let sv = g.value(s).item();
        let q = g.custom(&[s], Tensor::scalar(w / sv), move |up| {
            vec![Some(Tensor::scalar(-up.item() * w / (sv * sv)))]
        });
        let r = g.ste_round(q);
        let rv = g.value(r).item();
        let prod = g.custom(&[r, s], Tensor::scalar(rv * sv), move |up| {
            vec![
                Some(Tensor::scalar(up.item() * sv)),
                Some(Tensor::scalar(up.item() * rv)),
            ]
        });
        g.backward(prod).unwrap();
        let d = g.grad(s).unwrap().item();
        assert!((d - 0.4).abs() < 1e-12, "{d}");
    }

    /// Central-difference check of a random conv + dense network.
    #[test]
    fn gradient_check_conv_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
        let wc = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let bc = rand_tensor(&mut rng, &[3]);
        let wd = rand_tensor(&mut rng, &[2, 48]);
        let target = rand_tensor(&mut rng, &[2, 2]);
        let ops = vec![
            Op::Conv2d { weight: "c".into() },
            Op::BiasAdd { bias: "cb".into() },
            Op::Relu,
            Op::Flatten,
            Op::Dense { weight: "d".into() },
        ];
        let eval = |params: &[Tensor], grads: bool| -> (f64, Vec<Tensor>) {
            let mut g = Graph::new();
            let xi = g.constant(x.clone());
            let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
            let names = ["c", "cb", "d"];
            let acts = build_chain(&mut g, &ops, xi, |_, n| {
                names.iter().position(|m| *m == n).map(|k| ids[k])
            })
            .unwrap();
            let l = g.mse(*acts.last().unwrap(), &target).unwrap();
            let v = g.value(l).item();
            if !grads {
                return (v, vec![]);
            }
            g.backward(l).unwrap();
            (v, ids.iter().map(|&id| g.grad_or_zero(id)).collect())
        };
        let params = vec![wc, bc, wd];
        let (_, grads) = eval(&params, true);
        let (mut checked, mut ok) = (0, 0);
        let h = 1e-4;
        for p in 0..params.len() {
            for i in 0..params[p].numel() {
                let mut plus = params.clone();
                plus[p].data[i] += h;
                let mut minus = params.clone();
                minus[p].data[i] -= h;
                let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
                let an = grads[p].data[i];
                checked += 1;
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                if rel < 1e-4 || (fd - an).abs() < 1e-10 {
                    ok += 1;
                }
            }
        }
        assert!(ok as f64 >= 0.99 * checked as f64, "{ok}/{checked}");
    }

    #[test]
    fn shape_error_names_op() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        let ops = vec![Op::Relu, Op::Dense { weight: "w".into() }];
        let err = build_chain(&mut g, &ops, x, |_, _| Some(w)).unwrap_err();
        assert!(matches!(err, Error::Shape { op: 1, .. }), "{err:?}");
    }

    #[test]
    fn adam_zero_grad_and_first_step() {
        let mut st = AdamState::new(0.1, &[2]);
        let mut p = vec![1.0, 2.0];
        adam_step(&mut st, &mut [&mut p[..]], &[&[0.0, 0.0][..]]).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);

        let mut st = AdamState::new(0.1, &[1]);
        let mut p = [0.0];
        adam_step(&mut st, &mut [&mut p[..]], &[&[1.0][..]]).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = lr / (1 + ε)
        assert_eq!(p[0], -0.1 / (1.0 + 1e-8));
    }

    #[test]
    fn adam_two_steps_match_hand_formula() {
        let mut st = AdamState::new(0.05, &[1]);
        let mut p = [0.3];
        adam_step(&mut st, &mut [&mut p[..]], &[&[0.5][..]]).unwrap();
        adam_step(&mut st, &mut [&mut p[..]], &[&[-0.25][..]]).unwrap();
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.05);
        let mut want = 0.3;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [(1, 0.5f64), (2, -0.25)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            want -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        assert_eq!(p[0], want);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut g = Graph::new();
            let x = g.constant(rand_tensor(&mut rng, &[8, 5]));
            let w = g.param(rand_tensor(&mut rng, &[7, 5]));
            let y = g.matmul(x, w).unwrap();
            let l = g.mse(y, &Tensor::zeros(&[8, 7])).unwrap();
            g.backward(l).unwrap();
            (g.value(l).item().to_bits(), g.grad(w).unwrap().data.clone())
        };
        assert_eq!(run(), run());
    }
}
