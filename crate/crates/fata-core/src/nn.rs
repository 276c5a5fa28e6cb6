//! Layers and parameters.
//!
//! Parameters live in a [`ParamStore`] owned by the caller, not inside the
//! tape: each forward pass binds them onto a fresh [`crate::tensor::Tape`]
//! via a [`Forward`] context. Whether a bound parameter receives gradient is
//! decided by its [`ParamKind`] and the pass [`Mode`]: adaptation updates
//! affine (normalization) parameters only, pretraining updates everything,
//! evaluation updates nothing.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};

pub const NORM_EPS: f64 = 1e-5;
/// Momentum for batch-norm running statistics during pretraining.
pub const BN_RUNNING_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Group { num_groups: usize },
    Layer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOp {
    Conv3x3,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub op: LayerOp,
    pub out_channels: usize,
    pub norm: Option<NormKind>,
    pub act: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputShape {
    Image { channels: usize, height: usize, width: usize },
    Vector { dim: usize },
}

impl InputShape {
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            InputShape::Image { channels, height, width } => vec![channels, height, width],
            InputShape::Vector { dim } => vec![dim],
        }
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

// ---------------------------------------------------------------------------
// parameter store

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Conv/linear weights and biases; trained at pretraining time, frozen
    /// during adaptation.
    Weight,
    /// Normalization scale/shift; the only parameters adaptation may touch.
    Affine,
    /// Batch-norm running statistics; never receive gradient.
    RunningStat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>, kind: ParamKind) -> ParamId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry { name: name.into(), shape, data, kind });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn of_kind(&self, kind: ParamKind) -> Vec<ParamId> {
        self.ids().filter(|&id| self.entry(id).kind == kind).collect()
    }

    /// Full copy of every value, for freezing-contract checks.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.data.clone()).collect()
    }

    pub fn total_scalars(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.entry(id).data.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// forward context

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Pretrain,
    Adapt,
    Eval,
}

/// Batch statistics observed by a batch-norm layer during one forward pass,
/// reported so the pretraining loop can fold them into running stats.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// One forward pass: a fresh tape plus lazy bindings of store parameters.
pub struct Forward<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    mode: Mode,
    bound: Vec<Option<TensorId>>,
    /// Set when batch norm normalized a single-sample batch with batch
    /// statistics (degenerate; prediction collapses toward beta).
    pub bn_degenerate: bool,
    pub bn_batch_stats: Vec<BnBatchStats>,
}

impl<'s> Forward<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Forward {
            tape: Tape::new(),
            store,
            mode,
            bound: vec![None; store.len()],
            bn_degenerate: false,
            bn_batch_stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Binds a parameter onto the tape (once; re-binding returns the same
    /// node so gradient accumulates across uses).
    pub fn param(&mut self, id: ParamId) -> TensorId {
        if let Some(t) = self.bound[id.0] {
            return t;
        }
        let e = self.store.entry(id);
        let requires_grad = match (e.kind, self.mode) {
            (ParamKind::RunningStat, _) => false,
            (_, Mode::Eval) => false,
            (ParamKind::Weight, Mode::Pretrain) => true,
            (ParamKind::Weight, Mode::Adapt) => false,
            (ParamKind::Affine, _) => true,
        };
        let t = self
            .tape
            .leaf(e.data.clone(), &e.shape, requires_grad)
            .expect("stored parameter shape is consistent");
        self.bound[id.0] = Some(t);
        t
    }

    pub fn input(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        self.tape.constant(data, shape)
    }

    /// Gradient of a bound parameter after `tape.backward`.
    pub fn grad_of(&self, id: ParamId) -> Option<&[f64]> {
        self.bound[id.0].and_then(|t| self.tape.grad(t))
    }

    /// All (param, gradient) pairs that were bound with gradient enabled.
    pub fn parameter_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, slot) in self.bound.iter().enumerate() {
            if let Some(t) = slot {
                if self.tape.tensor(*t).requires_grad {
                    if let Some(g) = self.tape.grad(*t) {
                        out.push((ParamId(i), g.to_vec()));
                    }
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// layers

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormLayer {
    pub kind: NormKind,
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
    /// Present for batch norm only.
    pub running_mean: Option<ParamId>,
    pub running_var: Option<ParamId>,
    /// Affine parameters participate in test-time adaptation.
    pub adaptable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub op: LayerOp,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: Option<NormLayer>,
    pub act: Activation,
}

/// Encoder layers plus one linear classifier head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerStack {
    pub input: InputShape,
    pub layers: Vec<EncoderLayer>,
    pub num_classes: usize,
    pub classifier_w: ParamId,
    pub classifier_b: ParamId,
}

fn init_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("std >= 0");
    (0..n).map(|_| dist.sample(rng)).collect()
}

impl LayerStack {
    /// Builds a stack with randomly initialized weights.
    pub fn build(spec: &ModelSpec, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        if spec.layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        let mut in_channels = match spec.input {
            InputShape::Image { channels, .. } => channels,
            InputShape::Vector { dim } => dim,
        };
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, ls) in spec.layers.iter().enumerate() {
            let out = ls.out_channels;
            match (&spec.input, ls.op) {
                (InputShape::Vector { .. }, LayerOp::Conv3x3) => {
                    return Err(Error::Config(format!(
                        "layer {i}: conv3x3 on vector input"
                    )));
                }
                (InputShape::Image { .. }, LayerOp::Linear) => {
                    return Err(Error::Config(format!(
                        "layer {i}: linear encoder layer on image input"
                    )));
                }
                _ => {}
            }
            let (weight, bias) = match ls.op {
                LayerOp::Conv3x3 => {
                    let fan_in = in_channels * 9;
                    let w = store.add(
                        format!("layers.{i}.conv.weight"),
                        vec![out, in_channels, 3, 3],
                        init_normal(rng, out * in_channels * 9, (2.0 / fan_in as f64).sqrt()),
                        ParamKind::Weight,
                    );
                    let b = store.add(
                        format!("layers.{i}.conv.bias"),
                        vec![out],
                        vec![0.0; out],
                        ParamKind::Weight,
                    );
                    (w, b)
                }
                LayerOp::Linear => {
                    let w = store.add(
                        format!("layers.{i}.linear.weight"),
                        vec![in_channels, out],
                        init_normal(rng, in_channels * out, (2.0 / in_channels as f64).sqrt()),
                        ParamKind::Weight,
                    );
                    let b = store.add(
                        format!("layers.{i}.linear.bias"),
                        vec![out],
                        vec![0.0; out],
                        ParamKind::Weight,
                    );
                    (w, b)
                }
            };
            let norm = match ls.norm {
                None => None,
                Some(kind) => {
                    if let NormKind::Group { num_groups } = kind {
                        if num_groups == 0 || out % num_groups != 0 {
                            return Err(Error::Config(format!(
                                "layer {i}: num_groups {num_groups} must divide channels {out}"
                            )));
                        }
                    }
                    let gamma = store.add(
                        format!("layers.{i}.norm.gamma"),
                        vec![out],
                        vec![1.0; out],
                        ParamKind::Affine,
                    );
                    let beta = store.add(
                        format!("layers.{i}.norm.beta"),
                        vec![out],
                        vec![0.0; out],
                        ParamKind::Affine,
                    );
                    let (rm, rv) = if kind == NormKind::Batch {
                        (
                            Some(store.add(
                                format!("layers.{i}.norm.running_mean"),
                                vec![out],
                                vec![0.0; out],
                                ParamKind::RunningStat,
                            )),
                            Some(store.add(
                                format!("layers.{i}.norm.running_var"),
                                vec![out],
                                vec![1.0; out],
                                ParamKind::RunningStat,
                            )),
                        )
                    } else {
                        (None, None)
                    };
                    Some(NormLayer {
                        kind,
                        channels: out,
                        gamma,
                        beta,
                        eps: NORM_EPS,
                        running_mean: rm,
                        running_var: rv,
                        adaptable: true,
                    })
                }
            };
            layers.push(EncoderLayer {
                op: ls.op,
                in_channels,
                out_channels: out,
                weight,
                bias,
                norm,
                act: ls.act,
            });
            in_channels = out;
        }
        let classifier_w = store.add(
            "classifier.weight",
            vec![in_channels, spec.num_classes],
            init_normal(rng, in_channels * spec.num_classes, (1.0 / in_channels as f64).sqrt()),
            ParamKind::Weight,
        );
        let classifier_b = store.add(
            "classifier.bias",
            vec![spec.num_classes],
            vec![0.0; spec.num_classes],
            ParamKind::Weight,
        );
        Ok(LayerStack {
            input: spec.input.clone(),
            layers,
            num_classes: spec.num_classes,
            classifier_w,
            classifier_b,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Channel count of the feature after layer `i`.
    pub fn channels_after(&self, i: usize) -> usize {
        self.layers[i].out_channels
    }

    /// Exactly the gamma/beta tensors of all norm layers, in layer order.
    pub fn adaptable_parameters(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Some(n) = &l.norm {
                if n.adaptable {
                    out.push(n.gamma);
                    out.push(n.beta);
                }
            }
        }
        out
    }

    /// One encoder layer: conv/linear -> norm -> activation.
    pub fn layer_forward(&self, fwd: &mut Forward, x: TensorId, i: usize) -> Result<TensorId> {
        let layer = &self.layers[i];
        let w = fwd.param(layer.weight);
        let b = fwd.param(layer.bias);
        let mut y = match layer.op {
            LayerOp::Conv3x3 => {
                let conv = fwd.tape.conv3x3(x, w)?;
                let bb = fwd.tape.reshape(b, &[1, layer.out_channels, 1, 1])?;
                fwd.tape.add(conv, bb)?
            }
            LayerOp::Linear => {
                let mm = fwd.tape.matmul(x, w)?;
                fwd.tape.add(mm, b)?
            }
        };
        if let Some(norm) = &layer.norm {
            y = norm_forward(fwd, y, norm)?;
        }
        y = match layer.act {
            Activation::Relu => fwd.tape.relu(y),
            Activation::Gelu => fwd.tape.gelu(y),
            Activation::Identity => y,
        };
        Ok(y)
    }

    /// Classifier head: global average pool (image input) then linear.
    /// Returns logits `[B, num_classes]`.
    pub fn classifier_forward(&self, fwd: &mut Forward, feat: TensorId) -> Result<TensorId> {
        let rank = fwd.tape.shape(feat).len();
        let pooled = if rank == 4 {
            fwd.tape.mean_axes(feat, &[2, 3], false)?
        } else {
            feat
        };
        let w = fwd.param(self.classifier_w);
        let b = fwd.param(self.classifier_b);
        let mm = fwd.tape.matmul(pooled, w)?;
        fwd.tape.add(mm, b)
    }
}

/// Normalization with current statistics and affine transform.
///
/// Batch kind normalizes with current-batch statistics in pretrain/adapt
/// mode (running statistics in eval mode); group/layer kinds always
/// normalize per sample. Works on `[B, C, H, W]` and `[B, C]` features.
pub fn norm_forward(fwd: &mut Forward, x: TensorId, norm: &NormLayer) -> Result<TensorId> {
    let shape = fwd.tape.shape(x).to_vec();
    let rank = shape.len();
    if rank != 2 && rank != 4 {
        return Err(Error::ShapeMismatch {
            op: "norm_forward",
            details: format!("expected rank 2 or 4, got {shape:?}"),
        });
    }
    let c = shape[1];
    if c != norm.channels {
        return Err(Error::ShapeMismatch {
            op: "norm_forward",
            details: format!("feature has {c} channels, norm expects {}", norm.channels),
        });
    }
    let batch = shape[0];

    let xhat = match norm.kind {
        NormKind::Batch => {
            if fwd.mode() == Mode::Eval {
                let rm = fwd.param(norm.running_mean.expect("bn has running mean"));
                let rv = fwd.param(norm.running_var.expect("bn has running var"));
                let (rm, rv) = if rank == 4 {
                    (
                        fwd.tape.reshape(rm, &[1, c, 1, 1])?,
                        fwd.tape.reshape(rv, &[1, c, 1, 1])?,
                    )
                } else {
                    (rm, rv)
                };
                let centered = fwd.tape.sub(x, rm)?;
                let veps = fwd.tape.add_scalar(rv, norm.eps);
                let denom = fwd.tape.sqrt(veps);
                fwd.tape.div(centered, denom)?
            } else {
                if batch == 1 {
                    fwd.bn_degenerate = true;
                }
                let axes: Vec<usize> = if rank == 4 { vec![0, 2, 3] } else { vec![0] };
                let mean = fwd.tape.mean_axes(x, &axes, true)?;
                let var = fwd.tape.var_axes(x, &axes)?;
                if fwd.mode() == Mode::Pretrain {
                    fwd.bn_batch_stats.push(BnBatchStats {
                        running_mean: norm.running_mean.expect("bn has running mean"),
                        running_var: norm.running_var.expect("bn has running var"),
                        mean: fwd.tape.data(mean).to_vec(),
                        var: fwd.tape.data(var).to_vec(),
                    });
                }
                let centered = fwd.tape.sub(x, mean)?;
                let veps = fwd.tape.add_scalar(var, norm.eps);
                let denom = fwd.tape.sqrt(veps);
                fwd.tape.div(centered, denom)?
            }
        }
        NormKind::Group { num_groups } => {
            if c % num_groups != 0 {
                return Err(Error::Contract(format!(
                    "group norm: {num_groups} groups do not divide {c} channels"
                )));
            }
            let inner: usize = shape[2..].iter().product::<usize>().max(1) * (c / num_groups);
            let grouped = fwd.tape.reshape(x, &[batch, num_groups, inner])?;
            let mean = fwd.tape.mean_axes(grouped, &[2], true)?;
            let var = fwd.tape.var_axes(grouped, &[2])?;
            let centered = fwd.tape.sub(grouped, mean)?;
            let veps = fwd.tape.add_scalar(var, norm.eps);
            let denom = fwd.tape.sqrt(veps);
            let normed = fwd.tape.div(centered, denom)?;
            fwd.tape.reshape(normed, &shape)?
        }
        NormKind::Layer => {
            let axes: Vec<usize> = (1..rank).collect();
            let mean = fwd.tape.mean_axes(x, &axes, true)?;
            let var = fwd.tape.var_axes(x, &axes)?;
            let centered = fwd.tape.sub(x, mean)?;
            let veps = fwd.tape.add_scalar(var, norm.eps);
            let denom = fwd.tape.sqrt(veps);
            fwd.tape.div(centered, denom)?
        }
    };

    // affine, applied last
    let gamma = fwd.param(norm.gamma);
    let beta = fwd.param(norm.beta);
    let (gamma, beta) = if rank == 4 {
        (
            fwd.tape.reshape(gamma, &[1, c, 1, 1])?,
            fwd.tape.reshape(beta, &[1, c, 1, 1])?,
        )
    } else {
        (gamma, beta)
    };
    let scaled = fwd.tape.mul(xhat, gamma)?;
    fwd.tape.add(scaled, beta)
}

/// Folds observed batch statistics into running statistics. Call after each
/// pretraining step.
pub fn update_running_stats(store: &mut ParamStore, stats: &[BnBatchStats]) {
    for s in stats {
        let rm = &mut store.entry_mut(s.running_mean).data;
        for (r, &m) in rm.iter_mut().zip(s.mean.iter()) {
            *r = (1.0 - BN_RUNNING_MOMENTUM) * *r + BN_RUNNING_MOMENTUM * m;
        }
        let rv = &mut store.entry_mut(s.running_var).data;
        for (r, &v) in rv.iter_mut().zip(s.var.iter()) {
            *r = (1.0 - BN_RUNNING_MOMENTUM) * *r + BN_RUNNING_MOMENTUM * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn norm_layer(store: &mut ParamStore, kind: NormKind, c: usize) -> NormLayer {
        let gamma = store.add("g", vec![c], vec![1.0; c], ParamKind::Affine);
        let beta = store.add("b", vec![c], vec![0.0; c], ParamKind::Affine);
        let (rm, rv) = if kind == NormKind::Batch {
            (
                Some(store.add("rm", vec![c], vec![0.0; c], ParamKind::RunningStat)),
                Some(store.add("rv", vec![c], vec![1.0; c], ParamKind::RunningStat)),
            )
        } else {
            (None, None)
        };
        NormLayer {
            kind,
            channels: c,
            gamma,
            beta,
            eps: NORM_EPS,
            running_mean: rm,
            running_var: rv,
            adaptable: true,
        }
    }

    fn random_input(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        for kind in [NormKind::Batch, NormKind::Group { num_groups: 2 }, NormKind::Layer] {
            let mut store = ParamStore::new();
            let norm = norm_layer(&mut store, kind, 4);
            let mut fwd = Forward::new(&store, Mode::Adapt);
            let x = fwd.input(vec![3.25; 2 * 4 * 3 * 3], &[2, 4, 3, 3]).unwrap();
            let y = norm_forward(&mut fwd, x, &norm).unwrap();
            for &v in fwd.tape.data(y) {
                assert!(v.abs() < 1e-2, "{kind:?}: constant input gave {v}");
            }
        }
    }

    #[test]
    fn group1_equals_layer_norm() {
        let mut store = ParamStore::new();
        let g1 = norm_layer(&mut store, NormKind::Group { num_groups: 1 }, 4);
        let ln = norm_layer(&mut store, NormKind::Layer, 4);
        let data = random_input(2 * 4 * 3 * 3, 5);

        let mut fwd = Forward::new(&store, Mode::Adapt);
        let x = fwd.input(data.clone(), &[2, 4, 3, 3]).unwrap();
        let a = norm_forward(&mut fwd, x, &g1).unwrap();
        let b = norm_forward(&mut fwd, x, &ln).unwrap();
        for (u, v) in fwd.tape.data(a).iter().zip(fwd.tape.data(b)) {
            assert!((u - v).abs() < 1e-6, "group(1) vs layer: {u} vs {v}");
        }
    }

    #[test]
    fn group_c_equals_instance_norm() {
        let (b, c, h, w) = (2usize, 4usize, 3usize, 3usize);
        let data = random_input(b * c * h * w, 6);
        let mut store = ParamStore::new();
        let gc = norm_layer(&mut store, NormKind::Group { num_groups: c }, c);
        let mut fwd = Forward::new(&store, Mode::Adapt);
        let x = fwd.input(data.clone(), &[b, c, h, w]).unwrap();
        let y = norm_forward(&mut fwd, x, &gc).unwrap();

        // direct per-(sample, channel) instance normalization
        let plane = h * w;
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let vals = &data[base..base + plane];
                let m: f64 = vals.iter().sum::<f64>() / plane as f64;
                let var: f64 = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / plane as f64;
                for (k, &v) in vals.iter().enumerate() {
                    let want = (v - m) / (var + NORM_EPS).sqrt();
                    let got = fwd.tape.data(y)[base + k];
                    assert!((want - got).abs() < 1e-6, "instance norm: {want} vs {got}");
                }
            }
        }
    }

    #[test]
    fn normalized_groups_have_zero_mean_unit_var() {
        for kind in [NormKind::Batch, NormKind::Group { num_groups: 2 }, NormKind::Layer] {
            let (b, c, h, w) = (4usize, 4usize, 3usize, 3usize);
            let mut store = ParamStore::new();
            let norm = norm_layer(&mut store, kind, c);
            let mut fwd = Forward::new(&store, Mode::Adapt);
            let data = random_input(b * c * h * w, 7);
            let x = fwd.input(data, &[b, c, h, w]).unwrap();
            let y = norm_forward(&mut fwd, x, &norm).unwrap();
            let yd = fwd.tape.data(y).to_vec();

            // collect normalization groups matching the kind
            let groups: Vec<Vec<f64>> = match kind {
                NormKind::Batch => (0..c)
                    .map(|ci| {
                        let mut g = Vec::new();
                        for bi in 0..b {
                            let base = (bi * c + ci) * h * w;
                            g.extend_from_slice(&yd[base..base + h * w]);
                        }
                        g
                    })
                    .collect(),
                NormKind::Group { num_groups } => {
                    let per = c / num_groups;
                    let mut out = Vec::new();
                    for bi in 0..b {
                        for gi in 0..num_groups {
                            let mut g = Vec::new();
                            for ci in gi * per..(gi + 1) * per {
                                let base = (bi * c + ci) * h * w;
                                g.extend_from_slice(&yd[base..base + h * w]);
                            }
                            out.push(g);
                        }
                    }
                    out
                }
                NormKind::Layer => (0..b)
                    .map(|bi| yd[bi * c * h * w..(bi + 1) * c * h * w].to_vec())
                    .collect(),
            };
            for g in groups {
                let n = g.len() as f64;
                let m: f64 = g.iter().sum::<f64>() / n;
                let var: f64 = g.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                assert!(m.abs() < 1e-4, "{kind:?}: group mean {m}");
                assert!((var - 1.0).abs() < 1e-3, "{kind:?}: group var {var}");
            }
        }
    }

    #[test]
    fn bn_batch1_adapt_flags_degenerate() {
        let mut store = ParamStore::new();
        let norm = norm_layer(&mut store, NormKind::Batch, 2);
        let mut fwd = Forward::new(&store, Mode::Adapt);
        let x = fwd.input(vec![1.0, -4.0, 2.0, 0.5], &[1, 2, 1, 2]).unwrap();
        let y = norm_forward(&mut fwd, x, &norm).unwrap();
        assert!(fwd.bn_degenerate);
        assert!(fwd.tape.data(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn group_must_divide_channels() {
        let mut store = ParamStore::new();
        let spec = ModelSpec {
            input: InputShape::Vector { dim: 4 },
            layers: vec![LayerSpec {
                op: LayerOp::Linear,
                out_channels: 6,
                norm: Some(NormKind::Group { num_groups: 4 }),
                act: Activation::Relu,
            }],
            num_classes: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = LayerStack::build(&spec, &mut store, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn adaptable_parameter_counts() {
        let mut store = ParamStore::new();
        let spec = ModelSpec {
            input: InputShape::Vector { dim: 8 },
            layers: (0..4)
                .map(|_| LayerSpec {
                    op: LayerOp::Linear,
                    out_channels: 8,
                    norm: Some(NormKind::Layer),
                    act: Activation::Gelu,
                })
                .collect(),
            num_classes: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = LayerStack::build(&spec, &mut store, &mut rng).unwrap();
        let adaptable = stack.adaptable_parameters();
        assert_eq!(adaptable.len(), 8, "4 norm layers -> 8 tensors");
        assert_eq!(store.total_scalars(&adaptable), 64, "8 tensors x C=8");
    }

    #[test]
    fn no_norm_layers_no_adaptable_params() {
        let mut store = ParamStore::new();
        let spec = ModelSpec {
            input: InputShape::Vector { dim: 8 },
            layers: vec![LayerSpec {
                op: LayerOp::Linear,
                out_channels: 4,
                norm: None,
                act: Activation::Relu,
            }],
            num_classes: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = LayerStack::build(&spec, &mut store, &mut rng).unwrap();
        assert!(stack.adaptable_parameters().is_empty());
    }

    #[test]
    fn eval_batchnorm_uses_running_stats() {
        let mut store = ParamStore::new();
        let norm = norm_layer(&mut store, NormKind::Batch, 2);
        // make running stats distinctive
        store.entry_mut(norm.running_mean.unwrap()).data = vec![1.0, -1.0];
        store.entry_mut(norm.running_var.unwrap()).data = vec![4.0, 0.25];

        let data = vec![3.0, 5.0, 0.0, 1.0]; // [2, 2] as [B, C]
        let mut fwd = Forward::new(&store, Mode::Eval);
        let x = fwd.input(data, &[2, 2]).unwrap();
        let y = norm_forward(&mut fwd, x, &norm).unwrap();
        let yd = fwd.tape.data(y);
        let expect = [
            (3.0 - 1.0) / (4.0 + NORM_EPS).sqrt(),
            (5.0 + 1.0) / (0.25 + NORM_EPS).sqrt(),
            (0.0 - 1.0) / (4.0 + NORM_EPS).sqrt(),
            (1.0 + 1.0) / (0.25 + NORM_EPS).sqrt(),
        ];
        for (g, w) in yd.iter().zip(expect.iter()) {
            assert!((g - w).abs() < 1e-9, "{g} vs {w}");
        }
    }
}
