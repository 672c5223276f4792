//! A miniature dense network whose layers can be run on channel slices.
//!
//! A [`Path`] picks one contiguous output range per hidden layer; the
//! forward pass then reads only the matching sub-matrices, and the
//! backward pass only writes gradient entries inside them. This is the
//! weight-sharing mechanism of the supernet: every width is a path through
//! the same parameter tensors.

mod checkpoint;
mod data;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{DataConfig, Dataset, Generator, SynthDataset};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::assign::{indices, Principle, Side};
use crate::error::{Error, Result};
use crate::space::{SearchSpace, WidthVector};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Dense layer with a `[out × in]` row-major weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn w(&self, o: usize, i: usize) -> f64 {
        self.weight[o * self.in_dim + i]
    }
}

/// Output channel range of every hidden layer (zero-based).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Path {
    pub hidden: Vec<Range<usize>>,
}

impl Path {
    pub fn new(hidden: Vec<Range<usize>>) -> Self {
        Self { hidden }
    }

    /// Path that uses every channel of `net`.
    pub fn full(net: &MiniNet) -> Self {
        let dims = net.dims();
        Self {
            hidden: dims[1..dims.len() - 1].iter().map(|&d| 0..d).collect(),
        }
    }

    /// The `side` path of width `c` under `principle`.
    pub fn for_width(space: &SearchSpace, principle: Principle, c: &WidthVector, side: Side) -> Result<Self> {
        space.validate(c)?;
        let hidden = space
            .layers()
            .iter()
            .zip(c.as_slice())
            .enumerate()
            .map(|(i, (layer, &w))| {
                let a = indices(principle, layer, w).map_err(|e| match e {
                    Error::OffGrid { width, .. } => Error::OffGrid { layer: i, width },
                    other => other,
                })?;
                a.span(side)
                    .map(|s| s.range())
                    .ok_or_else(|| Error::Dimension(format!("principle {principle} has no {side:?} path")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { hidden })
    }

    /// Number of values held per sample by a forward cache on this path.
    pub fn widths(&self) -> Vec<usize> {
        self.hidden.iter().map(|r| r.len()).collect()
    }
}

/// Feature matrix and labels of one batch.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub x: &'a [f64],
    pub y: &'a [usize],
    pub dim: usize,
}

impl<'a> Batch<'a> {
    pub fn new(x: &'a [f64], y: &'a [usize], dim: usize) -> Self {
        debug_assert_eq!(x.len(), y.len() * dim);
        Self { x, y, dim }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

struct LayerCache {
    in_range: Range<usize>,
    out_range: Range<usize>,
    /// `n × in_len`
    input: Vec<f64>,
    /// Standardized pre-activations and per-feature inverse std, when normalizing.
    normed: Option<(Vec<f64>, Vec<f64>)>,
    /// `n × out_len`, post-activation.
    output: Vec<f64>,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    probs: Vec<f64>,
    pub loss: f64,
    pub correct: usize,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        &self.layers.last().unwrap().output
    }

    /// Count of activation values retained for backpropagation.
    pub fn live_values(&self) -> usize {
        self.layers
            .iter()
            .map(|c| c.input.len() + c.output.len() + c.normed.as_ref().map_or(0, |(z, s)| z.len() + s.len()))
            .sum::<usize>()
            + self.probs.len()
    }
}

/// Gradient buffers shaped like a net, with a mask of entries written.
#[derive(Clone, Debug)]
pub struct Grads {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
    pub weight_mask: Vec<Vec<bool>>,
    pub bias_mask: Vec<Vec<bool>>,
}

impl Grads {
    pub fn zeros_like(net: &MiniNet) -> Self {
        Self {
            weight: net.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            weight_mask: net.layers.iter().map(|l| vec![false; l.weight.len()]).collect(),
            bias_mask: net.layers.iter().map(|l| vec![false; l.bias.len()]).collect(),
        }
    }

    pub fn clear(&mut self) {
        for v in self.weight.iter_mut().chain(self.bias.iter_mut()) {
            v.iter_mut().for_each(|g| *g = 0.0);
        }
        for m in self.weight_mask.iter_mut().chain(self.bias_mask.iter_mut()) {
            m.iter_mut().for_each(|b| *b = false);
        }
    }

    /// Flattened gradient entries in parameter order (weights then bias per layer).
    pub fn flatten(&self) -> Vec<f64> {
        self.weight
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }
}

/// Stack of dense layers: ReLU on hidden layers, identity logits.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniNet {
    pub layers: Vec<DenseLayer>,
    pub normalize: bool,
}

impl MiniNet {
    /// Fan-in scaled uniform initialization over `dims = [in, h_1, ..., out]`.
    pub fn new<R: rand::Rng + ?Sized>(dims: &[usize], normalize: bool, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "a net needs at least an input and an output dim");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let act = if k + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                let mut layer = DenseLayer::zeros(dims[k], dims[k + 1], act);
                let bound = (6.0 / dims[k] as f64).sqrt();
                for w in layer.weight.iter_mut() {
                    *w = rng.random_range(-bound..bound);
                }
                layer
            })
            .collect();
        Self { layers, normalize }
    }

    /// Supernet for `space`: hidden layers sized to the principle's physical widths.
    pub fn supernet<R: rand::Rng + ?Sized>(
        space: &SearchSpace,
        principle: Principle,
        normalize: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![space.input_dim()];
        for layer in space.layers() {
            dims.push(principle.physical_width(layer)?);
        }
        dims.push(space.output_dim());
        Ok(Self::new(&dims, normalize, rng))
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].in_dim];
        d.extend(self.layers.iter().map(|l| l.out_dim));
        d
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    fn ranges(&self, path: &Path) -> Result<Vec<Range<usize>>> {
        let dims = self.dims();
        if path.hidden.len() + 2 != dims.len() {
            return Err(Error::Dimension(format!(
                "path has {} hidden layers, net has {}",
                path.hidden.len(),
                dims.len() - 2
            )));
        }
        let mut r = Vec::with_capacity(dims.len());
        r.push(0..dims[0]);
        for (k, h) in path.hidden.iter().enumerate() {
            if h.is_empty() || h.end > dims[k + 1] {
                return Err(Error::Dimension(format!(
                    "slice {h:?} does not fit hidden layer {k} of width {}",
                    dims[k + 1]
                )));
            }
            r.push(h.clone());
        }
        r.push(0..*dims.last().unwrap());
        Ok(r)
    }

    /// Forward pass of `batch` through the sliced sub-network `path`.
    pub fn forward(&self, batch: Batch<'_>, path: &Path) -> Result<ForwardCache> {
        if batch.dim != self.input_dim() {
            return Err(Error::Dimension(format!(
                "batch has {} features, net expects {}",
                batch.dim,
                self.input_dim()
            )));
        }
        let ranges = self.ranges(path)?;
        let n = batch.len();
        let mut input = batch.x.to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let (ir, or) = (ranges[k].clone(), ranges[k + 1].clone());
            let (ni, no) = (ir.len(), or.len());
            let mut z = vec![0.0; n * no];
            for s in 0..n {
                let x = &input[s * ni..(s + 1) * ni];
                for (o, out) in or.clone().enumerate() {
                    let row = &layer.weight[out * layer.in_dim + ir.start..out * layer.in_dim + ir.end];
                    let mut acc = layer.bias[out];
                    for (w, xv) in row.iter().zip(x) {
                        acc += w * xv;
                    }
                    z[s * no + o] = acc;
                }
            }
            let hidden = k + 1 < self.layers.len();
            let normed = if hidden && self.normalize {
                let (zhat, inv) = standardize(&z, n, no);
                z.copy_from_slice(&zhat);
                Some((zhat, inv))
            } else {
                None
            };
            if layer.activation == Activation::Relu {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            let next = z.clone();
            caches.push(LayerCache {
                in_range: ir,
                out_range: or,
                input,
                normed,
                output: z,
            });
            input = next;
        }

        let classes = self.output_dim();
        let logits = &caches.last().unwrap().output;
        let mut probs = vec![0.0; n * classes];
        let mut loss = 0.0;
        let mut correct = 0;
        for s in 0..n {
            let row = &logits[s * classes..(s + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (j, v) in row.iter().enumerate() {
                probs[s * classes + j] = (v - max).exp() / sum;
            }
            let label = batch.y[s];
            if label >= classes {
                return Err(Error::Dimension(format!("label {label} >= {classes} classes")));
            }
            loss += sum.ln() + max - row[label];
            if argmax(row) == label {
                correct += 1;
            }
        }
        Ok(ForwardCache {
            layers: caches,
            probs,
            loss: loss / n as f64,
            correct,
        })
    }

    /// Adds `scale * dLoss/dθ` for the path of `cache` into `grads`.
    pub fn backward(&self, cache: &ForwardCache, batch: Batch<'_>, scale: f64, grads: &mut Grads) {
        let n = batch.len();
        let classes = self.output_dim();
        let mut delta: Vec<f64> = cache.probs.clone();
        for s in 0..n {
            delta[s * classes + batch.y[s]] -= 1.0;
        }
        let inv_n = scale / n as f64;
        delta.iter_mut().for_each(|d| *d *= inv_n);

        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let c = &cache.layers[k];
            let (ni, no) = (c.in_range.len(), c.out_range.len());
            if layer.activation == Activation::Relu {
                for (d, &a) in delta.iter_mut().zip(&c.output) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            if let Some((zhat, inv)) = &c.normed {
                delta = standardize_backward(&delta, zhat, inv, n, no);
            }

            let gw = &mut grads.weight[k];
            let mw = &mut grads.weight_mask[k];
            let gb = &mut grads.bias[k];
            let mb = &mut grads.bias_mask[k];
            for (o, out) in c.out_range.clone().enumerate() {
                let base = out * layer.in_dim;
                let mut db = 0.0;
                for s in 0..n {
                    db += delta[s * no + o];
                }
                gb[out] += db;
                mb[out] = true;
                for (i, inp) in c.in_range.clone().enumerate() {
                    let mut dw = 0.0;
                    for s in 0..n {
                        dw += delta[s * no + o] * c.input[s * ni + i];
                    }
                    gw[base + inp] += dw;
                    mw[base + inp] = true;
                }
            }

            if k > 0 {
                let mut dx = vec![0.0; n * ni];
                for s in 0..n {
                    for (o, out) in c.out_range.clone().enumerate() {
                        let d = delta[s * no + o];
                        if d == 0.0 {
                            continue;
                        }
                        let row =
                            &layer.weight[out * layer.in_dim + c.in_range.start..out * layer.in_dim + c.in_range.end];
                        for (i, w) in row.iter().enumerate() {
                            dx[s * ni + i] += d * w;
                        }
                    }
                }
                delta = dx;
            }
        }
    }

    /// Loss and gradient of one path.
    pub fn loss_and_grads(&self, batch: Batch<'_>, path: &Path) -> Result<(f64, Grads)> {
        let cache = self.forward(batch, path)?;
        let mut g = Grads::zeros_like(self);
        self.backward(&cache, batch, 1.0, &mut g);
        Ok((cache.loss, g))
    }

    /// Accuracy and mean loss of `path` on a labelled set.
    pub fn score(&self, batch: Batch<'_>, path: &Path) -> Result<(f64, f64)> {
        let cache = self.forward(batch, path)?;
        Ok((cache.correct as f64 / batch.len() as f64, cache.loss))
    }

    /// Standalone network holding copies of the parameters `path` reads.
    pub fn extract(&self, path: &Path) -> Result<MiniNet> {
        let ranges = self.ranges(path)?;
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(k, layer)| {
                let (ir, or) = (&ranges[k], &ranges[k + 1]);
                let mut out = DenseLayer::zeros(ir.len(), or.len(), layer.activation);
                for (o, src_o) in or.clone().enumerate() {
                    out.bias[o] = layer.bias[src_o];
                    for (i, src_i) in ir.clone().enumerate() {
                        out.weight[o * out.in_dim + i] = layer.w(src_o, src_i);
                    }
                }
                out
            })
            .collect();
        Ok(MiniNet {
            layers,
            normalize: self.normalize,
        })
    }

    /// All parameters flattened in layer order (weights then bias).
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    fn param_mut(&mut self, flat: usize) -> &mut f64 {
        let mut idx = flat;
        for layer in self.layers.iter_mut() {
            if idx < layer.weight.len() {
                return &mut layer.weight[idx];
            }
            idx -= layer.weight.len();
            if idx < layer.bias.len() {
                return &mut layer.bias[idx];
            }
            idx -= layer.bias.len();
        }
        panic!("parameter index {flat} out of range");
    }

    /// Order-sensitive checksum of all parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.flatten() {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn standardize(z: &[f64], n: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; z.len()];
    let mut inv = vec![0.0; m];
    for j in 0..m {
        let mean = (0..n).map(|s| z[s * m + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|s| (z[s * m + j] - mean).powi(2)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv[j] = is;
        for s in 0..n {
            out[s * m + j] = (z[s * m + j] - mean) * is;
        }
    }
    (out, inv)
}

fn standardize_backward(dy: &[f64], zhat: &[f64], inv: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut dz = vec![0.0; dy.len()];
    for j in 0..m {
        let mean_dy = (0..n).map(|s| dy[s * m + j]).sum::<f64>() / n as f64;
        let mean_dyz = (0..n).map(|s| dy[s * m + j] * zhat[s * m + j]).sum::<f64>() / n as f64;
        for s in 0..n {
            let i = s * m + j;
            dz[i] = inv[j] * (dy[i] - mean_dy - zhat[i] * mean_dyz);
        }
    }
    dz
}

/// Momentum SGD on the entries selected by `mask`; everything else is left
/// untouched, including its velocity.
pub fn sgd_update(params: &mut [f64], velocity: &mut [f64], grads: &[f64], mask: &[bool], lr: f64, momentum: f64) {
    for i in 0..params.len() {
        if mask[i] {
            velocity[i] = momentum * velocity[i] + grads[i];
            params[i] -= lr * velocity[i];
        }
    }
}

/// Momentum SGD state for a [`MiniNet`].
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    velocity_w: Vec<Vec<f64>>,
    velocity_b: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(net: &MiniNet, momentum: f64) -> Self {
        Self {
            momentum,
            velocity_w: net.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            velocity_b: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    /// Applies one update. Rejects the whole step if any written gradient
    /// entry is non-finite.
    pub fn step(&mut self, net: &mut MiniNet, grads: &Grads, lr: f64) -> Result<()> {
        for (k, (gw, gb)) in grads.weight.iter().zip(&grads.bias).enumerate() {
            let bad_w = gw.iter().zip(&grads.weight_mask[k]).any(|(g, &m)| m && !g.is_finite());
            let bad_b = gb.iter().zip(&grads.bias_mask[k]).any(|(g, &m)| m && !g.is_finite());
            if bad_w || bad_b {
                return Err(Error::NonFiniteGradient { block: k });
            }
        }
        for (k, layer) in net.layers.iter_mut().enumerate() {
            sgd_update(
                &mut layer.weight,
                &mut self.velocity_w[k],
                &grads.weight[k],
                &grads.weight_mask[k],
                lr,
                self.momentum,
            );
            sgd_update(
                &mut layer.bias,
                &mut self.velocity_b[k],
                &grads.bias[k],
                &grads.bias_mask[k],
                lr,
                self.momentum,
            );
        }
        Ok(())
    }
}

/// Largest relative error between backpropagated gradients and central
/// finite differences (step `1e-5`) over every parameter `path` touches.
pub fn grad_check(net: &MiniNet, batch: Batch<'_>, path: &Path) -> Result<f64> {
    const H: f64 = 1e-5;
    let (_, grads) = net.loss_and_grads(batch, path)?;
    let analytic = grads.flatten();
    let mask: Vec<bool> = grads
        .weight_mask
        .iter()
        .zip(&grads.bias_mask)
        .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
        .collect();
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (idx, &active) in mask.iter().enumerate() {
        if !active {
            continue;
        }
        let orig = *probe.param_mut(idx);
        *probe.param_mut(idx) = orig + H;
        let up = probe.forward(batch, path)?.loss;
        *probe.param_mut(idx) = orig - H;
        let down = probe.forward(batch, path)?.loss;
        *probe.param_mut(idx) = orig;
        let numeric = (up - down) / (2.0 * H);
        let a = analytic[idx];
        let denom = (a.abs() + numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
