//! Fully-connected classifier with softmax cross-entropy.
//!
//! Parameters live in a single [`ParamVector`]. For every layer the segment is
//! the weight matrix `[out x in]` in row-major order followed by the `out`
//! biases; layers are stored input to output.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ParamVector;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ModelArch {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        num_classes: usize,
        activation: Activation,
    ) -> Result<Self> {
        let arch = ModelArch {
            input_dim,
            hidden_dims,
            num_classes,
            activation,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::config("model needs at least one hidden layer"));
        }
        if self.input_dim == 0 || self.num_classes == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::config("all layer dimensions must be >= 1"));
        }
        Ok(())
    }

    /// `(in, out)` for every layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims.windows(2).map(|p| (p[0], p[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(i, o)| i * o + o)
            .sum()
    }

    /// Index range of each layer's (weights, bias) segment in the flat vector.
    pub fn layer_segments(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.layer_shapes()
            .iter()
            .map(|(i, o)| {
                let r = start..start + i * o + o;
                start = r.end;
                r
            })
            .collect()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count());
        for (i, o) in self.layer_shapes() {
            let bound = (6.0 / (i + o) as f64).sqrt();
            values.extend((0..i * o).map(|_| rng.random_range(-bound..bound)));
            values.extend(std::iter::repeat_n(0.0, o));
        }
        ParamVector::new(values)
    }

    fn check_params(&self, w: &ParamVector) -> Result<()> {
        w.check_len(self.param_count(), "parameter vector")
    }
}

/// Structured weights of one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// `[out x in]`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn flatten(arch: &ModelArch, layers: &[LayerWeights]) -> Result<ParamVector> {
    let shapes = arch.layer_shapes();
    if layers.len() != shapes.len() {
        return Err(Error::config(format!(
            "expected {} layers, got {}",
            shapes.len(),
            layers.len()
        )));
    }
    let mut out = Vec::with_capacity(arch.param_count());
    for (l, ((i, o), layer)) in shapes.iter().zip(layers).enumerate() {
        if layer.weights.len() != i * o || layer.bias.len() != *o {
            return Err(Error::config(format!(
                "layer {l}: expected {o}x{i} weights and {o} biases"
            )));
        }
        out.extend_from_slice(&layer.weights);
        out.extend_from_slice(&layer.bias);
    }
    Ok(ParamVector::new(out))
}

pub fn unflatten(arch: &ModelArch, w: &ParamVector) -> Result<Vec<LayerWeights>> {
    arch.check_params(w)?;
    let mut offset = 0;
    let v = w.as_slice();
    Ok(arch
        .layer_shapes()
        .into_iter()
        .map(|(i, o)| {
            let weights = v[offset..offset + i * o].to_vec();
            let bias = v[offset + i * o..offset + i * o + o].to_vec();
            offset += i * o + o;
            LayerWeights { weights, bias }
        })
        .collect())
}

/// A mini-batch of samples, inputs row-major `[B x input_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    input_dim: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(input_dim: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::config("batch must hold at least one sample"));
        }
        if input_dim == 0 || inputs.len() != labels.len() * input_dim {
            return Err(Error::config(format!(
                "batch inputs hold {} values, expected {} x {input_dim}",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Batch {
            input_dim,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn rows(&self) -> Vec<&[f64]> {
        self.inputs.chunks(self.input_dim).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// Logits, row-major `[B x num_classes]`.
    pub scores: Vec<f64>,
}

pub fn forward_loss(w: &ParamVector, arch: &ModelArch, batch: &Batch) -> Result<ForwardOutput> {
    let rows = batch.rows();
    let mut scores = Vec::with_capacity(batch.len() * arch.num_classes);
    let stats = evaluate(arch, w, &rows, batch.labels(), None, Some(&mut scores))?;
    Ok(ForwardOutput {
        loss: stats.loss,
        scores,
    })
}

pub fn backward(w: &ParamVector, arch: &ModelArch, batch: &Batch) -> Result<ParamVector> {
    loss_and_gradient(w, arch, &batch.rows(), batch.labels()).map(|(_, g)| g)
}

/// Mean loss, number of correctly classified samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    pub correct: usize,
}

pub fn loss_and_gradient(
    w: &ParamVector,
    arch: &ModelArch,
    rows: &[&[f64]],
    labels: &[usize],
) -> Result<(f64, ParamVector)> {
    let mut grad = ParamVector::zeros(arch.param_count());
    let stats = evaluate(arch, w, rows, labels, Some(grad.as_mut_slice()), None)?;
    Ok((stats.loss, grad))
}

pub fn loss_and_accuracy(
    w: &ParamVector,
    arch: &ModelArch,
    rows: &[&[f64]],
    labels: &[usize],
) -> Result<EvalStats> {
    evaluate(arch, w, rows, labels, None, None)
}

/// Forward pass over `rows`, optionally accumulating the mean-loss gradient
/// into `grad` (which must be zeroed) and appending logits to `scores`.
fn evaluate(
    arch: &ModelArch,
    w: &ParamVector,
    rows: &[&[f64]],
    labels: &[usize],
    mut grad: Option<&mut [f64]>,
    mut scores: Option<&mut Vec<f64>>,
) -> Result<EvalStats> {
    arch.check_params(w)?;
    if rows.is_empty() || rows.len() != labels.len() {
        return Err(Error::config(format!(
            "batch has {} rows and {} labels",
            rows.len(),
            labels.len()
        )));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != arch.input_dim) {
        return Err(Error::config(format!(
            "sample has {} features, model expects {}",
            bad.len(),
            arch.input_dim
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= arch.num_classes) {
        return Err(Error::config(format!(
            "label {bad} out of range for {} classes",
            arch.num_classes
        )));
    }

    let shapes = arch.layer_shapes();
    let segments = arch.layer_segments();
    let n_layers = shapes.len();
    let params = w.as_slice();
    let inv_b = 1.0 / rows.len() as f64;

    // acts[l] is the input to layer l; pre[l] its pre-activation output.
    let mut acts: Vec<Vec<f64>> = shapes.iter().map(|(i, _)| vec![0.0; *i]).collect();
    let mut pre: Vec<Vec<f64>> = shapes.iter().map(|(_, o)| vec![0.0; *o]).collect();
    let max_dim = shapes.iter().map(|(i, o)| (*i).max(*o)).max().unwrap_or(0);
    let mut delta = vec![0.0; max_dim];
    let mut delta_prev = vec![0.0; max_dim];

    let mut loss_sum = 0.0;
    let mut correct = 0;

    for (x, &y) in rows.iter().zip(labels) {
        acts[0].copy_from_slice(x);
        for l in 0..n_layers {
            let (n_in, n_out) = shapes[l];
            let seg = &params[segments[l].clone()];
            let (wm, b) = seg.split_at(n_in * n_out);
            for r in 0..n_out {
                let row = &wm[r * n_in..(r + 1) * n_in];
                let mut z = b[r];
                for (wv, av) in row.iter().zip(&acts[l]) {
                    z += wv * av;
                }
                pre[l][r] = z;
            }
            if l + 1 < n_layers {
                for (a, z) in acts[l + 1].iter_mut().zip(&pre[l]) {
                    *a = arch.activation.apply(*z);
                }
            }
        }

        let logits = &pre[n_layers - 1];
        if let Some(s) = scores.as_deref_mut() {
            s.extend_from_slice(logits);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        let log_norm = max + sum_exp.ln();
        loss_sum += log_norm - logits[y];

        let argmax = logits
            .iter()
            .enumerate()
            .fold(0, |best, (k, v)| if *v > logits[best] { k } else { best });
        if argmax == y {
            correct += 1;
        }

        let Some(g) = grad.as_deref_mut() else {
            continue;
        };

        for (c, z) in logits.iter().enumerate() {
            let p = (z - log_norm).exp();
            delta[c] = (p - if c == y { 1.0 } else { 0.0 }) * inv_b;
        }

        for l in (0..n_layers).rev() {
            let (n_in, n_out) = shapes[l];
            let seg_range = segments[l].clone();
            let gseg = &mut g[seg_range.clone()];
            let (gw, gb) = gseg.split_at_mut(n_in * n_out);
            for r in 0..n_out {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                let grow = &mut gw[r * n_in..(r + 1) * n_in];
                for (gv, av) in grow.iter_mut().zip(&acts[l]) {
                    *gv += d * av;
                }
                gb[r] += d;
            }
            if l == 0 {
                break;
            }
            let wm = &params[seg_range.start..seg_range.start + n_in * n_out];
            for c in 0..n_in {
                delta_prev[c] = 0.0;
            }
            for r in 0..n_out {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                let row = &wm[r * n_in..(r + 1) * n_in];
                for (dp, wv) in delta_prev[..n_in].iter_mut().zip(row) {
                    *dp += wv * d;
                }
            }
            for c in 0..n_in {
                delta_prev[c] *= arch.activation.derivative(pre[l - 1][c], acts[l][c]);
            }
            std::mem::swap(&mut delta, &mut delta_prev);
        }
    }

    Ok(EvalStats {
        loss: loss_sum * inv_b,
        correct,
    })
}
