//! Cross-entropy loss and exact reverse-mode gradients.

use rayon::prelude::*;

use super::layers;
use super::{LayerParams, LayerSpec, Scratch, Shape, TinyNetParams};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::scorer::{softmax, ScoreVector};

/// Clamp applied to the probability inside the log.
pub const CE_EPS: f64 = 1e-12;

/// `−ln(max(p[label], ε))`.
pub fn cross_entropy(scores: &ScoreVector, label: usize) -> Result<f64> {
    if label >= scores.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            scores.num_classes()
        )));
    }
    Ok(ce_from_probs(scores.probs(), label))
}

fn ce_from_probs(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(CE_EPS).ln()
}

/// One term of a weighted loss `Σ wᵢ · CE(f(xᵢ), yᵢ)`.
#[derive(Debug, Clone, Copy)]
pub struct WeightedSample<'a> {
    pub image: &'a Image,
    pub label: usize,
    pub weight: f64,
}

/// Per-sample cross-entropies and the weighted total.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub per_sample: Vec<f64>,
    pub total: f64,
}

/// Gradient of a loss with respect to every parameter, shaped like the
/// network's layer list.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerParams>,
}

impl Gradients {
    pub fn zeros_like(net: &TinyNetParams) -> Self {
        Gradients {
            layers: net
                .layers()
                .iter()
                .map(|l| LayerParams {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight
                .iter_mut()
                .zip(&b.weight)
                .for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    /// Flattened view in layer order, weights before biases.
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }
}

/// Activations recorded on the way forward.
struct Trace {
    /// `inputs[i]` is the input of layer `i`; the last entry holds the logits.
    inputs: Vec<Vec<f64>>,
    /// im2col matrices of the convolution layers (empty elsewhere).
    patches: Vec<Vec<f64>>,
}

impl TinyNetParams {
    fn forward_trace(&self, image: &Image) -> Result<Trace> {
        self.check_input(image)?;
        let n = self.arch().layers.len();
        let mut inputs = Vec::with_capacity(n + 1);
        let mut patches = vec![Vec::new(); n];
        inputs.push(
            image
                .data()
                .iter()
                .map(|&v| f64::from(v))
                .collect::<Vec<_>>(),
        );
        let mut scratch = Scratch::default();
        for i in 0..n {
            let keep = matches!(self.arch().layers[i], LayerSpec::Conv { .. });
            let out = self.layer_forward(
                i,
                &inputs[i],
                None,
                keep.then_some(&mut patches[i]),
                &mut scratch,
            );
            inputs.push(out);
        }
        Ok(Trace { inputs, patches })
    }

    /// Loss and gradient for one sample, `dlogits = w · (softmax − onehot)`.
    fn sample_grad(&self, s: &WeightedSample<'_>) -> Result<(f64, Gradients)> {
        if s.label >= self.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range",
                s.label
            )));
        }
        let trace = self.forward_trace(s.image)?;
        let logits = trace.inputs.last().expect("trace has logits");
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        let probs = softmax(logits);
        let ce = ce_from_probs(&probs, s.label);
        let mut grad = Gradients::zeros_like(self);
        let mut delta: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(c, &p)| s.weight * (p - if c == s.label { 1.0 } else { 0.0 }))
            .collect();

        for i in (0..self.arch().layers.len()).rev() {
            let input = &trace.inputs[i];
            let in_shape = self.shapes()[i];
            let need_dx = i > 0;
            let g = &mut grad.layers[i];
            delta = match (self.arch().layers[i], in_shape) {
                (LayerSpec::Dense { out }, _) => {
                    let w = &self.layers()[i].weight;
                    let mut dx = vec![0.0; input.len()];
                    for (j, &xj) in input.iter().enumerate() {
                        let row = j * out;
                        let mut acc = 0.0;
                        for o in 0..out {
                            g.weight[row + o] += xj * delta[o];
                            acc += w[row + o] * delta[o];
                        }
                        dx[j] = acc;
                    }
                    g.bias.iter_mut().zip(&delta).for_each(|(b, d)| *b += d);
                    dx
                }
                (LayerSpec::GlobalMeanPool, Shape::Map { h, w, c }) => {
                    let norm = 1.0 / (h * w) as f64;
                    let mut dx = vec![0.0; h * w * c];
                    for p in 0..h * w {
                        for ch in 0..c {
                            dx[p * c + ch] = delta[ch] * norm;
                        }
                    }
                    dx
                }
                (LayerSpec::Relu, _) => delta
                    .iter()
                    .zip(input)
                    .map(|(&d, &x)| if x > 0.0 { d } else { 0.0 })
                    .collect(),
                (LayerSpec::MeanPool { size }, Shape::Map { h, w, c }) => {
                    let ow = w / size;
                    let norm = 1.0 / (size * size) as f64;
                    let mut dx = vec![0.0; h * w * c];
                    for y in 0..h {
                        for x in 0..w {
                            let src = ((y / size) * ow + x / size) * c;
                            let dst = (y * w + x) * c;
                            for ch in 0..c {
                                dx[dst + ch] = delta[src + ch] * norm;
                            }
                        }
                    }
                    dx
                }
                (LayerSpec::Conv { .. }, Shape::Map { h, w, .. }) => {
                    let s = self.conv_shape(i);
                    let rows = h * w;
                    let patches = &trace.patches[i];
                    layers::gemm_at_b(s.patch_len(), rows, s.cout, patches, &delta, &mut g.weight);
                    for p in 0..rows {
                        for o in 0..s.cout {
                            g.bias[o] += delta[p * s.cout + o];
                        }
                    }
                    if need_dx {
                        let mut dpatches = vec![0.0; rows * s.patch_len()];
                        layers::gemm_a_bt(
                            rows,
                            s.cout,
                            s.patch_len(),
                            &delta,
                            &self.layers()[i].weight,
                            &mut dpatches,
                        );
                        let mut dx = vec![0.0; h * w * s.cin];
                        layers::col2im_add(&dpatches, &s, &mut dx);
                        dx
                    } else {
                        Vec::new()
                    }
                }
                other => unreachable!("validated shape chain: {other:?}"),
            };
            if !need_dx {
                break;
            }
        }
        Ok((ce, grad))
    }

    /// Weighted loss `Σ wᵢ·CEᵢ` and its exact gradient. Per-sample work may
    /// run in parallel; the reduction is sequential in input order so the
    /// result does not depend on scheduling.
    pub fn loss_and_grad(&self, samples: &[WeightedSample<'_>]) -> Result<(BatchLoss, Gradients)> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let parts: Vec<(f64, Gradients)> = samples
            .par_iter()
            .map(|s| self.sample_grad(s))
            .collect::<Result<_>>()?;
        let mut total = 0.0;
        let mut per_sample = Vec::with_capacity(parts.len());
        let mut grad = Gradients::zeros_like(self);
        for ((ce, g), s) in parts.iter().zip(samples) {
            per_sample.push(*ce);
            total += s.weight * ce;
            grad.add_assign(g);
        }
        Ok((BatchLoss { per_sample, total }, grad))
    }

    /// Gradient of the mean cross-entropy over `batch`.
    pub fn backward(&self, batch: &[Image], labels: &[usize]) -> Result<Gradients> {
        Ok(self.mean_loss_and_grad(batch, labels)?.1)
    }

    pub fn mean_loss_and_grad(
        &self,
        batch: &[Image],
        labels: &[usize],
    ) -> Result<(f64, Gradients)> {
        if batch.len() != labels.len() {
            return Err(Error::dims(format!(
                "{} images, {} labels",
                batch.len(),
                labels.len()
            )));
        }
        let w = 1.0 / batch.len().max(1) as f64;
        let samples: Vec<_> = batch
            .iter()
            .zip(labels)
            .map(|(image, &label)| WeightedSample {
                image,
                label,
                weight: w,
            })
            .collect();
        let (loss, grad) = self.loss_and_grad(&samples)?;
        Ok((loss.total, grad))
    }

    /// Mean cross-entropy over `batch`, through the scoring path.
    pub fn mean_loss(&self, batch: &[Image], labels: &[usize]) -> Result<f64> {
        if batch.len() != labels.len() || batch.is_empty() {
            return Err(Error::dims(
                "batch and labels must be nonempty and equally long",
            ));
        }
        let mut total = 0.0;
        for (img, &label) in batch.iter().zip(labels) {
            let sv = ScoreVector::from_logits(self.logits(img)?)?;
            total += cross_entropy(&sv, label)?;
        }
        Ok(total / batch.len() as f64)
    }
}
