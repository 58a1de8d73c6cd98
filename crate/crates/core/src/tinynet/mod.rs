//! A small convolutional classifier with hand-written backpropagation.
//!
//! The network is a plain layer list over HWC feature maps. Parameters are
//! kept in `f64` while training and written to disk as `f32`.

mod backprop;
pub mod io;
pub(crate) mod layers;
mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{Image, RegionGrid};
use crate::scorer::{ScoreVector, Scorer, ScorerInfo};
use layers::{ConvShape, Rect};

pub use backprop::{cross_entropy, BatchLoss, Gradients, WeightedSample, CE_EPS};
pub use optim::{Optimizer, OptimizerKind};

/// One layer of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// Square, stride-1, zero-padded convolution (output keeps the size).
    Conv {
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    /// Non-overlapping mean pooling; input sides must be divisible by `size`.
    MeanPool {
        size: usize,
    },
    GlobalMeanPool,
    Dense {
        out: usize,
    },
}

/// Input shape, class count and layer list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Shape of the activation flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Shape {
    Map { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Map { h, w, c } => h * w * c,
            Shape::Flat(n) => n,
        }
    }
}

impl Arch {
    /// conv3×3·16 → relu → meanpool 2 → conv3×3·32 → relu → global mean → dense.
    pub fn default_for(height: usize, width: usize, channels: usize, num_classes: usize) -> Self {
        Arch {
            input_height: height,
            input_width: width,
            input_channels: channels,
            num_classes,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 16,
                    kernel: 3,
                },
                LayerSpec::Relu,
                LayerSpec::MeanPool { size: 2 },
                LayerSpec::Conv {
                    out_channels: 32,
                    kernel: 3,
                },
                LayerSpec::Relu,
                LayerSpec::GlobalMeanPool,
                LayerSpec::Dense { out: num_classes },
            ],
        }
    }

    /// Per-layer input shapes plus the final output shape, validating the
    /// chain along the way.
    pub(crate) fn shapes(&self) -> Result<Vec<Shape>> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArchitecture("need at least 2 classes".into()));
        }
        if self.input_height == 0 || self.input_width == 0 || self.input_channels == 0 {
            return Err(Error::InvalidArchitecture(
                "input dimensions must be nonzero".into(),
            ));
        }
        let mut cur = Shape::Map {
            h: self.input_height,
            w: self.input_width,
            c: self.input_channels,
        };
        let mut out = vec![cur];
        for (i, layer) in self.layers.iter().enumerate() {
            let bad =
                |msg: String| Error::InvalidArchitecture(format!("layer {i} ({layer:?}): {msg}"));
            cur = match (*layer, cur) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                    },
                    Shape::Map { h, w, .. },
                ) => {
                    if kernel % 2 == 0 || kernel == 0 {
                        return Err(bad("kernel must be odd".into()));
                    }
                    if out_channels == 0 {
                        return Err(bad("zero output channels".into()));
                    }
                    Shape::Map {
                        h,
                        w,
                        c: out_channels,
                    }
                }
                (LayerSpec::MeanPool { size }, Shape::Map { h, w, c }) => {
                    if size == 0 || h % size != 0 || w % size != 0 {
                        return Err(bad(format!("{h}x{w} not divisible by pool size {size}")));
                    }
                    Shape::Map {
                        h: h / size,
                        w: w / size,
                        c,
                    }
                }
                (LayerSpec::GlobalMeanPool, Shape::Map { c, .. }) => Shape::Flat(c),
                (LayerSpec::Relu, s) => s,
                (LayerSpec::Dense { out }, s) => {
                    if out == 0 {
                        return Err(bad("zero outputs".into()));
                    }
                    let _ = s;
                    Shape::Flat(out)
                }
                (_, Shape::Flat(_)) => return Err(bad("spatial layer after flattening".into())),
            };
            out.push(cur);
        }
        if cur != Shape::Flat(self.num_classes) {
            return Err(Error::InvalidArchitecture(format!(
                "network ends in {cur:?}, expected {} logits",
                self.num_classes
            )));
        }
        Ok(out)
    }

    /// `(weight_len, bias_len, fan_in)` of every layer.
    fn param_layout(&self, shapes: &[Shape]) -> Vec<(usize, usize, usize)> {
        self.layers
            .iter()
            .zip(shapes)
            .map(|(layer, input)| match (*layer, *input) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                    },
                    Shape::Map { c, .. },
                ) => {
                    let fan_in = kernel * kernel * c;
                    (fan_in * out_channels, out_channels, fan_in)
                }
                (LayerSpec::Dense { out }, s) => (s.len() * out, out, s.len()),
                _ => (0, 0, 0),
            })
            .collect()
    }
}

/// Weights and biases of one layer; empty for parameter-free layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// A network: architecture plus parameters `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyNetParams {
    arch: Arch,
    layers: Vec<LayerParams>,
    seed: u64,
    shapes: Vec<Shape>,
}

impl TinyNetParams {
    /// He-normal weights (`σ = √(2 / fan_in)`) and zero biases.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        let shapes = arch.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .param_layout(&shapes)
            .into_iter()
            .map(|(wl, bl, fan_in)| {
                let weight = if wl == 0 {
                    Vec::new()
                } else {
                    let normal =
                        Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..wl).map(|_| normal.sample(&mut rng)).collect()
                };
                LayerParams {
                    weight,
                    bias: vec![0.0; bl],
                }
            })
            .collect();
        Ok(Self {
            arch,
            layers,
            seed,
            shapes,
        })
    }

    /// Reassembles parameters, checking every tensor against the architecture.
    pub fn from_parts(arch: Arch, layers: Vec<LayerParams>, seed: u64) -> Result<Self> {
        let shapes = arch.shapes()?;
        let layout = arch.param_layout(&shapes);
        if layout.len() != layers.len() {
            return Err(Error::InvalidArchitecture(format!(
                "{} parameter blocks for {} layers",
                layers.len(),
                layout.len()
            )));
        }
        for (i, ((wl, bl, _), p)) in layout.iter().zip(&layers).enumerate() {
            if p.weight.len() != *wl || p.bias.len() != *bl {
                return Err(Error::InvalidArchitecture(format!(
                    "layer {i}: expected {wl} weights / {bl} biases, got {} / {}",
                    p.weight.len(),
                    p.bias.len()
                )));
            }
            if p.weight.iter().chain(&p.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
        }
        Ok(Self {
            arch,
            layers,
            seed,
            shapes,
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// SHA-256 over the little-endian `f64` bits of every parameter; equal
    /// hashes mean bit-identical parameters.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            for v in l.weight.iter().chain(&l.bias) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub(crate) fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub(crate) fn conv_shape(&self, layer: usize) -> ConvShape {
        match (self.arch.layers[layer], self.shapes[layer]) {
            (
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                },
                Shape::Map { h, w, c },
            ) => ConvShape {
                h,
                w,
                cin: c,
                cout: out_channels,
                k: kernel,
            },
            _ => unreachable!("layer {layer} is not a convolution"),
        }
    }

    pub fn check_input(&self, image: &Image) -> Result<()> {
        self.info().check(image)
    }

    /// Raw logits for one image.
    pub fn logits(&self, image: &Image) -> Result<Vec<f64>> {
        self.check_input(image)?;
        let input: Vec<f64> = image.data().iter().map(|&v| f64::from(v)).collect();
        let mut cur = input;
        let mut scratch = Scratch::default();
        for i in 0..self.arch.layers.len() {
            cur = self.layer_forward(i, &cur, None, None, &mut scratch);
        }
        Ok(cur)
    }

    /// Forward of layer `i`. With `base = Some((base_out, rect))` only the
    /// output window `rect` is recomputed from `input` and the rest is copied
    /// from `base_out`.
    fn layer_forward(
        &self,
        i: usize,
        input: &[f64],
        base: Option<(&[f64], Rect)>,
        patches_out: Option<&mut Vec<f64>>,
        scratch: &mut Scratch,
    ) -> Vec<f64> {
        let in_shape = self.shapes[i];
        let out_shape = self.shapes[i + 1];
        let p = &self.layers[i];
        let start = |len: usize| match base {
            Some((b, _)) => b.to_vec(),
            None => vec![0.0; len],
        };
        match (self.arch.layers[i], in_shape, out_shape) {
            (LayerSpec::Conv { .. }, _, Shape::Map { h, w, .. }) => {
                let s = self.conv_shape(i);
                let rect = base.map_or(Rect::full(h, w), |(_, r)| r);
                let mut out = start(out_shape.len());
                let patches = patches_out.unwrap_or(&mut scratch.patches);
                layers::conv_forward(
                    input,
                    &s,
                    &p.weight,
                    &p.bias,
                    rect,
                    &mut out,
                    patches,
                    &mut scratch.gemm,
                );
                out
            }
            (LayerSpec::Relu, Shape::Map { h, w, c }, _) => {
                let rect = base.map_or(Rect::full(h, w), |(_, r)| r);
                let mut out = start(in_shape.len());
                layers::relu_forward(input, w, c, rect, &mut out);
                out
            }
            (LayerSpec::Relu, Shape::Flat(_), _) => input.iter().map(|v| v.max(0.0)).collect(),
            (
                LayerSpec::MeanPool { size },
                Shape::Map { w, c, .. },
                Shape::Map { h: oh, w: ow, .. },
            ) => {
                let rect = base.map_or(Rect::full(oh, ow), |(_, r)| r);
                let mut out = start(out_shape.len());
                layers::meanpool_forward(input, w, c, size, rect, &mut out);
                out
            }
            (LayerSpec::GlobalMeanPool, Shape::Map { h, w, c }, _) => {
                layers::global_meanpool(input, h * w, c)
            }
            (LayerSpec::Dense { .. }, _, _) => layers::dense_forward(input, &p.weight, &p.bias),
            other => unreachable!("shape chain validated at construction: {other:?}"),
        }
    }

    /// Output window of layer `i` affected by a change confined to `rect`
    /// of its input, or `None` once activations are no longer spatial.
    fn propagate_rect(&self, i: usize, rect: Rect) -> Option<Rect> {
        match (self.arch.layers[i], self.shapes[i + 1]) {
            (LayerSpec::Conv { kernel, .. }, Shape::Map { h, w, .. }) => {
                Some(rect.dilate(kernel / 2, h, w))
            }
            (LayerSpec::Relu, Shape::Map { .. }) => Some(rect),
            (LayerSpec::MeanPool { size }, Shape::Map { .. }) => Some(rect.pooled(size)),
            _ => None,
        }
    }

    /// Logits for variants of `base` that differ from it only inside single
    /// grid cells, reusing the unaffected part of the base activations.
    fn patched_logits(
        &self,
        base: &Image,
        source: &Image,
        grid: &RegionGrid,
        cells: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        self.check_input(base)?;
        self.check_input(source)?;
        grid.matches(base)?;
        let input: Vec<f64> = base.data().iter().map(|&v| f64::from(v)).collect();
        let mut trace = Vec::with_capacity(self.arch.layers.len() + 1);
        trace.push(input);
        let mut scratch = Scratch::default();
        for i in 0..self.arch.layers.len() {
            let next = self.layer_forward(i, &trace[i], None, None, &mut scratch);
            trace.push(next);
        }
        let c = base.channels();
        let w = base.width();
        cells
            .par_iter()
            .map_init(Scratch::default, |scratch, &id| {
                let cell = grid.cell(id);
                let mut cur = trace[0].clone();
                for y in cell.top..cell.bottom {
                    let a = (y * w + cell.left) * c;
                    let b = (y * w + cell.right) * c;
                    for (dst, &v) in cur[a..b].iter_mut().zip(&source.data()[a..b]) {
                        *dst = f64::from(v);
                    }
                }
                let mut rect = Some(Rect {
                    y0: cell.top,
                    x0: cell.left,
                    y1: cell.bottom,
                    x1: cell.right,
                });
                for i in 0..self.arch.layers.len() {
                    let window = rect.and_then(|r| self.propagate_rect(i, r));
                    cur = match window {
                        Some(r) => {
                            self.layer_forward(i, &cur, Some((&trace[i + 1], r)), None, scratch)
                        }
                        None => self.layer_forward(i, &cur, None, None, scratch),
                    };
                    rect = window;
                }
                cur
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(Ok)
            .collect()
    }
}

#[derive(Default)]
pub(crate) struct Scratch {
    pub patches: Vec<f64>,
    pub gemm: Vec<f64>,
}

impl Scorer for TinyNetParams {
    fn info(&self) -> ScorerInfo {
        ScorerInfo {
            num_classes: self.arch.num_classes,
            expected_height: self.arch.input_height,
            expected_width: self.arch.input_width,
            expected_channels: self.arch.input_channels,
        }
    }

    fn score_batch(&self, images: &[Image]) -> Result<Vec<ScoreVector>> {
        images
            .par_iter()
            .map(|img| ScoreVector::from_logits(self.logits(img)?))
            .collect()
    }

    fn score_patched(
        &self,
        base: &Image,
        source: &Image,
        grid: &RegionGrid,
        cells: &[usize],
    ) -> Result<Vec<ScoreVector>> {
        self.patched_logits(base, source, grid, cells)?
            .into_iter()
            .map(ScoreVector::from_logits)
            .collect()
    }
}
