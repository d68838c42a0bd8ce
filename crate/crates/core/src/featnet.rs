//! Fully-convolutional feature extractor, template cross-correlation and
//! response upsampling.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{contract, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        channels: usize,
        stride: usize,
        relu: bool,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatNetConfig {
    pub object_size: usize,
    pub search_size: usize,
    /// Context margin on each side is `context_factor · (w + h) / 2`.
    pub context_factor: f64,
    pub layers: Vec<LayerSpec>,
}

impl Default for FeatNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl FeatNetConfig {
    /// 36×36 object / 72×72 search, three convolutions, 6×6×16 template.
    pub fn desk() -> Self {
        Self {
            object_size: 36,
            search_size: 72,
            context_factor: 0.5,
            layers: vec![
                LayerSpec::Conv { kernel: 6, channels: 8, stride: 2, relu: true },
                LayerSpec::Conv { kernel: 3, channels: 16, stride: 2, relu: true },
                LayerSpec::Conv { kernel: 2, channels: 16, stride: 1, relu: false },
            ],
        }
    }

    /// The Alex-like layout at 127/255 input, giving a 6×6×256 template.
    pub fn full_scale() -> Self {
        Self {
            object_size: 127,
            search_size: 255,
            context_factor: 0.5,
            layers: vec![
                LayerSpec::Conv { kernel: 11, channels: 96, stride: 2, relu: true },
                LayerSpec::MaxPool { size: 3, stride: 2 },
                LayerSpec::Conv { kernel: 5, channels: 256, stride: 1, relu: true },
                LayerSpec::MaxPool { size: 3, stride: 2 },
                LayerSpec::Conv { kernel: 3, channels: 384, stride: 1, relu: true },
                LayerSpec::Conv { kernel: 3, channels: 384, stride: 1, relu: true },
                LayerSpec::Conv { kernel: 3, channels: 256, stride: 1, relu: false },
            ],
        }
    }

    /// Spatial side of the feature map for a square input of side `input`.
    pub fn output_side(&self, input: usize) -> Result<usize> {
        let mut side = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let (k, s) = match *layer {
                LayerSpec::Conv { kernel, stride, .. } => (kernel, stride),
                LayerSpec::MaxPool { size, stride } => (size, stride),
            };
            if k == 0 || s == 0 || k > side {
                return Err(Error::Config(format!(
                    "layer {i} (window {k}, stride {s}) does not fit a {side}×{side} input"
                )));
            }
            side = (side - k) / s + 1;
        }
        Ok(side)
    }

    pub fn template_side(&self) -> Result<usize> {
        self.output_side(self.object_size)
    }

    pub fn search_feature_side(&self) -> Result<usize> {
        self.output_side(self.search_size)
    }

    pub fn channels(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                LayerSpec::Conv { channels, .. } => Some(*channels),
                LayerSpec::MaxPool { .. } => None,
            })
            .unwrap_or(3)
    }

    /// Input pixels per feature cell.
    pub fn total_stride(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv { stride, .. } | LayerSpec::MaxPool { stride, .. } => *stride,
            })
            .product()
    }

    pub fn response_side(&self) -> Result<usize> {
        Ok(self.search_feature_side()? - self.template_side()? + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.search_size < self.object_size {
            return Err(Error::Config("search size smaller than object size".into()));
        }
        if self.context_factor.is_nan() || self.context_factor < 0.0 {
            return Err(Error::Config("context factor must be nonnegative".into()));
        }
        let n = self.template_side()?;
        let s = self.search_feature_side()?;
        if s < n {
            return Err(Error::Config(format!("search features {s} smaller than template {n}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<P> {
    /// `k × k × cin × cout`.
    pub kernel: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatNetParams<P> {
    pub convs: Vec<ConvParams<P>>,
}

impl<P> FeatNetParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> FeatNetParams<Q> {
        FeatNetParams {
            convs: self
                .convs
                .iter()
                .map(|c| ConvParams {
                    kernel: f(&c.kernel),
                    bias: f(&c.bias),
                })
                .collect(),
        }
    }

    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, &'a P)) {
        for (i, c) in self.convs.iter().enumerate() {
            f(format!("featnet.conv{i}.kernel"), &c.kernel);
            f(format!("featnet.conv{i}.bias"), &c.bias);
        }
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut P)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            f(format!("featnet.conv{i}.kernel"), &mut c.kernel);
            f(format!("featnet.conv{i}.bias"), &mut c.bias);
        }
    }
}

impl FeatNetParams<Tensor<f32>> {
    /// He-normal kernels (unit-gain for the final linear layer), zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: &FeatNetConfig, rng: &mut R) -> Self {
        let mut convs = Vec::new();
        let mut cin = 3;
        for layer in &cfg.layers {
            if let LayerSpec::Conv { kernel, channels, relu, .. } = *layer {
                let fan_in = (kernel * kernel * cin) as f32;
                let gain = if relu { 2.0 } else { 1.0 };
                let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("std");
                convs.push(ConvParams {
                    kernel: Tensor::from_fn([kernel, kernel, cin, channels], |_| normal.sample(rng)),
                    bias: Tensor::zeros([channels]),
                });
                cin = channels;
            }
        }
        Self { convs }
    }
}

/// Run the feature extractor on an `s × s × 3` patch, where `s` is either
/// the object or the search size.
pub fn extract<T: Real>(g: &Graph<T>, cfg: &FeatNetConfig, params: &FeatNetParams<Var>, patch: Var) -> Result<Var> {
    let shape = g.shape(patch);
    let ok = |s: usize| shape == [s, s, 3];
    if !ok(cfg.object_size) && !ok(cfg.search_size) {
        return contract(format!(
            "extract: patch shape {shape:?} matches neither object {} nor search {} size",
            cfg.object_size, cfg.search_size
        ));
    }
    let mut x = patch;
    let mut convs = params.convs.iter();
    for layer in &cfg.layers {
        x = match *layer {
            LayerSpec::Conv { stride, relu, .. } => {
                let p = convs
                    .next()
                    .ok_or_else(|| Error::Contract("extract: fewer conv parameters than layers".into()))?;
                let y = g.conv2d(x, p.kernel, stride)?;
                let y = g.add_last(y, p.bias)?;
                if relu {
                    g.relu(y)
                } else {
                    y
                }
            }
            LayerSpec::MaxPool { size, stride } => g.max_pool(x, size, stride)?,
        };
    }
    Ok(x)
}

/// Slide an `n × n × c` template over `h × w × c` search features; each
/// response cell is the inner product with the co-located window.
pub fn cross_correlate<T: Real>(g: &Graph<T>, template: Var, search: Var) -> Result<Var> {
    let ts = g.shape(template);
    let ss = g.shape(search);
    if ts.len() != 3 || ss.len() != 3 || ts[2] != ss[2] {
        return contract(format!("cross_correlate: template {ts:?} vs search {ss:?}"));
    }
    let kernel = g.reshape(template, &[ts[0], ts[1], ts[2], 1])?;
    let r = g.conv2d(search, kernel, 1)?;
    let rs = g.shape(r);
    g.reshape(r, &rs[..2])
}

fn cubic_weight(t: f64) -> f64 {
    // Keys kernel, a = -0.5; interpolating (passes through the samples).
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t.powi(3) - (A + 3.0) * t.powi(2) + 1.0
    } else if t < 2.0 {
        A * t.powi(3) - 5.0 * A * t.powi(2) + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

fn upsample_axis(src: &[f64], factor: usize) -> Vec<f64> {
    let n = src.len();
    let m = (n - 1) * factor + 1;
    (0..m)
        .map(|o| {
            if o % factor == 0 {
                return src[o / factor];
            }
            let s = o as f64 / factor as f64;
            let i = s.floor() as i64;
            let mut acc = 0.0;
            for k in (i - 1)..=(i + 2) {
                let idx = k.clamp(0, n as i64 - 1) as usize;
                acc += src[idx] * cubic_weight(s - k as f64);
            }
            acc
        })
        .collect()
}

/// Bicubic upsampling of an `r × c` map onto a `((r−1)·f+1) × ((c−1)·f+1)`
/// grid; values at the original grid points are kept exactly.
pub fn upsample_response(resp: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    if resp.rank() != 2 || resp.is_empty() {
        return contract(format!("upsample_response: expected a 2-D map, got {:?}", resp.shape()));
    }
    if factor == 0 {
        return contract("upsample_response: factor must be >= 1");
    }
    if factor == 1 {
        return Ok(resp.clone());
    }
    let (r, c) = (resp.shape()[0], resp.shape()[1]);
    let (rr, cc) = ((r - 1) * factor + 1, (c - 1) * factor + 1);
    let rows: Vec<Vec<f64>> = resp
        .data()
        .chunks(c)
        .map(|row| {
            let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            if c > 1 {
                upsample_axis(&row, factor)
            } else {
                row
            }
        })
        .collect();
    let mut out = vec![0.0f32; rr * cc];
    for x in 0..cc {
        let col: Vec<f64> = rows.iter().map(|row| row[x]).collect();
        let up = if r > 1 { upsample_axis(&col, factor) } else { col };
        for (y, v) in up.into_iter().enumerate() {
            out[y * cc + x] = v as f32;
        }
    }
    Tensor::new([rr, cc], out)
}
