//! Input and output transformations around the frozen source model.
//!
//! The input side rescales a target image, pads it to the source geometry,
//! and fills the border with a trainable perturbation `ω₁`:
//!
//! ```text
//! x̂ = M ⊙ ω₁ + (1 − M) ⊙ ZeroPad(resize(x))
//! ```
//!
//! With the mask disabled the perturbation is additive over the whole frame
//! instead (`x̂ = ω₁ + ZeroPad(resize(x))`). The output side is a [`LabelMap`].

mod label_map;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Tensor;

pub use label_map::{LabelMap, LabelMapCache, LabelMapGrads, MapKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("rescale {rescale:?} exceeds source spatial size {source_size:?}")]
    RescaleExceedsSource { rescale: [usize; 2], source_size: [usize; 2] },
    #[error("target has {target} channels but the source expects {available}")]
    ChannelMismatch { target: usize, available: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("label map index {index} out of range for {source_classes} source classes")]
    MapIndexOutOfRange { index: usize, source_classes: usize },
    #[error("random label map is not injective: source class {0} used twice")]
    MapNotInjective(usize),
    #[error("cannot map {target} target classes injectively into {available} source classes")]
    TargetExceedsSource { target: usize, available: usize },
    #[error("backward called without a cached forward pass")]
    MissingForwardCache,
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, PromptError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    Center,
}

/// Geometry of the prompt: source input shape, size of the embedded target
/// window, and whether the border mask is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub source_dims: [usize; 3],
    pub rescale: [usize; 2],
    #[serde(default)]
    pub placement: Placement,
    pub masked: bool,
}

impl PromptSpec {
    pub fn validate(&self) -> Result<()> {
        let [_, h, w] = self.source_dims;
        if self.rescale[0] > h || self.rescale[1] > w || self.rescale.contains(&0) {
            return Err(PromptError::RescaleExceedsSource {
                rescale: self.rescale,
                source_size: [h, w],
            });
        }
        Ok(())
    }

    /// Top-left corner of the centred target window.
    fn offset(&self) -> (usize, usize) {
        let [_, h, w] = self.source_dims;
        ((h - self.rescale[0]) / 2, (w - self.rescale[1]) / 2)
    }
}

/// Binary mask: 1 on the border outside the centred window (all channels),
/// 0 inside; all ones when the spec is unmasked.
pub fn build_mask(spec: &PromptSpec) -> Result<Tensor> {
    spec.validate()?;
    let [c, h, w] = spec.source_dims;
    let mut mask = Tensor::full(&[c, h, w], 1.0);
    if !spec.masked {
        return Ok(mask);
    }
    let (top, left) = spec.offset();
    let [rh, rw] = spec.rescale;
    let data = mask.data_mut();
    for ch in 0..c {
        for y in top..top + rh {
            let row = (ch * h + y) * w;
            data[row + left..row + left + rw].fill(0.0);
        }
    }
    Ok(mask)
}

/// `a + t·(b − a)`, exact when `a == b`.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Source coordinate sampling for one axis: half-pixel centres, clamped to
/// the edge. Returns `(lower index, upper index, weight of upper)`.
fn sample_axis(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize of a `C×H×W` image with the half-pixel (align-corners
/// false) convention.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [c, h, w] = chw(image)?;
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let ys = sample_axis(out_h, h);
    let xs = sample_axis(out_w, w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], wx);
                let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], wx);
                out.push(lerp(top, bottom, wy));
            }
        }
    }
    Ok(Tensor::new(vec![c, out_h, out_w], out).expect("shape by construction"))
}

fn chw(t: &Tensor) -> Result<[usize; 3]> {
    match *t.shape() {
        [c, h, w] => Ok([c, h, w]),
        ref other => Err(PromptError::ShapeMismatch {
            expected: vec![0, 0, 0],
            got: other.to_vec(),
        }),
    }
}

/// Resizes `x_t` to the spec's window and places it centred in a zero frame
/// of the source shape.
pub fn embed_target(x_t: &Tensor, spec: &PromptSpec) -> Result<Tensor> {
    spec.validate()?;
    let [c, _, _] = chw(x_t)?;
    let [sc, sh, sw] = spec.source_dims;
    if c != sc {
        return Err(PromptError::ChannelMismatch {
            target: c,
            available: sc,
        });
    }
    let [rh, rw] = spec.rescale;
    let resized = resize_bilinear(x_t, rh, rw)?;
    let (top, left) = spec.offset();
    let mut out = Tensor::zeros(&[sc, sh, sw]);
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..rh {
            let d = (ch * sh + top + y) * sw + left;
            let s = (ch * rh + y) * rw;
            dst[d..d + rw].copy_from_slice(&resized.data()[s..s + rw]);
        }
    }
    Ok(out)
}

/// Trainable state of a prompted classifier: the perturbation `ω₁` and the
/// label map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptParams {
    pub omega1: Tensor,
    pub label_map: LabelMap,
}

impl PromptParams {
    /// `ω₁` uniform in `[-0.03, 0.03]` and a fresh map of the given kind.
    pub fn init<R: Rng + ?Sized>(
        spec: &PromptSpec,
        kind: MapKind,
        source_classes: usize,
        target_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let n: usize = spec.source_dims.iter().product();
        let omega1 = Tensor::new(
            spec.source_dims.to_vec(),
            (0..n).map(|_| rng.random_range(-0.03..=0.03)).collect(),
        )
        .expect("shape by construction");
        let label_map = LabelMap::init(kind, source_classes, target_classes, rng)?;
        Ok(Self { omega1, label_map })
    }

    pub fn validate(&self, spec: &PromptSpec) -> Result<()> {
        if self.omega1.shape() != spec.source_dims {
            return Err(PromptError::ShapeMismatch {
                expected: spec.source_dims.to_vec(),
                got: self.omega1.shape().to_vec(),
            });
        }
        if !self.omega1.is_finite() {
            return Err(PromptError::NonFinite("omega1"));
        }
        self.label_map.validate()
    }

    pub fn trainable_count(&self) -> usize {
        self.omega1.len() + self.label_map.param_count()
    }
}

/// Applies the prompt to an already embedded target.
pub fn apply_prompt_embedded(embedded: &Tensor, omega1: &Tensor, mask: &Tensor, masked: bool) -> Result<Tensor> {
    if embedded.shape() != omega1.shape() || mask.shape() != omega1.shape() {
        return Err(PromptError::ShapeMismatch {
            expected: omega1.shape().to_vec(),
            got: embedded.shape().to_vec(),
        });
    }
    let data = if masked {
        embedded
            .data()
            .iter()
            .zip(omega1.data())
            .zip(mask.data())
            .map(|((&x, &w), &m)| if m == 1.0 { w } else { x })
            .collect()
    } else {
        embedded
            .data()
            .iter()
            .zip(omega1.data())
            .map(|(x, w)| x + w)
            .collect()
    };
    Ok(Tensor::new(omega1.shape().to_vec(), data).expect("shape checked"))
}

/// `x̂` for a raw target image.
pub fn apply_prompt(x_t: &Tensor, params: &PromptParams, spec: &PromptSpec) -> Result<Tensor> {
    params.validate(spec)?;
    let embedded = embed_target(x_t, spec)?;
    let mask = build_mask(spec)?;
    apply_prompt_embedded(&embedded, &params.omega1, &mask, spec.masked)
}

/// `dL/dω₁` from `dL/dx̂`: the masked gradient, or the full gradient in
/// additive mode.
pub fn omega1_grad(grad_xhat: &Tensor, mask: &Tensor, masked: bool) -> Result<Tensor> {
    if grad_xhat.shape() != mask.shape() {
        return Err(PromptError::ShapeMismatch {
            expected: mask.shape().to_vec(),
            got: grad_xhat.shape().to_vec(),
        });
    }
    if !masked {
        return Ok(grad_xhat.clone());
    }
    let data = grad_xhat
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&g, &m)| if m == 1.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor::new(mask.shape().to_vec(), data).expect("shape checked"))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Target-class probabilities from source logits.
pub fn map_labels(source_logits: &[f64], map: &LabelMap) -> Result<Vec<f64>> {
    if source_logits.iter().any(|v| !v.is_finite()) {
        return Err(PromptError::NonFinite("source logits"));
    }
    let (logits, _) = map.forward(source_logits)?;
    Ok(softmax(&logits))
}
