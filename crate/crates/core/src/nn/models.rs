//! Target-task classifiers. All of them consume *embedded* targets: images
//! already resized and zero-padded to the source input shape.

use std::sync::Arc;

use rand::Rng;

use super::layers::{Linear, Network};
use super::{FrozenSourceModel, NnError, Tensor};
use crate::prompt::{
    self, apply_prompt_embedded, build_mask, omega1_grad, LabelMapCache, LabelMapGrads, MapKind,
    PromptError, PromptParams, PromptSpec,
};

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    fn logits(&self, x: &Tensor) -> Result<Vec<f64>, NnError>;

    fn predict_proba(&self, x: &Tensor) -> Result<Vec<f64>, NnError> {
        Ok(prompt::softmax(&self.logits(x)?))
    }

    fn predict(&self, x: &Tensor) -> Result<usize, NnError> {
        Ok(argmax(&self.logits(x)?))
    }
}

/// A model trainable by cross-entropy on `(input, label)` pairs.
pub trait Trainable {
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn zero_grads(&self) -> Vec<Vec<f64>>;

    /// Cross-entropy of one example; its gradient is added into `grads`.
    fn accumulate(&self, x: &Tensor, label: usize, grads: &mut [Vec<f64>]) -> Result<f64, NnError>;

    /// Cross-entropy without gradients.
    fn loss(&self, x: &Tensor, label: usize) -> Result<f64, NnError>;
}

fn check_label(label: usize, classes: usize) -> Result<(), NnError> {
    if label >= classes {
        Err(NnError::LabelOutOfRange { label, classes })
    } else {
        Ok(())
    }
}

/// `(loss, dL/dlogits)` for softmax cross-entropy.
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut p = prompt::softmax(logits);
    let loss = -p[label].max(f64::MIN_POSITIVE).ln();
    p[label] -= 1.0;
    (loss, p)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// A visual prompt and label map over the shared frozen source model.
#[derive(Debug, Clone)]
pub struct ReTeacher {
    source: Arc<FrozenSourceModel>,
    spec: PromptSpec,
    prompt: PromptParams,
    mask: Tensor,
}

/// Forward state for [`ReTeacher::backward`].
#[derive(Debug, Default)]
pub struct PromptTape {
    state: Option<TapeState>,
}

#[derive(Debug)]
struct TapeState {
    acts: Vec<Tensor>,
    map_cache: LabelMapCache,
}

impl PromptTape {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Gradients with respect to the prompt parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGrads {
    pub omega1: Tensor,
    pub label_map: LabelMapGrads,
}

impl ReTeacher {
    pub fn new(source: Arc<FrozenSourceModel>, spec: PromptSpec, prompt: PromptParams) -> Result<Self, NnError> {
        spec.validate()?;
        if spec.source_dims != source.input_dims() {
            return Err(NnError::ShapeMismatch {
                expected: source.input_dims().to_vec(),
                got: spec.source_dims.to_vec(),
            });
        }
        prompt.validate(&spec)?;
        if prompt.label_map.source_classes() != source.classes() {
            return Err(NnError::ShapeMismatch {
                expected: vec![source.classes()],
                got: vec![prompt.label_map.source_classes()],
            });
        }
        let mask = build_mask(&spec)?;
        Ok(Self {
            source,
            spec,
            prompt,
            mask,
        })
    }

    /// Fresh prompt parameters drawn from `rng`.
    pub fn init<R: Rng + ?Sized>(
        source: Arc<FrozenSourceModel>,
        spec: PromptSpec,
        kind: MapKind,
        target_classes: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let prompt = PromptParams::init(&spec, kind, source.classes(), target_classes, rng)?;
        Self::new(source, spec, prompt)
    }

    pub fn source(&self) -> &Arc<FrozenSourceModel> {
        &self.source
    }

    pub fn spec(&self) -> &PromptSpec {
        &self.spec
    }

    pub fn prompt(&self) -> &PromptParams {
        &self.prompt
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    /// Target logits; fills `tape` for a later [`ReTeacher::backward`].
    pub fn forward(&self, embedded: &Tensor, tape: &mut PromptTape) -> Result<Vec<f64>, NnError> {
        let xhat = apply_prompt_embedded(embedded, &self.prompt.omega1, &self.mask, self.spec.masked)?;
        let (source_logits, acts) = self.source.forward_cached(&xhat)?;
        let (logits, map_cache) = self.prompt.label_map.forward(source_logits.data())?;
        tape.state = Some(TapeState { acts, map_cache });
        Ok(logits)
    }

    /// Backpropagates `dL/d(target logits)` through the label map, the frozen
    /// source, and the prompt.
    pub fn backward(&self, tape: &PromptTape, grad_logits: &[f64]) -> Result<PromptGrads, NnError> {
        let state = tape.state.as_ref().ok_or(PromptError::MissingForwardCache)?;
        let (grad_source, label_map) = self.prompt.label_map.backward(&state.map_cache, grad_logits)?;
        let grad_xhat = self
            .source
            .backward_input(&state.acts, Tensor::from_vec(grad_source));
        let grad_xhat = grad_xhat.reshape(&self.spec.source_dims)?;
        let omega1 = omega1_grad(&grad_xhat, &self.mask, self.spec.masked)?;
        Ok(PromptGrads { omega1, label_map })
    }
}

impl Classifier for ReTeacher {
    fn num_classes(&self) -> usize {
        self.prompt.label_map.target_classes()
    }

    fn logits(&self, x: &Tensor) -> Result<Vec<f64>, NnError> {
        let xhat = apply_prompt_embedded(x, &self.prompt.omega1, &self.mask, self.spec.masked)?;
        let source_logits = self.source.forward(&xhat)?;
        Ok(self.prompt.label_map.forward(source_logits.data())?.0)
    }
}

impl Trainable for ReTeacher {
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.prompt.omega1.data_mut()];
        out.extend(self.prompt.label_map.params_mut());
        out
    }

    fn zero_grads(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.prompt.omega1.len()]];
        let mut map = self.prompt.label_map.clone();
        out.extend(map.params_mut().iter().map(|p| vec![0.0; p.len()]));
        out
    }

    fn accumulate(&self, x: &Tensor, label: usize, grads: &mut [Vec<f64>]) -> Result<f64, NnError> {
        check_label(label, self.num_classes())?;
        let mut tape = PromptTape::new();
        let logits = self.forward(x, &mut tape)?;
        let (loss, grad_logits) = cross_entropy(&logits, label);
        let g = self.backward(&tape, &grad_logits)?;
        add_into(&mut grads[0], g.omega1.data());
        for (dst, src) in grads[1..].iter_mut().zip(g.label_map.into_groups()) {
            add_into(dst, &src);
        }
        Ok(loss)
    }

    fn loss(&self, x: &Tensor, label: usize) -> Result<f64, NnError> {
        check_label(label, self.num_classes())?;
        Ok(cross_entropy(&self.logits(x)?, label).0)
    }
}

/// Frozen source features with a new trainable affine head (partial
/// fine-tuning). Trains on feature vectors; classifies embedded images.
#[derive(Debug, Clone)]
pub struct HeadTeacher {
    source: Arc<FrozenSourceModel>,
    head: Linear,
}

impl HeadTeacher {
    pub fn new(source: Arc<FrozenSourceModel>, head: Linear) -> Result<Self, NnError> {
        if head.in_features != source.arch().feature_len() {
            return Err(NnError::ShapeMismatch {
                expected: vec![source.arch().feature_len()],
                got: vec![head.in_features],
            });
        }
        Ok(Self { source, head })
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Linear {
        &mut self.head
    }
}

impl Classifier for HeadTeacher {
    fn num_classes(&self) -> usize {
        self.head.out_features
    }

    fn logits(&self, x: &Tensor) -> Result<Vec<f64>, NnError> {
        Ok(self.head.forward_slice(&self.source.features(x)?))
    }
}

/// Trainable view of a bare affine layer over precomputed features.
impl Trainable for Linear {
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weight[..], &mut self.bias[..]]
    }

    fn zero_grads(&self) -> Vec<Vec<f64>> {
        vec![vec![0.0; self.weight.len()], vec![0.0; self.bias.len()]]
    }

    fn accumulate(&self, x: &Tensor, label: usize, grads: &mut [Vec<f64>]) -> Result<f64, NnError> {
        check_label(label, self.out_features)?;
        let logits = self.forward(x)?;
        let (loss, g) = cross_entropy(logits.data(), label);
        let (gw, gb) = grads.split_at_mut(1);
        self.backward_slice(x.data(), &g, Some((&mut gw[0], &mut gb[0])));
        Ok(loss)
    }

    fn loss(&self, x: &Tensor, label: usize) -> Result<f64, NnError> {
        check_label(label, self.out_features)?;
        Ok(cross_entropy(self.forward(x)?.data(), label).0)
    }
}

/// A network trained from random initialisation on the target task.
#[derive(Debug, Clone, PartialEq)]
pub struct ScratchNet {
    net: Network,
    classes: usize,
}

impl ScratchNet {
    pub fn new(net: Network, classes: usize) -> Self {
        Self { net, classes }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }
}

impl Classifier for ScratchNet {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn logits(&self, x: &Tensor) -> Result<Vec<f64>, NnError> {
        Ok(self.net.forward(x)?.into_data())
    }
}

impl Trainable for ScratchNet {
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.net.params_mut()
    }

    fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.net.zero_grads()
    }

    fn accumulate(&self, x: &Tensor, label: usize, grads: &mut [Vec<f64>]) -> Result<f64, NnError> {
        check_label(label, self.classes)?;
        let (out, acts) = self.net.forward_cached(x)?;
        let (loss, g) = cross_entropy(out.data(), label);
        self.net.backward(&acts, Tensor::from_vec(g), Some(grads));
        Ok(loss)
    }

    fn loss(&self, x: &Tensor, label: usize) -> Result<f64, NnError> {
        check_label(label, self.classes)?;
        Ok(cross_entropy(&self.logits(x)?, label).0)
    }
}
