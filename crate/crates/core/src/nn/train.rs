use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::layers::Linear;
use super::models::{Classifier, HeadTeacher, ReTeacher, ScratchNet, Trainable};
use super::{Adam, AdamConfig, FrozenSourceModel, NnError, SourceArch, Tensor};
use crate::prompt::{MapKind, PromptSpec};
use crate::seed::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay_per_epoch: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            lr_decay_per_epoch: 0.7,
            batch_size: 16,
            epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::InvalidConfig(m.to_string()));
        let o = &self.optimizer;
        if !(o.lr.is_finite() && o.lr >= 0.0) {
            return bad("optimizer.lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("optimizer betas must lie in [0, 1)");
        }
        if !(o.eps_hat > 0.0) {
            return bad("optimizer.eps_hat must be positive");
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return bad("lr_decay_per_epoch must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Self-training schedule for the student.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub train: TrainConfig,
    pub pseudo_label_rounds: usize,
    /// Minimum max-probability for a pseudo-label; `1.0` admits nothing.
    pub confidence_threshold: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            pseudo_label_rounds: 2,
            confidence_threshold: 0.95,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        self.train.validate()?;
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return Err(NnError::InvalidConfig(
                "confidence_threshold must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Mini-batch Adam on mean cross-entropy. Returns the mean training loss of
/// each epoch (accumulated while training).
pub fn fit<M: Trainable>(
    model: &mut M,
    inputs: &[Tensor],
    labels: &[usize],
    config: &TrainConfig,
) -> Result<Vec<f64>, NnError> {
    fit_with(model, inputs, labels, config, |_, _| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with<M: Trainable>(
    model: &mut M,
    inputs: &[Tensor],
    labels: &[usize],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &M),
) -> Result<Vec<f64>, NnError> {
    config.validate()?;
    if inputs.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    if inputs.len() != labels.len() {
        return Err(NnError::ShapeMismatch {
            expected: vec![inputs.len()],
            got: vec![labels.len()],
        });
    }
    let mut rng = derive_rng(config.seed, "shuffle", 0);
    let mut adam = Adam::new(config.optimizer);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut lr = config.optimizer.lr;
    for epoch in 0..config.epochs {
        adam.set_lr(lr);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = model.zero_grads();
            for &i in batch {
                total += model.accumulate(&inputs[i], labels[i], &mut grads)?;
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.iter_mut().flatten() {
                *g *= scale;
            }
            adam.step(model.params_mut(), &grads);
        }
        let mean = total / inputs.len() as f64;
        if !mean.is_finite() {
            return Err(NnError::Diverged);
        }
        history.push(mean);
        on_epoch(epoch, model);
        lr *= config.lr_decay_per_epoch;
    }
    Ok(history)
}

/// Mean cross-entropy over a labelled set.
pub fn mean_loss<M: Trainable>(model: &M, inputs: &[Tensor], labels: &[usize]) -> Result<f64, NnError> {
    if inputs.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let mut total = 0.0;
    for (x, &y) in inputs.iter().zip(labels) {
        total += model.loss(x, y)?;
    }
    Ok(total / inputs.len() as f64)
}

/// Fraction of argmax-correct predictions.
pub fn evaluate<C: Classifier + ?Sized>(model: &C, inputs: &[Tensor], labels: &[usize]) -> Result<f64, NnError> {
    if inputs.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let mut correct = 0usize;
    for (x, &y) in inputs.iter().zip(labels) {
        if model.predict(x)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / inputs.len() as f64)
}

fn check_labels(labels: &[usize], classes: usize) -> Result<(), NnError> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(&label) => Err(NnError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Trains the source network on the public source task and seals it.
/// `test` supplies the recorded held-out accuracy.
pub fn train_source(
    train_inputs: &[Tensor],
    train_labels: &[usize],
    test_inputs: &[Tensor],
    test_labels: &[usize],
    arch: &SourceArch,
    config: &TrainConfig,
) -> Result<FrozenSourceModel, NnError> {
    arch.validate()?;
    if train_inputs.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    if let Some(bad) = train_inputs.iter().find(|x| x.shape() != arch.input_dims) {
        return Err(NnError::ShapeMismatch {
            expected: arch.input_dims.to_vec(),
            got: bad.shape().to_vec(),
        });
    }
    check_labels(train_labels, arch.classes)?;
    let net = arch.build(arch.classes, &mut derive_rng(config.seed, "source-init", 0));
    let mut model = ScratchNet::new(net, arch.classes);
    fit(&mut model, train_inputs, train_labels, config)?;
    let accuracy = if test_inputs.is_empty() {
        evaluate(&model, train_inputs, train_labels)?
    } else {
        evaluate(&model, test_inputs, test_labels)?
    };
    FrozenSourceModel::seal(model.network().clone(), arch.clone(), accuracy)
}

/// Trains a prompt and label map on one private slice of embedded targets,
/// keeping the source frozen.
pub fn train_reteacher(
    inputs: &[Tensor],
    labels: &[usize],
    target_classes: usize,
    source: Arc<FrozenSourceModel>,
    spec: &PromptSpec,
    kind: MapKind,
    config: &TrainConfig,
) -> Result<ReTeacher, NnError> {
    if inputs.is_empty() {
        return Err(NnError::EmptySlice);
    }
    check_labels(labels, target_classes)?;
    let before = source.fingerprint().to_string();
    let mut teacher = ReTeacher::init(
        Arc::clone(&source),
        *spec,
        kind,
        target_classes,
        &mut derive_rng(config.seed, "prompt-init", 0),
    )?;
    fit(&mut teacher, inputs, labels, config)?;
    source.verify()?;
    debug_assert_eq!(before, source.fingerprint());
    Ok(teacher)
}

/// Partial fine-tuning: a fresh affine head on frozen source features.
pub fn train_head(
    inputs: &[Tensor],
    labels: &[usize],
    target_classes: usize,
    source: Arc<FrozenSourceModel>,
    config: &TrainConfig,
) -> Result<HeadTeacher, NnError> {
    if inputs.is_empty() {
        return Err(NnError::EmptySlice);
    }
    check_labels(labels, target_classes)?;
    let features = inputs
        .iter()
        .map(|x| source.features(x).map(Tensor::from_vec))
        .collect::<Result<Vec<_>, _>>()?;
    let mut head = Linear::new(
        source.arch().feature_len(),
        target_classes,
        &mut derive_rng(config.seed, "head-init", 0),
    );
    fit(&mut head, &features, labels, config)?;
    source.verify()?;
    HeadTeacher::new(source, head)
}

/// A network of the source architecture trained from scratch on the target.
pub fn train_scratch(
    inputs: &[Tensor],
    labels: &[usize],
    target_classes: usize,
    arch: &SourceArch,
    config: &TrainConfig,
) -> Result<ScratchNet, NnError> {
    if inputs.is_empty() {
        return Err(NnError::EmptySlice);
    }
    arch.validate()?;
    check_labels(labels, target_classes)?;
    let net = arch.build(target_classes, &mut derive_rng(config.seed, "scratch-init", 0));
    let mut model = ScratchNet::new(net, target_classes);
    fit(&mut model, inputs, labels, config)?;
    Ok(model)
}

/// Confidence-threshold self-training around any trainer.
///
/// Round 0 fits `answered`; each further round pseudo-labels `unlabeled`,
/// keeps predictions whose top probability reaches the threshold, and refits
/// on the union. A round that admits nothing ends the loop.
pub fn self_train<M, F>(
    answered: &[(Tensor, usize)],
    unlabeled: &[Tensor],
    config: &StudentConfig,
    mut train: F,
) -> Result<M, NnError>
where
    M: Classifier,
    F: FnMut(&[Tensor], &[usize]) -> Result<M, NnError>,
{
    config.validate()?;
    if answered.is_empty() {
        return Err(NnError::NoAnsweredQueries);
    }
    let (base_x, base_y): (Vec<Tensor>, Vec<usize>) = answered.iter().cloned().unzip();
    let mut model = train(&base_x, &base_y)?;
    for _ in 0..config.pseudo_label_rounds {
        let mut xs = base_x.clone();
        let mut ys = base_y.clone();
        if config.confidence_threshold < 1.0 {
            for x in unlabeled {
                let p = model.predict_proba(x)?;
                let best = super::argmax(&p);
                if p[best] >= config.confidence_threshold {
                    xs.push(x.clone());
                    ys.push(best);
                }
            }
        }
        if xs.len() == base_x.len() {
            break;
        }
        model = train(&xs, &ys)?;
    }
    Ok(model)
}

/// The prompted student: self-training on the answered public queries and
/// the rest of the public pool, over the same frozen source.
pub fn train_student(
    answered: &[(Tensor, usize)],
    unlabeled: &[Tensor],
    target_classes: usize,
    source: Arc<FrozenSourceModel>,
    spec: &PromptSpec,
    kind: MapKind,
    config: &StudentConfig,
) -> Result<ReTeacher, NnError> {
    self_train(answered, unlabeled, config, |xs, ys| {
        train_reteacher(xs, ys, target_classes, Arc::clone(&source), spec, kind, &config.train)
    })
}
