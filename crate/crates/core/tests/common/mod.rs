//! Small fixtures shared by the integration tests.
#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prompate::data::{Family, SyntheticSpec};
use prompate::harness::{AccountingMode, ExperimentConfig, SourceSection, TargetSection};
use prompate::nn::{train_source, AdamConfig, FrozenSourceModel, SourceArch, TrainConfig};
use prompate::Tensor;

pub fn tiny_arch() -> SourceArch {
    SourceArch {
        input_dims: [1, 6, 6],
        conv_channels: vec![4],
        kernel: 3,
        stride: 2,
        padding: 1,
        classes: 4,
    }
}

/// Four classes on `1×6×6`: class `c` lights quadrant `c`.
pub fn quadrants(n: usize, seed: u64) -> (Vec<Tensor>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 4;
            let data = (0..36)
                .map(|p| {
                    let quadrant = (p / 6 >= 3) as usize * 2 + (p % 6 >= 3) as usize;
                    let base = if quadrant == label { 0.85 } else { 0.15 };
                    (base + rng.random_range(-0.1..0.1f64)).clamp(0.0, 1.0)
                })
                .collect();
            (Tensor::new(vec![1, 6, 6], data).unwrap(), label)
        })
        .unzip()
}

/// Two classes on `1×h×w`: bright left half vs bright right half.
pub fn halves(n: usize, h: usize, w: usize, seed: u64) -> (Vec<Tensor>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let data = (0..h * w)
                .map(|p| {
                    let left = p % w < w / 2;
                    let on = (label == 0) == left;
                    (if on { 0.8 } else { 0.2 }) + rng.random_range(-0.15..0.15f64)
                })
                .collect();
            (Tensor::new(vec![1, h, w], data).unwrap(), label)
        })
        .unzip()
}

pub fn quick_train(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        optimizer: AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        lr_decay_per_epoch: 0.9,
        batch_size: 8,
        epochs,
        seed: 3,
    }
}

/// A 4-class source over [`quadrants`], trained once per test binary.
pub fn quadrant_source() -> Arc<FrozenSourceModel> {
    static SOURCE: OnceLock<Arc<FrozenSourceModel>> = OnceLock::new();
    SOURCE
        .get_or_init(|| {
            let (x, y) = quadrants(400, 11);
            let (tx, ty) = quadrants(100, 12);
            let model = train_source(&x, &y, &tx, &ty, &tiny_arch(), &quick_train(10, 0.02)).unwrap();
            Arc::new(model)
        })
        .clone()
}

/// An experiment small enough for debug-speed tests: 8×8 inputs, a
/// six-class source and a four-class target of 400 examples.
pub fn small_config() -> ExperimentConfig {
    let arch = SourceArch {
        input_dims: [1, 8, 8],
        conv_channels: vec![4],
        kernel: 3,
        stride: 2,
        padding: 1,
        classes: 6,
    };
    let mut c = ExperimentConfig {
        repeats: 2,
        num_teachers: 6,
        max_queries: 40,
        source: SourceSection {
            data: SyntheticSpec {
                classes: 6,
                dims: [1, 8, 8],
                family: Family::Mixed,
                gap_knob: 1.0,
                noise_level: 0.1,
                count: 300,
                seed: 0,
                zoom: [1.0, 1.0],
                jitter: 0.0,
            },
            arch,
            train: quick_train(4, 0.01),
            ..SourceSection::default()
        },
        target: TargetSection {
            data: SyntheticSpec {
                classes: 4,
                dims: [1, 6, 6],
                family: Family::Stripes,
                gap_knob: 0.8,
                noise_level: 0.15,
                count: 400,
                seed: 0,
                zoom: [1.0, 1.0],
                jitter: 0.0,
            },
            ..TargetSection::default()
        },
        accounting: AccountingMode::PerStep,
        ..ExperimentConfig::default()
    };
    c.prompt.rescale = [6, 6];
    c.aggregator.threshold = 3.0;
    c.aggregator.sigma1 = 1.0;
    c.aggregator.sigma2 = 1.0;
    c.teacher_train = quick_train(4, 0.02);
    c.student.train = quick_train(4, 0.02);
    c.student.pseudo_label_rounds = 1;
    c.student.confidence_threshold = 0.9;
    c
}
