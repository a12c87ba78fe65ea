use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataError, Dataset};
use crate::nn::Tensor;
use crate::seed::derive_rng;

/// Prototypes depend only on (family, class), never on the spec seed, so the
/// source and target tasks share class structure at `gap_knob = 0`.
const PROTOTYPE_SEED: u64 = 0x70_72_6f_74_6f;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Blobs,
    Stripes,
    Checker,
    /// Class `c` draws a random prototype from blobs, stripes and checkers in
    /// turn; a broad task for pre-training.
    Mixed,
}

impl Family {
    fn tag(self) -> &'static str {
        match self {
            Family::Blobs => "blobs-alt",
            Family::Stripes => "stripes",
            Family::Checker => "checker",
            Family::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dims: [usize; 3],
    /// Pattern family mixed in as `gap_knob` grows. Every image starts from
    /// the blob prototype of its class, the source-task family.
    pub family: Family,
    pub gap_knob: f64,
    /// Standard deviation of additive pixel noise.
    pub noise_level: f64,
    pub count: usize,
    pub seed: u64,
    /// Per-example scale range; below 1 the pattern shrinks toward the
    /// centre on a zero background.
    pub zoom: [f64; 2],
    /// Maximum per-example translation, as a fraction of the image side.
    pub jitter: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dims: [1, 16, 16],
            family: Family::Blobs,
            gap_knob: 0.0,
            noise_level: 0.05,
            count: 100,
            seed: 0,
            zoom: [1.0, 1.0],
            jitter: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.classes < 2 {
            return bad(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.dims.contains(&0) {
            return bad(format!("dims must be positive, got {:?}", self.dims));
        }
        if self.count < self.classes {
            return bad(format!("count {} is below class count {}", self.count, self.classes));
        }
        if !(0.0..=1.0).contains(&self.gap_knob) {
            return bad(format!("gap_knob {} not in [0, 1]", self.gap_knob));
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return bad(format!("noise_level {} must be finite and non-negative", self.noise_level));
        }
        let [lo, hi] = self.zoom;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("zoom range {:?} must satisfy 0 < lo <= hi", self.zoom));
        }
        if !(0.0..=0.5).contains(&self.jitter) {
            return bad(format!("jitter {} not in [0, 0.5]", self.jitter));
        }
        Ok(())
    }

    /// Short content hash identifying this generator configuration.
    pub fn provenance(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("spec serialises"));
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// A class prototype as a function of centred coordinates in [-0.5, 0.5]².
#[derive(Debug, Clone)]
enum Pattern {
    Blobs(Vec<(f64, f64, f64, f64)>),
    Stripes { angle: f64, freq: f64, phase: f64 },
    Checker { angle: f64, freq: f64, phase: (f64, f64) },
}

impl Pattern {
    fn blobs(tag: &str, class: usize) -> Self {
        let mut rng = derive_rng(PROTOTYPE_SEED, tag, class as u64);
        let bumps = [1.0, 0.7]
            .into_iter()
            .map(|amp| {
                (
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(0.08..0.16),
                    amp,
                )
            })
            .collect();
        Pattern::Blobs(bumps)
    }

    fn new(family: Family, class: usize) -> Self {
        let mut rng = derive_rng(PROTOTYPE_SEED, family.tag(), class as u64);
        match family {
            Family::Blobs => Self::blobs(family.tag(), class),
            Family::Stripes => Pattern::Stripes {
                angle: (class % 6) as f64 * PI / 6.0 + rng.random_range(-0.1..0.1),
                freq: 2.0 + 1.5 * (class / 6) as f64,
                phase: rng.random_range(0.0..2.0 * PI),
            },
            Family::Checker => Pattern::Checker {
                angle: (class / 5) as f64 * PI / 7.0 + rng.random_range(-0.05..0.05),
                freq: 1.5 + 0.75 * (class % 5) as f64,
                phase: (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)),
            },
            Family::Mixed => match class % 3 {
                0 => Self::blobs("mixed-blobs", class),
                1 => Pattern::Stripes {
                    angle: rng.random_range(0.0..PI),
                    freq: rng.random_range(1.5..6.0),
                    phase: rng.random_range(0.0..2.0 * PI),
                },
                _ => Pattern::Checker {
                    angle: rng.random_range(0.0..PI / 2.0),
                    freq: rng.random_range(1.5..4.0),
                    phase: (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)),
                },
            },
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        match self {
            Pattern::Blobs(bumps) => bumps
                .iter()
                .map(|&(cu, cv, w, a)| a * (-((u - cu).powi(2) + (v - cv).powi(2)) / (2.0 * w * w)).exp())
                .sum::<f64>()
                .min(1.0),
            Pattern::Stripes { angle, freq, phase } => {
                let t = u * angle.cos() + v * angle.sin();
                0.5 + 0.5 * (2.0 * PI * freq * t + phase).sin()
            }
            Pattern::Checker { angle, freq, phase } => {
                let (s, c) = angle.sin_cos();
                let (a, b) = (u * c + v * s, -u * s + v * c);
                let prod = (2.0 * PI * freq * a + phase.0).sin() * (2.0 * PI * freq * b + phase.1).sin();
                0.5 + 0.5 * (4.0 * prod).tanh()
            }
        }
    }
}

/// Deterministic labelled images; class `i % classes` for example `i`.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let [channels, h, w] = spec.dims;
    let base: Vec<Pattern> = (0..spec.classes).map(|c| Pattern::blobs("blobs", c)).collect();
    let mixed: Vec<Pattern> = (0..spec.classes).map(|c| Pattern::new(spec.family, c)).collect();
    let gains: Vec<Vec<f64>> = (0..spec.classes)
        .map(|c| {
            let mut rng = derive_rng(PROTOTYPE_SEED, "channel-gain", c as u64);
            (0..channels)
                .map(|k| if k == 0 { 1.0 } else { rng.random_range(0.6..1.0) })
                .collect()
        })
        .collect();
    let g = spec.gap_knob;
    let per = channels * h * w;
    let mut data = Vec::with_capacity(spec.count * per);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let class = i % spec.classes;
        let mut rng = derive_rng(spec.seed, "example", i as u64);
        let zoom = if spec.zoom[0] < spec.zoom[1] {
            rng.random_range(spec.zoom[0]..=spec.zoom[1])
        } else {
            spec.zoom[0]
        };
        let (su, sv) = if spec.jitter > 0.0 {
            (
                rng.random_range(-spec.jitter..=spec.jitter),
                rng.random_range(-spec.jitter..=spec.jitter),
            )
        } else {
            (0.0, 0.0)
        };
        let mut plane = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let u = ((x as f64 + 0.5) / w as f64 - 0.5 - su) / zoom;
                let v = ((y as f64 + 0.5) / h as f64 - 0.5 - sv) / zoom;
                if u.abs() <= 0.5 && v.abs() <= 0.5 {
                    plane[y * w + x] = (1.0 - g) * base[class].at(u, v) + g * mixed[class].at(u, v);
                }
            }
        }
        for &gain in &gains[class] {
            for &p in &plane {
                let noise: f64 = rng.sample(StandardNormal);
                data.push((gain * p + spec.noise_level * noise).clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    let images = Tensor::new(vec![spec.count, channels, h, w], data)?;
    Dataset::new(images, labels, spec.classes, spec.provenance())
}
