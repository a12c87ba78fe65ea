use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{Conv2d, Layer, Linear, Network};
use super::{NnError, Tensor};

/// Convolution stack followed by an affine head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceArch {
    pub input_dims: [usize; 3],
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub classes: usize,
}

impl Default for SourceArch {
    fn default() -> Self {
        Self {
            input_dims: [1, 32, 32],
            conv_channels: vec![8, 16],
            kernel: 3,
            stride: 2,
            padding: 1,
            classes: 26,
        }
    }
}

impl SourceArch {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::InvalidConfig(format!("architecture: {m}")));
        if self.input_dims.contains(&0) {
            return bad("input dims must be positive");
        }
        if self.conv_channels.contains(&0) || self.kernel == 0 || self.stride == 0 {
            return bad("channels, kernel and stride must be positive");
        }
        if self.classes < 2 {
            return bad("at least 2 classes");
        }
        let (_, h, w) = self.feature_geometry();
        if h == 0 || w == 0 {
            return bad("input too small for the convolution stack");
        }
        Ok(())
    }

    /// `(channels, height, width)` after the convolution stack.
    pub fn feature_geometry(&self) -> (usize, usize, usize) {
        let [c, mut h, mut w] = self.input_dims;
        let mut channels = c;
        for &oc in &self.conv_channels {
            let span = self.kernel;
            h = (h + 2 * self.padding).saturating_sub(span) / self.stride + 1;
            w = (w + 2 * self.padding).saturating_sub(span) / self.stride + 1;
            channels = oc;
        }
        (channels, h, w)
    }

    pub fn feature_len(&self) -> usize {
        let (c, h, w) = self.feature_geometry();
        c * h * w
    }

    /// A freshly initialised network with `classes` outputs.
    pub fn build<R: Rng + ?Sized>(&self, classes: usize, rng: &mut R) -> Network {
        let mut layers = Vec::new();
        let mut in_c = self.input_dims[0];
        for &oc in &self.conv_channels {
            layers.push(Layer::Conv2d(Conv2d::new(
                in_c,
                oc,
                self.kernel,
                self.stride,
                self.padding,
                rng,
            )));
            layers.push(Layer::Relu);
            in_c = oc;
        }
        layers.push(Layer::Linear(Linear::new(self.feature_len(), classes, rng)));
        Network::new(layers)
    }
}

/// The pre-trained source classifier. Parameters cannot be reached mutably
/// once sealed; the fingerprint is a SHA-256 over architecture and weights.
#[derive(Debug)]
pub struct FrozenSourceModel {
    net: Network,
    arch: SourceArch,
    fingerprint: String,
    source_accuracy: f64,
}

impl FrozenSourceModel {
    pub fn seal(net: Network, arch: SourceArch, source_accuracy: f64) -> Result<Self, NnError> {
        arch.validate()?;
        let expected = arch.build(arch.classes, &mut ChaCha8Rng::seed_from_u64(0));
        let shapes = |n: &Network| n.params().iter().map(|p| p.len()).collect::<Vec<_>>();
        if shapes(&expected) != shapes(&net) {
            return Err(NnError::ShapeMismatch {
                expected: shapes(&expected),
                got: shapes(&net),
            });
        }
        let fingerprint = fingerprint_of(&net, &arch);
        Ok(Self {
            net,
            arch,
            fingerprint,
            source_accuracy,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Recomputes the fingerprint and checks it against the sealed one.
    pub fn verify(&self) -> Result<(), NnError> {
        let now = fingerprint_of(&self.net, &self.arch);
        if now != self.fingerprint {
            return Err(NnError::FrozenModelMutated {
                before: self.fingerprint.clone(),
                after: now,
            });
        }
        Ok(())
    }

    pub fn arch(&self) -> &SourceArch {
        &self.arch
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.arch.input_dims
    }

    /// Accuracy on the held-out split of the source task.
    pub fn source_accuracy(&self) -> f64 {
        self.source_accuracy
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.net.forward(x)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>), NnError> {
        self.net.forward_cached(x)
    }

    /// Gradient of the logits' upstream gradient with respect to the input.
    pub fn backward_input(&self, acts: &[Tensor], grad_logits: Tensor) -> Tensor {
        self.net.backward(acts, grad_logits, None)
    }

    /// Activations feeding the final affine head.
    pub fn features(&self, x: &Tensor) -> Result<Vec<f64>, NnError> {
        let depth = self.net.layers().len() - 1;
        Ok(self.net.forward_prefix(x, depth)?.into_data())
    }
}

fn fingerprint_of(net: &Network, arch: &SourceArch) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(arch).expect("arch serialises"));
    for p in net.params() {
        hasher.update((p.len() as u64).to_le_bytes());
        for v in p {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        write!(out, "{b:02x}").expect("writing to a String");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let arch = SourceArch::default();
        assert_eq!(arch.feature_geometry(), (16, 8, 8));
        let net = arch.build(26, &mut ChaCha8Rng::seed_from_u64(0));
        let y = net.forward(&Tensor::zeros(&[1, 32, 32])).unwrap();
        assert_eq!(y.shape(), &[26]);
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let arch = SourceArch::default();
        let net = arch.build(26, &mut ChaCha8Rng::seed_from_u64(1));
        let a = FrozenSourceModel::seal(net.clone(), arch.clone(), 0.5).unwrap();
        let b = FrozenSourceModel::seal(net.clone(), arch.clone(), 0.5).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        a.forward(&Tensor::zeros(&[1, 32, 32])).unwrap();
        a.verify().unwrap();

        let mut tweaked = net;
        tweaked.params_mut()[0][0] += 1e-12;
        let c = FrozenSourceModel::seal(tweaked, arch, 0.5).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn seal_rejects_wrong_shapes() {
        let arch = SourceArch::default();
        let net = arch.build(10, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(FrozenSourceModel::seal(net, arch, 0.0).is_err());
    }

    #[test]
    fn features_feed_the_head() {
        let arch = SourceArch {
            input_dims: [1, 8, 8],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = arch.build(arch.classes, &mut rng);
        let model = FrozenSourceModel::seal(net, arch, 0.0).unwrap();
        let x = Tensor::new(vec![1, 8, 8], (0..64).map(|i| i as f64 / 64.0).collect()).unwrap();
        let f = model.features(&x).unwrap();
        let Layer::Linear(head) = model.network().layers().last().unwrap() else {
            panic!()
        };
        assert_eq!(head.forward_slice(&f), model.forward(&x).unwrap().into_data());
    }
}
