use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PromptError, Result};
use crate::nn::layers::Linear;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    /// Fixed injective assignment of target classes to source classes.
    Random,
    /// One trainable affine layer.
    Fc1,
    /// Two affine layers with a rectifier between them.
    Fc2,
}

/// Maps source-model logits to target-class logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelMap {
    Random { map: Vec<usize>, source_classes: usize },
    Fc1 { layer: Linear },
    Fc2 { hidden: Linear, output: Linear },
}

/// Forward state needed by [`LabelMap::backward`].
#[derive(Debug, Clone, PartialEq)]
pub enum LabelMapCache {
    Random,
    Fc1 { input: Vec<f64> },
    Fc2 { input: Vec<f64>, pre: Vec<f64>, hidden: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum LabelMapGrads {
    /// The random map has no trainable parameters.
    None,
    Fc1 { weight: Vec<f64>, bias: Vec<f64> },
    Fc2 {
        hidden_weight: Vec<f64>,
        hidden_bias: Vec<f64>,
        output_weight: Vec<f64>,
        output_bias: Vec<f64>,
    },
}

impl LabelMapGrads {
    pub fn is_empty(&self) -> bool {
        matches!(self, LabelMapGrads::None)
    }

    /// Gradient groups in [`LabelMap::params_mut`] order.
    pub fn into_groups(self) -> Vec<Vec<f64>> {
        match self {
            LabelMapGrads::None => Vec::new(),
            LabelMapGrads::Fc1 { weight, bias } => vec![weight, bias],
            LabelMapGrads::Fc2 {
                hidden_weight,
                hidden_bias,
                output_weight,
                output_bias,
            } => vec![hidden_weight, hidden_bias, output_weight, output_bias],
        }
    }
}

fn fc_init<R: Rng + ?Sized>(fan_in: usize, out: usize, rng: &mut R) -> Linear {
    Linear::uniform(fan_in, out, 1.0 / (fan_in as f64).sqrt(), rng)
}

impl LabelMap {
    pub fn init<R: Rng + ?Sized>(
        kind: MapKind,
        source_classes: usize,
        target_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match kind {
            MapKind::Random => {
                if target_classes > source_classes {
                    return Err(PromptError::TargetExceedsSource {
                        target: target_classes,
                        available: source_classes,
                    });
                }
                let map = rand::seq::index::sample(rng, source_classes, target_classes).into_vec();
                LabelMap::Random {
                    map,
                    source_classes,
                }
            }
            MapKind::Fc1 => LabelMap::Fc1 {
                layer: fc_init(source_classes, target_classes, rng),
            },
            MapKind::Fc2 => {
                let width = source_classes.div_ceil(2);
                LabelMap::Fc2 {
                    hidden: fc_init(source_classes, width, rng),
                    output: fc_init(width, target_classes, rng),
                }
            }
        })
    }

    /// A random-kind map with an explicit assignment.
    pub fn random_from(map: Vec<usize>, source_classes: usize) -> Result<Self> {
        let out = LabelMap::Random {
            map,
            source_classes,
        };
        out.validate()?;
        Ok(out)
    }

    /// A one-layer map whose rows select the given source classes.
    pub fn fc1_selecting(selection: &[usize], source_classes: usize) -> Self {
        let mut weight = vec![0.0; selection.len() * source_classes];
        for (row, &s) in selection.iter().enumerate() {
            weight[row * source_classes + s] = 1.0;
        }
        LabelMap::Fc1 {
            layer: Linear {
                in_features: source_classes,
                out_features: selection.len(),
                weight,
                bias: vec![0.0; selection.len()],
            },
        }
    }

    pub fn kind(&self) -> MapKind {
        match self {
            LabelMap::Random { .. } => MapKind::Random,
            LabelMap::Fc1 { .. } => MapKind::Fc1,
            LabelMap::Fc2 { .. } => MapKind::Fc2,
        }
    }

    pub fn source_classes(&self) -> usize {
        match self {
            LabelMap::Random { source_classes, .. } => *source_classes,
            LabelMap::Fc1 { layer } => layer.in_features,
            LabelMap::Fc2 { hidden, .. } => hidden.in_features,
        }
    }

    pub fn target_classes(&self) -> usize {
        match self {
            LabelMap::Random { map, .. } => map.len(),
            LabelMap::Fc1 { layer } => layer.out_features,
            LabelMap::Fc2 { output, .. } => output.out_features,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LabelMap::Random {
                map,
                source_classes,
            } => {
                let mut seen = vec![false; *source_classes];
                for &index in map {
                    let slot = seen.get_mut(index).ok_or(PromptError::MapIndexOutOfRange {
                        index,
                        source_classes: *source_classes,
                    })?;
                    if *slot {
                        return Err(PromptError::MapNotInjective(index));
                    }
                    *slot = true;
                }
                Ok(())
            }
            LabelMap::Fc1 { layer } => check_linear(layer),
            LabelMap::Fc2 { hidden, output } => {
                check_linear(hidden)?;
                check_linear(output)?;
                if hidden.out_features != output.in_features {
                    return Err(PromptError::ShapeMismatch {
                        expected: vec![hidden.out_features],
                        got: vec![output.in_features],
                    });
                }
                Ok(())
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            LabelMap::Random { .. } => 0,
            LabelMap::Fc1 { layer } => layer.weight.len() + layer.bias.len(),
            LabelMap::Fc2 { hidden, output } => {
                hidden.weight.len() + hidden.bias.len() + output.weight.len() + output.bias.len()
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            LabelMap::Random { .. } => Vec::new(),
            LabelMap::Fc1 { layer } => vec![&mut layer.weight[..], &mut layer.bias[..]],
            LabelMap::Fc2 { hidden, output } => vec![
                &mut hidden.weight[..],
                &mut hidden.bias[..],
                &mut output.weight[..],
                &mut output.bias[..],
            ],
        }
    }

    /// Target logits (pre-softmax) and the cache for the backward pass.
    pub fn forward(&self, source_logits: &[f64]) -> Result<(Vec<f64>, LabelMapCache)> {
        let k_s = self.source_classes();
        if source_logits.len() != k_s {
            return Err(PromptError::ShapeMismatch {
                expected: vec![k_s],
                got: vec![source_logits.len()],
            });
        }
        Ok(match self {
            LabelMap::Random { map, .. } => {
                let logits = map
                    .iter()
                    .map(|&i| {
                        source_logits.get(i).copied().ok_or(PromptError::MapIndexOutOfRange {
                            index: i,
                            source_classes: k_s,
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                (logits, LabelMapCache::Random)
            }
            LabelMap::Fc1 { layer } => {
                let input = centered(source_logits);
                (layer.forward_slice(&input), LabelMapCache::Fc1 { input })
            }
            LabelMap::Fc2 { hidden, output } => {
                let input = centered(source_logits);
                let pre = hidden.forward_slice(&input);
                let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
                (
                    output.forward_slice(&act),
                    LabelMapCache::Fc2 {
                        input,
                        pre,
                        hidden: act,
                    },
                )
            }
        })
    }

    /// Gradient with respect to the source logits, plus parameter gradients.
    pub fn backward(&self, cache: &LabelMapCache, grad_logits: &[f64]) -> Result<(Vec<f64>, LabelMapGrads)> {
        match (self, cache) {
            (LabelMap::Random { map, source_classes }, LabelMapCache::Random) => {
                let mut grad = vec![0.0; *source_classes];
                for (&i, &g) in map.iter().zip(grad_logits) {
                    grad[i] += g;
                }
                Ok((grad, LabelMapGrads::None))
            }
            (LabelMap::Fc1 { layer }, LabelMapCache::Fc1 { input }) => {
                let mut weight = vec![0.0; layer.weight.len()];
                let mut bias = vec![0.0; layer.bias.len()];
                let grad = layer.backward_slice(input, grad_logits, Some((&mut weight, &mut bias)));
                Ok((centered(&grad), LabelMapGrads::Fc1 { weight, bias }))
            }
            (LabelMap::Fc2 { hidden, output }, LabelMapCache::Fc2 { input, pre, hidden: act }) => {
                let mut output_weight = vec![0.0; output.weight.len()];
                let mut output_bias = vec![0.0; output.bias.len()];
                let grad_act = output.backward_slice(act, grad_logits, Some((&mut output_weight, &mut output_bias)));
                let grad_pre: Vec<f64> = grad_act
                    .iter()
                    .zip(pre)
                    .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
                    .collect();
                let mut hidden_weight = vec![0.0; hidden.weight.len()];
                let mut hidden_bias = vec![0.0; hidden.bias.len()];
                let grad = hidden.backward_slice(input, &grad_pre, Some((&mut hidden_weight, &mut hidden_bias)));
                Ok((
                    centered(&grad),
                    LabelMapGrads::Fc2 {
                        hidden_weight,
                        hidden_bias,
                        output_weight,
                        output_bias,
                    },
                ))
            }
            _ => Err(PromptError::MissingForwardCache),
        }
    }
}

/// Logits are defined up to a shift. The affine maps see them mean-centred,
/// otherwise a source with large negative logits starts the hidden rectifiers
/// dead. Centring is its own adjoint, so the backward pass reuses it.
fn centered(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

fn check_linear(layer: &Linear) -> Result<()> {
    if layer.weight.len() != layer.in_features * layer.out_features
        || layer.bias.len() != layer.out_features
    {
        return Err(PromptError::ShapeMismatch {
            expected: vec![layer.out_features, layer.in_features],
            got: vec![layer.weight.len(), layer.bias.len()],
        });
    }
    if layer.weight.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
        return Err(PromptError::NonFinite("label map"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_map_is_injective_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let m = LabelMap::init(MapKind::Random, 26, 10, &mut rng).unwrap();
            m.validate().unwrap();
            assert_eq!(m.param_count(), 0);
        }
        assert!(LabelMap::init(MapKind::Random, 3, 4, &mut rng).is_err());
    }

    #[test]
    fn fc2_width_is_half_source_rounded_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let LabelMap::Fc2 { hidden, output } = LabelMap::init(MapKind::Fc2, 25, 4, &mut rng).unwrap() else {
            panic!()
        };
        assert_eq!(hidden.out_features, 13);
        assert_eq!(output.in_features, 13);
        assert!(hidden.bias.iter().all(|&b| b == 0.0));
        let bound = 1.0 / 5.0;
        assert!(hidden.weight.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn random_map_has_no_gradients() {
        let m = LabelMap::random_from(vec![2, 0], 3).unwrap();
        let (_, cache) = m.forward(&[0.1, 0.2, 0.3]).unwrap();
        let (g, grads) = m.backward(&cache, &[1.0, -1.0]).unwrap();
        assert_eq!(g, vec![-1.0, 0.0, 1.0]);
        assert!(grads.is_empty());
        assert!(grads.into_groups().is_empty());
    }

    #[test]
    fn affine_maps_ignore_a_logit_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for kind in [MapKind::Fc1, MapKind::Fc2] {
            let m = LabelMap::init(kind, 5, 3, &mut rng).unwrap();
            let logits = [0.3, -1.2, 2.0, 0.5, -0.1];
            let shifted: Vec<f64> = logits.iter().map(|v| v - 40.0).collect();
            let (a, cache) = m.forward(&logits).unwrap();
            let (b, _) = m.forward(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
            let (g, _) = m.backward(&cache, &[1.0, -2.0, 0.5]).unwrap();
            assert!(g.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_cache_is_an_error() {
        let m = LabelMap::fc1_selecting(&[0, 1], 3);
        assert_eq!(
            m.backward(&LabelMapCache::Random, &[1.0, 0.0]).unwrap_err(),
            PromptError::MissingForwardCache
        );
    }
}
