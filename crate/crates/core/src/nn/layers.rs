//! Layers with hand-written backward passes.
//!
//! Inputs are single examples (`C×H×W` for convolutions, anything for affine
//! layers, which flatten). Batches are handled by the training loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = (0..out_channels * fan_in)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// Indices `(o, i)` of the output positions along one axis touched by
    /// kernel offset `k`.
    fn taps(&self, k: usize, in_len: usize, out_len: usize) -> impl Iterator<Item = (usize, usize)> {
        let (stride, padding) = (self.stride, self.padding);
        (0..out_len).filter_map(move |o| {
            let i = (o * stride + k).checked_sub(padding)?;
            (i < in_len).then_some((o, i))
        })
    }

    fn input_dims(&self, x: &Tensor) -> Result<(usize, usize), NnError> {
        match x.shape() {
            [c, h, w] if *c == self.in_channels => Ok((*h, *w)),
            other => Err(NnError::ShapeMismatch {
                expected: vec![self.in_channels, 0, 0],
                got: other.to_vec(),
            }),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let (h, w) = self.input_dims(x)?;
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let input = x.data();
        let mut out = vec![0.0; self.out_channels * oh * ow];
        for oc in 0..self.out_channels {
            let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
            plane.fill(self.bias[oc]);
            for ic in 0..self.in_channels {
                let src = &input[ic * h * w..(ic + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = self.weight[((oc * self.in_channels + ic) * k + ky) * k + kx];
                        for (oy, iy) in self.taps(ky, h, oh) {
                            let row = &src[iy * w..(iy + 1) * w];
                            let out_row = &mut plane[oy * ow..(oy + 1) * ow];
                            for (ox, ix) in self.taps(kx, w, ow) {
                                out_row[ox] += wv * row[ix];
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![self.out_channels, oh, ow], out)
    }

    /// Returns the input gradient; accumulates parameter gradients when asked.
    pub fn backward(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
        mut param_grads: Option<(&mut [f64], &mut [f64])>,
    ) -> Tensor {
        let (h, w) = self.input_dims(x).expect("cached input matches layer");
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let input = x.data();
        let g = grad_out.data();
        let mut grad_in = vec![0.0; self.in_channels * h * w];
        for oc in 0..self.out_channels {
            let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
            if let Some((_, gb)) = param_grads.as_mut() {
                gb[oc] += gplane.iter().sum::<f64>();
            }
            for ic in 0..self.in_channels {
                let src = &input[ic * h * w..(ic + 1) * h * w];
                let dst = &mut grad_in[ic * h * w..(ic + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((oc * self.in_channels + ic) * k + ky) * k + kx;
                        let wv = self.weight[widx];
                        let mut gw = 0.0;
                        for (oy, iy) in self.taps(ky, h, oh) {
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            for (ox, ix) in self.taps(kx, w, ow) {
                                dst[iy * w + ix] += wv * grow[ox];
                                gw += grow[ox] * src[iy * w + ix];
                            }
                        }
                        if let Some((gwt, _)) = param_grads.as_mut() {
                            gwt[widx] += gw;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![self.in_channels, h, w], grad_in).expect("shape by construction")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out][in]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    /// He-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = (6.0 / in_features as f64).sqrt();
        Self::uniform(in_features, out_features, bound, rng)
    }

    /// Weights uniform in `[-bound, bound]`, zero bias.
    pub fn uniform<R: Rng + ?Sized>(
        in_features: usize,
        out_features: usize,
        bound: f64,
        rng: &mut R,
    ) -> Self {
        let weight = (0..in_features * out_features)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            in_features,
            out_features,
            weight,
            bias: vec![0.0; out_features],
        }
    }

    pub fn forward_slice(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_features);
        self.weight
            .chunks_exact(self.in_features)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        if x.len() != self.in_features {
            return Err(NnError::ShapeMismatch {
                expected: vec![self.in_features],
                got: x.shape().to_vec(),
            });
        }
        Ok(Tensor::from_vec(self.forward_slice(x.data())))
    }

    /// Input gradient for upstream `grad_out`; accumulates parameter
    /// gradients when asked.
    pub fn backward_slice(
        &self,
        x: &[f64],
        grad_out: &[f64],
        param_grads: Option<(&mut [f64], &mut [f64])>,
    ) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.in_features];
        for (row, &g) in self.weight.chunks_exact(self.in_features).zip(grad_out) {
            if g == 0.0 {
                continue;
            }
            for (gi, w) in grad_in.iter_mut().zip(row) {
                *gi += w * g;
            }
        }
        if let Some((gw, gb)) = param_grads {
            for ((grow, &g), gbias) in gw
                .chunks_exact_mut(self.in_features)
                .zip(grad_out)
                .zip(gb.iter_mut())
            {
                *gbias += g;
                for (gwi, xi) in grow.iter_mut().zip(x) {
                    *gwi += g * xi;
                }
            }
        }
        grad_in
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv2d(Conv2d),
    Relu,
    Linear(Linear),
}

impl Layer {
    fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        match self {
            Layer::Conv2d(c) => c.forward(x),
            Layer::Relu => {
                let data = x.data().iter().map(|&v| v.max(0.0)).collect();
                Tensor::new(x.shape().to_vec(), data)
            }
            Layer::Linear(l) => l.forward(x),
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Layer::Conv2d(c) => c.weight.len() + c.bias.len(),
            Layer::Linear(l) => l.weight.len() + l.bias.len(),
            Layer::Relu => 0,
        }
    }
}

/// Gradients for every parameter slice of a [`Network`], in `params()` order.
pub type ParamGrads = Vec<Vec<f64>>;

/// A feed-forward stack of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Output of the first `depth` layers.
    pub fn forward_prefix(&self, x: &Tensor, depth: usize) -> Result<Tensor, NnError> {
        let mut cur = x.clone();
        for layer in &self.layers[..depth] {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Output plus the input to every layer (the cache for [`backward`]).
    ///
    /// [`backward`]: Network::backward
    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>), NnError> {
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let next = layer.forward(&cur)?;
            acts.push(cur);
            cur = next;
        }
        Ok((cur, acts))
    }

    /// Backpropagates `grad_out` to the network input. Parameter gradients are
    /// accumulated into `grads` (laid out as [`Network::zero_grads`]) when
    /// given.
    pub fn backward(&self, acts: &[Tensor], grad_out: Tensor, mut grads: Option<&mut [Vec<f64>]>) -> Tensor {
        assert_eq!(acts.len(), self.layers.len(), "activation cache length");
        let mut slot = self.layers.iter().filter(|l| l.param_count() > 0).count() * 2;
        let mut g = grad_out;
        for (layer, x) in self.layers.iter().zip(acts).rev() {
            g = match layer {
                Layer::Relu => {
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    Tensor::new(x.shape().to_vec(), data).expect("relu keeps shape")
                }
                Layer::Conv2d(c) => {
                    slot -= 2;
                    let pg = grads.as_deref_mut().map(|gs| split_pair(gs, slot));
                    c.backward(x, &g, pg)
                }
                Layer::Linear(l) => {
                    slot -= 2;
                    let pg = grads.as_deref_mut().map(|gs| split_pair(gs, slot));
                    let gi = l.backward_slice(x.data(), g.data(), pg);
                    Tensor::new(x.shape().to_vec(), gi).expect("linear input shape")
                }
            };
        }
        g
    }

    /// Zeroed gradient buffers matching [`Network::params_mut`].
    pub fn zero_grads(&self) -> ParamGrads {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    /// Weight and bias slices of every parametrised layer, in order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv2d(c) => {
                    out.push(&c.weight[..]);
                    out.push(&c.bias[..]);
                }
                Layer::Linear(l) => {
                    out.push(&l.weight[..]);
                    out.push(&l.bias[..]);
                }
                Layer::Relu => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2d(c) => {
                    out.push(&mut c.weight[..]);
                    out.push(&mut c.bias[..]);
                }
                Layer::Linear(l) => {
                    out.push(&mut l.weight[..]);
                    out.push(&mut l.bias[..]);
                }
                Layer::Relu => {}
            }
        }
        out
    }
}

fn split_pair(grads: &mut [Vec<f64>], slot: usize) -> (&mut [f64], &mut [f64]) {
    let (head, tail) = grads.split_at_mut(slot + 1);
    (&mut head[slot][..], &mut tail[0][..])
}
