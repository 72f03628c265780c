//! Fully connected ReLU networks with an explicit reverse pass.
//!
//! Both the gaussian decoder and the blend-weight refinement field are plain
//! MLPs: `depth` hidden layers of `width` units with ReLU, followed by a
//! linear output layer. Inputs are batched row-wise (`N x in_dim`).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out_dim x in_dim`, row-major.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { weight: Array2::zeros((out_dim, in_dim)), bias: Array1::zeros(out_dim) }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations kept from a forward pass for the reverse pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
}

/// Gradients with the same layout as [`Mlp::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradient {
    pub layers: Vec<Dense>,
}

impl MlpGradient {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self { layers: net.layers.iter().map(|l| Dense::zeros(l.in_dim(), l.out_dim())).collect() }
    }

    pub fn add_assign(&mut self, other: &MlpGradient) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.iter().map(|v| v * v).sum::<f64>() + l.bias.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

impl Mlp {
    /// `depth` hidden layers of `width` units. Zero weights and biases.
    pub fn zeros(in_dim: usize, depth: usize, width: usize, out_dim: usize) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut prev = in_dim;
        for _ in 0..depth {
            layers.push(Dense::zeros(prev, width));
            prev = width;
        }
        layers.push(Dense::zeros(prev, out_dim));
        Self { layers }
    }

    /// He-uniform hidden layers; the output layer is scaled by `out_scale`
    /// (zero gives a network whose output is exactly its output bias).
    pub fn init<R: Rng>(in_dim: usize, depth: usize, width: usize, out_dim: usize, out_scale: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(in_dim, depth, width, out_dim);
        let n = net.layers.len();
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let bound = (6.0 / layer.in_dim() as f64).sqrt();
            let scale = if i + 1 == n { out_scale } else { 1.0 };
            if scale != 0.0 {
                layer.weight.mapv_inplace(|_| rng.gen_range(-bound..bound) * scale);
            }
        }
        net
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(Dense::out_dim).unwrap_or(0)
    }

    /// Number of hidden layers.
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    /// Hidden width (input width when there are no hidden layers).
    pub fn width(&self) -> usize {
        if self.layers.len() > 1 {
            self.layers[0].out_dim()
        } else {
            self.in_dim()
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Config(format!("network expects {} inputs, got {}", self.in_dim(), x.ncols())));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let n = self.layers.len();
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            if i + 1 < n {
                z.mapv_inplace(|v| v.max(0.0));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        self.check_input(&x)?;
        let n = self.layers.len();
        let mut cache = MlpCache { inputs: Vec::with_capacity(n), pre: Vec::with_capacity(n - 1) };
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            cache.inputs.push(h);
            if i + 1 < n {
                cache.pre.push(z.clone());
                z.mapv_inplace(|v| v.max(0.0));
            }
            h = z;
        }
        Ok((h, cache))
    }

    /// Reverse pass. Returns parameter gradients summed over the batch and the
    /// per-row input gradients.
    pub fn backward(&self, cache: &MlpCache, upstream: ArrayView2<f64>) -> (MlpGradient, Array2<f64>) {
        let n = self.layers.len();
        let mut grads = Vec::with_capacity(n);
        let mut g = upstream.to_owned();
        for i in (0..n).rev() {
            if i + 1 < n {
                let pre = &cache.pre[i];
                g.zip_mut_with(pre, |gv, &z| {
                    if z <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            let input = &cache.inputs[i];
            let weight = g.t().dot(input);
            let bias = g.sum_axis(Axis(0));
            let next = g.dot(&self.layers[i].weight);
            grads.push(Dense { weight, bias });
            g = next;
        }
        grads.reverse();
        (MlpGradient { layers: grads }, g)
    }

    /// Flattened view of every parameter, layer by layer (weights then bias).
    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }
}

impl MlpGradient {
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }
}
