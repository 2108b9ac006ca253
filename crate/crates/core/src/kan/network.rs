use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::basis::BSplineBasis;
use super::layer::{KanLayer, KanLayerGrads, LayerCache};
use crate::numerics::{Matrix, Rng};
use crate::{error::config, Error, Result};

/// Spline settings shared by every layer of a network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplineConfig {
    pub order: usize,
    pub intervals: usize,
    pub grid_min: f64,
    pub grid_max: f64,
}

impl Default for SplineConfig {
    /// Cubic splines on 8 intervals over the fixed grid [-3, 3].
    fn default() -> Self {
        Self {
            order: 3,
            intervals: 8,
            grid_min: -3.0,
            grid_max: 3.0,
        }
    }
}

impl SplineConfig {
    pub fn basis(&self) -> Result<BSplineBasis> {
        BSplineBasis::new(self.order, self.intervals, self.grid_min, self.grid_max)
    }
}

/// Stack of KAN layers; `layers[i].n_out == layers[i + 1].n_in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KanNetwork {
    layers: Vec<KanLayer>,
}

/// Everything a backward pass needs from one forward pass.
#[derive(Clone, Debug, Default)]
pub struct KanTrace {
    caches: Vec<LayerCache>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KanGrads {
    pub layers: Vec<KanLayerGrads>,
}

impl KanGrads {
    pub fn zeros_like(net: &KanNetwork) -> Self {
        Self {
            layers: net.layers.iter().map(KanLayerGrads::zeros_like).collect(),
        }
    }

    pub fn matrices(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|g| [&g.coefs, &g.base_weight, &g.spline_weight])
            .collect()
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|g| [&mut g.coefs, &mut g.base_weight, &mut g.spline_weight])
            .collect()
    }

    pub fn scale(&mut self, s: f64) {
        self.matrices_mut().into_iter().for_each(|m| m.scale(s));
    }
}

impl KanNetwork {
    /// Randomly initialised network with layer widths `dims` (at least two entries).
    pub fn new(dims: &[usize], spline: SplineConfig, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(config("KAN needs at least an input and an output width, all non-zero"));
        }
        let basis = spline.basis()?;
        let layers = dims
            .windows(2)
            .map(|w| KanLayer::new(w[0], w[1], basis.clone(), rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<KanLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(config("KAN needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].n_out() != pair[1].n_in() {
                return Err(Error::Shape {
                    op: "kan_chain",
                    left: (pair[0].n_in(), pair[0].n_out()),
                    right: (pair[1].n_in(), pair[1].n_out()),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[KanLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [KanLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.coefs.len() + l.base_weight.len() + l.spline_weight.len())
            .sum()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|l| [&l.coefs, &l.base_weight, &l.spline_weight])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.coefs, &mut l.base_weight, &mut l.spline_weight])
            .collect()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_traced(input)?.0)
    }

    pub fn forward_traced(&self, input: &[f64]) -> Result<(Vec<f64>, KanTrace)> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape {
                op: "kan_forward",
                left: (1, input.len()),
                right: (self.input_dim(), self.output_dim()),
            });
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        for layer in &self.layers {
            let (y, cache) = layer.forward_cached(&x)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, KanTrace { caches }))
    }

    /// Row-wise forward over a `T × input_dim` matrix.
    pub fn forward_rows(&self, input: &Matrix) -> Result<(Matrix, Vec<KanTrace>)> {
        let mut out = Matrix::zeros(input.rows(), self.output_dim());
        let mut traces = Vec::with_capacity(input.rows());
        for r in 0..input.rows() {
            let (y, t) = self.forward_traced(input.row(r))?;
            out.row_mut(r).copy_from_slice(&y);
            traces.push(t);
        }
        Ok((out, traces))
    }

    /// Accumulates parameter gradients and returns `∂L/∂input`.
    pub fn backward(&self, trace: &KanTrace, upstream: &[f64], grads: &mut KanGrads) -> Result<Vec<f64>> {
        if trace.caches.len() != self.layers.len() {
            return Err(Error::State("backward called without a matching forward pass"));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::State("gradient buffer does not match the network"));
        }
        let mut g = upstream.to_vec();
        for ((layer, cache), lg) in self
            .layers
            .iter()
            .zip(&trace.caches)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            g = layer.backward(cache, &g, lg)?;
        }
        Ok(g)
    }
}

/// Output of one network evaluation; see [`KanNetwork::forward`].
pub fn kan_forward(net: &KanNetwork, input: &[f64]) -> Result<Vec<f64>> {
    net.forward(input)
}

/// Gradients of `upstream · net(input)` with respect to every parameter and the input.
pub fn kan_backward(
    net: &KanNetwork,
    trace: &KanTrace,
    upstream: &[f64],
) -> Result<(KanGrads, Vec<f64>)> {
    let mut grads = KanGrads::zeros_like(net);
    let dx = net.backward(trace, upstream, &mut grads)?;
    Ok((grads, dx))
}
