use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::basis::{BSplineBasis, LocalBasis};
use crate::numerics::{sigmoid, Matrix, Rng};
use crate::{Error, Result};

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// One learnable activation `φ(x) = w_b·silu(x) + w_s·Σ_j c_j·B_j(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KanEdge {
    pub coefs: Vec<f64>,
    pub base_weight: f64,
    pub spline_weight: f64,
}

impl KanEdge {
    pub fn activate(&self, basis: &BSplineBasis, x: f64) -> f64 {
        let local = basis.eval_local(x);
        self.base_weight * silu(x)
            + self.spline_weight * spline_sum(&self.coefs, &local, basis.order())
    }
}

pub fn edge_activate(edge: &KanEdge, basis: &BSplineBasis, x: f64) -> f64 {
    edge.activate(basis, x)
}

#[inline]
fn spline_sum(coefs: &[f64], local: &LocalBasis, order: usize) -> f64 {
    let c = &coefs[local.start..=local.start + order];
    c.iter().zip(&local.values[..=order]).map(|(c, b)| c * b).sum()
}

#[inline]
fn spline_deriv(coefs: &[f64], local: &LocalBasis, order: usize) -> f64 {
    let c = &coefs[local.start..=local.start + order];
    c.iter().zip(&local.derivs[..=order]).map(|(c, b)| c * b).sum()
}

/// Dense layer of `n_in × n_out` spline edges sharing one basis.
///
/// Edge `(p, q)` connects input `p` to output `q` and lives at row
/// `p·n_out + q` of `coefs`; `base_weight` and `spline_weight` are `n_in × n_out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KanLayer {
    n_in: usize,
    n_out: usize,
    basis: BSplineBasis,
    pub coefs: Matrix,
    pub base_weight: Matrix,
    pub spline_weight: Matrix,
}

/// Per-input quantities saved by a forward pass.
#[derive(Clone, Debug)]
pub struct LayerCache {
    input: Vec<f64>,
    local: Vec<LocalBasis>,
}

/// Gradients matching the parameter layout of a [`KanLayer`].
#[derive(Clone, Debug, PartialEq)]
pub struct KanLayerGrads {
    pub coefs: Matrix,
    pub base_weight: Matrix,
    pub spline_weight: Matrix,
}

impl KanLayerGrads {
    pub fn zeros_like(layer: &KanLayer) -> Self {
        Self {
            coefs: Matrix::zeros(layer.coefs.rows(), layer.coefs.cols()),
            base_weight: Matrix::zeros(layer.n_in, layer.n_out),
            spline_weight: Matrix::zeros(layer.n_in, layer.n_out),
        }
    }
}

impl KanLayer {
    /// Random init: `w_b ~ N(0, (1/√n_in)²)`, `w_s = 1`, `c_j ~ N(0, 0.1²)`.
    pub fn new(n_in: usize, n_out: usize, basis: BSplineBasis, rng: &mut Rng) -> Self {
        let base_std = 1.0 / libm::sqrt(n_in.max(1) as f64);
        let base_weight = Matrix::gaussian(n_in, n_out, base_std, rng);
        let spline_weight = Matrix::filled(n_in, n_out, 1.0);
        let coefs = Matrix::gaussian(n_in * n_out, basis.len(), 0.1, rng);
        Self {
            n_in,
            n_out,
            basis,
            coefs,
            base_weight,
            spline_weight,
        }
    }

    /// All-zero layer: every edge outputs zero.
    pub fn zeros(n_in: usize, n_out: usize, basis: BSplineBasis) -> Self {
        let nb = basis.len();
        Self {
            n_in,
            n_out,
            basis,
            coefs: Matrix::zeros(n_in * n_out, nb),
            base_weight: Matrix::zeros(n_in, n_out),
            spline_weight: Matrix::zeros(n_in, n_out),
        }
    }

    pub(crate) fn from_parts(
        basis: BSplineBasis,
        coefs: Matrix,
        base_weight: Matrix,
        spline_weight: Matrix,
    ) -> Self {
        Self {
            n_in: base_weight.rows(),
            n_out: base_weight.cols(),
            basis,
            coefs,
            base_weight,
            spline_weight,
        }
    }

    #[inline]
    pub fn n_in(&self) -> usize {
        self.n_in
    }

    #[inline]
    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn basis(&self) -> &BSplineBasis {
        &self.basis
    }

    pub fn edge_count(&self) -> usize {
        self.n_in * self.n_out
    }

    pub fn edge(&self, p: usize, q: usize) -> KanEdge {
        KanEdge {
            coefs: self.coefs.row(p * self.n_out + q).to_vec(),
            base_weight: self.base_weight.get(p, q),
            spline_weight: self.spline_weight.get(p, q),
        }
    }

    pub fn set_edge(&mut self, p: usize, q: usize, edge: &KanEdge) {
        self.coefs
            .row_mut(p * self.n_out + q)
            .copy_from_slice(&edge.coefs);
        self.base_weight.set(p, q, edge.base_weight);
        self.spline_weight.set(p, q, edge.spline_weight);
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input)?.0)
    }

    /// `out[q] = Σ_p φ_{p,q}(x_p)`.
    pub fn forward_cached(&self, input: &[f64]) -> Result<(Vec<f64>, LayerCache)> {
        if input.len() != self.n_in {
            return Err(Error::Shape {
                op: "kan_layer_forward",
                left: (1, input.len()),
                right: (self.n_in, self.n_out),
            });
        }
        let k = self.basis.order();
        let mut out = vec![0.0; self.n_out];
        let mut local = Vec::with_capacity(self.n_in);
        for (p, &x) in input.iter().enumerate() {
            let lb = self.basis.eval_local(x);
            let s = silu(x);
            let wb = self.base_weight.row(p);
            let ws = self.spline_weight.row(p);
            for q in 0..self.n_out {
                let coefs = self.coefs.row(p * self.n_out + q);
                out[q] += wb[q] * s + ws[q] * spline_sum(coefs, &lb, k);
            }
            local.push(lb);
        }
        Ok((
            out,
            LayerCache {
                input: input.to_vec(),
                local,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns `∂L/∂input`.
    pub fn backward(
        &self,
        cache: &LayerCache,
        upstream: &[f64],
        grads: &mut KanLayerGrads,
    ) -> Result<Vec<f64>> {
        if cache.input.len() != self.n_in || cache.local.len() != self.n_in {
            return Err(Error::State("layer cache does not belong to this layer"));
        }
        if upstream.len() != self.n_out {
            return Err(Error::Shape {
                op: "kan_layer_backward",
                left: (1, upstream.len()),
                right: (self.n_in, self.n_out),
            });
        }
        let k = self.basis.order();
        let mut dx = vec![0.0; self.n_in];
        for p in 0..self.n_in {
            let x = cache.input[p];
            let lb = &cache.local[p];
            let s = silu(x);
            let ds = silu_prime(x);
            let mut acc = 0.0;
            for (q, &g) in upstream.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let e = p * self.n_out + q;
                let coefs = self.coefs.row(e);
                let wb = self.base_weight.get(p, q);
                let ws = self.spline_weight.get(p, q);
                let spline = spline_sum(coefs, lb, k);
                grads.base_weight.as_mut_slice()[e] += g * s;
                grads.spline_weight.as_mut_slice()[e] += g * spline;
                let gc = &mut grads.coefs.row_mut(e)[lb.start..=lb.start + k];
                for (dst, b) in gc.iter_mut().zip(&lb.values[..=k]) {
                    *dst += g * ws * b;
                }
                acc += g * (wb * ds + ws * spline_deriv(coefs, lb, k));
            }
            dx[p] = acc;
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis() -> BSplineBasis {
        BSplineBasis::new(3, 8, -3.0, 3.0).unwrap()
    }

    #[test]
    fn zero_spline_unit_base_at_origin() {
        let edge = KanEdge {
            coefs: vec![0.0; 11],
            base_weight: 1.0,
            spline_weight: 1.0,
        };
        assert_eq!(edge_activate(&edge, &basis(), 0.0), 0.0);
    }

    #[test]
    fn unit_coefficients_give_one() {
        let edge = KanEdge {
            coefs: vec![1.0; 11],
            base_weight: 0.0,
            spline_weight: 1.0,
        };
        for &x in &[-2.9, -1.0, 0.0, 0.4, 2.5] {
            assert!((edge_activate(&edge, &basis(), x) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_edge_matches_dense_dot_product() {
        let b = basis();
        let mut rng = Rng::new(4);
        let edge = KanEdge {
            coefs: (0..11).map(|_| rng.gaussian()).collect(),
            base_weight: rng.gaussian(),
            spline_weight: rng.gaussian(),
        };
        let x = 1.3;
        let dense: f64 = b.eval(x).iter().zip(&edge.coefs).map(|(a, c)| a * c).sum();
        let expected = edge.base_weight * x / (1.0 + (-x).exp()) + edge.spline_weight * dense;
        assert!((edge_activate(&edge, &b, x) - expected).abs() < 1e-12);
    }

    #[test]
    fn coefficient_change_is_local() {
        let b = basis();
        let mut rng = Rng::new(8);
        let edge = KanEdge {
            coefs: (0..11).map(|_| rng.gaussian()).collect(),
            base_weight: 0.3,
            spline_weight: 0.8,
        };
        for j in 0..11 {
            let mut bumped = edge.clone();
            bumped.coefs[j] += 1.0;
            let (lo, hi) = b.support(j);
            for i in 0..600 {
                let x = -3.0 + 6.0 * i as f64 / 600.0;
                let diff = (bumped.activate(&b, x) - edge.activate(&b, x)).abs();
                if x < lo || x >= hi {
                    assert_eq!(diff, 0.0, "j={j} x={x}");
                }
            }
        }
    }

    #[test]
    fn spline_weight_gradient_is_spline_value() {
        let b = basis();
        let mut rng = Rng::new(10);
        let layer = KanLayer::new(1, 1, b.clone(), &mut rng);
        let x = 0.37;
        let (_, cache) = layer.forward_cached(&[x]).unwrap();
        let mut g = KanLayerGrads::zeros_like(&layer);
        layer.backward(&cache, &[2.5], &mut g).unwrap();
        let spline: f64 = b.eval(x).iter().zip(layer.coefs.row(0)).map(|(a, c)| a * c).sum();
        assert!((g.spline_weight.get(0, 0) - 2.5 * spline).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = Rng::new(12);
        let layer = KanLayer::new(3, 2, basis(), &mut rng);
        let (_, cache) = layer.forward_cached(&[0.1, -0.5, 2.0]).unwrap();
        let mut g = KanLayerGrads::zeros_like(&layer);
        let dx = layer.backward(&cache, &[0.0, 0.0], &mut g).unwrap();
        assert_eq!(g, KanLayerGrads::zeros_like(&layer));
        assert_eq!(dx, vec![0.0; 3]);
    }
}
