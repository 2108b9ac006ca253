use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{error::config, Result};

/// Highest spline degree the fixed-size evaluation buffers support.
pub const MAX_ORDER: usize = 7;

/// Uniform B-spline basis on `[grid_min, grid_max]`.
///
/// The knot vector has `G + 2k + 1` entries spaced by `h = (max - min) / G`,
/// with `k` extra knots on each side, so there are `G + k` basis functions and
/// they form a partition of unity everywhere inside the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    order: usize,
    intervals: usize,
    grid_min: f64,
    grid_max: f64,
    knots: Vec<f64>,
}

/// Non-zero basis values at one point: `values[i]` belongs to basis function
/// `start + i`, for `i in 0..=order`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalBasis {
    pub start: usize,
    pub values: [f64; MAX_ORDER + 1],
    /// d/dx of each value; zero when the input was clamped.
    pub derivs: [f64; MAX_ORDER + 1],
}

impl BSplineBasis {
    pub fn new(order: usize, intervals: usize, grid_min: f64, grid_max: f64) -> Result<Self> {
        if !(grid_min < grid_max) || !grid_min.is_finite() || !grid_max.is_finite() {
            return Err(config("degenerate spline grid: need grid_min < grid_max"));
        }
        if intervals == 0 {
            return Err(config("spline grid needs at least one interval"));
        }
        if order > MAX_ORDER {
            return Err(config("spline order above the supported maximum"));
        }
        let h = (grid_max - grid_min) / intervals as f64;
        let knots = (0..intervals + 2 * order + 1)
            .map(|i| grid_min + (i as f64 - order as f64) * h)
            .collect();
        Ok(Self {
            order,
            intervals,
            grid_min,
            grid_max,
            knots,
        })
    }

    #[inline]
    pub fn order(&self) -> usize {
        self.order
    }

    #[inline]
    pub fn intervals(&self) -> usize {
        self.intervals
    }

    #[inline]
    pub fn grid_min(&self) -> f64 {
        self.grid_min
    }

    #[inline]
    pub fn grid_max(&self) -> f64 {
        self.grid_max
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions, `G + k`.
    #[inline]
    pub fn len(&self) -> usize {
        self.intervals + self.order
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Support `[t_j, t_{j+k+1})` of basis function `j`.
    pub fn support(&self, j: usize) -> (f64, f64) {
        (self.knots[j], self.knots[j + self.order + 1])
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.grid_min, self.grid_max)
    }

    /// All `G + k` basis values at `x` (clamped into the grid first).
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let local = self.eval_local(x);
        let mut out = vec![0.0; self.len()];
        out[local.start..=local.start + self.order]
            .copy_from_slice(&local.values[..=self.order]);
        out
    }

    /// Non-zero values and their derivatives at `x`.
    ///
    /// Values come from the triangular Cox-de Boor scheme; derivatives use
    /// `B'_{j,k} = k/(t_{j+k}-t_j)·B_{j,k-1} - k/(t_{j+k+1}-t_{j+1})·B_{j+1,k-1}`.
    pub fn eval_local(&self, x: f64) -> LocalBasis {
        let k = self.order;
        let clamped = self.clamp(x);
        let inside = clamped == x;
        let h = (self.grid_max - self.grid_min) / self.intervals as f64;
        let cell = (((clamped - self.grid_min) / h) as usize).min(self.intervals - 1);
        // knot span index: t[span] <= x < t[span + 1]
        let span = cell + k;

        let mut n = [0.0f64; MAX_ORDER + 1];
        let mut left = [0.0f64; MAX_ORDER + 1];
        let mut right = [0.0f64; MAX_ORDER + 1];
        // lower-degree values at degree k-1, kept for the derivative
        let mut prev = [0.0f64; MAX_ORDER + 1];
        n[0] = 1.0;
        for d in 1..=k {
            if d == k {
                prev[..k].copy_from_slice(&n[..k]);
            }
            left[d] = clamped - self.knots[span + 1 - d];
            right[d] = self.knots[span + d] - clamped;
            let mut saved = 0.0;
            for r in 0..d {
                let tmp = n[r] / (right[r + 1] + left[d - r]);
                n[r] = saved + right[r + 1] * tmp;
                saved = left[d - r] * tmp;
            }
            n[d] = saved;
        }

        let mut derivs = [0.0f64; MAX_ORDER + 1];
        if k > 0 && inside {
            // prev[r] is B_{span-k+1+r, k-1} for r in 0..k
            let kf = k as f64;
            for i in 0..=k {
                let j = span - k + i;
                let lower_j = if i >= 1 { prev[i - 1] } else { 0.0 };
                let lower_j1 = if i < k { prev[i] } else { 0.0 };
                let a = kf / (self.knots[j + k] - self.knots[j]);
                let b = kf / (self.knots[j + k + 1] - self.knots[j + 1]);
                derivs[i] = a * lower_j - b * lower_j1;
            }
        }
        LocalBasis {
            start: span - k,
            values: n,
            derivs,
        }
    }
}

/// Basis values at `x`; see [`BSplineBasis::eval`].
pub fn basis_eval(basis: &BSplineBasis, x: f64) -> Vec<f64> {
    basis.eval(x)
}
