//! Affine layer `y = W x + b` with explicit backward.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::param::Parameterized;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// (out_dim, in_dim)
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    /// Scaled-normal initialization, std = 1/sqrt(in_dim).
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Linear {
        let std = 1.0 / (in_dim.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        Linear {
            w: Array2::from_shape_fn((out_dim, in_dim), |_| dist.sample(rng)),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Linear {
        Linear {
            w: Array2::zeros((out_dim, in_dim)),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn zeros_like(&self) -> Linear {
        Linear {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward_vec(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.w.dot(&x) + &self.b
    }

    /// Rows of `x` are independent inputs: returns (n, out_dim).
    pub fn forward_mat(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Accumulate gradients for a vector input; returns dL/dx.
    pub fn backward_vec(
        &self,
        x: ArrayView1<f64>,
        dy: ArrayView1<f64>,
        grad: &mut Linear,
    ) -> Array1<f64> {
        for (i, &dyi) in dy.iter().enumerate() {
            grad.b[i] += dyi;
            for (j, &xj) in x.iter().enumerate() {
                grad.w[[i, j]] += dyi * xj;
            }
        }
        self.w.t().dot(&dy)
    }

    /// Accumulate gradients for a matrix of row inputs; returns dL/dX.
    pub fn backward_mat(
        &self,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grad: &mut Linear,
    ) -> Array2<f64> {
        grad.w += &dy.t().dot(&x);
        grad.b += &dy.sum_axis(ndarray::Axis(0));
        dy.dot(&self.w)
    }
}

impl Parameterized for Linear {
    fn for_each_group(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("w", self.w.as_slice().unwrap());
        f("b", self.b.as_slice().unwrap());
    }
    fn for_each_group_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("w", self.w.as_slice_mut().unwrap());
        f("b", self.b.as_slice_mut().unwrap());
    }
}
