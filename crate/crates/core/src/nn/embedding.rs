//! Lookup-table embedding with sparse gradient accumulation.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::param::Parameterized;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    /// (table_size, dim)
    pub table: Array2<f64>,
}

impl Embedding {
    /// Uniform(-0.1, 0.1) initialization.
    pub fn init(size: usize, dim: usize, rng: &mut impl Rng) -> Embedding {
        Embedding {
            table: Array2::from_shape_fn((size, dim), |_| rng.gen_range(-0.1..0.1)),
        }
    }

    pub fn zeros_like(&self) -> Embedding {
        Embedding {
            table: Array2::zeros(self.table.raw_dim()),
        }
    }

    pub fn size(&self) -> usize {
        self.table.nrows()
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn row(&self, id: usize) -> Array1<f64> {
        self.table.row(id).to_owned()
    }

    /// Stack rows `ids` into an (n, dim) matrix.
    pub fn forward(&self, ids: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((ids.len(), self.dim()));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&self.table.row(id));
        }
        out
    }

    /// Accumulate output gradients back into the looked-up rows. Rows that
    /// were never looked up receive no gradient.
    pub fn backward(&self, ids: &[usize], dy: ArrayView2<f64>, grad: &mut Embedding) {
        for (i, &id) in ids.iter().enumerate() {
            let mut row = grad.table.row_mut(id);
            row += &dy.row(i);
        }
    }

    pub fn backward_row(&self, id: usize, dy: ndarray::ArrayView1<f64>, grad: &mut Embedding) {
        let mut row = grad.table.row_mut(id);
        row += &dy;
    }
}

impl Parameterized for Embedding {
    fn for_each_group(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("table", self.table.as_slice().unwrap());
    }
    fn for_each_group_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("table", self.table.as_slice_mut().unwrap());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_stacks_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb = Embedding::init(5, 3, &mut rng);
        let out = emb.forward(&[2, 2, 4]);
        assert_eq!(out.shape(), &[3, 3]);
        assert_eq!(out.row(0), emb.table.row(2));
        assert_eq!(out.row(1), emb.table.row(2));
        assert_eq!(out.row(2), emb.table.row(4));
    }

    #[test]
    fn untouched_rows_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb = Embedding::init(4, 2, &mut rng);
        let ids = [1usize, 1, 3];
        let dy = Array2::from_elem((3, 2), 1.0);
        let mut grad = emb.zeros_like();
        emb.backward(&ids, dy.view(), &mut grad);
        assert_eq!(grad.table.row(0).sum(), 0.0);
        assert_eq!(grad.table.row(2).sum(), 0.0);
        assert_eq!(grad.table.row(1), ndarray::array![2.0, 2.0]); // looked up twice
        assert_eq!(grad.table.row(3), ndarray::array![1.0, 1.0]);
    }

    #[test]
    fn init_range_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let emb = Embedding::init(50, 8, &mut rng);
        assert!(emb.table.iter().all(|v| v.abs() < 0.1));
    }
}
