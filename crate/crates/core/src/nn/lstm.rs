//! LSTM and bidirectional LSTM with full backpropagation through time.
//!
//! Gate layout in the stacked weight matrices is `[input, forget, cell,
//! output]`. Recurrent weights are initialized orthogonally per gate block;
//! the forget-gate bias starts at 1.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::param::Parameterized;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    /// Input weights (4h, in_dim).
    pub w: Array2<f64>,
    /// Recurrent weights (4h, h).
    pub u: Array2<f64>,
    /// Bias (4h).
    pub b: Array1<f64>,
}

/// Orthonormalize the rows of a square block in place (modified
/// Gram-Schmidt).
fn orthogonalize_rows(block: &mut ndarray::ArrayViewMut2<f64>) {
    let n = block.nrows();
    for r in 0..n {
        for prev in 0..r {
            let dot = {
                let row = block.row(r);
                let prow = block.row(prev);
                row.dot(&prow)
            };
            let prow = block.row(prev).to_owned();
            let mut row = block.row_mut(r);
            row.scaled_add(-dot, &prow);
        }
        let norm = block.row(r).dot(&block.row(r)).sqrt();
        assert!(norm > 1e-12, "degenerate random matrix");
        block.row_mut(r).mapv_inplace(|v| v / norm);
    }
}

impl LstmParams {
    pub fn init(hidden: usize, input: usize, rng: &mut impl Rng) -> LstmParams {
        let std = 1.0 / (input.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let w = Array2::from_shape_fn((4 * hidden, input), |_| dist.sample(rng));
        let unit = Normal::new(0.0, 1.0).unwrap();
        let mut u = Array2::from_shape_fn((4 * hidden, hidden), |_| unit.sample(rng));
        for gate in 0..4 {
            let mut block = u.slice_mut(s![gate * hidden..(gate + 1) * hidden, ..]);
            orthogonalize_rows(&mut block);
        }
        let mut b = Array1::zeros(4 * hidden);
        b.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        LstmParams { w, u, b }
    }

    pub fn zeros_like(&self) -> LstmParams {
        LstmParams {
            w: Array2::zeros(self.w.raw_dim()),
            u: Array2::zeros(self.u.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.ncols()
    }
}

/// Per-step activations kept for the backward pass.
pub struct LstmCache {
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    c: Array2<f64>,
    tanh_c: Array2<f64>,
    h: Array2<f64>,
}

fn sigmoid_arr(x: ArrayView1<f64>) -> Array1<f64> {
    x.mapv(super::sigmoid)
}

/// Run one direction over the rows of `x` (n, in); returns hidden states
/// (n, h) and the cache.
pub fn lstm_forward(p: &LstmParams, x: ArrayView2<f64>) -> (Array2<f64>, LstmCache) {
    let n = x.nrows();
    let h = p.hidden();
    let mut cache = LstmCache {
        i: Array2::zeros((n, h)),
        f: Array2::zeros((n, h)),
        g: Array2::zeros((n, h)),
        o: Array2::zeros((n, h)),
        c: Array2::zeros((n, h)),
        tanh_c: Array2::zeros((n, h)),
        h: Array2::zeros((n, h)),
    };
    let mut h_prev = Array1::zeros(h);
    let mut c_prev: Array1<f64> = Array1::zeros(h);
    for t in 0..n {
        let z = p.w.dot(&x.row(t)) + p.u.dot(&h_prev) + &p.b;
        let i_t = sigmoid_arr(z.slice(s![0..h]));
        let f_t = sigmoid_arr(z.slice(s![h..2 * h]));
        let g_t = z.slice(s![2 * h..3 * h]).mapv(f64::tanh);
        let o_t = sigmoid_arr(z.slice(s![3 * h..4 * h]));
        let c_t = &f_t * &c_prev + &i_t * &g_t;
        let tanh_c_t = c_t.mapv(f64::tanh);
        let h_t = &o_t * &tanh_c_t;

        cache.i.row_mut(t).assign(&i_t);
        cache.f.row_mut(t).assign(&f_t);
        cache.g.row_mut(t).assign(&g_t);
        cache.o.row_mut(t).assign(&o_t);
        cache.c.row_mut(t).assign(&c_t);
        cache.tanh_c.row_mut(t).assign(&tanh_c_t);
        cache.h.row_mut(t).assign(&h_t);
        h_prev = h_t;
        c_prev = c_t;
    }
    (cache.h.clone(), cache)
}

/// Backward through time; accumulates into `grad` and returns dL/dx.
pub fn lstm_backward(
    p: &LstmParams,
    x: ArrayView2<f64>,
    cache: &LstmCache,
    d_h: ArrayView2<f64>,
    grad: &mut LstmParams,
) -> Array2<f64> {
    let n = x.nrows();
    let h = p.hidden();
    let mut dx = Array2::zeros((n, x.ncols()));
    let mut dh_next: Array1<f64> = Array1::zeros(h);
    let mut dc_next: Array1<f64> = Array1::zeros(h);

    for t in (0..n).rev() {
        let dh = &d_h.row(t) + &dh_next;
        let o_t = cache.o.row(t);
        let i_t = cache.i.row(t);
        let f_t = cache.f.row(t);
        let g_t = cache.g.row(t);
        let tanh_c_t = cache.tanh_c.row(t);

        let c_prev = if t == 0 {
            Array1::zeros(h)
        } else {
            cache.c.row(t - 1).to_owned()
        };
        let h_prev = if t == 0 {
            Array1::zeros(h)
        } else {
            cache.h.row(t - 1).to_owned()
        };

        let d_o = &dh * &tanh_c_t;
        let dc = &dh * &o_t * &tanh_c_t.mapv(|v| 1.0 - v * v) + &dc_next;
        let d_i = &dc * &g_t;
        let d_f = &dc * &c_prev;
        let d_g = &dc * &i_t;

        let mut dz = Array1::zeros(4 * h);
        dz.slice_mut(s![0..h])
            .assign(&(&d_i * &i_t.mapv(|v| v * (1.0 - v))));
        dz.slice_mut(s![h..2 * h])
            .assign(&(&d_f * &f_t.mapv(|v| v * (1.0 - v))));
        dz.slice_mut(s![2 * h..3 * h])
            .assign(&(&d_g * &g_t.mapv(|v| 1.0 - v * v)));
        dz.slice_mut(s![3 * h..4 * h])
            .assign(&(&d_o * &o_t.mapv(|v| v * (1.0 - v))));

        // grad.w += dz ⊗ x_t ; grad.u += dz ⊗ h_{t-1}
        let x_t = x.row(t);
        for (r, &dzr) in dz.iter().enumerate() {
            if dzr != 0.0 {
                grad.w.row_mut(r).scaled_add(dzr, &x_t);
                grad.u.row_mut(r).scaled_add(dzr, &h_prev);
            }
        }
        grad.b += &dz;

        dx.row_mut(t).assign(&p.w.t().dot(&dz));
        dh_next = p.u.t().dot(&dz);
        dc_next = &dc * &f_t;
    }
    dx
}

impl Parameterized for LstmParams {
    fn for_each_group(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("w", self.w.as_slice().unwrap());
        f("u", self.u.as_slice().unwrap());
        f("b", self.b.as_slice().unwrap());
    }
    fn for_each_group_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("w", self.w.as_slice_mut().unwrap());
        f("u", self.u.as_slice_mut().unwrap());
        f("b", self.b.as_slice_mut().unwrap());
    }
}

/// Bidirectional LSTM: hidden vectors are the concatenation of a forward and
/// a backward pass, each of size `hidden_dim / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiLstm {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

pub struct BiLstmCache {
    fwd: LstmCache,
    bwd: LstmCache,
    x_rev: Array2<f64>,
}

impl BiLstm {
    /// `hidden_dim` must be even; each direction gets half.
    pub fn init(hidden_dim: usize, input: usize, rng: &mut impl Rng) -> BiLstm {
        assert!(hidden_dim % 2 == 0, "bidirectional hidden size must be even");
        let half = hidden_dim / 2;
        BiLstm {
            fwd: LstmParams::init(half, input, rng),
            bwd: LstmParams::init(half, input, rng),
        }
    }

    pub fn zeros_like(&self) -> BiLstm {
        BiLstm {
            fwd: self.fwd.zeros_like(),
            bwd: self.bwd.zeros_like(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        2 * self.fwd.hidden()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, BiLstmCache) {
        let n = x.nrows();
        let (h_fwd, fwd_cache) = lstm_forward(&self.fwd, x);
        let mut x_rev = Array2::zeros(x.raw_dim());
        for t in 0..n {
            x_rev.row_mut(t).assign(&x.row(n - 1 - t));
        }
        let (h_bwd_rev, bwd_cache) = lstm_forward(&self.bwd, x_rev.view());
        let half = self.fwd.hidden();
        let mut out = Array2::zeros((n, 2 * half));
        for t in 0..n {
            out.slice_mut(s![t, 0..half]).assign(&h_fwd.row(t));
            out.slice_mut(s![t, half..2 * half])
                .assign(&h_bwd_rev.row(n - 1 - t));
        }
        (
            out,
            BiLstmCache {
                fwd: fwd_cache,
                bwd: bwd_cache,
                x_rev,
            },
        )
    }

    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        cache: &BiLstmCache,
        d_h: ArrayView2<f64>,
        grad: &mut BiLstm,
    ) -> Array2<f64> {
        let n = x.nrows();
        let half = self.fwd.hidden();
        let d_fwd = d_h.slice(s![.., 0..half]);
        let mut d_bwd_rev = Array2::zeros((n, half));
        for t in 0..n {
            d_bwd_rev.row_mut(t).assign(&d_h.slice(s![n - 1 - t, half..2 * half]));
        }
        let dx_fwd = lstm_backward(&self.fwd, x, &cache.fwd, d_fwd, &mut grad.fwd);
        let dx_bwd_rev = lstm_backward(
            &self.bwd,
            cache.x_rev.view(),
            &cache.bwd,
            d_bwd_rev.view(),
            &mut grad.bwd,
        );
        let mut dx = dx_fwd;
        for t in 0..n {
            let mut row = dx.row_mut(t);
            row += &dx_bwd_rev.row(n - 1 - t);
        }
        dx
    }
}

impl Parameterized for BiLstm {
    fn for_each_group(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("fwd.w", self.fwd.w.as_slice().unwrap());
        f("fwd.u", self.fwd.u.as_slice().unwrap());
        f("fwd.b", self.fwd.b.as_slice().unwrap());
        f("bwd.w", self.bwd.w.as_slice().unwrap());
        f("bwd.u", self.bwd.u.as_slice().unwrap());
        f("bwd.b", self.bwd.b.as_slice().unwrap());
    }
    fn for_each_group_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("fwd.w", self.fwd.w.as_slice_mut().unwrap());
        f("fwd.u", self.fwd.u.as_slice_mut().unwrap());
        f("fwd.b", self.fwd.b.as_slice_mut().unwrap());
        f("bwd.w", self.bwd.w.as_slice_mut().unwrap());
        f("bwd.u", self.bwd.u.as_slice_mut().unwrap());
        f("bwd.b", self.bwd.b.as_slice_mut().unwrap());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sq_loss(h: &Array2<f64>) -> f64 {
        h.iter().map(|v| v * v).sum()
    }

    #[test]
    fn recurrent_blocks_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = LstmParams::init(6, 3, &mut rng);
        for gate in 0..4 {
            let block = p.u.slice(s![gate * 6..(gate + 1) * 6, ..]);
            let gram = block.dot(&block.t());
            for i in 0..6 {
                for j in 0..6 {
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert!((gram[[i, j]] - expected).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn output_shape_matches_input_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bi = BiLstm::init(8, 5, &mut rng);
        for n in [1usize, 2, 7] {
            let x = Array2::from_shape_fn((n, 5), |_| rng.gen_range(-1.0..1.0));
            let (h, _) = bi.forward(x.view());
            assert_eq!(h.shape(), &[n, 8]);
            assert!(h.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn bidirectional_rows_depend_on_distant_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bi = BiLstm::init(8, 4, &mut rng);
        let mut x = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0));
        let (h1, _) = bi.forward(x.view());
        // perturb the last token; the first row must change (backward pass)
        x[[5, 0]] += 1.0;
        let (h2, _) = bi.forward(x.view());
        let diff: f64 = (&h1.row(0) - &h2.row(0)).mapv(f64::abs).sum();
        assert!(diff > 1e-9);
    }

    #[test]
    fn unidirectional_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = LstmParams::init(3, 2, &mut rng);
        let x = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let (h, cache) = lstm_forward(&p, x.view());
        let dh = h.mapv(|v| 2.0 * v);
        let mut grad = p.zeros_like();
        lstm_backward(&p, x.view(), &cache, dh.view(), &mut grad);
        let report = finite_difference_check(
            &mut p,
            &grad,
            |p| sq_loss(&lstm_forward(p, x.view()).0),
            1e-4,
            500,
            &mut rng,
        );
        assert!(report.passes(1e-3), "worst {} in {}", report.worst_rel_err, report.worst_group);
    }

    #[test]
    fn bidirectional_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut bi = BiLstm::init(6, 3, &mut rng);
        let x = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
        let (h, cache) = bi.forward(x.view());
        let dh = h.mapv(|v| 2.0 * v);
        let mut grad = bi.zeros_like();
        bi.backward(x.view(), &cache, dh.view(), &mut grad);
        let report = finite_difference_check(
            &mut bi,
            &grad,
            |p| sq_loss(&p.forward(x.view()).0),
            1e-4,
            500,
            &mut rng,
        );
        assert!(report.passes(1e-3), "worst {} in {}", report.worst_rel_err, report.worst_group);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bi = BiLstm::init(4, 2, &mut rng);
        let mut x = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0));
        let (h, cache) = bi.forward(x.view());
        let dh = h.mapv(|v| 2.0 * v);
        let mut grad = bi.zeros_like();
        let dx = bi.backward(x.view(), &cache, dh.view(), &mut grad);
        let step = 1e-5;
        for idx in [(0usize, 0usize), (1, 1), (2, 0)] {
            let orig = x[idx];
            x[idx] = orig + step;
            let up = sq_loss(&bi.forward(x.view()).0);
            x[idx] = orig - step;
            let down = sq_loss(&bi.forward(x.view()).0);
            x[idx] = orig;
            let fd = (up - down) / (2.0 * step);
            assert!((fd - dx[idx]).abs() / fd.abs().max(1.0) < 1e-4);
        }
    }
}
