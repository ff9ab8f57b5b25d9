//! Multi-head self-attention encoder blocks (post-norm, tanh feed-forward).

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linear::Linear;
use super::param::Parameterized;
use super::softmax_inplace;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayerParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
}

impl AttentionLayerParams {
    fn init(hidden: usize, ff_dim: usize, rng: &mut impl Rng) -> AttentionLayerParams {
        AttentionLayerParams {
            wq: Linear::init(hidden, hidden, rng),
            wk: Linear::init(hidden, hidden, rng),
            wv: Linear::init(hidden, hidden, rng),
            wo: Linear::init(hidden, hidden, rng),
            ln1_gamma: Array1::ones(hidden),
            ln1_beta: Array1::zeros(hidden),
            ff1: Linear::init(ff_dim, hidden, rng),
            ff2: Linear::init(hidden, ff_dim, rng),
            ln2_gamma: Array1::ones(hidden),
            ln2_beta: Array1::zeros(hidden),
        }
    }

    fn zeros_like(&self) -> AttentionLayerParams {
        AttentionLayerParams {
            wq: self.wq.zeros_like(),
            wk: self.wk.zeros_like(),
            wv: self.wv.zeros_like(),
            wo: self.wo.zeros_like(),
            ln1_gamma: Array1::zeros(self.ln1_gamma.raw_dim()),
            ln1_beta: Array1::zeros(self.ln1_beta.raw_dim()),
            ff1: self.ff1.zeros_like(),
            ff2: self.ff2.zeros_like(),
            ln2_gamma: Array1::zeros(self.ln2_gamma.raw_dim()),
            ln2_beta: Array1::zeros(self.ln2_beta.raw_dim()),
        }
    }
}

struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(
    x: ArrayView2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let n = x.nrows();
    let d = x.ncols();
    let mut out = Array2::zeros((n, d));
    let mut xhat = Array2::zeros((n, d));
    let mut inv_std = Array1::zeros(n);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.mean().unwrap();
        let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = istd;
        for c in 0..d {
            let h = (row[c] - mean) * istd;
            xhat[[r, c]] = h;
            out[[r, c]] = gamma[c] * h + beta[c];
        }
    }
    (out, LayerNormCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: ArrayView2<f64>,
    cache: &LayerNormCache,
    gamma: &Array1<f64>,
    d_gamma: &mut Array1<f64>,
    d_beta: &mut Array1<f64>,
) -> Array2<f64> {
    let n = dy.nrows();
    let d = dy.ncols();
    let mut dx = Array2::zeros((n, d));
    for r in 0..n {
        let xhat = cache.xhat.row(r);
        let dyr = dy.row(r);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..d {
            let dxhat = dyr[c] * gamma[c];
            d_gamma[c] += dyr[c] * xhat[c];
            d_beta[c] += dyr[c];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat[c];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for c in 0..d {
            let dxhat = dyr[c] * gamma[c];
            dx[[r, c]] = cache.inv_std[r] * (dxhat - mean_dxhat - xhat[c] * mean_dxhat_xhat);
        }
    }
    dx
}

struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    heads_out: Array2<f64>,
    ln1: LayerNormCache,
    y1: Array2<f64>,
    ff_hidden: Array2<f64>,
    ln2: LayerNormCache,
}

pub struct AttentionCache {
    layers: Vec<LayerCache>,
}

/// Stack of identical self-attention blocks over (n, hidden) inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionEncoder {
    pub layers: Vec<AttentionLayerParams>,
    pub heads: usize,
}

impl AttentionEncoder {
    pub fn init(hidden: usize, layers: usize, heads: usize, rng: &mut impl Rng) -> AttentionEncoder {
        assert!(hidden % heads == 0, "hidden size must divide into heads");
        let ff_dim = 2 * hidden;
        AttentionEncoder {
            layers: (0..layers)
                .map(|_| AttentionLayerParams::init(hidden, ff_dim, rng))
                .collect(),
            heads,
        }
    }

    pub fn zeros_like(&self) -> AttentionEncoder {
        AttentionEncoder {
            layers: self.layers.iter().map(|l| l.zeros_like()).collect(),
            heads: self.heads,
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, AttentionCache) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_owned();
        for layer in &self.layers {
            let (out, cache) = self.layer_forward(layer, cur.view());
            caches.push(cache);
            cur = out;
        }
        (cur, AttentionCache { layers: caches })
    }

    fn layer_forward(
        &self,
        p: &AttentionLayerParams,
        x: ArrayView2<f64>,
    ) -> (Array2<f64>, LayerCache) {
        let n = x.nrows();
        let hidden = x.ncols();
        let dk = hidden / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();

        let q = p.wq.forward_mat(x);
        let k = p.wk.forward_mat(x);
        let v = p.wv.forward_mat(x);

        let mut heads_out = Array2::zeros((n, hidden));
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|v| v * scale);
            for mut row in scores.rows_mut() {
                softmax_inplace(row.as_slice_mut().unwrap());
            }
            let oh = scores.dot(&vh);
            heads_out.slice_mut(cols).assign(&oh);
            attn.push(scores);
        }
        let proj = p.wo.forward_mat(heads_out.view());
        let r1 = &proj + &x;
        let (y1, ln1) = layer_norm(r1.view(), &p.ln1_gamma, &p.ln1_beta);

        let ff_hidden = p.ff1.forward_mat(y1.view()).mapv(f64::tanh);
        let ff_out = p.ff2.forward_mat(ff_hidden.view());
        let r2 = &ff_out + &y1;
        let (y2, ln2) = layer_norm(r2.view(), &p.ln2_gamma, &p.ln2_beta);

        (
            y2,
            LayerCache {
                x: x.to_owned(),
                q,
                k,
                v,
                attn,
                heads_out,
                ln1,
                y1,
                ff_hidden,
                ln2,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &AttentionCache,
        d_out: ArrayView2<f64>,
        grad: &mut AttentionEncoder,
    ) -> Array2<f64> {
        let mut d = d_out.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            d = self.layer_backward(layer, &cache.layers[i], d.view(), &mut grad.layers[i]);
        }
        d
    }

    fn layer_backward(
        &self,
        p: &AttentionLayerParams,
        cache: &LayerCache,
        d_y2: ArrayView2<f64>,
        grad: &mut AttentionLayerParams,
    ) -> Array2<f64> {
        let n = cache.x.nrows();
        let hidden = cache.x.ncols();
        let dk = hidden / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();

        let d_r2 = layer_norm_backward(
            d_y2,
            &cache.ln2,
            &p.ln2_gamma,
            &mut grad.ln2_gamma,
            &mut grad.ln2_beta,
        );
        // r2 = ff2(tanh(ff1(y1))) + y1
        let d_ff_out = d_r2.view();
        let d_ff_hidden_post = p
            .ff2
            .backward_mat(cache.ff_hidden.view(), d_ff_out, &mut grad.ff2);
        let d_ff_hidden = &d_ff_hidden_post * &cache.ff_hidden.mapv(|v| 1.0 - v * v);
        let d_y1_ff = p
            .ff1
            .backward_mat(cache.y1.view(), d_ff_hidden.view(), &mut grad.ff1);
        let d_y1 = &d_y1_ff + &d_r2;

        let d_r1 = layer_norm_backward(
            d_y1.view(),
            &cache.ln1,
            &p.ln1_gamma,
            &mut grad.ln1_gamma,
            &mut grad.ln1_beta,
        );
        // r1 = wo(heads_out) + x
        let d_heads_out = p
            .wo
            .backward_mat(cache.heads_out.view(), d_r1.view(), &mut grad.wo);

        let mut d_q = Array2::zeros((n, hidden));
        let mut d_k = Array2::zeros((n, hidden));
        let mut d_v = Array2::zeros((n, hidden));
        for h in 0..self.heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let attn = &cache.attn[h];
            let d_oh = d_heads_out.slice(cols);
            let vh = cache.v.slice(cols);
            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);

            let d_attn = d_oh.dot(&vh.t());
            d_v.slice_mut(cols).assign(&attn.t().dot(&d_oh));

            // softmax rows: ds = a ⊙ (da − Σ da⊙a)
            let mut d_scores = Array2::zeros((n, n));
            for r in 0..n {
                let a = attn.row(r);
                let da = d_attn.row(r);
                let dot = a.dot(&da);
                for c in 0..n {
                    d_scores[[r, c]] = a[c] * (da[c] - dot);
                }
            }
            d_scores.mapv_inplace(|v| v * scale);
            d_q.slice_mut(cols).assign(&d_scores.dot(&kh));
            d_k.slice_mut(cols).assign(&d_scores.t().dot(&qh));
        }

        let mut dx = d_r1;
        dx += &p.wq.backward_mat(cache.x.view(), d_q.view(), &mut grad.wq);
        dx += &p.wk.backward_mat(cache.x.view(), d_k.view(), &mut grad.wk);
        dx += &p.wv.backward_mat(cache.x.view(), d_v.view(), &mut grad.wv);
        dx
    }
}

impl Parameterized for AttentionEncoder {
    fn for_each_group(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            let base = format!("layer{i}");
            l.wq.for_each_group(&mut |n, d| f(&format!("{base}.wq.{n}"), d));
            l.wk.for_each_group(&mut |n, d| f(&format!("{base}.wk.{n}"), d));
            l.wv.for_each_group(&mut |n, d| f(&format!("{base}.wv.{n}"), d));
            l.wo.for_each_group(&mut |n, d| f(&format!("{base}.wo.{n}"), d));
            f(&format!("{base}.ln1_gamma"), l.ln1_gamma.as_slice().unwrap());
            f(&format!("{base}.ln1_beta"), l.ln1_beta.as_slice().unwrap());
            l.ff1.for_each_group(&mut |n, d| f(&format!("{base}.ff1.{n}"), d));
            l.ff2.for_each_group(&mut |n, d| f(&format!("{base}.ff2.{n}"), d));
            f(&format!("{base}.ln2_gamma"), l.ln2_gamma.as_slice().unwrap());
            f(&format!("{base}.ln2_beta"), l.ln2_beta.as_slice().unwrap());
        }
    }
    fn for_each_group_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let base = format!("layer{i}");
            l.wq.for_each_group_mut(&mut |n, d| f(&format!("{base}.wq.{n}"), d));
            l.wk.for_each_group_mut(&mut |n, d| f(&format!("{base}.wk.{n}"), d));
            l.wv.for_each_group_mut(&mut |n, d| f(&format!("{base}.wv.{n}"), d));
            l.wo.for_each_group_mut(&mut |n, d| f(&format!("{base}.wo.{n}"), d));
            f(&format!("{base}.ln1_gamma"), l.ln1_gamma.as_slice_mut().unwrap());
            f(&format!("{base}.ln1_beta"), l.ln1_beta.as_slice_mut().unwrap());
            l.ff1.for_each_group_mut(&mut |n, d| f(&format!("{base}.ff1.{n}"), d));
            l.ff2.for_each_group_mut(&mut |n, d| f(&format!("{base}.ff2.{n}"), d));
            f(&format!("{base}.ln2_gamma"), l.ln2_gamma.as_slice_mut().unwrap());
            f(&format!("{base}.ln2_beta"), l.ln2_beta.as_slice_mut().unwrap());
        }
    }
}

/// Fixed sinusoidal position encodings, (n, dim).
pub fn positional_encoding(n: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((n, dim));
    for pos in 0..n {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sq_loss(h: &Array2<f64>) -> f64 {
        h.iter().map(|v| v * v).sum()
    }

    #[test]
    fn forward_shape_and_finiteness() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let enc = AttentionEncoder::init(8, 2, 2, &mut rng);
        for n in [1usize, 3, 9] {
            let x = Array2::from_shape_fn((n, 8), |_| rng.gen_range(-1.0..1.0));
            let (y, _) = enc.forward(x.view());
            assert_eq!(y.shape(), &[n, 8]);
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn rows_depend_on_distant_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let enc = AttentionEncoder::init(8, 1, 2, &mut rng);
        let mut x = Array2::from_shape_fn((6, 8), |_| rng.gen_range(-1.0..1.0));
        let (y1, _) = enc.forward(x.view());
        x[[5, 3]] += 1.0;
        let (y2, _) = enc.forward(x.view());
        let diff: f64 = (&y1.row(0) - &y2.row(0)).mapv(f64::abs).sum();
        assert!(diff > 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut enc = AttentionEncoder::init(6, 2, 2, &mut rng);
        let x = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
        let (y, cache) = enc.forward(x.view());
        let dy = y.mapv(|v| 2.0 * v);
        let mut grad = enc.zeros_like();
        enc.backward(&cache, dy.view(), &mut grad);
        let report = finite_difference_check(
            &mut enc,
            &grad,
            |p| sq_loss(&p.forward(x.view()).0),
            1e-4,
            40,
            &mut rng,
        );
        assert!(
            report.passes(1e-3),
            "worst {} in {}",
            report.worst_rel_err,
            report.worst_group
        );
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let enc = AttentionEncoder::init(4, 1, 1, &mut rng);
        let mut x = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let (y, cache) = enc.forward(x.view());
        let dy = y.mapv(|v| 2.0 * v);
        let mut grad = enc.zeros_like();
        let dx = enc.backward(&cache, dy.view(), &mut grad);
        let step = 1e-5;
        for idx in [(0usize, 0usize), (1, 2), (2, 3)] {
            let orig = x[idx];
            x[idx] = orig + step;
            let up = sq_loss(&enc.forward(x.view()).0);
            x[idx] = orig - step;
            let down = sq_loss(&enc.forward(x.view()).0);
            x[idx] = orig;
            let fd = (up - down) / (2.0 * step);
            assert!(
                (fd - dx[idx]).abs() / fd.abs().max(1.0) < 1e-4,
                "fd {fd} vs {}",
                dx[idx]
            );
        }
    }

    #[test]
    fn positional_encoding_is_bounded_and_distinct() {
        let pe = positional_encoding(16, 8);
        assert!(pe.iter().all(|v| v.abs() <= 1.0));
        let diff: f64 = (&pe.row(0) - &pe.row(7)).mapv(f64::abs).sum();
        assert!(diff > 0.1);
    }
}
