//! Hand-rolled neural layers in double precision.
//!
//! Every layer exposes an explicit forward pass that returns the caches its
//! backward pass needs; gradients are accumulated into a zeroed copy of the
//! parameter struct. Analytic gradients are validated against central finite
//! differences in the test suites.

pub mod attention;
pub mod embedding;
pub mod linear;
pub mod lstm;
pub mod optim;
pub mod param;

pub use attention::{AttentionEncoder, AttentionLayerParams};
pub use embedding::Embedding;
pub use linear::Linear;
pub use lstm::{BiLstm, LstmParams};
pub use optim::AdamW;
pub use param::{
    clip_global_norm, finite_difference_check, flatten, param_count, FdReport, Parameterized,
};

/// Numerically stable log(Σ exp(x)).
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place softmax of a slice.
pub fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_naive() {
        let xs = [0.3, -1.2, 2.5, 0.0];
        let naive = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - naive).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_is_stable_for_large_inputs() {
        let xs = [1000.0, 1000.0];
        assert!((log_sum_exp(&xs) - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_extremes() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-745.0) >= 0.0);
        assert!(sigmoid(745.0) <= 1.0);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut row = vec![1.0, 2.0, 3.0];
        softmax_inplace(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row[2] > row[1] && row[1] > row[0]);
    }
}
