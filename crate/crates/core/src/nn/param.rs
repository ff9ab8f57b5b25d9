//! Uniform access to named parameter groups.
//!
//! Parameter structs implement [`Parameterized`] so the optimizer, gradient
//! clipping, checkpointing, and the finite-difference checker can treat any
//! model as an ordered list of named `f64` slices. Visit order must be
//! deterministic and identical between `for_each_group` and
//! `for_each_group_mut`.

use rand::Rng;

pub trait Parameterized {
    fn for_each_group(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn for_each_group_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));
}

pub fn param_count(p: &impl Parameterized) -> usize {
    let mut n = 0;
    p.for_each_group(&mut |_, data| n += data.len());
    n
}

pub fn group_names(p: &impl Parameterized) -> Vec<String> {
    let mut names = Vec::new();
    p.for_each_group(&mut |name, _| names.push(name.to_string()));
    names
}

/// Concatenate all groups into one flat vector, in visit order.
pub fn flatten(p: &impl Parameterized) -> Vec<f64> {
    let mut flat = Vec::new();
    p.for_each_group(&mut |_, data| flat.extend_from_slice(data));
    flat
}

/// Overwrite all groups from a flat vector produced by [`flatten`].
pub fn assign_from_flat(p: &mut impl Parameterized, flat: &[f64]) {
    let mut offset = 0;
    p.for_each_group_mut(&mut |_, data| {
        data.copy_from_slice(&flat[offset..offset + data.len()]);
        offset += data.len();
    });
    assert_eq!(offset, flat.len(), "flat parameter size mismatch");
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut impl Parameterized, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    grads.for_each_group(&mut |_, data| {
        for v in data {
            sq += v * v;
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grads.for_each_group_mut(&mut |_, data| {
            for v in data {
                *v *= scale;
            }
        });
    }
    norm
}

/// Result of a finite-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub checked: usize,
    pub worst_rel_err: f64,
    pub worst_group: String,
    pub worst_index: usize,
}

impl FdReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.worst_rel_err < tolerance
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare analytic gradients against central finite differences.
///
/// `loss` must be a pure function of the parameters; it is evaluated at
/// perturbed copies. Each group is checked at up to `max_per_group`
/// coordinates (all of them when the group is small). Parameters are
/// restored on return.
pub fn finite_difference_check<P: Parameterized>(
    params: &mut P,
    analytic: &P,
    mut loss: impl FnMut(&P) -> f64,
    step: f64,
    max_per_group: usize,
    rng: &mut impl Rng,
) -> FdReport {
    let base = flatten(params);
    let grads = flatten(analytic);
    assert_eq!(base.len(), grads.len());

    // (group name, start offset, len) in visit order
    let mut layout = Vec::new();
    {
        let mut offset = 0;
        params.for_each_group(&mut |name, data| {
            layout.push((name.to_string(), offset, data.len()));
            offset += data.len();
        });
    }

    let mut report = FdReport {
        checked: 0,
        worst_rel_err: 0.0,
        worst_group: String::new(),
        worst_index: 0,
    };
    let mut work = base.clone();
    for (name, offset, len) in &layout {
        let indices: Vec<usize> = if *len <= max_per_group {
            (0..*len).collect()
        } else {
            (0..max_per_group).map(|_| rng.gen_range(0..*len)).collect()
        };
        for &i in &indices {
            let flat_idx = offset + i;
            work[flat_idx] = base[flat_idx] + step;
            assign_from_flat(params, &work);
            let up = loss(params);
            work[flat_idx] = base[flat_idx] - step;
            assign_from_flat(params, &work);
            let down = loss(params);
            work[flat_idx] = base[flat_idx];

            let fd = (up - down) / (2.0 * step);
            let err = rel_err(fd, grads[flat_idx]);
            report.checked += 1;
            if err > report.worst_rel_err {
                report.worst_rel_err = err;
                report.worst_group = name.clone();
                report.worst_index = i;
            }
        }
    }
    assign_from_flat(params, &base);
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Quad {
        a: Array2<f64>,
        b: Array1<f64>,
    }

    impl Parameterized for Quad {
        fn for_each_group(&self, f: &mut dyn FnMut(&str, &[f64])) {
            f("a", self.a.as_slice().unwrap());
            f("b", self.b.as_slice().unwrap());
        }
        fn for_each_group_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
            f("a", self.a.as_slice_mut().unwrap());
            f("b", self.b.as_slice_mut().unwrap());
        }
    }

    fn quad_loss(q: &Quad) -> f64 {
        q.a.iter().map(|v| v * v).sum::<f64>() + q.b.iter().map(|v| v.powi(3)).sum::<f64>()
    }

    #[test]
    fn flatten_round_trip() {
        let mut q = Quad {
            a: Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64),
            b: Array1::from_vec(vec![7.0, 8.0]),
        };
        let flat = flatten(&q);
        assert_eq!(flat.len(), 8);
        assert_eq!(param_count(&q), 8);
        let doubled: Vec<f64> = flat.iter().map(|v| v * 2.0).collect();
        assign_from_flat(&mut q, &doubled);
        assert_eq!(q.a[[0, 1]], 2.0);
        assert_eq!(q.b[1], 16.0);
    }

    #[test]
    fn clip_reduces_norm() {
        let mut q = Quad {
            a: Array2::from_elem((2, 2), 3.0),
            b: Array1::from_elem(1, 4.0),
        };
        let norm = clip_global_norm(&mut q, 1.0);
        assert!((norm - (4.0 * 9.0 + 16.0f64).sqrt()).abs() < 1e-12);
        let mut sq = 0.0;
        q.for_each_group(&mut |_, d| sq += d.iter().map(|v| v * v).sum::<f64>());
        assert!((sq.sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_leaves_small_grads_untouched() {
        let mut q = Quad {
            a: Array2::from_elem((1, 1), 0.1),
            b: Array1::from_elem(1, 0.1),
        };
        clip_global_norm(&mut q, 5.0);
        assert_eq!(q.a[[0, 0]], 0.1);
    }

    #[test]
    fn fd_checker_accepts_exact_gradients() {
        let mut q = Quad {
            a: Array2::from_shape_fn((2, 2), |(i, j)| 0.3 + 0.1 * (i as f64) - 0.2 * (j as f64)),
            b: Array1::from_vec(vec![0.5, -0.4]),
        };
        let analytic = Quad {
            a: q.a.mapv(|v| 2.0 * v),
            b: q.b.mapv(|v| 3.0 * v * v),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report = finite_difference_check(&mut q, &analytic, quad_loss, 1e-4, 100, &mut rng);
        assert!(report.passes(1e-3), "worst {}", report.worst_rel_err);
        assert_eq!(report.checked, 6);
    }

    #[test]
    fn fd_checker_rejects_wrong_gradients() {
        let mut q = Quad {
            a: Array2::from_elem((1, 1), 1.0),
            b: Array1::from_elem(1, 1.0),
        };
        let wrong = Quad {
            a: Array2::from_elem((1, 1), 5.0),
            b: Array1::from_elem(1, 3.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report = finite_difference_check(&mut q, &wrong, quad_loss, 1e-4, 100, &mut rng);
        assert!(!report.passes(1e-3));
    }

    #[test]
    fn constant_loss_yields_zero_fd() {
        let mut q = Quad {
            a: Array2::from_elem((2, 2), 0.7),
            b: Array1::from_elem(2, -0.3),
        };
        let zeros = Quad {
            a: Array2::zeros((2, 2)),
            b: Array1::zeros(2),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let report = finite_difference_check(&mut q, &zeros, |_| 42.0, 1e-4, 100, &mut rng);
        assert!(report.passes(1e-3));
    }
}
