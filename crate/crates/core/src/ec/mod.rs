//! Quantization with error correction.
//!
//! Instead of the weight reconstruction error, these solvers minimise the
//! squared error of the layer *response* on a calibration set by block
//! coordinate descent: one subspace at a time, against the residual left by
//! all other subspaces, alternating a least-squares codebook update with an
//! exhaustive assignment update. Both solvers start from the k-means solution,
//! so the final objective never exceeds the naive one.

mod conv;
mod fc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use conv::{conv_response_objective, quantize_conv_ec, refine_conv_ec, ConvCalibrationSet};
pub use fc::{fc_response_objective, quantize_fc_ec, refine_fc_ec, FcCalibrationSet};

/// Result of an error-corrected quantization run.
#[derive(Debug, Clone)]
pub struct EcResult<L> {
    pub layer: L,
    /// Response objective of the k-means initialisation, followed by the
    /// objective after every subspace visit of every sweep.
    pub history: Vec<f64>,
    /// Subspaces visited per sweep.
    pub subspaces: usize,
}

impl<L> EcResult<L> {
    pub fn initial_objective(&self) -> f64 {
        self.history[0]
    }

    pub fn final_objective(&self) -> f64 {
        *self
            .history
            .last()
            .expect("history starts with the initial objective")
    }

    /// Objective at the end of each sweep.
    pub fn per_sweep(&self) -> Vec<f64> {
        self.history
            .iter()
            .skip(self.subspaces)
            .step_by(self.subspaces.max(1))
            .copied()
            .collect()
    }

    /// True when every entry is at most its predecessor, up to `rel_slack`.
    pub fn is_monotone(&self, rel_slack: f64) -> bool {
        self.history
            .windows(2)
            .all(|w| w[1] <= w[0] + rel_slack * w[0].abs().max(f64::MIN_POSITIVE))
    }
}

impl<L> EcResult<L> {
    /// The run with the lower final objective; ties keep `self`.
    pub(crate) fn better(self, other: Self) -> Self {
        if other.final_objective() < self.final_objective() {
            other
        } else {
            self
        }
    }
}

/// Uniform seeded assignments for start `start` of a multi-start run.
pub(crate) fn random_assignments(
    assignments: &mut [u16],
    codewords: usize,
    seed: u64,
    start: usize,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(start as u64);
    for a in assignments {
        *a = rng.random_range(0..codewords) as u16;
    }
}

/// Solves the ridge-regularised normal equations `(A + lambda I) x = b` with
/// `lambda = ridge * trace(A) / dim`. Returns `None` when `A` carries no
/// information (zero trace) or the system cannot be solved.
pub(crate) fn solve_normal_equations(
    a: &[f64],
    b: &[f64],
    dim: usize,
    ridge: f64,
) -> Option<Vec<f64>> {
    let trace: f64 = (0..dim).map(|i| a[i * dim + i]).sum();
    if trace.is_nan() || trace <= 0.0 {
        return None;
    }
    let lambda = ridge * trace / dim as f64;
    let mut m = DMatrix::from_row_slice(dim, dim, a);
    for i in 0..dim {
        m[(i, i)] += lambda;
    }
    let rhs = DVector::from_column_slice(b);
    let x = match m.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => m.lu().solve(&rhs)?,
    };
    x.iter()
        .all(|v| v.is_finite())
        .then(|| x.iter().copied().collect())
}

/// `x^T A x - 2 b^T x`: the part of a least-squares objective that depends on `x`.
pub(crate) fn quadratic_cost(a: &[f64], b: &[f64], x: &[f64]) -> f64 {
    let dim = x.len();
    let mut quad = 0.0;
    for i in 0..dim {
        let mut row = 0.0;
        for j in 0..dim {
            row += a[i * dim + j] * x[j];
        }
        quad += x[i] * row;
    }
    quad - 2.0 * b.iter().zip(x).map(|(p, q)| p * q).sum::<f64>()
}

/// Least-squares codeword update that never makes the restricted objective worse.
/// Returns the new codeword already rounded to `f32`, or `None` to keep the old one.
pub(crate) fn improved_codeword(
    a: &[f64],
    b: &[f64],
    current: &[f32],
    ridge: f64,
) -> Option<Vec<f32>> {
    let dim = current.len();
    let x = solve_normal_equations(a, b, dim, ridge)?;
    let rounded: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    if rounded.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let new_wide: Vec<f64> = rounded.iter().map(|&v| v as f64).collect();
    let old_wide: Vec<f64> = current.iter().map(|&v| v as f64).collect();
    (quadratic_cost(a, b, &new_wide) <= quadratic_cost(a, b, &old_wide)).then_some(rounded)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_equations_scalar() {
        // sum S^2 = 5, sum R S = 10
        let x = solve_normal_equations(&[5.0], &[10.0], 1, 1e-8).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-6);
        assert!(solve_normal_equations(&[0.0], &[1.0], 1, 1e-8).is_none());
    }

    #[test]
    fn guarded_update_keeps_better_codeword() {
        // optimum is exactly representable, so the update is accepted
        assert_eq!(
            improved_codeword(&[4.0], &[2.0], &[3.0], 0.0),
            Some(vec![0.5])
        );
        // already optimal: equal cost is accepted, and stays the same value
        assert_eq!(
            improved_codeword(&[4.0], &[2.0], &[0.5], 0.0),
            Some(vec![0.5])
        );
    }

    #[test]
    fn monotone_check_and_sweeps() {
        let r = EcResult {
            layer: (),
            history: vec![10.0, 8.0, 7.0, 7.0, 6.0],
            subspaces: 2,
        };
        assert!(r.is_monotone(0.0));
        assert_eq!(r.per_sweep(), vec![7.0, 6.0]);
        let bad = EcResult {
            layer: (),
            history: vec![1.0, 1.1],
            subspaces: 1,
        };
        assert!(!bad.is_monotone(1e-6));
    }
}
