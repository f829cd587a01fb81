//! Central finite-difference gradient checking in 64-bit mode.

use crate::tensor::Tensor;

/// Finite-difference step used by every check.
pub const FD_STEP: f64 = 1e-5;
/// Maximum tolerated relative error between analytic and numeric gradients.
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor so vanishing gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Result of one check.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CheckStats {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a kink
    /// (max-pool argmax change or ReLU sign flip).
    pub skipped: usize,
}

impl CheckStats {
    pub fn merge(self, other: CheckStats) -> CheckStats {
        CheckStats {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// An evaluation of a scalar objective: the value plus a signature of every
/// piecewise branch taken (argmax indices, ReLU masks). Coordinates whose
/// perturbation changes the signature are not differentiable there and are
/// skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub signature: Vec<u64>,
}

impl Probe {
    pub fn smooth(value: f64) -> Self {
        Probe {
            value,
            signature: Vec::new(),
        }
    }
}

/// Compare `analytic` against central differences of `objective` around `at`.
/// At most `max_coords` coordinates are checked, spread evenly over the tensor.
pub fn check(
    at: &Tensor<f64>,
    analytic: &Tensor<f64>,
    max_coords: usize,
    mut objective: impl FnMut(&Tensor<f64>) -> Probe,
) -> CheckStats {
    assert_eq!(at.dims(), analytic.dims(), "gradient shape mismatch");
    let n = at.len();
    let stride = n.div_ceil(max_coords.max(1)).max(1);
    let base = objective(at).signature;
    let mut stats = CheckStats::default();
    let mut x = at.clone();
    for i in (0..n).step_by(stride) {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_STEP;
        let plus = objective(&x);
        x.data_mut()[i] = orig - FD_STEP;
        let minus = objective(&x);
        x.data_mut()[i] = orig;
        if plus.signature != base || minus.signature != base {
            stats.skipped += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * FD_STEP);
        stats.max_rel_error = stats
            .max_rel_error
            .max(relative_error(analytic.data()[i], numeric));
        stats.checked += 1;
    }
    stats
}

/// Signature bits for a ReLU pre-activation: one entry per positive element.
pub fn relu_signature(pre: &Tensor<f64>) -> impl Iterator<Item = u64> + '_ {
    pre.data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, _)| i as u64)
}

/// Weighted sum `sum(t * proj)`, the scalar objective used to turn a tensor
/// output into a loss for checking.
pub fn project(t: &Tensor<f64>, proj: &Tensor<f64>) -> f64 {
    t.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
}
