//! Gaussian kernel evaluation, gradients, and the second-order
//! interpolation-error bounds on a simplex.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::geometry::Simplex;

/// One Gaussian kernel `K(x) = amplitude * exp(-1/2 (x-c)^T W (x-c))` with
/// diagonal positive-definite `W` (the inverse squared length-scales).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub center: Vec<f64>,
    pub amplitude: f64,
    pub inv_lengthscale: Vec<f64>,
}

impl KernelSpec {
    pub fn new(center: Vec<f64>, amplitude: f64, inv_lengthscale: Vec<f64>) -> Self {
        assert!(amplitude > 0.0, "kernel amplitude must be positive");
        assert_eq!(center.len(), inv_lengthscale.len());
        assert!(inv_lengthscale.iter().all(|&w| w > 0.0));
        Self { center, amplitude, inv_lengthscale }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        let mut e = 0.0;
        for d in 0..self.dim() {
            let dx = x[d] - self.center[d];
            e += dx * dx * self.inv_lengthscale[d];
        }
        self.amplitude * (-0.5 * e).exp()
    }

    /// Closed-form gradient `-W (x - c) K(x)`.
    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let k = self.eval(x);
        DVector::from_fn(self.dim(), |d, _| -self.inv_lengthscale[d] * (x[d] - self.center[d]) * k)
    }

    /// Largest inverse-length-scale entry (the max eigenvalue of the
    /// diagonal matrix, exact).
    pub fn lambda_max(&self) -> f64 {
        self.inv_lengthscale.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Nonnegative interpolation-error margins `(eps_lower, eps_upper)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundPair {
    pub lower: f64,
    pub upper: f64,
}

impl BoundPair {
    pub const ZERO: BoundPair = BoundPair { lower: 0.0, upper: 0.0 };

    pub fn new(lower: f64, upper: f64) -> Self {
        assert!(lower >= 0.0 && upper >= 0.0);
        Self { lower, upper }
    }

    /// Margins of `c * f` given margins of `f`.
    pub fn scaled(&self, c: f64) -> BoundPair {
        if c >= 0.0 {
            BoundPair { lower: c * self.lower, upper: c * self.upper }
        } else {
            BoundPair { lower: -c * self.upper, upper: -c * self.lower }
        }
    }
}

/// Interpolation-error margins of a Gaussian kernel over a simplex:
/// `eps_L = exp(-3/2) (N-1) amplitude lambda_max tau^2` and
/// `eps_U = (N-1) amplitude lambda_max tau^2 / 2`.
pub fn kernel_simplex_bounds(k: &KernelSpec, s: &Simplex) -> BoundPair {
    kernel_tau_bounds(k, s.num_vertices(), s.tau())
}

/// Same margins from `(N, tau)` directly.
pub fn kernel_tau_bounds(k: &KernelSpec, num_vertices: usize, tau: f64) -> BoundPair {
    let scale = (num_vertices as f64 - 1.0) * k.amplitude * k.lambda_max() * tau * tau;
    BoundPair { lower: (-1.5f64).exp() * scale, upper: scale / 2.0 }
}

/// Largest eigenvalue of a symmetric matrix by power iteration.
///
/// The pipeline only uses diagonal inverse length-scales, where the exact
/// maximum diagonal entry is taken instead; this path covers full matrices.
pub fn symmetric_lambda_max(m: &DMatrix<f64>, tol: f64, max_iters: usize) -> f64 {
    assert_eq!(m.nrows(), m.ncols());
    let n = m.nrows();
    // Shift so the dominant eigenvalue of m + shift*I is the one with the
    // largest algebraic value.
    let shift: f64 = m.iter().map(|v| v.abs()).sum::<f64>() + 1.0;
    let shifted = m + DMatrix::identity(n, n) * shift;
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lam = 0.0;
    for _ in 0..max_iters {
        let w = &shifted * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return -shift;
        }
        let v_next = w / norm;
        let lam_next = v_next.dot(&(&shifted * &v_next));
        let done = (lam_next - lam).abs() <= tol * lam_next.abs().max(1.0);
        v = v_next;
        lam = lam_next;
        if done {
            break;
        }
    }
    lam - shift
}
