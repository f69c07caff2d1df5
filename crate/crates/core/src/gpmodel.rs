//! Gaussian-process dynamics mean: Gram assembly, weight fitting, marginal
//! likelihood with analytic gradients, and deterministic hyperparameter
//! optimization by conjugate gradients.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compose::BoundExpr;
use crate::kernel::KernelSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training point {index} has dimension {got}, expected {expected}")]
    DimensionMismatch { index: usize, got: usize, expected: usize },
    #[error("gram matrix is not positive definite (jitter {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },
}

/// Input/target pairs; `targets[j]` holds the j-th output component of
/// every data point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingSet {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl TrainingSet {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self, GpError> {
        if inputs.is_empty() || targets.is_empty() {
            return Err(GpError::EmptyTrainingSet);
        }
        let n = inputs[0].len();
        for (i, x) in inputs.iter().enumerate() {
            if x.len() != n {
                return Err(GpError::DimensionMismatch { index: i, got: x.len(), expected: n });
            }
        }
        for (j, t) in targets.iter().enumerate() {
            if t.len() != inputs.len() {
                return Err(GpError::DimensionMismatch {
                    index: j,
                    got: t.len(),
                    expected: inputs.len(),
                });
            }
        }
        Ok(Self { inputs, targets })
    }

    pub fn num_points(&self) -> usize {
        self.inputs.len()
    }

    pub fn state_dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.len()
    }
}

/// Log-space hyperparameters: `theta[d]` for d < n holds half the log of the
/// d-th squared length scale, `theta[n]` the log signal amplitude, and
/// `theta[n+1]` the log noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub theta: Vec<f64>,
}

impl Hyperparams {
    pub fn new(theta: Vec<f64>) -> Self {
        assert!(theta.len() >= 3);
        Self { theta }
    }

    /// Unit length scales, unit amplitude, noise level 0.1.
    pub fn initial(state_dim: usize) -> Self {
        let mut theta = vec![0.0; state_dim + 2];
        theta[state_dim + 1] = 0.1f64.ln();
        Self { theta }
    }

    pub fn state_dim(&self) -> usize {
        self.theta.len() - 2
    }

    pub fn signal_amplitude(&self) -> f64 {
        self.theta[self.state_dim()].exp()
    }

    pub fn noise_level(&self) -> f64 {
        self.theta[self.state_dim() + 1].exp()
    }

    /// Diagonal of the inverse squared-length-scale matrix.
    pub fn inv_lengthscale(&self) -> Vec<f64> {
        self.theta[..self.state_dim()].iter().map(|t| (-2.0 * t).exp()).collect()
    }

    pub fn kernel_at(&self, center: &[f64]) -> KernelSpec {
        KernelSpec::new(center.to_vec(), self.signal_amplitude(), self.inv_lengthscale())
    }
}

/// Fitted GP posterior mean `m_j(x) = sum_i weights[j][i] K(x, x_i)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpMean {
    pub hyperparams: Hyperparams,
    pub kernels: Vec<KernelSpec>,
    /// One weight vector per output dimension.
    pub weights: Vec<Vec<f64>>,
}

impl GpMean {
    pub fn output_dim(&self) -> usize {
        self.weights.len()
    }

    pub fn state_dim(&self) -> usize {
        self.hyperparams.state_dim()
    }

    pub fn num_points(&self) -> usize {
        self.kernels.len()
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let kv: Vec<f64> = self.kernels.iter().map(|k| k.eval(x)).collect();
        DVector::from_fn(self.output_dim(), |j, _| {
            self.weights[j].iter().zip(&kv).map(|(w, k)| w * k).sum()
        })
    }

    /// Weight matrix with one row per output dimension (n_out x D).
    pub fn weight_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.output_dim(), self.num_points(), |j, i| self.weights[j][i])
    }

    /// The noise-regularized training Gram matrix, rebuilt from the kernel
    /// centers (identical to the one used when fitting).
    pub fn gram(&self) -> DMatrix<f64> {
        let d = self.num_points();
        let sn2 = self.hyperparams.noise_level().powi(2);
        DMatrix::from_fn(d, d, |i, j| {
            let xj = DVector::from_column_slice(&self.kernels[j].center);
            let k = self.kernels[i].eval(&xj);
            if i == j { k + sn2 + GRAM_JITTER } else { k }
        })
    }

    /// One kernel-mixture expression per output dimension.
    pub fn to_exprs(&self) -> Vec<BoundExpr> {
        self.weights
            .iter()
            .map(|w| BoundExpr::kernel_mixture(&self.kernels, w, 0.0))
            .collect()
    }
}

/// Noise-regularized Gram matrix `K + (sigma_n^2 + jitter) I`.
pub fn gram_matrix(ts: &TrainingSet, hp: &Hyperparams, jitter: f64) -> DMatrix<f64> {
    let d = ts.num_points();
    let inv_ls = hp.inv_lengthscale();
    let sf = hp.signal_amplitude();
    let sn2 = hp.noise_level().powi(2);
    DMatrix::from_fn(d, d, |i, j| {
        let mut q = 0.0;
        for (dd, w) in inv_ls.iter().enumerate() {
            let dx = ts.inputs[i][dd] - ts.inputs[j][dd];
            q += dx * dx * w;
        }
        let k = sf * (-0.5 * q).exp();
        if i == j { k + sn2 + jitter } else { k }
    })
}

const GRAM_JITTER: f64 = 1e-10;

/// Fit the posterior-mean weights for every output dimension at fixed
/// hyperparameters.
pub fn fit_mean(ts: &TrainingSet, hp: &Hyperparams) -> Result<GpMean, GpError> {
    let gram = gram_matrix(ts, hp, GRAM_JITTER);
    let chol = Cholesky::new(gram)
        .ok_or(GpError::NotPositiveDefinite { jitter: GRAM_JITTER })?;
    let weights = ts
        .targets
        .iter()
        .map(|y| {
            let sol = chol.solve(&DVector::from_column_slice(y));
            sol.iter().cloned().collect()
        })
        .collect();
    let kernels = ts.inputs.iter().map(|x| hp.kernel_at(x)).collect();
    Ok(GpMean { hyperparams: hp.clone(), kernels, weights })
}

/// Negative log marginal likelihood summed over output dimensions, plus the
/// quadratic penalty `kappa_theta * sum theta_j^2` over every entry except
/// the noise level, together with its analytic gradient.
pub fn neg_objective(
    ts: &TrainingSet,
    hp: &Hyperparams,
    kappa_theta: f64,
) -> Result<(f64, DVector<f64>), GpError> {
    let d = ts.num_points();
    let n = ts.state_dim();
    let n_out = ts.output_dim() as f64;
    let gram = gram_matrix(ts, hp, GRAM_JITTER);
    let chol = Cholesky::new(gram)
        .ok_or(GpError::NotPositiveDefinite { jitter: GRAM_JITTER })?;

    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let mut value = 0.5 * n_out * (log_det + d as f64 * (2.0 * std::f64::consts::PI).ln());
    // alpha_j = K^-1 y_j; data fit plus the trace matrix for the gradient.
    let mut wwt = DMatrix::zeros(d, d);
    for y in &ts.targets {
        let yv = DVector::from_column_slice(y);
        let a = chol.solve(&yv);
        value += 0.5 * yv.dot(&a);
        wwt += &a * a.transpose();
    }
    let kinv = chol.inverse();
    // d(-logp)/dtheta = -1/2 tr((wwt - n_out K^-1) dK/dtheta)
    let trace_mat = wwt - kinv * n_out;

    let inv_ls = hp.inv_lengthscale();
    let sf = hp.signal_amplitude();
    let sn2 = hp.noise_level().powi(2);
    let mut grad = DVector::zeros(n + 2);
    for i in 0..d {
        for j in 0..d {
            let mut q = 0.0;
            for (dd, w) in inv_ls.iter().enumerate() {
                let dx = ts.inputs[i][dd] - ts.inputs[j][dd];
                q += dx * dx * w;
            }
            let k = sf * (-0.5 * q).exp();
            let t = trace_mat[(i, j)];
            for (dd, w) in inv_ls.iter().enumerate() {
                let dx = ts.inputs[i][dd] - ts.inputs[j][dd];
                grad[dd] += -0.5 * t * k * dx * dx * w;
            }
            grad[n] += -0.5 * t * k;
            if i == j {
                grad[n + 1] += -0.5 * t * 2.0 * sn2;
            }
        }
    }
    for j in 0..=n {
        value += kappa_theta * hp.theta[j] * hp.theta[j];
        grad[j] += 2.0 * kappa_theta * hp.theta[j];
    }
    Ok((value, grad))
}

/// Deterministic Polak-Ribiere conjugate-gradient descent with Armijo
/// backtracking, limited to `budget` objective evaluations. Returns the best
/// iterate seen; hyperparameter vectors whose Gram factorization fails are
/// treated as infeasible (infinite objective).
pub fn optimize_hyperparams(
    ts: &TrainingSet,
    initial: &Hyperparams,
    kappa_theta: f64,
    budget: usize,
) -> Result<Hyperparams, GpError> {
    let n = ts.state_dim();
    let evals = std::cell::Cell::new(0usize);
    let eval = |theta: &DVector<f64>| -> Option<(f64, DVector<f64>)> {
        evals.set(evals.get() + 1);
        let hp = Hyperparams::new(theta.iter().cloned().collect());
        neg_objective(ts, &hp, kappa_theta).ok()
    };

    let mut theta = DVector::from_column_slice(&initial.theta);
    let (mut f, mut g) = match eval(&theta) {
        Some(v) => v,
        None => return Err(GpError::NotPositiveDefinite { jitter: GRAM_JITTER }),
    };
    let mut best_theta = theta.clone();
    let mut best_f = f;
    let mut dir = -g.clone();

    while evals.get() < budget {
        let slope = g.dot(&dir);
        let (dir_used, slope) = if slope >= 0.0 {
            // restart on a non-descent direction
            (-g.clone(), -g.dot(&g))
        } else {
            (dir.clone(), slope)
        };
        if slope.abs() < 1e-14 * (1.0 + f.abs()) {
            break;
        }

        // Armijo backtracking
        let mut step = 1.0 / (1.0 + dir_used.norm());
        let mut accepted = None;
        for _ in 0..30 {
            if evals.get() >= budget {
                break;
            }
            let cand = &theta + &dir_used * step;
            if let Some((fc, gc)) = eval(&cand) {
                if fc <= f + 1e-4 * step * slope {
                    accepted = Some((cand, fc, gc));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, fc, gc)) = accepted else { break };

        // Polak-Ribiere with periodic restart
        let beta = (gc.dot(&gc) - gc.dot(&g)) / g.dot(&g).max(1e-300);
        let beta = beta.max(0.0);
        dir = -gc.clone() + &dir_used * beta;
        theta = cand;
        f = fc;
        g = gc;
        if f < best_f {
            best_f = f;
            best_theta = theta.clone();
        }
        if g.norm() < 1e-10 {
            break;
        }
    }

    let _ = n;
    Ok(Hyperparams::new(best_theta.iter().cloned().collect()))
}
