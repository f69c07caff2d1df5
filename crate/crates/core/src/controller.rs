//! Value-function controllers on top of a fitted GP mean: LQR-based
//! initialization through an algebraic Riccati equation and direct synthesis
//! by descending the squared HJB residual with a decrease-condition penalty.

use nalgebra::{Cholesky, Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gpmodel::GpMean;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("linearized pair (A, B) is not stabilizable")]
    NotStabilizable,
    #[error("riccati iteration failed to converge (residual {residual:e})")]
    RiccatiDiverged { residual: f64 },
    #[error("lyapunov equation is singular")]
    SingularLyapunov,
    #[error("least-squares system for the value weights is singular")]
    SingularValueFit,
    #[error("state dimension mismatch: GP outputs {outputs}, inputs {inputs}")]
    NotSquare { outputs: usize, inputs: usize },
}

/// Running state cost `q(x)`.
#[derive(Debug, Clone)]
pub enum StateCost {
    /// `q(x) = |x|^2`
    SquaredNorm,
    Custom(fn(&DVector<f64>) -> f64),
}

impl StateCost {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match self {
            StateCost::SquaredNorm => x.norm_squared(),
            StateCost::Custom(f) => f(x),
        }
    }

    /// Half the Hessian at the origin — the `Q` matrix of the linearized
    /// problem. Exact for the squared norm, central differences otherwise.
    pub fn q_matrix(&self, n: usize) -> DMatrix<f64> {
        match self {
            StateCost::SquaredNorm => DMatrix::identity(n, n),
            StateCost::Custom(f) => {
                let h = 1e-4;
                DMatrix::from_fn(n, n, |i, j| {
                    let mut pp = DVector::zeros(n);
                    pp[i] += h;
                    pp[j] += h;
                    let mut pm = DVector::zeros(n);
                    pm[i] += h;
                    pm[j] -= h;
                    let mut mp = DVector::zeros(n);
                    mp[i] -= h;
                    mp[j] += h;
                    let mut mm = DVector::zeros(n);
                    mm[i] -= h;
                    mm[j] -= h;
                    (f(&pp) - f(&pm) - f(&mp) + f(&mm)) / (4.0 * h * h) / 2.0
                })
            }
        }
    }
}

/// Quadratic cost specification `q(x) + u^T R u`.
#[derive(Debug, Clone)]
pub struct CostSpec {
    pub q: StateCost,
    pub r: DMatrix<f64>,
    r_inv: DMatrix<f64>,
}

impl CostSpec {
    pub fn new(q: StateCost, r: DMatrix<f64>) -> Self {
        let r_inv = r.clone().try_inverse().expect("input cost R must be invertible");
        Self { q, r, r_inv }
    }

    pub fn r_inv(&self) -> &DMatrix<f64> {
        &self.r_inv
    }
}

/// Kernel-mixture value function `V(x) = sum_i alpha_i K_i(x) - offset`,
/// sharing the GP's kernels; the offset pins `V(0) = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueFunctionParams {
    pub alpha: Vec<f64>,
    pub offset: f64,
}

/// Fitted dynamics, input matrix, cost, and value-function weights: enough
/// to evaluate the feedback law and its closed-loop expressions.
#[derive(Debug, Clone)]
pub struct ClosedLoopModel {
    pub gp: GpMean,
    /// Input matrix `g` (n x m).
    pub g: DMatrix<f64>,
    pub cost: CostSpec,
    pub value: ValueFunctionParams,
}

/// One row of the synthesis trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub hjb_term: f64,
    pub lyap_term: f64,
}

/// Decrease margin `eta(x)` added to the Lyapunov derivative before the
/// penalty is applied.
#[derive(Debug, Clone)]
pub enum DecreaseMargin {
    /// `eta(x) = c |x|^2 + b`
    Quadratic { scale: f64, offset: f64 },
    Custom(fn(&DVector<f64>) -> f64),
}

impl DecreaseMargin {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match self {
            DecreaseMargin::Quadratic { scale, offset } => scale * x.norm_squared() + offset,
            DecreaseMargin::Custom(f) => f(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisParams {
    /// Penalty weight on the decrease-condition violation.
    pub kappa: f64,
    /// Step size of the descent.
    pub step: f64,
    pub iterations: usize,
    pub eta: DecreaseMargin,
}

impl ClosedLoopModel {
    pub fn state_dim(&self) -> usize {
        self.gp.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.g.ncols()
    }

    /// `G = g R^-1 g^T`.
    pub fn gmat(&self) -> DMatrix<f64> {
        &self.g * self.cost.r_inv() * self.g.transpose()
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.gp
            .kernels
            .iter()
            .zip(&self.value.alpha)
            .map(|(k, a)| a * k.eval(x))
            .sum::<f64>()
            - self.value.offset
    }

    pub fn value_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.state_dim());
        for (k, a) in self.gp.kernels.iter().zip(&self.value.alpha) {
            g += k.grad(x) * *a;
        }
        g
    }

    /// `u(x) = -R^-1 g^T grad V(x)`.
    pub fn optimal_input(&self, x: &DVector<f64>) -> DVector<f64> {
        -(self.cost.r_inv() * self.g.transpose() * self.value_grad(x))
    }

    /// `H(x) = p^T f(x) - 1/2 p^T G p + q(x)` with `p = grad V(x)`.
    pub fn hjb_residual(&self, x: &DVector<f64>) -> f64 {
        let p = self.value_grad(x);
        let f = self.gp.eval(x);
        p.dot(&f) - 0.5 * p.dot(&(self.gmat() * &p)) + self.cost.q.eval(x)
    }

    /// `Vdot(x) = p^T (f(x) - G p)`: the value derivative along the
    /// closed-loop GP mean.
    pub fn lyapunov_derivative(&self, x: &DVector<f64>) -> f64 {
        let p = self.value_grad(x);
        let f = self.gp.eval(x);
        p.dot(&(f - self.gmat() * &p))
    }
}

/// Solves `M^T P + P M = -C` through the Kronecker linearization.
pub fn solve_lyapunov(m: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>, ControllerError> {
    let n = m.nrows();
    assert_eq!(c.nrows(), n);
    let eye = DMatrix::<f64>::identity(n, n);
    let mt = m.transpose();
    // vec(M^T P + P M) = (I (x) M^T + M^T (x) I) vec(P)
    let lhs = eye.kronecker(&mt) + mt.kronecker(&eye);
    let rhs = DVector::from_iterator(n * n, (-c).iter().cloned());
    let sol = lhs.lu().solve(&rhs).ok_or(ControllerError::SingularLyapunov)?;
    Ok(DMatrix::from_iterator(n, n, sol.iter().cloned()))
}

fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max)
}

/// PBH test: `(A, B)` is stabilizable iff `[A - lambda I, B]` has full row
/// rank at every eigenvalue with nonnegative real part.
pub fn is_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    let n = a.nrows();
    let m = b.ncols();
    let ac = a.map(|v| Complex::new(v, 0.0));
    for lambda in a.complex_eigenvalues().iter() {
        if lambda.re < -tol {
            continue;
        }
        let mut pencil = DMatrix::<Complex<f64>>::zeros(n, n + m);
        for i in 0..n {
            for j in 0..n {
                pencil[(i, j)] = ac[(i, j)] - if i == j { *lambda } else { Complex::new(0.0, 0.0) };
            }
            for j in 0..m {
                pencil[(i, n + j)] = Complex::new(b[(i, j)], 0.0);
            }
        }
        let sv = pencil.singular_values();
        let smax = sv.iter().cloned().fold(0.0f64, f64::max);
        let rank = sv.iter().filter(|s| **s > tol * smax.max(1.0)).count();
        if rank < n {
            return false;
        }
    }
    true
}

/// A stabilizing feedback by Bass's construction: with `beta` beyond the
/// spectral radius, `(-A - beta I) Pb + Pb (-A - beta I)^T = -2 B B^T` has a
/// positive-definite solution and `K = B^T Pb^-1` makes `A - B K` Hurwitz.
pub fn bass_stabilizing_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ControllerError> {
    let n = a.nrows();
    if spectral_abscissa(a) < 0.0 {
        return Ok(DMatrix::zeros(b.ncols(), n));
    }
    let beta = a.norm() + 1.0;
    let m = -(a.clone()) - DMatrix::identity(n, n) * beta;
    // want M Pb + Pb M^T = -2BB^T, i.e. the transposed-argument Lyapunov form
    let pb = solve_lyapunov(&m.transpose(), &(2.0 * b * b.transpose()))?;
    let pb_inv = pb.try_inverse().ok_or(ControllerError::NotStabilizable)?;
    let k = b.transpose() * pb_inv;
    if spectral_abscissa(&(a - b * &k)) >= 0.0 {
        return Err(ControllerError::NotStabilizable);
    }
    Ok(k)
}

/// Solves `A^T P + P A - P B R^-1 B^T P + Q = 0` by Newton-Kleinman
/// iteration from a stabilizing gain.
pub fn solve_riccati(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ControllerError> {
    if !is_stabilizable(a, b, 1e-8) {
        return Err(ControllerError::NotStabilizable);
    }
    let r_inv = r.clone().try_inverse().ok_or(ControllerError::SingularLyapunov)?;
    let mut k = bass_stabilizing_gain(a, b)?;
    let mut residual = f64::INFINITY;
    for _ in 0..100 {
        let acl = a - b * &k;
        let c = q + k.transpose() * r * &k;
        let p = solve_lyapunov(&acl, &c)?;
        residual = (a.transpose() * &p + &p * a - &p * b * &r_inv * b.transpose() * &p + q).norm();
        if residual <= 1e-8 {
            return Ok(p);
        }
        k = &r_inv * b.transpose() * &p;
    }
    Err(ControllerError::RiccatiDiverged { residual })
}

/// Initializes the value function from the LQR solution of the linearized
/// GP mean: `A = W Jk` with `Jk` stacking the kernel gradients at the
/// origin, then a ridge least-squares fit of `x^T P x` at the check states
/// in the whitened weight space.
pub fn init_lqr(
    gp: &GpMean,
    g: DMatrix<f64>,
    cost: CostSpec,
    check_states: &[DVector<f64>],
    kappa_alpha: f64,
) -> Result<ClosedLoopModel, ControllerError> {
    let n = gp.state_dim();
    if gp.output_dim() != n || g.nrows() != n {
        return Err(ControllerError::NotSquare { outputs: gp.output_dim(), inputs: g.nrows() });
    }
    let d = gp.num_points();
    let origin = DVector::zeros(n);

    // linearization A = W Jk, Jk rows = grad K_i(0)^T
    let jk = DMatrix::from_fn(d, n, |i, dd| gp.kernels[i].grad(&origin)[dd]);
    let a = gp.weight_matrix() * &jk;
    let p = solve_riccati(&a, &g, &cost.q.q_matrix(n), &cost.r)?;

    // ridge fit of alpha' with alpha = K_XX^-1 alpha':
    // V(x) = alpha^T (k(x) - k(0)) = alpha'^T K_XX^-1 (k(x) - k(0))
    let gram = gp.gram();
    let chol = Cholesky::new(gram).ok_or(ControllerError::SingularValueFit)?;
    let k0 = DVector::from_fn(d, |i, _| gp.kernels[i].eval(&origin));
    let mut design = DMatrix::zeros(check_states.len(), d);
    let mut target = DVector::zeros(check_states.len());
    for (row, x) in check_states.iter().enumerate() {
        let kx = DVector::from_fn(d, |i, _| gp.kernels[i].eval(x));
        let bk = chol.solve(&(kx - &k0));
        design.set_row(row, &bk.transpose());
        target[row] = (x.transpose() * &p * x)[(0, 0)];
    }
    let normal = design.transpose() * &design + DMatrix::identity(d, d) * kappa_alpha;
    let rhs = design.transpose() * target;
    let alpha_w = Cholesky::new(normal)
        .ok_or(ControllerError::SingularValueFit)?
        .solve(&rhs);
    let alpha = chol.solve(&alpha_w);
    let offset = alpha.dot(&k0);

    Ok(ClosedLoopModel {
        gp: gp.clone(),
        g,
        cost,
        value: ValueFunctionParams { alpha: alpha.iter().cloned().collect(), offset },
    })
}

// per-check-state precomputation: kernel gradients, drift, cost, margin
struct StateData {
    jk: DMatrix<f64>, // n x d, column i = grad K_i(x)
    f: DVector<f64>,
    q: f64,
    eta: f64,
}

struct PenaltyObjective {
    data: Vec<StateData>,
    gmat: DMatrix<f64>,
    kappa: f64,
}

impl PenaltyObjective {
    fn new(model: &ClosedLoopModel, check_states: &[DVector<f64>], params: &SynthesisParams) -> Self {
        let gp = &model.gp;
        let d = gp.num_points();
        let n = gp.state_dim();
        let data = check_states
            .iter()
            .map(|x| {
                let mut jk = DMatrix::zeros(n, d);
                for i in 0..d {
                    jk.set_column(i, &gp.kernels[i].grad(x));
                }
                StateData {
                    jk,
                    f: gp.eval(x),
                    q: model.cost.q.eval(x),
                    eta: params.eta.eval(x),
                }
            })
            .collect();
        PenaltyObjective { data, gmat: model.gmat(), kappa: params.kappa }
    }

    fn eval(&self, alpha: &DVector<f64>) -> (f64, f64, f64, DVector<f64>) {
        let d = if let Some(sd) = self.data.first() { sd.jk.ncols() } else { 0 };
        let mut hjb_term = 0.0;
        let mut grad = DVector::zeros(d);
        let mut worst = f64::NEG_INFINITY;
        let mut worst_idx = 0;
        for (idx, sd) in self.data.iter().enumerate() {
            let p = &sd.jk * alpha;
            let gp_ = &self.gmat * &p;
            let h = p.dot(&sd.f) - 0.5 * p.dot(&gp_) + sd.q;
            hjb_term += h * h;
            grad += sd.jk.transpose() * (&sd.f - &gp_) * (2.0 * h);
            let vdot = p.dot(&(&sd.f - &gp_)) + sd.eta;
            if vdot > worst {
                worst = vdot;
                worst_idx = idx;
            }
        }
        let violation = worst.max(0.0);
        let lyap_term = self.kappa * violation * violation;
        if violation > 0.0 {
            let sd = &self.data[worst_idx];
            let p = &sd.jk * alpha;
            grad += sd.jk.transpose() * (&sd.f - &self.gmat * &p * 2.0)
                * (2.0 * self.kappa * violation);
        }
        (hjb_term + lyap_term, hjb_term, lyap_term, grad)
    }
}

/// Evaluates the synthesis objective
/// `sum_k H(x_k)^2 + kappa max{0, max_k (Vdot(x_k) + eta(x_k))}^2`
/// and its gradient with respect to the kernel weights `alpha`.
pub fn synthesis_objective(
    model: &ClosedLoopModel,
    check_states: &[DVector<f64>],
    params: &SynthesisParams,
    alpha: &DVector<f64>,
) -> (f64, DVector<f64>) {
    let (obj, _, _, grad) = PenaltyObjective::new(model, check_states, params).eval(alpha);
    (obj, grad)
}

/// Improves the value function by steepest descent on the whitened weights
/// `alpha' = K_XX alpha` of the objective
/// `sum_k H(x_k)^2 + kappa max{0, max_k (Vdot(x_k) + eta(x_k))}^2`,
/// returning the best iterate and a trace of the objective terms.
pub fn synthesize(
    model: &ClosedLoopModel,
    check_states: &[DVector<f64>],
    params: &SynthesisParams,
) -> Result<(ClosedLoopModel, Vec<TraceRow>), ControllerError> {
    let gp = &model.gp;
    let d = gp.num_points();
    let n = gp.state_dim();
    let chol = Cholesky::new(gp.gram()).ok_or(ControllerError::SingularValueFit)?;

    let problem = PenaltyObjective::new(model, check_states, params);
    let mut alpha = DVector::from_column_slice(&model.value.alpha);
    let eval = |alpha: &DVector<f64>| problem.eval(alpha);

    let (mut obj, h0, l0, mut grad_alpha) = eval(&alpha);
    let mut best_obj = obj;
    let mut best_alpha = alpha.clone();
    let mut trace = vec![TraceRow { iter: 0, objective: obj, hjb_term: h0, lyap_term: l0 }];
    let stride = (params.iterations / 100).max(1);
    // the configured step is the largest one tried; it is halved whenever a
    // step fails to decrease the objective, so the iteration cannot blow up
    let mut step = params.step;
    for iter in 1..=params.iterations {
        // whitened steepest descent: alpha' step maps back through K_XX^-1
        let grad_w = chol.solve(&grad_alpha);
        let mut accepted = false;
        for _ in 0..80 {
            let cand = &alpha - &grad_w * step;
            let (cobj, ch, cl, cgrad) = eval(&cand);
            if cobj.is_finite() && cobj <= obj {
                alpha = cand;
                obj = cobj;
                grad_alpha = cgrad;
                if iter % stride == 0 || iter == params.iterations {
                    trace.push(TraceRow { iter, objective: cobj, hjb_term: ch, lyap_term: cl });
                }
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        if obj < best_obj {
            best_obj = obj;
            best_alpha = alpha.clone();
        }
    }

    let origin = DVector::zeros(n);
    let k0 = DVector::from_fn(d, |i, _| gp.kernels[i].eval(&origin));
    let mut out = model.clone();
    out.value = ValueFunctionParams {
        alpha: best_alpha.iter().cloned().collect(),
        offset: best_alpha.dot(&k0),
    };
    Ok((out, trace))
}
