//! Stability certification of the closed loop over a simplicial cover: a
//! certified lower bound on the value function and upper bound on its
//! closed-loop derivative per simplex, assembled from the closed-form
//! affine-times-kernel factorization of the gradient and drift.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compose::{sum_product_bounds, BoundExpr, ComposeError, SimplexBound};
use crate::controller::ClosedLoopModel;
use crate::geometry::{GeometryError, Simplex, Triangulation, TriangulationSummary};
use crate::kernel::{kernel_tau_bounds, BoundPair};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertifierError {
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Per-simplex certification outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimplexVerdict {
    pub id: usize,
    pub value_lower: f64,
    pub vdot_upper: f64,
    pub contains_origin: bool,
    pub certified: bool,
}

/// Certificate over a whole triangulation, including the largest connected
/// certified component around the lowest-value certified simplex.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityCertificate {
    pub triangulation: TriangulationSummary,
    pub margin: f64,
    pub verdicts: Vec<SimplexVerdict>,
    pub certified_fraction: f64,
    /// Simplex ids of the connected certified region.
    pub region: Vec<usize>,
    /// Hash of the controller weights the certificate was computed for.
    pub controller_hash: u64,
}

/// FNV-1a over the raw value-function weight bytes; stable across runs and
/// platforms, unlike the std hasher.
pub fn controller_hash(m: &ClosedLoopModel) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut feed = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for a in &m.value.alpha {
        feed(&a.to_bits().to_le_bytes());
    }
    feed(&m.value.offset.to_bits().to_le_bytes());
    h
}

/// Coefficients of the affine-times-kernel factorization at `x`:
/// `P_i(x) = -alpha_i W (x - x_i)` so that `grad V(x) = sum_i P_i(x) K_i(x)`,
/// and `A_i(x) = w_i - G P_i(x)` so that the closed-loop drift is
/// `sum_i A_i(x) K_i(x)`.
pub fn closed_loop_coeffs(
    m: &ClosedLoopModel,
    x: &DVector<f64>,
    i: usize,
) -> (DVector<f64>, DVector<f64>) {
    let n = m.state_dim();
    let k = &m.gp.kernels[i];
    let alpha = m.value.alpha[i];
    let p = DVector::from_fn(n, |d, _| -alpha * k.inv_lengthscale[d] * (x[d] - k.center[d]));
    let w_col = DVector::from_fn(n, |d, _| m.gp.weights[d][i]);
    let a = w_col - m.gmat() * &p;
    (p, a)
}

struct SimplexWork {
    /// kernel values at each vertex: kv[k][i]
    kv: Vec<Vec<f64>>,
    /// kernel interpolation margins, shared across kernels of equal shape
    eps_k: Vec<BoundPair>,
    tau: f64,
}

fn simplex_work(m: &ClosedLoopModel, s: &Simplex) -> SimplexWork {
    let kv = s
        .vertices()
        .iter()
        .map(|x| m.gp.kernels.iter().map(|k| k.eval(x)).collect())
        .collect();
    let eps_k = m
        .gp
        .kernels
        .iter()
        .map(|k| kernel_tau_bounds(k, s.num_vertices(), s.tau()))
        .collect();
    SimplexWork { kv, eps_k, tau: s.tau() }
}

/// Certified lower bound of the value function on the simplex:
/// `min_k V(x_k) - sum_i (eps_i^L max{0, alpha_i} + eps_i^U max{0, -alpha_i})`.
pub fn value_lower_bound(m: &ClosedLoopModel, s: &Simplex) -> f64 {
    let work = simplex_work(m, s);
    let min_v = s
        .vertices()
        .iter()
        .map(|x| m.value(x))
        .fold(f64::INFINITY, f64::min);
    let mut eps = 0.0;
    for (i, a) in m.value.alpha.iter().enumerate() {
        eps += work.eps_k[i].lower * a.max(0.0) + work.eps_k[i].upper * (-a).max(0.0);
    }
    min_v - eps
}

fn component_bounds(
    m: &ClosedLoopModel,
    s: &Simplex,
    work: &SimplexWork,
    gmat: &DMatrix<f64>,
) -> Result<(Vec<SimplexBound>, Vec<SimplexBound>), ComposeError> {
    let n = m.state_dim();
    let d = m.gp.num_points();
    let nv = s.num_vertices();
    // affine coefficient values at each vertex: p_coef[k][i] (n-vector each)
    let coeffs: Vec<Vec<(DVector<f64>, DVector<f64>)>> = s
        .vertices()
        .iter()
        .map(|x| {
            (0..d)
                .map(|i| {
                    let k = &m.gp.kernels[i];
                    let alpha = m.value.alpha[i];
                    let p = DVector::from_fn(n, |dd, _| {
                        -alpha * k.inv_lengthscale[dd] * (x[dd] - k.center[dd])
                    });
                    let w_col = DVector::from_fn(n, |dd, _| m.gp.weights[dd][i]);
                    let a = w_col - gmat * &p;
                    (p, a)
                })
                .collect()
        })
        .collect();

    let mut grads = Vec::with_capacity(n);
    let mut drifts = Vec::with_capacity(n);
    for j in 0..n {
        let mut pf: Vec<(SimplexBound, SimplexBound)> = Vec::with_capacity(d);
        let mut af: Vec<(SimplexBound, SimplexBound)> = Vec::with_capacity(d);
        for i in 0..d {
            let kern = SimplexBound {
                vertex_values: (0..nv).map(|k| work.kv[k][i]).collect(),
                eps: work.eps_k[i],
            };
            let pvals = SimplexBound {
                vertex_values: (0..nv).map(|k| coeffs[k][i].0[j]).collect(),
                eps: BoundPair::ZERO,
            };
            let avals = SimplexBound {
                vertex_values: (0..nv).map(|k| coeffs[k][i].1[j]).collect(),
                eps: BoundPair::ZERO,
            };
            pf.push((pvals, kern.clone()));
            af.push((avals, kern));
        }
        let grad_eps = sum_product_bounds(&pf, work.tau)?;
        let drift_eps = sum_product_bounds(&af, work.tau)?;
        let grad_vals: Vec<f64> = (0..nv)
            .map(|k| pf.iter().map(|(p, kr)| p.vertex_values[k] * kr.vertex_values[k]).sum())
            .collect();
        let drift_vals: Vec<f64> = (0..nv)
            .map(|k| af.iter().map(|(a, kr)| a.vertex_values[k] * kr.vertex_values[k]).sum())
            .collect();
        grads.push(SimplexBound { vertex_values: grad_vals, eps: grad_eps });
        drifts.push(SimplexBound { vertex_values: drift_vals, eps: drift_eps });
    }
    Ok((grads, drifts))
}

/// Certified upper bound of the closed-loop value derivative
/// `Vdot = grad V . (f - G grad V)` on the simplex.
pub fn vdot_upper_bound(m: &ClosedLoopModel, s: &Simplex) -> Result<f64, CertifierError> {
    let work = simplex_work(m, s);
    let gmat = m.gmat();
    let (grads, drifts) = component_bounds(m, s, &work, &gmat)?;
    let nv = s.num_vertices();
    let factors: Vec<(SimplexBound, SimplexBound)> =
        grads.into_iter().zip(drifts).collect();
    let eps = sum_product_bounds(&factors, work.tau)?;
    let max_v = (0..nv)
        .map(|k| {
            factors
                .iter()
                .map(|(p, f)| p.vertex_values[k] * f.vertex_values[k])
                .sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(max_v + eps.upper)
}

/// The value function as a bound expression (kernel mixture minus offset).
pub fn value_expr(m: &ClosedLoopModel) -> BoundExpr {
    BoundExpr::kernel_mixture(&m.gp.kernels, &m.value.alpha, -m.value.offset)
}

fn affine_kernel_sum(m: &ClosedLoopModel, coef: impl Fn(usize) -> (Vec<f64>, f64)) -> BoundExpr {
    let d = m.gp.num_points();
    let children = (0..d)
        .map(|i| {
            let (a, b) = coef(i);
            BoundExpr::product(vec![
                BoundExpr::linear(a, b),
                BoundExpr::Kernel(m.gp.kernels[i].clone()),
            ])
        })
        .collect();
    BoundExpr::sum(children, vec![1.0; d])
}

/// Component `j` of `grad V` as a sum of affine-times-kernel products.
pub fn value_grad_expr(m: &ClosedLoopModel, j: usize) -> BoundExpr {
    affine_kernel_sum(m, |i| {
        let k = &m.gp.kernels[i];
        let alpha = m.value.alpha[i];
        let mut a = vec![0.0; m.state_dim()];
        a[j] = -alpha * k.inv_lengthscale[j];
        let b = alpha * k.inv_lengthscale[j] * k.center[j];
        (a, b)
    })
}

/// Component `j` of the closed-loop drift `f - G grad V` as a sum of
/// affine-times-kernel products.
pub fn closed_loop_drift_expr(m: &ClosedLoopModel, j: usize) -> BoundExpr {
    let gmat = m.gmat();
    affine_kernel_sum(m, |i| {
        let k = &m.gp.kernels[i];
        let alpha = m.value.alpha[i];
        let n = m.state_dim();
        let mut a = vec![0.0; n];
        let mut b = m.gp.weights[j][i];
        for e in 0..n {
            a[e] = alpha * gmat[(j, e)] * k.inv_lengthscale[e];
            b -= alpha * gmat[(j, e)] * k.inv_lengthscale[e] * k.center[e];
        }
        (a, b)
    })
}

/// `Vdot` as a generic sum-of-products expression; bounding it with the
/// recursive expression rules must coincide with [`vdot_upper_bound`].
pub fn vdot_expr(m: &ClosedLoopModel) -> BoundExpr {
    let n = m.state_dim();
    let children = (0..n)
        .map(|j| {
            BoundExpr::product(vec![value_grad_expr(m, j), closed_loop_drift_expr(m, j)])
        })
        .collect();
    BoundExpr::sum(children, vec![1.0; n])
}

/// Certifies every simplex of the triangulation: a simplex passes when it
/// excludes the origin, its value lower bound clears `margin`, and its
/// derivative upper bound clears `-margin`.
pub fn certify(
    m: &ClosedLoopModel,
    t: &Triangulation,
    margin: f64,
) -> Result<StabilityCertificate, CertifierError> {
    let origin = DVector::zeros(m.state_dim());
    let verdicts: Vec<SimplexVerdict> = t
        .simplices()
        .par_iter()
        .enumerate()
        .map(|(id, s)| {
            let value_lower = value_lower_bound(m, s);
            let vdot_upper = vdot_upper_bound(m, s)?;
            let contains_origin = s.contains(&origin);
            Ok(SimplexVerdict {
                id,
                value_lower,
                vdot_upper,
                contains_origin,
                certified: !contains_origin && value_lower > margin && vdot_upper < -margin,
            })
        })
        .collect::<Result<_, CertifierError>>()?;
    let certified_count = verdicts.iter().filter(|v| v.certified).count();
    let region = connected_region(m, t, &verdicts);
    Ok(StabilityCertificate {
        triangulation: t.summary(),
        margin,
        verdicts,
        certified_fraction: certified_count as f64 / t.len().max(1) as f64,
        region,
        controller_hash: controller_hash(m),
    })
}

/// Flood fill over certified simplices sharing a vertex, seeded at the
/// certified simplex of smallest value, so the region is connected.
fn connected_region(
    m: &ClosedLoopModel,
    t: &Triangulation,
    verdicts: &[SimplexVerdict],
) -> Vec<usize> {
    use std::collections::{BTreeSet, HashMap, VecDeque};
    let quant = |x: f64| (x * 1e9).round() as i64;
    let mut by_vertex: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    let mut seed = None;
    let mut seed_value = f64::INFINITY;
    for v in verdicts {
        if !v.certified {
            continue;
        }
        let s = &t.simplices()[v.id];
        for p in s.vertices() {
            let key: Vec<i64> = p.iter().map(|c| quant(*c)).collect();
            by_vertex.entry(key).or_default().push(v.id);
        }
        let val = m.value(&s.centroid());
        if val < seed_value {
            seed_value = val;
            seed = Some(v.id);
        }
    }
    let Some(seed) = seed else { return Vec::new() };
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::from([seed]);
    seen.insert(seed);
    while let Some(id) = queue.pop_front() {
        for p in t.simplices()[id].vertices() {
            let key: Vec<i64> = p.iter().map(|c| quant(*c)).collect();
            if let Some(neighbors) = by_vertex.get(&key) {
                for &nb in neighbors {
                    if seen.insert(nb) {
                        queue.push_back(nb);
                    }
                }
            }
        }
    }
    seen.into_iter().collect()
}
