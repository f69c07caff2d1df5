//! Simplices, barycentric coordinates, linear interpolation, and the
//! triangulation of an axis-aligned box into a simplicial cover.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance for the affine-independence check.
const DEGENERACY_TOL: f64 = 1e-10;
/// Barycentric slack for point-in-simplex membership.
const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("simplex vertices are affinely dependent (sigma_min/sigma_max = {ratio:.3e})")]
    DegenerateSimplex { ratio: f64 },
    #[error("expected {expected} vertices of dimension {dim}, got {got}")]
    BadVertexCount { expected: usize, dim: usize, got: usize },
    #[error("invalid box: lower >= upper in dimension {dim}")]
    InvalidBox { dim: usize },
}

/// A nondegenerate simplex with `n + 1` vertices in `R^n`.
///
/// `tau` is half the maximum pairwise vertex distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Simplex {
    vertices: Vec<DVector<f64>>,
    tau: f64,
}

impl Simplex {
    /// Builds a simplex from exactly `n + 1` affinely independent points.
    pub fn new(vertices: Vec<DVector<f64>>) -> Result<Self, GeometryError> {
        let n = match vertices.first() {
            Some(v) => v.len(),
            None => {
                return Err(GeometryError::BadVertexCount { expected: 1, dim: 0, got: 0 });
            }
        };
        if vertices.len() != n + 1 || vertices.iter().any(|v| v.len() != n) {
            return Err(GeometryError::BadVertexCount {
                expected: n + 1,
                dim: n,
                got: vertices.len(),
            });
        }
        // Edge matrix columns are v_k - v_0; full rank n means affine independence.
        let edges = DMatrix::from_fn(n, n, |r, c| vertices[c + 1][r] - vertices[0][r]);
        let svals = edges.singular_values();
        let smax = svals.max();
        let smin = svals.min();
        if !(smax > 0.0) || smin < DEGENERACY_TOL * smax {
            return Err(GeometryError::DegenerateSimplex {
                ratio: if smax > 0.0 { smin / smax } else { 0.0 },
            });
        }
        let mut max_d2: f64 = 0.0;
        for k in 0..vertices.len() {
            for l in (k + 1)..vertices.len() {
                max_d2 = max_d2.max((&vertices[k] - &vertices[l]).norm_squared());
            }
        }
        Ok(Self { vertices, tau: max_d2.sqrt() / 2.0 })
    }

    pub fn vertices(&self) -> &[DVector<f64>] {
        &self.vertices
    }

    pub fn dim(&self) -> usize {
        self.vertices[0].len()
    }

    /// Number of vertices, `n + 1`.
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Half the maximum pairwise vertex distance.
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn centroid(&self) -> DVector<f64> {
        let mut c = DVector::zeros(self.dim());
        for v in &self.vertices {
            c += v;
        }
        c / self.vertices.len() as f64
    }

    /// Volume via the edge-matrix determinant.
    pub fn volume(&self) -> f64 {
        let n = self.dim();
        let edges = DMatrix::from_fn(n, n, |r, c| self.vertices[c + 1][r] - self.vertices[0][r]);
        edges.determinant().abs() / factorial(n)
    }

    /// Barycentric coordinates of `x`, or `None` if `x` lies outside the
    /// simplex (beyond the membership slack).
    pub fn barycentric_of(&self, x: &DVector<f64>) -> Option<BarycentricPoint> {
        let w = self.barycentric_unclamped(x);
        if w.iter().all(|&s| s >= -MEMBERSHIP_TOL) {
            Some(BarycentricPoint { weights: w })
        } else {
            None
        }
    }

    /// Solves the (n+1) x (n+1) system for the barycentric weights without
    /// the membership test.
    pub fn barycentric_unclamped(&self, x: &DVector<f64>) -> Vec<f64> {
        let n = self.dim();
        let m = DMatrix::from_fn(n + 1, n + 1, |r, c| {
            if r < n {
                self.vertices[c][r]
            } else {
                1.0
            }
        });
        let mut rhs = DVector::zeros(n + 1);
        rhs.rows_mut(0, n).copy_from(x);
        rhs[n] = 1.0;
        let sol = m.lu().solve(&rhs).expect("nondegenerate simplex system");
        sol.iter().copied().collect()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.barycentric_of(x).is_some()
    }

    /// The point with the given barycentric weights.
    pub fn point_at(&self, b: &BarycentricPoint) -> DVector<f64> {
        let mut x = DVector::zeros(self.dim());
        for (s, v) in b.weights.iter().zip(&self.vertices) {
            x += *s * v;
        }
        x
    }

    /// Linear interpolation of per-vertex values at `b`.
    pub fn interpolate(&self, vertex_values: &[f64], b: &BarycentricPoint) -> f64 {
        assert_eq!(vertex_values.len(), self.num_vertices());
        assert_eq!(b.weights.len(), self.num_vertices());
        b.weights.iter().zip(vertex_values).map(|(s, v)| s * v).sum()
    }

    /// Rescales the simplex about its centroid by `factor`.
    pub fn dilate(&self, factor: f64) -> Simplex {
        let c = self.centroid();
        let vertices = self.vertices.iter().map(|v| &c + (v - &c) * factor).collect();
        Simplex::new(vertices).expect("dilation preserves nondegeneracy")
    }
}

/// Convex weights over the vertices of a simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct BarycentricPoint {
    weights: Vec<f64>,
}

impl BarycentricPoint {
    /// Clamps tiny negatives and renormalizes; weights must sum to 1 within 1e-12.
    pub fn new(weights: Vec<f64>) -> Self {
        let sum: f64 = weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "barycentric weights must sum to 1");
        assert!(weights.iter().all(|&w| w >= -1e-12));
        Self { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Axis-aligned box given by per-dimension bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, GeometryError> {
        assert_eq!(lower.len(), upper.len());
        for d in 0..lower.len() {
            if lower[d] >= upper[d] {
                return Err(GeometryError::InvalidBox { dim: d });
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|d| self.upper[d] - self.lower[d]).product()
    }

    /// Evenly spaced grid including both endpoints, `points_per_dim^n` points.
    pub fn grid(&self, points_per_dim: usize) -> Vec<DVector<f64>> {
        assert!(points_per_dim >= 2);
        let n = self.dim();
        let mut out = Vec::with_capacity(points_per_dim.pow(n as u32));
        let mut idx = vec![0usize; n];
        loop {
            let p = DVector::from_fn(n, |d, _| {
                self.lower[d]
                    + (self.upper[d] - self.lower[d]) * idx[d] as f64
                        / (points_per_dim - 1) as f64
            });
            out.push(p);
            let mut d = 0;
            loop {
                idx[d] += 1;
                if idx[d] < points_per_dim {
                    break;
                }
                idx[d] = 0;
                d += 1;
                if d == n {
                    return out;
                }
            }
        }
    }
}

/// A simplicial cover of a box: every grid cell is partitioned into `n!`
/// Kuhn simplices (for n = 2 this is the two-triangles-per-cell pattern
/// with the hypotenuse along the anti-diagonal).
#[derive(Debug, Clone)]
pub struct Triangulation {
    box_bounds: BoxBounds,
    steps: Vec<f64>,
    cells_per_dim: Vec<usize>,
    simplices: Vec<Simplex>,
}

/// Compact serialized form; simplices are regenerated deterministically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriangulationSummary {
    pub box_bounds: BoxBounds,
    pub steps: Vec<f64>,
    pub simplex_count: usize,
}

impl Triangulation {
    /// Partitions `box_bounds` with the requested per-dimension step.
    ///
    /// The step is shrunk to the nearest exact divisor of each side.
    pub fn new(box_bounds: BoxBounds, requested_steps: &[f64]) -> Result<Self, GeometryError> {
        let n = box_bounds.dim();
        assert_eq!(requested_steps.len(), n);
        assert!(requested_steps.iter().all(|&s| s > 0.0));
        let mut steps = Vec::with_capacity(n);
        let mut cells_per_dim = Vec::with_capacity(n);
        for d in 0..n {
            let len = box_bounds.upper[d] - box_bounds.lower[d];
            let m = (len / requested_steps[d]).round().max(1.0);
            let m = if (len / requested_steps[d] - m).abs() <= 1e-9 * m {
                m as usize
            } else {
                (len / requested_steps[d]).ceil() as usize
            };
            cells_per_dim.push(m);
            steps.push(len / m as f64);
        }
        let mut simplices = Vec::new();
        let num_cells: usize = cells_per_dim.iter().product();
        let perms = permutations(n);
        for cell in 0..num_cells {
            for perm in &perms {
                simplices.push(kuhn_simplex(&box_bounds, &steps, &cells_per_dim, cell, perm));
            }
        }
        Ok(Self { box_bounds, steps, cells_per_dim, simplices })
    }

    pub fn uniform(box_bounds: BoxBounds, step: f64) -> Result<Self, GeometryError> {
        let steps = vec![step; box_bounds.dim()];
        Self::new(box_bounds, &steps)
    }

    pub fn box_bounds(&self) -> &BoxBounds {
        &self.box_bounds
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    pub fn simplices(&self) -> &[Simplex] {
        &self.simplices
    }

    pub fn len(&self) -> usize {
        self.simplices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.simplices.is_empty()
    }

    /// Regenerates one simplex from its cell and permutation index.
    pub fn simplex_at(&self, cell: usize, perm_index: usize) -> Simplex {
        let perms = permutations(self.box_bounds.dim());
        kuhn_simplex(&self.box_bounds, &self.steps, &self.cells_per_dim, cell, &perms[perm_index])
    }

    pub fn summary(&self) -> TriangulationSummary {
        TriangulationSummary {
            box_bounds: self.box_bounds.clone(),
            steps: self.steps.clone(),
            simplex_count: self.simplices.len(),
        }
    }

    pub fn from_summary(s: &TriangulationSummary) -> Result<Self, GeometryError> {
        let t = Self::new(s.box_bounds.clone(), &s.steps)?;
        assert_eq!(t.len(), s.simplex_count, "triangulation summary count mismatch");
        Ok(t)
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    let mut items: Vec<usize> = (0..n).collect();
    heap_permute(&mut items, n, &mut out);
    out.sort();
    out
}

fn heap_permute(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == 1 {
        out.push(items.clone());
        return;
    }
    for i in 0..k {
        heap_permute(items, k - 1, out);
        if k % 2 == 0 {
            items.swap(i, k - 1);
        } else {
            items.swap(0, k - 1);
        }
    }
}

/// Kuhn simplex for one cell and one axis permutation. The first axis is
/// reflected inside the cell so that for n = 2 the cell diagonal runs along
/// the anti-diagonal.
fn kuhn_simplex(
    box_bounds: &BoxBounds,
    steps: &[f64],
    cells_per_dim: &[usize],
    cell: usize,
    perm: &[usize],
) -> Simplex {
    let n = box_bounds.dim();
    let mut cell_idx = vec![0usize; n];
    let mut rem = cell;
    for d in 0..n {
        cell_idx[d] = rem % cells_per_dim[d];
        rem /= cells_per_dim[d];
    }
    let corner = DVector::from_fn(n, |d, _| box_bounds.lower[d] + cell_idx[d] as f64 * steps[d]);
    let mut vertices = Vec::with_capacity(n + 1);
    let mut y = DVector::zeros(n);
    vertices.push(cell_point(&corner, &y, steps, n));
    for &axis in perm {
        y[axis] += steps[axis];
        vertices.push(cell_point(&corner, &y, steps, n));
    }
    Simplex::new(vertices).expect("grid cell simplex is nondegenerate")
}

fn cell_point(corner: &DVector<f64>, y: &DVector<f64>, steps: &[f64], n: usize) -> DVector<f64> {
    DVector::from_fn(n, |d, _| {
        if d == 0 {
            corner[d] + (steps[0] - y[0])
        } else {
            corner[d] + y[d]
        }
    })
}
