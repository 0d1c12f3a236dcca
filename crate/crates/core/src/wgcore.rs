//! Per-cell weak Galerkin machinery.
//!
//! Local DOF vectors are laid out as the interior block `v_0` (dim `P_k`)
//! followed by one block of `k + 1` edge coefficients per local edge. Edge
//! blocks are always expressed in the edge's canonical parameterization, so
//! both neighbours of an interior edge read the same coefficients.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_index, Result, WgError};
use crate::mesh::{Mesh, Point};
use crate::polyquad::{
    dim_pk, edge_quadrature, triangle_quadrature, CellBasis, EdgeBasis, LineRule, TriangleRule, VectorBasis,
};

/// Scalar field evaluated at physical points.
pub trait ScalarField: Sync {
    fn value(&self, p: Point) -> f64;
}

impl<F: Fn(Point) -> f64 + Sync> ScalarField for F {
    fn value(&self, p: Point) -> f64 {
        self(p)
    }
}

/// Stabilizer weighting for a single assembly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stabilizer {
    /// `γ Σ_T h_T^{-1} <v_0 - v_b, w_0 - w_b>_{∂T}`.
    Gamma(f64),
    /// `α/3 Σ_T Σ_e h_T^{-2} |e|^{-1} |T| <v_0 - v_b, w_0 - w_b>_e`.
    Alpha(f64),
}

impl Stabilizer {
    pub fn validate(self) -> Result<Self> {
        match self {
            Stabilizer::Gamma(g) if !(g > 0.0 && g.is_finite()) => {
                Err(WgError::param(format!("stabilizer gamma must be positive, got {g}")))
            }
            Stabilizer::Alpha(a) if !(a > 0.0 && a.is_finite()) => {
                Err(WgError::param(format!("stabilizer alpha must be positive, got {a}")))
            }
            s => Ok(s),
        }
    }

    /// Weight multiplying `<v_0 - v_b, w_0 - w_b>_e` for local edge `i`.
    fn edge_weight(self, mesh: &Mesh, cell: usize, i: usize) -> f64 {
        let h = mesh.diameter[cell];
        match self {
            Stabilizer::Gamma(g) => g / h,
            Stabilizer::Alpha(a) => {
                let len = mesh.length[mesh.cell_edges[cell][i].edge];
                a / 3.0 * mesh.area[cell] / (h * h * len)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalDofLayout {
    pub k: usize,
}

impl LocalDofLayout {
    pub fn n_cell(&self) -> usize {
        dim_pk(self.k)
    }

    pub fn n_edge(&self) -> usize {
        self.k + 1
    }

    pub fn edge_offset(&self, local_edge: usize) -> usize {
        self.n_cell() + local_edge * self.n_edge()
    }

    pub fn n_local(&self) -> usize {
        self.n_cell() + 3 * self.n_edge()
    }
}

/// Coefficients of `∇_w v` in the [`VectorBasis`] as a linear map of the
/// local DOFs.
#[derive(Debug, Clone)]
pub struct WeakGradientMap {
    pub matrix: DMatrix<f64>,
    /// Vector-basis mass matrix the map was solved against.
    pub mass: DMatrix<f64>,
}

/// Quadrature rules used by the local computations for a given degree.
#[derive(Debug, Clone)]
pub struct LocalRules {
    pub cell: TriangleRule,
    pub edge: LineRule,
    /// Elevated rules for non-polynomial integrands.
    pub cell_fine: TriangleRule,
    pub edge_fine: LineRule,
}

impl LocalRules {
    pub fn new(k: usize) -> Result<LocalRules> {
        Ok(LocalRules {
            cell: triangle_quadrature(2 * k + 3)?,
            edge: edge_quadrature(2 * k + 3)?,
            cell_fine: triangle_quadrature(2 * k + 6)?,
            edge_fine: edge_quadrature(2 * k + 6)?,
        })
    }
}

/// A quadrature point on local edge `i`: physical position, canonical
/// parameter and weight including `|e|`.
#[derive(Debug, Clone, Copy)]
struct EdgePoint {
    x: Point,
    t: f64,
    w: f64,
}

/// All bases and geometry of one cell needed by the local forms.
#[derive(Debug, Clone)]
pub struct LocalElement<'m> {
    pub mesh: &'m Mesh,
    pub cell: usize,
    pub layout: LocalDofLayout,
    pub basis: CellBasis,
    pub vector: VectorBasis,
    pub edge_basis: EdgeBasis,
}

impl<'m> LocalElement<'m> {
    pub fn new(mesh: &'m Mesh, cell: usize, k: usize) -> Result<Self> {
        check_index("cell", cell, mesh.n_cells())?;
        if k == 0 {
            return Err(WgError::param("WG degree k must be at least 1"));
        }
        Ok(LocalElement {
            mesh,
            cell,
            layout: LocalDofLayout { k },
            basis: CellBasis::new(mesh, cell, k)?,
            vector: VectorBasis::new(mesh, cell, k)?,
            edge_basis: EdgeBasis::new(k),
        })
    }

    pub fn k(&self) -> usize {
        self.layout.k
    }

    fn edge_points(&self, i: usize, rule: &LineRule) -> Vec<EdgePoint> {
        let (a, b) = self.mesh.local_edge_endpoints(self.cell, i);
        let ce = self.mesh.cell_edges[self.cell][i];
        let len = self.mesh.length[ce.edge];
        rule.points
            .iter()
            .zip(&rule.weights)
            .map(|(&s, &w)| EdgePoint {
                x: a + s * (b - a),
                t: if ce.sign > 0 { s } else { 1.0 - s },
                w: w * len,
            })
            .collect()
    }

    /// L² projection onto `P_k(T)`.
    pub fn project_cell(&self, f: &dyn ScalarField, rule: &TriangleRule) -> Result<DVector<f64>> {
        let (pts, w) = rule.on_cell(self.mesh, self.cell);
        let n = self.basis.dim();
        let mut mass = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        for (p, wq) in pts.iter().zip(&w) {
            let phi = self.basis.eval(*p);
            mass += *wq * &phi * phi.transpose();
            rhs += *wq * f.value(*p) * &phi;
        }
        solve_spd(mass, rhs, "cell projection")
    }

    /// L² projection onto `[P_{k-1}(T)]^2`.
    pub fn project_vector(&self, f: &dyn Fn(Point) -> Point, rule: &TriangleRule) -> Result<DVector<f64>> {
        let (pts, w) = rule.on_cell(self.mesh, self.cell);
        let n = self.vector.dim();
        let mut mass = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        for (p, wq) in pts.iter().zip(&w) {
            let basis = self.vector.eval(*p);
            let fp = f(*p);
            for i in 0..n {
                rhs[i] += wq * basis[i].dot(&fp);
                for j in 0..n {
                    mass[(i, j)] += wq * basis[i].dot(&basis[j]);
                }
            }
        }
        solve_spd(mass, rhs, "vector projection")
    }

    pub fn vector_mass(&self, rule: &TriangleRule) -> DMatrix<f64> {
        let (pts, w) = rule.on_cell(self.mesh, self.cell);
        let n = self.vector.dim();
        let mut mass = DMatrix::zeros(n, n);
        for (p, wq) in pts.iter().zip(&w) {
            let basis = self.vector.eval(*p);
            for i in 0..n {
                for j in 0..n {
                    mass[(i, j)] += wq * basis[i].dot(&basis[j]);
                }
            }
        }
        mass
    }

    pub fn cell_mass(&self, rule: &TriangleRule) -> DMatrix<f64> {
        let (pts, w) = rule.on_cell(self.mesh, self.cell);
        let n = self.basis.dim();
        let mut mass = DMatrix::zeros(n, n);
        for (p, wq) in pts.iter().zip(&w) {
            let phi = self.basis.eval(*p);
            mass += *wq * &phi * phi.transpose();
        }
        mass
    }

    /// Right-hand side of the weak-gradient definition: row `j` maps local
    /// DOFs to `-(v_0, ∇·w_j)_T + <v_b, w_j·n>_{∂T}`.
    pub fn weak_gradient_rhs(&self, rules: &LocalRules) -> DMatrix<f64> {
        let layout = self.layout;
        let nv = self.vector.dim();
        let mut r = DMatrix::zeros(nv, layout.n_local());
        let (pts, w) = rules.cell.on_cell(self.mesh, self.cell);
        for (p, wq) in pts.iter().zip(&w) {
            let phi = self.basis.eval(*p);
            let div = self.vector.divergence(*p);
            for j in 0..nv {
                for i in 0..layout.n_cell() {
                    r[(j, i)] -= wq * phi[i] * div[j];
                }
            }
        }
        for e in 0..3 {
            let normal = self.mesh.normals[self.cell][e];
            let off = layout.edge_offset(e);
            for q in self.edge_points(e, &rules.edge) {
                let psi = self.edge_basis.eval(q.t);
                let wv = self.vector.eval(q.x);
                for j in 0..nv {
                    let flux = wv[j].dot(&normal);
                    for m in 0..layout.n_edge() {
                        r[(j, off + m)] += q.w * psi[m] * flux;
                    }
                }
            }
        }
        r
    }

    pub fn weak_gradient_map(&self, rules: &LocalRules) -> Result<WeakGradientMap> {
        let mass = self.vector_mass(&rules.cell);
        let rhs = self.weak_gradient_rhs(rules);
        let chol = mass.clone().cholesky().ok_or_else(|| WgError::Factorization {
            stage: "weak gradient",
            detail: format!("vector mass matrix of cell {} is singular", self.cell),
        })?;
        Ok(WeakGradientMap {
            matrix: chol.solve(&rhs),
            mass,
        })
    }

    /// `<v_0 - v_b, w_0 - w_b>_e` on local edge `e` as an `n_loc × n_loc` matrix.
    pub fn edge_trace_gram(&self, e: usize, rule: &LineRule) -> DMatrix<f64> {
        let layout = self.layout;
        let n = layout.n_local();
        let off = layout.edge_offset(e);
        let mut g = DMatrix::zeros(n, n);
        let mut row = DVector::zeros(n);
        for q in self.edge_points(e, rule) {
            row.fill(0.0);
            let phi = self.basis.eval(q.x);
            let psi = self.edge_basis.eval(q.t);
            row.rows_mut(0, layout.n_cell()).copy_from(&phi);
            row.rows_mut(off, layout.n_edge()).copy_from(&(-psi));
            g.ger(q.w, &row, &row, 1.0);
        }
        g
    }

    pub fn stabilizer(&self, stab: Stabilizer, rules: &LocalRules) -> Result<DMatrix<f64>> {
        let stab = stab.validate()?;
        let n = self.layout.n_local();
        let mut s = DMatrix::zeros(n, n);
        for e in 0..3 {
            s += stab.edge_weight(self.mesh, self.cell, e) * self.edge_trace_gram(e, &rules.edge);
        }
        Ok(s)
    }

    /// `G^T M G + (v_0, w_0)_T + s` for the given stabilizer matrix.
    pub fn aw(&self, stabilizer: &DMatrix<f64>, rules: &LocalRules) -> Result<DMatrix<f64>> {
        let grad = self.weak_gradient_map(rules)?;
        let mut a = grad.matrix.transpose() * &grad.mass * &grad.matrix;
        let nc = self.layout.n_cell();
        let mass = self.cell_mass(&rules.cell);
        let mut block = a.view_mut((0, 0), (nc, nc));
        block += &mass;
        a += stabilizer;
        Ok(symmetrize(a))
    }

    /// Local interpolant `Q_h f` = (`Q_0 f`, `Q_b f` on each edge).
    pub fn interpolate(&self, f: &dyn ScalarField, rules: &LocalRules) -> Result<DVector<f64>> {
        let layout = self.layout;
        let mut v = DVector::zeros(layout.n_local());
        v.rows_mut(0, layout.n_cell())
            .copy_from(&self.project_cell(f, &rules.cell_fine)?);
        for e in 0..3 {
            let edge = self.mesh.cell_edges[self.cell][e].edge;
            let proj = project_edge_with(self.mesh, edge, self.edge_basis, f, &rules.edge_fine);
            v.rows_mut(layout.edge_offset(e), layout.n_edge()).copy_from(&proj);
        }
        Ok(v)
    }

    /// `Σ_e weight_e ‖(v_0 - v_b)‖²_e` on this cell for a local DOF vector.
    pub fn trace_jump_energy(&self, v: &DVector<f64>, weight: impl Fn(usize) -> f64, rule: &LineRule) -> f64 {
        let layout = self.layout;
        let c = v.rows(0, layout.n_cell());
        (0..3)
            .map(|e| {
                let b = v.rows(layout.edge_offset(e), layout.n_edge());
                let jump: f64 = self
                    .edge_points(e, rule)
                    .iter()
                    .map(|q| {
                        let d = self.basis.eval(q.x).dot(&c) - self.edge_basis.eval(q.t).dot(&b);
                        q.w * d * d
                    })
                    .sum();
                weight(e) * jump
            })
            .sum()
    }
}

fn symmetrize(a: DMatrix<f64>) -> DMatrix<f64> {
    let at = a.transpose();
    (a + at) * 0.5
}

fn solve_spd(mass: DMatrix<f64>, rhs: DVector<f64>, stage: &'static str) -> Result<DVector<f64>> {
    let chol = mass.cholesky().ok_or_else(|| WgError::Factorization {
        stage,
        detail: "local mass matrix not positive definite (degenerate cell)".into(),
    })?;
    Ok(chol.solve(&rhs))
}

fn project_edge_with(mesh: &Mesh, edge: usize, basis: EdgeBasis, f: &dyn ScalarField, rule: &LineRule) -> DVector<f64> {
    // The basis is orthonormal in dt, so the projection is a plain moment.
    let (a, b) = mesh.edge_endpoints(edge);
    let mut c = DVector::zeros(basis.dim());
    for (&t, &w) in rule.points.iter().zip(&rule.weights) {
        c += w * f.value(a + t * (b - a)) * basis.eval(t);
    }
    c
}

/// `Q_0 f` on `cell`, computed with the elevated rule.
pub fn project_cell(f: &dyn ScalarField, mesh: &Mesh, cell: usize, k: usize) -> Result<DVector<f64>> {
    let el = LocalElement::new(mesh, cell, k)?;
    el.project_cell(f, &triangle_quadrature(2 * k + 6)?)
}

/// `Q_b f` on `edge` in the canonical parameterization.
pub fn project_edge(f: &dyn ScalarField, mesh: &Mesh, edge: usize, k: usize) -> Result<DVector<f64>> {
    check_index("edge", edge, mesh.n_edges())?;
    Ok(project_edge_with(
        mesh,
        edge,
        EdgeBasis::new(k),
        f,
        &edge_quadrature(2 * k + 6)?,
    ))
}

/// `ℚ_h F` onto `[P_{k-1}(T)]^2`.
pub fn project_vector(f: &dyn Fn(Point) -> Point, mesh: &Mesh, cell: usize, k: usize) -> Result<DVector<f64>> {
    let el = LocalElement::new(mesh, cell, k)?;
    el.project_vector(f, &triangle_quadrature(2 * k + 6)?)
}

pub fn weak_gradient_map(mesh: &Mesh, cell: usize, k: usize) -> Result<WeakGradientMap> {
    LocalElement::new(mesh, cell, k)?.weak_gradient_map(&LocalRules::new(k)?)
}

pub fn local_stabilizer_gamma(mesh: &Mesh, cell: usize, k: usize, gamma: f64) -> Result<DMatrix<f64>> {
    LocalElement::new(mesh, cell, k)?.stabilizer(Stabilizer::Gamma(gamma), &LocalRules::new(k)?)
}

pub fn local_stabilizer_alpha(mesh: &Mesh, cell: usize, k: usize, alpha: f64) -> Result<DMatrix<f64>> {
    LocalElement::new(mesh, cell, k)?.stabilizer(Stabilizer::Alpha(alpha), &LocalRules::new(k)?)
}

pub fn local_aw(mesh: &Mesh, cell: usize, k: usize, stabilizer: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    LocalElement::new(mesh, cell, k)?.aw(stabilizer, &LocalRules::new(k)?)
}

/// Boundary mass matrix `<v_b, w_b>_e` of a boundary edge.
pub fn local_bw(mesh: &Mesh, edge: usize, k: usize) -> Result<DMatrix<f64>> {
    check_index("edge", edge, mesh.n_edges())?;
    if !mesh.boundary_edge[edge] {
        return Err(WgError::param(format!("edge {edge} is interior; b_w lives on ∂Ω only")));
    }
    let basis = EdgeBasis::new(k);
    let rule = edge_quadrature(2 * k + 3)?;
    let len = mesh.length[edge];
    let mut m = DMatrix::zeros(basis.dim(), basis.dim());
    for (&t, &w) in rule.points.iter().zip(&rule.weights) {
        let psi = basis.eval(t);
        m += w * len * &psi * psi.transpose();
    }
    Ok(m)
}

/// `a(u,u) - a_w(Q_h u, Q_h u)`, evaluated through the projection residuals
/// `Σ_T ‖(I-ℚ_h)∇u‖² + ‖(I-Q_0)u‖² - s(Q_h u, Q_h u)`.
pub fn epsilon_h_diagnostic(
    u: &dyn ScalarField,
    grad_u: &(dyn Fn(Point) -> Point + Sync),
    mesh: &Mesh,
    k: usize,
    stabilizer: Stabilizer,
) -> Result<f64> {
    let stabilizer = stabilizer.validate()?;
    let rules = LocalRules::new(k)?;
    let parts = crate::parallel::map_cells(mesh, |cell| -> Result<f64> {
        let el = LocalElement::new(mesh, cell, k)?;
        let q0 = el.project_cell(u, &rules.cell_fine)?;
        let qg = el.project_vector(grad_u, &rules.cell_fine)?;
        let (pts, w) = rules.cell_fine.on_cell(mesh, cell);
        let mut residual = 0.0;
        for (p, wq) in pts.iter().zip(&w) {
            let du = u.value(*p) - el.basis.evaluate(q0.as_slice(), *p);
            let dg = grad_u(*p) - el.vector.evaluate(qg.as_slice(), *p);
            residual += wq * (du * du + dg.norm_squared());
        }
        let interp = el.interpolate(u, &rules)?;
        let s = el.trace_jump_energy(&interp, |e| stabilizer.edge_weight(mesh, cell, e), &rules.edge_fine);
        Ok(residual - s)
    })?;
    Ok(parts.iter().sum())
}
