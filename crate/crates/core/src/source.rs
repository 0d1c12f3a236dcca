//! The boundary-flux source problem `−Δu + u = 0`, `∂u/∂n = f`, and its
//! error norms.

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use nalgebra::DVector;
use serde::Serialize;

use crate::assembly::{assemble, DofMap, StabilizerSpec, WgFunction, WgOperatorPair};
use crate::error::{Result, WgError};
use crate::mesh::{Mesh, Point};
use crate::parallel::map_cells;
use crate::polyquad::{edge_quadrature, EdgeBasis};
use crate::sparse::CsrMatrix;
use crate::wgcore::{LocalElement, LocalRules};

const SOURCE_TOLERANCE: f64 = 1e-10;

/// `u = c·exp(a x + b y)` with `a² + b² = 1`, so `−Δu + u = 0` exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ManufacturedSolution {
    pub amplitude: f64,
    pub a: f64,
    pub b: f64,
}

impl ManufacturedSolution {
    pub fn new(amplitude: f64, a: f64, b: f64) -> Result<Self> {
        if ((a * a + b * b) - 1.0).abs() > 1e-12 {
            return Err(WgError::param(format!("direction ({a}, {b}) is not a unit vector")));
        }
        Ok(ManufacturedSolution { amplitude, a, b })
    }

    /// `u = e^x`.
    pub fn exp_x() -> Self {
        ManufacturedSolution {
            amplitude: 1.0,
            a: 1.0,
            b: 0.0,
        }
    }

    /// `u = e^{x cos θ + y sin θ}`.
    pub fn exp_direction(theta: f64) -> Self {
        ManufacturedSolution {
            amplitude: 1.0,
            a: theta.cos(),
            b: theta.sin(),
        }
    }

    pub fn zero() -> Self {
        ManufacturedSolution {
            amplitude: 0.0,
            a: 1.0,
            b: 0.0,
        }
    }

    pub fn value(&self, p: Point) -> f64 {
        self.amplitude * (self.a * p.x + self.b * p.y).exp()
    }

    pub fn grad(&self, p: Point) -> Point {
        let u = self.value(p);
        Point::new(self.a * u, self.b * u)
    }

    /// `∇u · n`.
    pub fn flux(&self, p: Point, normal: Point) -> f64 {
        self.grad(p).dot(&normal)
    }
}

/// Boundary data `f(x, n)` for the source problem.
pub trait BoundaryFlux: Sync {
    fn flux(&self, p: Point, normal: Point) -> f64;
}

impl BoundaryFlux for ManufacturedSolution {
    fn flux(&self, p: Point, normal: Point) -> f64 {
        ManufacturedSolution::flux(self, p, normal)
    }
}

impl<F: Fn(Point, Point) -> f64 + Sync> BoundaryFlux for F {
    fn flux(&self, p: Point, normal: Point) -> f64 {
        self(p, normal)
    }
}

/// `F_j = ⟨f, ψ_j⟩_{∂Ω}`.
pub fn assemble_flux(mesh: &Mesh, dofs: &DofMap, f: &dyn BoundaryFlux) -> Result<DVector<f64>> {
    let rule = edge_quadrature(2 * dofs.k + 8)?;
    let basis = EdgeBasis::new(dofs.k);
    let mut rhs = DVector::zeros(dofs.n_dofs());
    for e in mesh.boundary_edges() {
        let normal = mesh.boundary_normal(e)?;
        let (a, b) = mesh.edge_endpoints(e);
        let len = mesh.length[e];
        let start = dofs.edge_range(e).start;
        for (&t, &w) in rule.points.iter().zip(&rule.weights) {
            let v = w * len * f.flux(a + t * (b - a), normal);
            let psi = basis.eval(t);
            for (j, p) in psi.iter().enumerate() {
                rhs[start + j] += v * p;
            }
        }
    }
    Ok(rhs)
}

/// Solves `A x = rhs` for SPD `a` by sparse Cholesky with two steps of
/// iterative refinement. Returns the solution and `‖rhs − A x‖ / ‖rhs‖`.
pub fn solve_spd(a: &CsrMatrix, rhs: &[f64], tolerance: f64) -> Result<(Vec<f64>, f64)> {
    let n = rhs.len();
    let rhs_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    if rhs_norm == 0.0 {
        return Ok((vec![0.0; n], 0.0));
    }
    let factor = a
        .to_faer_symmetric()?
        .sp_cholesky(Side::Lower)
        .map_err(|e| WgError::Factorization {
            stage: "source system",
            detail: format!("{e:?}"),
        })?;
    let mut x = Mat::<f64>::from_fn(n, 1, |i, _| rhs[i]);
    factor.solve_in_place(x.as_mut());
    let mut sol: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
    for _ in 0..2 {
        let ax = a.matvec(&sol);
        let mut r = Mat::<f64>::from_fn(n, 1, |i, _| rhs[i] - ax[i]);
        factor.solve_in_place(r.as_mut());
        for (s, i) in sol.iter_mut().zip(0..n) {
            *s += r[(i, 0)];
        }
    }
    let ax = a.matvec(&sol);
    let residual = ax.iter().zip(rhs).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt() / rhs_norm;
    let abs: Vec<f64> = sol.iter().map(|v| v.abs()).collect();
    let floor = f64::EPSILON * a.abs_matvec(&abs).iter().map(|v| v * v).sum::<f64>().sqrt() / rhs_norm;
    if residual > tolerance.max(16.0 * floor) {
        return Err(WgError::Residual {
            index: 0,
            residual,
            tolerance,
        });
    }
    Ok((sol, residual))
}

#[derive(Debug, Clone)]
pub struct SourceSolution {
    pub pair: WgOperatorPair,
    pub u_h: WgFunction,
    pub rhs: DVector<f64>,
    /// `‖F − A u_h‖ / ‖F‖`.
    pub residual: f64,
}

/// Solves `a_w(u_h, v) = ⟨f, v_b⟩_{∂Ω}` for all `v ∈ V_h`.
pub fn solve_source(mesh: &Mesh, k: usize, spec: StabilizerSpec, f: &dyn BoundaryFlux) -> Result<SourceSolution> {
    let pair = assemble(mesh, k, spec).map_err(|e| e.in_stage("assemble"))?;
    let rhs = assemble_flux(mesh, &pair.dofs, f)?;
    let (sol, residual) = solve_spd(&pair.a, rhs.as_slice(), SOURCE_TOLERANCE).map_err(|e| e.in_stage("solve"))?;
    Ok(SourceSolution {
        u_h: WgFunction {
            coeffs: DVector::from_vec(sol),
        },
        pair,
        rhs,
        residual,
    })
}

/// V-norm errors of a discrete solution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct VErrors {
    /// `‖Q_h u − u_h‖_V`
    pub discrete: f64,
    /// `‖u − Q_h u‖_V`, with the jump of the continuous `u` taken as zero.
    pub projection: f64,
    /// `‖u − u_h‖_V`
    pub total: f64,
}

/// All three V-norm errors of `u_h` against `exact`.
pub fn v_norm_errors(u_h: &WgFunction, exact: &ManufacturedSolution, mesh: &Mesh, k: usize) -> Result<VErrors> {
    let dofs = DofMap::new(mesh, k)?;
    if u_h.coeffs.len() != dofs.n_dofs() {
        return Err(WgError::param("coefficient vector does not match the DOF layout"));
    }
    let rules = LocalRules::new(k)?;
    let u = |p: Point| exact.value(p);
    let parts = map_cells(mesh, |c| {
        let el = LocalElement::new(mesh, c, k)?;
        let uh = u_h.local(mesh, &dofs, c);
        let qh = el.interpolate(&u, &rules)?;
        let diff = &qh - &uh;
        let inv_h = 1.0 / mesh.diameter[c];
        let nc = el.layout.n_cell();
        let (pts, w) = rules.cell_fine.on_cell(mesh, c);
        let (mut disc, mut proj, mut total) = (0.0, 0.0, 0.0);
        for (p, wq) in pts.iter().zip(&w) {
            let (val, grad) = (exact.value(*p), exact.grad(*p));
            let d0 = el.basis.evaluate(&diff.as_slice()[..nc], *p);
            let dg = el.basis.evaluate_grad(&diff.as_slice()[..nc], *p);
            disc += wq * (d0 * d0 + dg.norm_squared());
            let q0 = el.basis.evaluate(&qh.as_slice()[..nc], *p);
            let qg = el.basis.evaluate_grad(&qh.as_slice()[..nc], *p);
            proj += wq * ((val - q0).powi(2) + (grad - qg).norm_squared());
            let u0 = el.basis.evaluate(&uh.as_slice()[..nc], *p);
            let ug = el.basis.evaluate_grad(&uh.as_slice()[..nc], *p);
            total += wq * ((val - u0).powi(2) + (grad - ug).norm_squared());
        }
        disc += el.trace_jump_energy(&diff, |_| inv_h, &rules.edge_fine);
        proj += el.trace_jump_energy(&qh, |_| inv_h, &rules.edge_fine);
        total += el.trace_jump_energy(&uh, |_| inv_h, &rules.edge_fine);
        Ok((disc, proj, total))
    })?;
    let sum = parts
        .iter()
        .fold((0.0, 0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    Ok(VErrors {
        discrete: sum.0.sqrt(),
        projection: sum.1.sqrt(),
        total: sum.2.sqrt(),
    })
}

/// `‖Q_h u − u_h‖_V`.
pub fn v_norm_error(u_h: &WgFunction, exact: &ManufacturedSolution, mesh: &Mesh, k: usize) -> Result<f64> {
    Ok(v_norm_errors(u_h, exact, mesh, k)?.discrete)
}

/// `‖u − u_{h,b}‖_{L²(∂Ω)}`.
pub fn x_norm_error(u_h: &WgFunction, exact: &ManufacturedSolution, mesh: &Mesh, k: usize) -> Result<f64> {
    let dofs = DofMap::new(mesh, k)?;
    if u_h.coeffs.len() != dofs.n_dofs() {
        return Err(WgError::param("coefficient vector does not match the DOF layout"));
    }
    let rule = edge_quadrature(2 * k + 8)?;
    let basis = EdgeBasis::new(k);
    let mut sum = 0.0;
    for e in mesh.boundary_edges() {
        let (a, b) = mesh.edge_endpoints(e);
        let block = u_h.edge_block(&dofs, e);
        for (&t, &w) in rule.points.iter().zip(&rule.weights) {
            let d = exact.value(a + t * (b - a)) - basis.evaluate(block, t);
            sum += w * mesh.length[e] * d * d;
        }
    }
    Ok(sum.sqrt())
}

/// One refinement level of a source study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SourceLevel {
    pub n: usize,
    pub h: f64,
    pub v: VErrors,
    pub x_error: f64,
    pub residual: f64,
}

pub fn source_level(
    mesh: &Mesh,
    n: usize,
    k: usize,
    spec: StabilizerSpec,
    exact: &ManufacturedSolution,
) -> Result<SourceLevel> {
    let sol = solve_source(mesh, k, spec, exact)?;
    Ok(SourceLevel {
        n,
        h: mesh.h_max(),
        v: v_norm_errors(&sol.u_h, exact, mesh, k)?,
        x_error: x_norm_error(&sol.u_h, exact, mesh, k)?,
        residual: sol.residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::GammaSpec;
    use crate::mesh::Domain;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SPEC: StabilizerSpec = StabilizerSpec::Gamma(GammaSpec::PowerEps(0.1));

    #[test]
    fn manufactured_solution_satisfies_pde() {
        let u = ManufacturedSolution::exp_direction(0.7);
        let p = Point::new(0.3, 0.6);
        let h = 1e-4;
        let lap = (u.value(p + Point::new(h, 0.0))
            + u.value(p - Point::new(h, 0.0))
            + u.value(p + Point::new(0.0, h))
            + u.value(p - Point::new(0.0, h))
            - 4.0 * u.value(p))
            / (h * h);
        assert!((-lap + u.value(p)).abs() < 1e-6);
        assert!(ManufacturedSolution::new(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn zero_flux_gives_zero_solution() {
        let mesh = Mesh::structured(Domain::UnitSquare, 4).unwrap();
        let sol = solve_source(&mesh, 1, SPEC, &ManufacturedSolution::zero()).unwrap();
        assert!(sol.u_h.coeffs.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interpolant_has_zero_discrete_error() {
        let mesh = Mesh::structured(Domain::UnitSquare, 4).unwrap();
        let exact = ManufacturedSolution::exp_x();
        let dofs = DofMap::new(&mesh, 2).unwrap();
        let q = WgFunction::interpolate(&mesh, &dofs, &|p: Point| exact.value(p)).unwrap();
        let v = v_norm_errors(&q, &exact, &mesh, 2).unwrap();
        assert!(v.discrete < 1e-13);
        assert!((v.total - v.projection).abs() < 1e-12);
    }

    #[test]
    fn norm_of_constant_interpolant() {
        let mesh = Mesh::structured(Domain::UnitSquare, 4).unwrap();
        let one = ManufacturedSolution {
            amplitude: 1.0,
            a: 0.0,
            b: 0.0,
        };
        let dofs = DofMap::new(&mesh, 1).unwrap();
        let zero = WgFunction::zeros(&dofs);
        assert!((v_norm_error(&zero, &one, &mesh, 1).unwrap() - 1.0).abs() < 1e-12);
        assert!((x_norm_error(&zero, &one, &mesh, 1).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn boundary_projection_is_orthogonal() {
        let mesh = Mesh::structured(Domain::LShape, 4).unwrap();
        let exact = ManufacturedSolution::exp_x();
        let dofs = DofMap::new(&mesh, 1).unwrap();
        let q = WgFunction::interpolate(&mesh, &dofs, &|p: Point| exact.value(p)).unwrap();
        let zero = WgFunction::zeros(&dofs);
        let proj = x_norm_error(&q, &exact, &mesh, 1).unwrap();
        let full = x_norm_error(&zero, &exact, &mesh, 1).unwrap();
        let qnorm = {
            let mut s = 0.0;
            for e in mesh.boundary_edges() {
                s += mesh.length[e] * q.edge_block(&dofs, e).iter().map(|c| c * c).sum::<f64>();
            }
            s
        };
        assert!((full * full - proj * proj - qnorm).abs() < 1e-12);
    }

    #[test]
    fn galerkin_orthogonality() {
        let mesh = Mesh::structured(Domain::UnitSquare, 8).unwrap();
        let exact = ManufacturedSolution::exp_x();
        let sol = solve_source(&mesh, 2, SPEC, &exact).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let au = sol.pair.a.matvec(sol.u_h.as_slice());
        for _ in 0..20 {
            let v: Vec<f64> = (0..au.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lhs: f64 = au.iter().zip(&v).map(|(a, b)| a * b).sum();
            let rhs: f64 = sol.rhs.iter().zip(&v).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn errors_decrease_under_refinement() {
        let exact = ManufacturedSolution::exp_x();
        let coarse = source_level(&Mesh::structured(Domain::UnitSquare, 4).unwrap(), 4, 1, SPEC, &exact).unwrap();
        let fine = source_level(&Mesh::structured(Domain::UnitSquare, 8).unwrap(), 8, 1, SPEC, &exact).unwrap();
        assert!(fine.v.total < coarse.v.total);
        assert!(fine.x_error < coarse.x_error);
    }
}
