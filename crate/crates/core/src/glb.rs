//! Guaranteed lower bounds: the certificate `δλ + αΛ ≤ 1`, an estimator for
//! `δ`, and α-stabilized studies.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::assembly::{assemble, StabilizerSpec};
use crate::eigen::{solve_pencil, CondenseOptions};
use crate::error::{Result, WgError};
use crate::mesh::{Domain, Mesh, Point};
use crate::polyquad::{dim_pk, edge_quadrature, triangle_quadrature, CellBasis, EdgeBasis, VectorBasis};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GlbConfig {
    /// Stabilizer weight `α > 0`.
    pub alpha: f64,
    /// The constant `Λ ≥ 0` of estimate (B).
    pub lambda_const: f64,
    /// The constant `δ ≥ 0` of estimate (A).
    pub delta: f64,
    /// Target eigenvalue index, 1-based.
    pub j: usize,
}

impl GlbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(WgError::param(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.lambda_const >= 0.0) || !(self.delta >= 0.0) {
            return Err(WgError::param("delta and Lambda must be nonnegative"));
        }
        if self.j == 0 {
            return Err(WgError::param("eigenvalue index is 1-based"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GlbCase {
    /// `δλ + αΛ ≤ 1` with the exact eigenvalue.
    Exact,
    /// `δλ_h + αΛ ≤ 1` with the discrete eigenvalue.
    Discrete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Certificate {
    Certified(GlbCase),
    NotCertified,
}

impl Certificate {
    pub fn is_certified(self) -> bool {
        matches!(self, Certificate::Certified(_))
    }
}

/// Checks whether `λ_h ≤ λ` is certified.
pub fn glb_criterion(config: &GlbConfig, lambda: Option<f64>, lambda_h: f64) -> Result<Certificate> {
    config.validate()?;
    if !(lambda_h > 0.0) {
        return Err(WgError::param(format!(
            "discrete eigenvalue must be positive, got {lambda_h}"
        )));
    }
    let penalty = config.alpha * config.lambda_const;
    if let Some(l) = lambda {
        if !(l >= 0.0) {
            return Err(WgError::param(format!("exact eigenvalue must be nonnegative, got {l}")));
        }
        if config.delta * l + penalty <= 1.0 {
            return Ok(Certificate::Certified(GlbCase::Exact));
        }
    }
    if config.delta * lambda_h + penalty <= 1.0 {
        return Ok(Certificate::Certified(GlbCase::Discrete));
    }
    Ok(Certificate::NotCertified)
}

/// Global numbering of continuous Lagrange `P_p` nodes.
struct LagrangeSpace {
    n_nodes: usize,
    /// Per cell: global node index of each local node, and its position.
    cells: Vec<Vec<(usize, Point)>>,
}

impl LagrangeSpace {
    fn new(mesh: &Mesh, p: usize) -> LagrangeSpace {
        let nv = mesh.vertices.len();
        let per_edge = p - 1;
        let per_cell = (p - 1) * p.saturating_sub(2) / 2;
        let edge_base = nv;
        let cell_base = edge_base + mesh.n_edges() * per_edge;
        let n_nodes = cell_base + mesh.n_cells() * per_cell;
        let mut cells = Vec::with_capacity(mesh.n_cells());
        for c in 0..mesh.n_cells() {
            let mut nodes = Vec::with_capacity(dim_pk(p));
            for &v in &mesh.cells[c] {
                nodes.push((v, mesh.vertices[v]));
            }
            for ce in &mesh.cell_edges[c] {
                let (a, b) = mesh.edge_endpoints(ce.edge);
                for i in 1..p {
                    let t = i as f64 / p as f64;
                    nodes.push((edge_base + ce.edge * per_edge + i - 1, a + t * (b - a)));
                }
            }
            let [x0, x1, x2] = mesh.cell_vertices(c);
            let mut m = 0;
            for i in 1..p {
                for j in 1..p - i {
                    let (s, t) = (i as f64 / p as f64, j as f64 / p as f64);
                    nodes.push((cell_base + c * per_cell + m, x0 + s * (x1 - x0) + t * (x2 - x0)));
                    m += 1;
                }
            }
            cells.push(nodes);
        }
        LagrangeSpace { n_nodes, cells }
    }

    /// Coefficients of the local Lagrange basis in the orthonormal cell basis:
    /// column `i` represents the basis function of local node `i`.
    fn local_coefficients(&self, basis: &CellBasis, cell: usize) -> Result<DMatrix<f64>> {
        let nodes = &self.cells[cell];
        let n = nodes.len();
        let vander = DMatrix::from_fn(n, n, |i, j| basis.eval(nodes[i].1)[j]);
        vander
            .try_inverse()
            .ok_or_else(|| WgError::InvalidMesh(format!("degenerate nodal set on cell {cell}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeltaEstimate {
    /// Largest Rayleigh ratio found; a lower estimate of the true `δ`.
    pub value: f64,
    pub probe_dim: usize,
    /// Probe directions removed as null directions of the denominator.
    pub deflated: usize,
}

/// Largest `‖(I−Q_b)f‖²_X / ‖(I−ℚ_h)∇f‖²` over continuous piecewise
/// `P_{probe_degree}` functions `f` on `mesh`.
pub fn estimate_delta(mesh: &Mesh, k: usize, probe_degree: usize) -> Result<DeltaEstimate> {
    if k == 0 {
        return Err(WgError::param("WG degree k must be at least 1"));
    }
    if probe_degree <= k {
        return Err(WgError::param(format!(
            "probe degree {probe_degree} must exceed k = {k}; otherwise every probe lies in the null space"
        )));
    }
    let p = probe_degree;
    let space = LagrangeSpace::new(mesh, p);
    let n = space.n_nodes;
    let mut num = DMatrix::<f64>::zeros(n, n);
    let mut den = DMatrix::<f64>::zeros(n, n);
    let cell_rule = triangle_quadrature(2 * p)?;
    let edge_rule = edge_quadrature(2 * p)?;
    let edge_basis = EdgeBasis::new(k);

    for c in 0..mesh.n_cells() {
        let basis = CellBasis::new(mesh, c, p)?;
        let coef = space.local_coefficients(&basis, c)?;
        let nodes = &space.cells[c];
        let nl = nodes.len();
        let vector = VectorBasis::new(mesh, c, k)?;
        let nv = vector.dim();

        // Denominator: Gᵀ W G − Cᵀ M⁻¹ C on this cell.
        let (pts, w) = cell_rule.on_cell(mesh, c);
        let mut gram = DMatrix::<f64>::zeros(nl, nl);
        let mut cross = DMatrix::<f64>::zeros(nv, nl);
        let mut mass = DMatrix::<f64>::zeros(nv, nv);
        for (x, wq) in pts.iter().zip(&w) {
            let (gx, gy) = basis.eval_grad(*x);
            let lx = coef.transpose() * gx;
            let ly = coef.transpose() * gy;
            gram += *wq * (&lx * lx.transpose() + &ly * ly.transpose());
            let v = vector.eval(*x);
            for i in 0..nv {
                for j in 0..nl {
                    cross[(i, j)] += wq * (v[i].x * lx[j] + v[i].y * ly[j]);
                }
                for j in 0..nv {
                    mass[(i, j)] += wq * v[i].dot(&v[j]);
                }
            }
        }
        let chol = mass.cholesky().ok_or_else(|| WgError::Factorization {
            stage: "probe projection",
            detail: format!("vector mass on cell {c}"),
        })?;
        let local = &gram - cross.transpose() * chol.solve(&cross);
        for (i, &(gi, _)) in nodes.iter().enumerate() {
            for (j, &(gj, _)) in nodes.iter().enumerate() {
                den[(gi, gj)] += local[(i, j)];
            }
        }

        // Numerator: boundary edges of this cell, (I − Q_b) in the orthonormal
        // edge basis.
        for ce in &mesh.cell_edges[c] {
            if !mesh.boundary_edge[ce.edge] {
                continue;
            }
            let (a, b) = mesh.edge_endpoints(ce.edge);
            let len = mesh.length[ce.edge];
            let nq = edge_rule.points.len();
            let mut phi = DMatrix::zeros(nq, nl);
            let mut psi = DMatrix::zeros(nq, edge_basis.dim());
            for (q, &t) in edge_rule.points.iter().enumerate() {
                let vals = coef.transpose() * basis.eval(a + t * (b - a));
                phi.row_mut(q).copy_from(&vals.transpose());
                psi.row_mut(q).copy_from(&edge_basis.eval(t).transpose());
            }
            let wdiag = DMatrix::from_diagonal(&DVector::from_column_slice(&edge_rule.weights));
            let resid = &phi - &psi * (psi.transpose() * &wdiag * &phi);
            let local = len * resid.transpose() * &wdiag * &resid;
            for (r, &(gi, _)) in nodes.iter().enumerate() {
                for (s, &(gj, _)) in nodes.iter().enumerate() {
                    num[(gi, gj)] += local[(r, s)];
                }
            }
        }
    }
    let num = (&num + num.transpose()) * 0.5;
    let den = (&den + den.transpose()) * 0.5;

    let eig = den.symmetric_eigen();
    let top = eig.eigenvalues.max();
    let keep: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 1e-10 * top).collect();
    if keep.is_empty() {
        return Err(WgError::param("probe space lies entirely in the null space"));
    }
    let z = DMatrix::from_fn(n, keep.len(), |r, c| {
        let i = keep[c];
        eig.eigenvectors[(r, i)] / eig.eigenvalues[i].sqrt()
    });
    let reduced = z.transpose() * &num * &z;
    let reduced = (&reduced + reduced.transpose()) * 0.5;
    let value = reduced.symmetric_eigenvalues().max().max(0.0);
    Ok(DeltaEstimate {
        value,
        probe_dim: n,
        deflated: n - keep.len(),
    })
}

/// Where `δ` comes from in a study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum DeltaSource {
    Fixed(f64),
    /// [`estimate_delta`] per level with this probe degree.
    Estimated {
        probe_degree: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlbRow {
    pub n: usize,
    pub h: f64,
    pub alpha: f64,
    pub delta: f64,
    pub lambda_h: f64,
    pub certificate: Certificate,
    /// `λ_{j,h} ≤ λ_j` (with the 1e-9 reference slack), where a reference exists.
    pub below_reference: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlbReport {
    pub domain: Domain,
    pub k: usize,
    pub lambda_const: f64,
    pub j: usize,
    pub reference: Option<f64>,
    pub rows: Vec<GlbRow>,
}

impl GlbReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,h,alpha,delta,lambda_h,case,certified,below_reference\n");
        for r in &self.rows {
            let case = match r.certificate {
                Certificate::Certified(GlbCase::Exact) => "1",
                Certificate::Certified(GlbCase::Discrete) => "2",
                Certificate::NotCertified => "none",
            };
            let below = r.below_reference.map_or("".to_string(), |b| b.to_string());
            out.push_str(&format!(
                "{},{:.6e},{},{:.6e},{:.12e},{},{},{}\n",
                r.n,
                r.h,
                r.alpha,
                r.delta,
                r.lambda_h,
                case,
                r.certificate.is_certified(),
                below
            ));
        }
        out
    }
}

pub const REFERENCE_SLACK: f64 = 1e-9;

/// For every level and α: assemble with the α-stabilizer, solve, and check
/// the certificate and the reference.
#[allow(clippy::too_many_arguments)]
pub fn run_glb_study(
    domain: Domain,
    levels: &[usize],
    k: usize,
    alphas: &[f64],
    lambda_const: f64,
    delta: DeltaSource,
    j: usize,
    reference: Option<f64>,
) -> Result<GlbReport> {
    if alphas.is_empty() || levels.is_empty() {
        return Err(WgError::param("need at least one level and one alpha"));
    }
    let mut rows = Vec::new();
    for &n in levels {
        let mesh = Mesh::structured(domain, n)?;
        let delta_value = match delta {
            DeltaSource::Fixed(d) => d,
            DeltaSource::Estimated { probe_degree } => estimate_delta(&mesh, k, probe_degree)?.value,
        };
        for &alpha in alphas {
            let config = GlbConfig {
                alpha,
                lambda_const,
                delta: delta_value,
                j,
            };
            config.validate()?;
            let pair = assemble(&mesh, k, StabilizerSpec::Alpha(alpha))?;
            let res = solve_pencil(&mesh, &pair, j, CondenseOptions::default())?;
            let lambda_h = res.values[j - 1];
            rows.push(GlbRow {
                n,
                h: mesh.h_max(),
                alpha,
                delta: delta_value,
                lambda_h,
                certificate: glb_criterion(&config, reference, lambda_h)?,
                below_reference: reference.map(|l| lambda_h <= l + REFERENCE_SLACK),
            });
        }
    }
    Ok(GlbReport {
        domain,
        k,
        lambda_const,
        j,
        reference,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(delta: f64, alpha: f64, lambda_const: f64) -> GlbConfig {
        GlbConfig {
            alpha,
            lambda_const,
            delta,
            j: 1,
        }
    }

    #[test]
    fn criterion_hand_cases() {
        assert_eq!(
            glb_criterion(&config(0.5, 0.1, 2.0), None, 1.0).unwrap(),
            Certificate::Certified(GlbCase::Discrete)
        );
        assert_eq!(
            glb_criterion(&config(1.0, 1.0, 1.0), None, 1.0).unwrap(),
            Certificate::NotCertified
        );
        assert!(glb_criterion(&config(0.0, 7.0, 0.0), None, 123.0)
            .unwrap()
            .is_certified());
        assert_eq!(
            glb_criterion(&config(0.5, 0.1, 2.0), Some(0.5), 1.5).unwrap(),
            Certificate::Certified(GlbCase::Exact)
        );
        assert!(glb_criterion(&config(0.5, 0.0, 2.0), None, 1.0).is_err());
        assert!(glb_criterion(&config(-0.5, 0.1, 2.0), None, 1.0).is_err());
        assert!(glb_criterion(&config(0.5, 0.1, 2.0), None, 0.0).is_err());
    }

    #[test]
    fn delta_requires_higher_probe_degree() {
        let mesh = Mesh::structured(Domain::UnitSquare, 2).unwrap();
        assert!(estimate_delta(&mesh, 1, 1).is_err());
        assert!(estimate_delta(&mesh, 2, 2).is_err());
    }

    #[test]
    fn delta_positive_and_deflates_pk() {
        let mesh = Mesh::structured(Domain::UnitSquare, 4).unwrap();
        let est = estimate_delta(&mesh, 1, 3).unwrap();
        assert!(est.value > 0.0);
        // Continuous piecewise P1 functions form the null space: one per vertex.
        assert_eq!(est.deflated, mesh.vertices.len());
        assert_eq!(est.probe_dim, 13 * 13);
    }

    #[test]
    fn delta_grows_with_probe_degree() {
        let mesh = Mesh::structured(Domain::UnitSquare, 4).unwrap();
        let d2 = estimate_delta(&mesh, 1, 2).unwrap().value;
        let d3 = estimate_delta(&mesh, 1, 3).unwrap().value;
        assert!(d3 >= d2 * (1.0 - 1e-10));
    }

    #[test]
    fn delta_estimate_scales_linearly_in_h() {
        // Mesh-scale bumps on boundary cells dominate, so halving h halves the
        // estimate rather than quartering it.
        let coarse = estimate_delta(&Mesh::structured(Domain::UnitSquare, 4).unwrap(), 1, 2)
            .unwrap()
            .value;
        let fine = estimate_delta(&Mesh::structured(Domain::UnitSquare, 8).unwrap(), 1, 2)
            .unwrap()
            .value;
        assert!((fine / coarse - 0.5).abs() < 0.01, "ratio {}", fine / coarse);
    }

    #[test]
    fn study_rejects_nonpositive_alpha() {
        assert!(run_glb_study(
            Domain::UnitSquare,
            &[4],
            1,
            &[0.0],
            1.0,
            DeltaSource::Fixed(0.1),
            1,
            None
        )
        .is_err());
    }

    #[test]
    fn alpha_study_stays_below_reference() {
        let lambda1 = 0.2400790854320629;
        let report = run_glb_study(
            Domain::UnitSquare,
            &[4, 8],
            1,
            &[0.1, 1.0],
            0.5,
            DeltaSource::Fixed(0.5),
            1,
            Some(lambda1),
        )
        .unwrap();
        assert_eq!(report.rows.len(), 4);
        for row in &report.rows {
            assert_eq!(row.below_reference, Some(true));
            assert!(row.certificate.is_certified());
        }
        assert!(report.to_csv().lines().count() == 5);
    }
}
