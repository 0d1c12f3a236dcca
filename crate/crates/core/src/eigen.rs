//! The generalized eigenproblem `A u = λ B u`, reduced exactly onto the
//! boundary DOFs by a Schur complement of the interior block.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Llt;
use faer::{Mat, MatRef, Side};
use nalgebra::{DMatrix, DVector};

use crate::assembly::{WgFunction, WgOperatorPair};
use crate::error::{Result, WgError};
use crate::mesh::Mesh;
use crate::parallel::map_cells;
use crate::sparse::CsrMatrix;

pub const DEFAULT_TOLERANCE: f64 = 1e-9;

const REFINEMENT_STEPS: usize = 2;

const FLOOR_FACTOR: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CondenseOptions {
    /// Eliminate cell-interior DOFs cell by cell before factoring the
    /// interior block.
    pub cell_condensation: bool,
    /// Number of right-hand sides per sparse solve when forming `S`.
    pub chunk: usize,
}

impl Default for CondenseOptions {
    fn default() -> Self {
        CondenseOptions {
            cell_condensation: false,
            chunk: 64,
        }
    }
}

/// Per-cell recovery data for cell-interior static condensation.
struct CellElimination {
    /// Global indices of the cell block.
    cell_dofs: Vec<usize>,
    /// Global indices of the three edge blocks.
    edge_dofs: Vec<usize>,
    /// `A_cc^{-1} A_cE`
    recovery: DMatrix<f64>,
}

/// `(S, M_Γ)` together with what is needed to expand boundary vectors back to
/// full DOF vectors.
pub struct CondensedPencil {
    /// `A_ΓΓ − A_ΓI A_II^{-1} A_IΓ`, symmetrized.
    pub s: DMatrix<f64>,
    /// `B` restricted to `Γ`.
    pub m_gamma: DMatrix<f64>,
    /// Largest `|S_ij − S_ji|` before symmetrization, relative to `max |S|`.
    pub symmetry_defect: f64,
    boundary: Vec<usize>,
    n_dofs: usize,
    /// Global indices of the DOFs eliminated by the sparse factorization.
    interior: Vec<usize>,
    a_ig: CsrMatrix,
    a_ii: CsrMatrix,
    factor: Option<Llt<usize, f64>>,
    cells: Vec<CellElimination>,
}

impl std::fmt::Debug for CondensedPencil {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CondensedPencil")
            .field("boundary_dofs", &self.boundary.len())
            .field("factored_dofs", &self.interior.len())
            .field("cell_condensation", &!self.cells.is_empty())
            .field("symmetry_defect", &self.symmetry_defect)
            .finish()
    }
}

impl CondensedPencil {
    pub fn n_boundary(&self) -> usize {
        self.boundary.len()
    }

    /// Full DOF vector from boundary values `x_Γ`.
    pub fn expand(&self, x: &[f64]) -> Result<DVector<f64>> {
        let mut u = DVector::zeros(self.n_dofs);
        for (&g, &v) in self.boundary.iter().zip(x) {
            u[g] = v;
        }
        if let Some(factor) = &self.factor {
            let rhs: Vec<f64> = self.a_ig.matvec(x).iter().map(|v| -v).collect();
            let mut ui = Mat::<f64>::from_fn(rhs.len(), 1, |i, _| rhs[i]);
            factor.solve_in_place(ui.as_mut());
            // Iterative refinement of the interior solve.
            for _ in 0..REFINEMENT_STEPS {
                let current: Vec<f64> = (0..rhs.len()).map(|i| ui[(i, 0)]).collect();
                let ax = self.a_ii.matvec(&current);
                let mut r = Mat::<f64>::from_fn(rhs.len(), 1, |i, _| rhs[i] - ax[i]);
                factor.solve_in_place(r.as_mut());
                ui += &r;
            }
            for (i, &g) in self.interior.iter().enumerate() {
                u[g] = ui[(i, 0)];
            }
        }
        for cell in &self.cells {
            let ue = DVector::from_iterator(cell.edge_dofs.len(), cell.edge_dofs.iter().map(|&g| u[g]));
            let uc = -(&cell.recovery * ue);
            for (&g, v) in cell.cell_dofs.iter().zip(uc.iter()) {
                u[g] = *v;
            }
        }
        Ok(u)
    }
}

fn dense_block(a: &CsrMatrix, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| a.get(rows[i], cols[j]))
}

/// Eliminates every cell block locally. Returns the edge-only matrix (indexed
/// by global edge DOF minus the number of cell DOFs) and recovery data.
fn eliminate_cells(mesh: &Mesh, pair: &WgOperatorPair) -> Result<(CsrMatrix, Vec<CellElimination>)> {
    let dofs = &pair.dofs;
    let a = &pair.a;
    let offset = dofs.n_cells * dofs.cell_dofs();
    let n_edge = dofs.n_dofs() - offset;
    let cells = map_cells(mesh, |c| {
        let all = dofs.local_to_global(mesh, c);
        let (cell_dofs, edge_dofs) = all.split_at(dofs.cell_dofs());
        let acc = dense_block(a, cell_dofs, cell_dofs);
        let ace = dense_block(a, cell_dofs, edge_dofs);
        let chol = acc.cholesky().ok_or_else(|| WgError::Factorization {
            stage: "cell block",
            detail: format!("cell {c} block is not positive definite"),
        })?;
        let recovery = chol.solve(&ace);
        let mut correction = ace.transpose() * &recovery;
        correction = (&correction + correction.transpose()) * 0.5;
        Ok((
            CellElimination {
                cell_dofs: cell_dofs.to_vec(),
                edge_dofs: edge_dofs.to_vec(),
                recovery,
            },
            correction,
        ))
    })?;
    let mut triplets = Vec::new();
    for r in offset..dofs.n_dofs() {
        for (c, v) in a.row(r) {
            if c >= offset {
                triplets.push((r - offset, c - offset, v));
            }
        }
    }
    let mut out = Vec::with_capacity(cells.len());
    for (cell, correction) in cells {
        for (i, &gi) in cell.edge_dofs.iter().enumerate() {
            for (j, &gj) in cell.edge_dofs.iter().enumerate() {
                triplets.push((gi - offset, gj - offset, -correction[(i, j)]));
            }
        }
        out.push(cell);
    }
    Ok((CsrMatrix::from_triplets(n_edge, n_edge, triplets), out))
}

/// Schur complement of `A` onto the boundary DOFs.
pub fn condense(mesh: &Mesh, pair: &WgOperatorPair, opts: CondenseOptions) -> Result<CondensedPencil> {
    let dofs = &pair.dofs;
    if opts.cell_condensation {
        let (reduced, cells) = eliminate_cells(mesh, pair)?;
        let offset = dofs.n_cells * dofs.cell_dofs();
        condense_reduced(&reduced, &pair.b, &dofs.boundary, offset, cells, opts.chunk)
    } else {
        condense_matrices(&pair.a, &pair.b, &dofs.boundary, opts.chunk)
    }
}

/// Schur complement of a raw SPD matrix `a` onto the index set `boundary`
/// (ascending), with `b` supported on `boundary`.
pub fn condense_matrices(a: &CsrMatrix, b: &CsrMatrix, boundary: &[usize], chunk: usize) -> Result<CondensedPencil> {
    condense_reduced(a, b, boundary, 0, Vec::new(), chunk)
}

/// `reduced` is indexed by global DOF minus `offset`; DOFs below `offset`
/// are recovered through `cells`.
fn condense_reduced(
    reduced: &CsrMatrix,
    b: &CsrMatrix,
    boundary: &[usize],
    offset: usize,
    cells: Vec<CellElimination>,
    chunk: usize,
) -> Result<CondensedPencil> {
    if boundary.is_empty() {
        return Err(WgError::NoBoundaryContent);
    }
    if chunk == 0 {
        return Err(WgError::param("chunk size must be positive"));
    }
    let n_dofs = reduced.n_rows() + offset;
    let boundary = boundary.to_vec();
    let gamma_local: Vec<usize> = boundary.iter().map(|&g| g - offset).collect();
    let mut is_gamma = vec![false; reduced.n_rows()];
    for &g in &gamma_local {
        is_gamma[g] = true;
    }
    let interior_local: Vec<usize> = (0..reduced.n_rows()).filter(|&i| !is_gamma[i]).collect();
    let interior: Vec<usize> = interior_local.iter().map(|&i| i + offset).collect();

    let mut s = reduced.submatrix(&gamma_local, &gamma_local).to_dense();
    let a_ig = reduced.submatrix(&interior_local, &gamma_local);
    let a_ii = reduced.submatrix(&interior_local, &interior_local);
    let factor = if interior_local.is_empty() {
        None
    } else {
        let factor = a_ii
            .to_faer_symmetric()?
            .sp_cholesky(Side::Lower)
            .map_err(|e| WgError::Factorization {
                stage: "interior block",
                detail: format!("{e:?}"),
            })?;
        let n_i = interior_local.len();
        let n_g = gamma_local.len();
        let mut start = 0;
        while start < n_g {
            let width = chunk.min(n_g - start);
            let mut x = Mat::<f64>::zeros(n_i, width);
            for i in 0..n_i {
                for (c, v) in a_ig.row(i) {
                    if c >= start && c < start + width {
                        x[(i, c - start)] = v;
                    }
                }
            }
            factor.solve_in_place(x.as_mut());
            // S[:, chunk] -= A_ΓI X
            for i in 0..n_i {
                for (g, v) in a_ig.row(i) {
                    for j in 0..width {
                        s[(g, start + j)] -= v * x[(i, j)];
                    }
                }
            }
            start += width;
        }
        Some(factor)
    };

    let scale = s.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let symmetry_defect = (&s - s.transpose()).iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale;
    let s = (&s + s.transpose()) * 0.5;
    let m_gamma = b.submatrix(&boundary, &boundary).to_dense();
    Ok(CondensedPencil {
        s,
        m_gamma,
        symmetry_defect,
        boundary,
        n_dofs,
        interior,
        a_ig,
        a_ii,
        factor,
        cells,
    })
}

/// Contiguous diagonal blocks covering every nonzero of `m`.
fn diagonal_blocks(m: &DMatrix<f64>) -> Vec<std::ops::Range<usize>> {
    let n = m.nrows();
    let mut blocks = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        let mut i = start;
        while i < end {
            for j in (end..n).rev() {
                if m[(i, j)] != 0.0 || m[(j, i)] != 0.0 {
                    end = j + 1;
                    break;
                }
            }
            i += 1;
        }
        blocks.push(start..end);
        start = end;
    }
    blocks
}

#[derive(Debug, Clone)]
pub struct EigenResult {
    /// Ascending.
    pub values: Vec<f64>,
    /// Full DOF vectors with `b_w(u, u) = 1`, largest entry positive.
    pub vectors: Vec<WgFunction>,
    /// `‖A u − λ B u‖ / ‖A u‖` per pair.
    pub residuals: Vec<f64>,
    /// Rounding floor `ε ‖|A||u| + λ|B||u|‖ / ‖A u‖` per pair. A pair is
    /// accepted when its residual is below the tolerance or within a small
    /// multiple of this floor.
    pub floors: Vec<f64>,
    /// Whether `|b_w(u, u) − 1| ≤ 1e-10` per pair.
    pub normalized: Vec<bool>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// The `m` smallest eigenpairs of `(S, M_Γ)`, expanded and checked against
/// the full pencil.
pub fn solve_condensed(
    pair: &WgOperatorPair,
    pencil: &CondensedPencil,
    m: usize,
    tolerance: f64,
) -> Result<EigenResult> {
    solve_matrices(&pair.a, &pair.b, pencil, m, tolerance)
}

/// [`solve_condensed`] for raw matrices.
pub fn solve_matrices(
    a: &CsrMatrix,
    b: &CsrMatrix,
    pencil: &CondensedPencil,
    m: usize,
    tolerance: f64,
) -> Result<EigenResult> {
    let n_g = pencil.n_boundary();
    if m == 0 || m > n_g {
        return Err(WgError::param(format!(
            "number of eigenpairs must lie in 1..={n_g}, got {m}"
        )));
    }
    // M_Γ = L Lᵀ blockwise, C = L^{-1} S L^{-T}.
    let blocks = diagonal_blocks(&pencil.m_gamma);
    let mut factors = Vec::with_capacity(blocks.len());
    for b in &blocks {
        let block = pencil.m_gamma.view((b.start, b.start), (b.len(), b.len())).into_owned();
        let chol = block.cholesky().ok_or_else(|| WgError::Factorization {
            stage: "boundary mass",
            detail: "M_Γ is not positive definite".into(),
        })?;
        factors.push(chol.l());
    }
    let mut c = pencil.s.clone();
    for (b, l) in blocks.iter().zip(&factors) {
        let mut rows = c.rows_mut(b.start, b.len());
        let solved = l
            .solve_lower_triangular(&rows.clone_owned())
            .expect("nonsingular factor");
        rows.copy_from(&solved);
    }
    for (b, l) in blocks.iter().zip(&factors) {
        let mut cols = c.columns_mut(b.start, b.len());
        let solved = l
            .solve_lower_triangular(&cols.transpose())
            .expect("nonsingular factor")
            .transpose();
        cols.copy_from(&solved);
    }
    let c = (&c + c.transpose()) * 0.5;
    let evd = MatRef::from_column_major_slice(c.as_slice(), n_g, n_g)
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| WgError::Eigen(format!("{e:?}")))?;
    let lambdas = evd.S().column_vector();
    let vecs = evd.U();

    let mut result = EigenResult {
        values: Vec::with_capacity(m),
        vectors: Vec::with_capacity(m),
        residuals: Vec::with_capacity(m),
        floors: Vec::with_capacity(m),
        normalized: Vec::with_capacity(m),
    };
    for j in 0..m {
        let lambda = lambdas[j];
        if !(lambda > 0.0) {
            return Err(WgError::Eigen(format!("eigenvalue {j} is not positive: {lambda}")));
        }
        let mut x = DVector::from_fn(n_g, |i, _| vecs[(i, j)]);
        for (b, l) in blocks.iter().zip(&factors) {
            let seg = x.rows(b.start, b.len()).clone_owned();
            let solved = l.transpose().solve_upper_triangular(&seg).expect("nonsingular factor");
            x.rows_mut(b.start, b.len()).copy_from(&solved);
        }
        let mut u = pencil.expand(x.as_slice())?;
        let bnorm = b.quad_form(u.as_slice());
        if !(bnorm > 0.0) {
            return Err(WgError::NoBoundaryContent);
        }
        u /= bnorm.sqrt();
        let (imax, _) = u.iter().enumerate().fold(
            (0, 0.0f64),
            |best, (i, v)| {
                if v.abs() > best.1 {
                    (i, v.abs())
                } else {
                    best
                }
            },
        );
        if u[imax] < 0.0 {
            u = -u;
        }
        let au = a.matvec(u.as_slice());
        let bu = b.matvec(u.as_slice());
        let r: Vec<f64> = au.iter().zip(&bu).map(|(a, b)| a - lambda * b).collect();
        let residual = norm(&r) / norm(&au);
        // What rounding alone leaves in the residual of an f64 vector.
        let abs_u: Vec<f64> = u.iter().map(|v| v.abs()).collect();
        let spread: Vec<f64> = a
            .abs_matvec(&abs_u)
            .iter()
            .zip(b.abs_matvec(&abs_u))
            .map(|(x, y)| x + lambda * y)
            .collect();
        let floor = f64::EPSILON * norm(&spread) / norm(&au);
        if residual > tolerance.max(FLOOR_FACTOR * floor) {
            return Err(WgError::Residual {
                index: j,
                residual,
                tolerance,
            });
        }
        let bb = b.quad_form(u.as_slice());
        result.values.push(lambda);
        result.vectors.push(WgFunction { coeffs: u });
        result.residuals.push(residual);
        result.floors.push(floor);
        result.normalized.push((bb - 1.0).abs() <= 1e-10);
    }
    Ok(result)
}

/// Condenses and solves for the `m` smallest eigenpairs.
pub fn solve_pencil(mesh: &Mesh, pair: &WgOperatorPair, m: usize, opts: CondenseOptions) -> Result<EigenResult> {
    let pencil = condense(mesh, pair, opts).map_err(|e| e.in_stage("condense"))?;
    solve_condensed(pair, &pencil, m, DEFAULT_TOLERANCE).map_err(|e| e.in_stage("eigensolve"))
}

/// `a_w(u, u) / b_w(u, u)`.
pub fn rayleigh_quotient(pair: &WgOperatorPair, u: &WgFunction) -> Result<f64> {
    let b = pair.bw(u, u);
    let scale = u.coeffs.norm_squared();
    if !(b > 1e-14 * scale) || scale == 0.0 {
        return Err(WgError::NoBoundaryContent);
    }
    Ok(pair.aw(u, u) / b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{assemble, GammaSpec, StabilizerSpec};
    use crate::mesh::{Domain, Point};

    #[test]
    fn synthetic_schur_complement() {
        let a = CsrMatrix::from_triplets(2, 2, vec![(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 2.0)]);
        let b = CsrMatrix::from_triplets(2, 2, vec![(0, 0, 1.0)]);
        let p = condense_matrices(&a, &b, &[0], 64).unwrap();
        assert!((p.s[(0, 0)] - 1.5).abs() < 1e-15);
        let res = solve_matrices(&a, &b, &p, 1, 1e-12).unwrap();
        assert!((res.values[0] - 1.5).abs() < 1e-15);
        assert!(res.residuals[0] < 1e-15);
        let u = &res.vectors[0].coeffs;
        assert!((u[1] + 0.5 * u[0]).abs() < 1e-15);
    }

    /// Finite eigenvalues of (A, B) by a dense Cholesky reduction of A.
    fn dense_oracle(pair: &WgOperatorPair) -> Vec<f64> {
        let a = pair.a.to_dense();
        let b = pair.b.to_dense();
        let l = a.cholesky().expect("A is SPD").l();
        let x = l.solve_lower_triangular(&b).unwrap();
        let c = l.solve_lower_triangular(&x.transpose()).unwrap();
        let c = (&c + c.transpose()) * 0.5;
        let mu = c.symmetric_eigenvalues();
        let top = mu.max();
        let mut lambdas: Vec<f64> = mu.iter().filter(|&&m| m > 1e-10 * top).map(|m| 1.0 / m).collect();
        lambdas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        lambdas
    }

    #[test]
    fn matches_dense_oracle() {
        for n in [2, 4] {
            let mesh = Mesh::structured(Domain::UnitSquare, n).unwrap();
            let pair = assemble(&mesh, 1, StabilizerSpec::Gamma(GammaSpec::PowerEps(0.1))).unwrap();
            let want = dense_oracle(&pair);
            assert_eq!(want.len(), pair.dofs.boundary.len());
            let pencil = condense(&mesh, &pair, CondenseOptions::default()).unwrap();
            let got = solve_condensed(&pair, &pencil, want.len(), 1e-9).unwrap();
            for (g, w) in got.values.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-9 * w, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn condensed_shapes_and_symmetry() {
        let mesh = Mesh::structured(Domain::UnitSquare, 2).unwrap();
        let pair = assemble(&mesh, 1, StabilizerSpec::Gamma(GammaSpec::PowerEps(0.1))).unwrap();
        let p = condense(&mesh, &pair, CondenseOptions::default()).unwrap();
        assert_eq!(p.s.shape(), (16, 16));
        let mesh = Mesh::structured(Domain::UnitSquare, 4).unwrap();
        let pair = assemble(&mesh, 1, StabilizerSpec::Gamma(GammaSpec::PowerEps(0.1))).unwrap();
        let p = condense(&mesh, &pair, CondenseOptions::default()).unwrap();
        assert!(p.symmetry_defect <= 1e-12);
        assert!(p.s.clone().cholesky().is_some());
    }

    #[test]
    fn cell_condensation_agrees() {
        let mesh = Mesh::structured(Domain::LShape, 4).unwrap();
        let pair = assemble(&mesh, 2, StabilizerSpec::Gamma(GammaSpec::PowerEps(0.2))).unwrap();
        let plain = solve_pencil(&mesh, &pair, 6, CondenseOptions::default()).unwrap();
        let opts = CondenseOptions {
            cell_condensation: true,
            chunk: 7,
        };
        let cond = solve_pencil(&mesh, &pair, 6, opts).unwrap();
        for j in 0..6 {
            assert!((plain.values[j] - cond.values[j]).abs() < 1e-11 * plain.values[j]);
            let d = (&plain.vectors[j].coeffs - &cond.vectors[j].coeffs).amax();
            // Simple eigenvalues only; the L-shape spectrum has no symmetry pairs.
            assert!(d < 1e-7, "vector {j} differs by {d}");
        }
    }

    #[test]
    fn eigenpairs_are_normalized_and_consistent() {
        let mesh = Mesh::structured(Domain::UnitSquare, 4).unwrap();
        let pair = assemble(&mesh, 1, StabilizerSpec::Gamma(GammaSpec::PowerEps(0.1))).unwrap();
        let res = solve_pencil(&mesh, &pair, 4, CondenseOptions::default()).unwrap();
        assert!(res.values.windows(2).all(|w| w[0] <= w[1]));
        assert!(res.values.iter().all(|&v| v > 0.0));
        assert!(res.normalized.iter().all(|&b| b));
        for (v, u) in res.values.iter().zip(&res.vectors) {
            let rq = rayleigh_quotient(&pair, u).unwrap();
            assert!((rq - v).abs() < 1e-10);
            let twice = WgFunction {
                coeffs: &u.coeffs * 2.0,
            };
            assert!((rayleigh_quotient(&pair, &twice).unwrap() - rq).abs() < 1e-12);
        }
        assert!(solve_condensed(
            &pair,
            &condense(&mesh, &pair, CondenseOptions::default()).unwrap(),
            0,
            1e-9
        )
        .is_err());
    }

    #[test]
    fn rayleigh_of_constant_is_area_over_perimeter() {
        let mesh = Mesh::structured(Domain::UnitSquare, 4).unwrap();
        let pair = assemble(&mesh, 2, StabilizerSpec::Gamma(GammaSpec::PowerEps(0.1))).unwrap();
        let one = WgFunction::interpolate(&mesh, &pair.dofs, &|_: Point| 1.0).unwrap();
        assert!((rayleigh_quotient(&pair, &one).unwrap() - 0.25).abs() < 1e-12);
        let mut inner = WgFunction::zeros(&pair.dofs);
        inner.coeffs[pair.dofs.interior[0]] = 1.0;
        assert!(matches!(
            rayleigh_quotient(&pair, &inner),
            Err(WgError::NoBoundaryContent)
        ));
    }

    #[test]
    fn diagonal_blocks_cover_nonzeros() {
        let m = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.5, 0.0, 0.0, 3.0, 0.0, 0.0, 0.5, 0.0, 4.0,
            ],
        );
        assert_eq!(diagonal_blocks(&m), vec![0..1, 1..4]);
    }
}
