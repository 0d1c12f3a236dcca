//! Global DOF numbering and assembly of the operator pair `(A, B)`.
//!
//! Global layout: all cell-interior blocks first (cell-major), then all edge
//! blocks (edge-major).

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Result, WgError};
use crate::mesh::Mesh;
use crate::parallel::map_cells;
use crate::polyquad::{dim_pk, EdgeBasis};
use crate::sparse::CsrMatrix;
use crate::wgcore::{self, LocalElement, LocalRules, ScalarField, Stabilizer};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DofMap {
    pub k: usize,
    pub n_cells: usize,
    pub n_edges: usize,
    /// Global indices of all DOFs on boundary edges, ascending.
    pub boundary: Vec<usize>,
    /// Complement of `boundary`, ascending.
    pub interior: Vec<usize>,
}

impl DofMap {
    pub fn new(mesh: &Mesh, k: usize) -> Result<DofMap> {
        if k == 0 {
            return Err(WgError::param("WG degree k must be at least 1"));
        }
        let mut map = DofMap {
            k,
            n_cells: mesh.n_cells(),
            n_edges: mesh.n_edges(),
            boundary: Vec::new(),
            interior: Vec::new(),
        };
        let mut is_boundary = vec![false; map.n_dofs()];
        for e in mesh.boundary_edges() {
            for d in map.edge_range(e) {
                is_boundary[d] = true;
            }
        }
        for (d, &b) in is_boundary.iter().enumerate() {
            if b {
                map.boundary.push(d);
            } else {
                map.interior.push(d);
            }
        }
        Ok(map)
    }

    pub fn cell_dofs(&self) -> usize {
        dim_pk(self.k)
    }

    pub fn edge_dofs(&self) -> usize {
        self.k + 1
    }

    pub fn n_dofs(&self) -> usize {
        self.n_cells * self.cell_dofs() + self.n_edges * self.edge_dofs()
    }

    pub fn cell_range(&self, cell: usize) -> std::ops::Range<usize> {
        let start = cell * self.cell_dofs();
        start..start + self.cell_dofs()
    }

    pub fn edge_range(&self, edge: usize) -> std::ops::Range<usize> {
        let start = self.n_cells * self.cell_dofs() + edge * self.edge_dofs();
        start..start + self.edge_dofs()
    }

    /// Global index of every local DOF of `cell`, in local layout order.
    pub fn local_to_global(&self, mesh: &Mesh, cell: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.cell_range(cell).collect();
        for ce in &mesh.cell_edges[cell] {
            out.extend(self.edge_range(ce.edge));
        }
        out
    }
}

/// Choice of `γ(h)` for the γ-stabilizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum GammaSpec {
    /// `h^ε`
    PowerEps(f64),
    /// `-1 / log h`
    NegInvLog,
    /// A fixed value independent of `h`.
    Constant(f64),
}

pub fn gamma_of_h(spec: GammaSpec, h: f64) -> Result<f64> {
    let in_unit = h > 0.0 && h < 1.0;
    match spec {
        GammaSpec::PowerEps(eps) => {
            if !(eps > 0.0 && eps < 1.0) {
                return Err(WgError::param(format!("gamma exponent must lie in (0, 1), got {eps}")));
            }
            if !in_unit {
                return Err(WgError::param(format!("h^eps needs h in (0, 1), got {h}")));
            }
            Ok(h.powf(eps))
        }
        GammaSpec::NegInvLog => {
            if !in_unit {
                return Err(WgError::param(format!("-1/log(h) needs h in (0, 1), got {h}")));
            }
            Ok(-1.0 / h.ln())
        }
        GammaSpec::Constant(g) => Stabilizer::Gamma(g).validate().map(|_| g),
    }
}

/// Stabilizer as configured by the user, resolved per mesh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum StabilizerSpec {
    Gamma(GammaSpec),
    Alpha(f64),
}

impl StabilizerSpec {
    /// Evaluates `γ(h)` at `h_max` of the mesh.
    pub fn resolve(self, mesh: &Mesh) -> Result<Stabilizer> {
        match self {
            StabilizerSpec::Gamma(spec) => Ok(Stabilizer::Gamma(gamma_of_h(spec, mesh.h_max())?)),
            StabilizerSpec::Alpha(a) => Stabilizer::Alpha(a).validate(),
        }
    }
}

impl fmt::Display for StabilizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StabilizerSpec::Gamma(GammaSpec::PowerEps(e)) => write!(f, "pow:{e}"),
            StabilizerSpec::Gamma(GammaSpec::NegInvLog) => write!(f, "neglog"),
            StabilizerSpec::Gamma(GammaSpec::Constant(g)) => write!(f, "const:{g}"),
            StabilizerSpec::Alpha(a) => write!(f, "alpha:{a}"),
        }
    }
}

impl FromStr for StabilizerSpec {
    type Err = WgError;

    /// Accepts `pow:<eps>`, `neglog`, `const:<gamma>` and `alpha:<alpha>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let number = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| WgError::param(format!("bad number '{v}' in stabilizer '{s}'")))
        };
        let spec = match s.split_once(':') {
            Some(("pow", v)) => StabilizerSpec::Gamma(GammaSpec::PowerEps(number(v)?)),
            Some(("const", v)) => StabilizerSpec::Gamma(GammaSpec::Constant(number(v)?)),
            Some(("alpha", v)) => StabilizerSpec::Alpha(number(v)?),
            None if s == "neglog" || s == "log" => StabilizerSpec::Gamma(GammaSpec::NegInvLog),
            _ => {
                return Err(WgError::param(format!(
                    "unknown stabilizer '{s}' (expected pow:<eps>, neglog, const:<g> or alpha:<a>)"
                )))
            }
        };
        match spec {
            StabilizerSpec::Gamma(GammaSpec::PowerEps(e)) if !(e > 0.0 && e < 1.0) => {
                Err(WgError::param(format!("gamma exponent must lie in (0, 1), got {e}")))
            }
            StabilizerSpec::Gamma(GammaSpec::Constant(g)) if !(g > 0.0) => {
                Err(WgError::param(format!("gamma must be positive, got {g}")))
            }
            StabilizerSpec::Alpha(a) if !(a > 0.0) => Err(WgError::param(format!("alpha must be positive, got {a}"))),
            ok => Ok(ok),
        }
    }
}

/// Coefficient vector of an element of `V_h` in [`DofMap`] layout.
#[derive(Debug, Clone, PartialEq)]
pub struct WgFunction {
    pub coeffs: DVector<f64>,
}

impl WgFunction {
    pub fn zeros(dofs: &DofMap) -> WgFunction {
        WgFunction {
            coeffs: DVector::zeros(dofs.n_dofs()),
        }
    }

    /// Global `Q_h f`: `Q_0 f` on every cell and `Q_b f` on every edge.
    pub fn interpolate(mesh: &Mesh, dofs: &DofMap, f: &dyn ScalarField) -> Result<WgFunction> {
        let k = dofs.k;
        let rules = LocalRules::new(k)?;
        let cells = map_cells(mesh, |c| {
            LocalElement::new(mesh, c, k)?.project_cell(f, &rules.cell_fine)
        })?;
        let mut coeffs = DVector::zeros(dofs.n_dofs());
        for (c, block) in cells.iter().enumerate() {
            coeffs
                .rows_mut(dofs.cell_range(c).start, dofs.cell_dofs())
                .copy_from(block);
        }
        for e in 0..mesh.n_edges() {
            let block = wgcore::project_edge(f, mesh, e, k)?;
            coeffs
                .rows_mut(dofs.edge_range(e).start, dofs.edge_dofs())
                .copy_from(&block);
        }
        Ok(WgFunction { coeffs })
    }

    pub fn cell_block(&self, dofs: &DofMap, cell: usize) -> &[f64] {
        &self.coeffs.as_slice()[dofs.cell_range(cell)]
    }

    pub fn edge_block(&self, dofs: &DofMap, edge: usize) -> &[f64] {
        &self.coeffs.as_slice()[dofs.edge_range(edge)]
    }

    /// Local DOF vector of `cell` in [`crate::wgcore::LocalDofLayout`] order.
    pub fn local(&self, mesh: &Mesh, dofs: &DofMap, cell: usize) -> DVector<f64> {
        DVector::from_iterator(
            dofs.cell_dofs() + 3 * dofs.edge_dofs(),
            dofs.local_to_global(mesh, cell).into_iter().map(|g| self.coeffs[g]),
        )
    }

    pub fn as_slice(&self) -> &[f64] {
        self.coeffs.as_slice()
    }
}

/// Value of an edge block at canonical parameter `t`.
pub fn edge_value(block: &[f64], k: usize, t: f64) -> f64 {
    EdgeBasis::new(k).evaluate(block, t)
}

/// The assembled discrete pencil.
#[derive(Debug, Clone)]
pub struct WgOperatorPair {
    pub dofs: DofMap,
    /// `a_w`
    pub a: CsrMatrix,
    /// `b_w`, nonzero only on boundary DOFs.
    pub b: CsrMatrix,
    pub spec: StabilizerSpec,
    /// The stabilizer with `γ(h)` evaluated on this mesh.
    pub stabilizer: Stabilizer,
}

impl WgOperatorPair {
    pub fn k(&self) -> usize {
        self.dofs.k
    }

    pub fn aw(&self, u: &WgFunction, v: &WgFunction) -> f64 {
        self.a.bilinear(v.as_slice(), u.as_slice())
    }

    pub fn bw(&self, u: &WgFunction, v: &WgFunction) -> f64 {
        self.b.bilinear(v.as_slice(), u.as_slice())
    }
}

fn scatter(triplets: &mut Vec<(usize, usize, f64)>, map: &[usize], local: &nalgebra::DMatrix<f64>) {
    for (i, &gi) in map.iter().enumerate() {
        for (j, &gj) in map.iter().enumerate() {
            let v = local[(i, j)];
            if v != 0.0 {
                triplets.push((gi, gj, v));
            }
        }
    }
}

/// Assembles the boundary mass matrix `b_w`.
pub fn assemble_bw(mesh: &Mesh, dofs: &DofMap) -> Result<CsrMatrix> {
    let mut triplets = Vec::new();
    for e in mesh.boundary_edges() {
        let local = wgcore::local_bw(mesh, e, dofs.k)?;
        let map: Vec<usize> = dofs.edge_range(e).collect();
        scatter(&mut triplets, &map, &local);
    }
    Ok(CsrMatrix::from_triplets(dofs.n_dofs(), dofs.n_dofs(), triplets))
}

/// Assembles `s(·,·)` alone.
pub fn assemble_stabilizer(mesh: &Mesh, dofs: &DofMap, stabilizer: Stabilizer) -> Result<CsrMatrix> {
    let rules = LocalRules::new(dofs.k)?;
    let locals = map_cells(mesh, |c| {
        LocalElement::new(mesh, c, dofs.k)?.stabilizer(stabilizer, &rules)
    })?;
    let mut triplets = Vec::new();
    for (c, local) in locals.iter().enumerate() {
        scatter(&mut triplets, &dofs.local_to_global(mesh, c), local);
    }
    Ok(CsrMatrix::from_triplets(dofs.n_dofs(), dofs.n_dofs(), triplets))
}

/// Assembles `A = a_w` and `B = b_w`. Local matrices are computed in
/// parallel and scattered in ascending cell order.
pub fn assemble(mesh: &Mesh, k: usize, spec: StabilizerSpec) -> Result<WgOperatorPair> {
    let dofs = DofMap::new(mesh, k)?;
    let stabilizer = spec.resolve(mesh)?;
    let rules = LocalRules::new(k)?;
    let locals = map_cells(mesh, |c| {
        let el = LocalElement::new(mesh, c, k)?;
        let s = el.stabilizer(stabilizer, &rules)?;
        el.aw(&s, &rules)
    })?;
    let n_loc = dofs.cell_dofs() + 3 * dofs.edge_dofs();
    let mut triplets = Vec::with_capacity(locals.len() * n_loc * n_loc);
    for (c, local) in locals.iter().enumerate() {
        scatter(&mut triplets, &dofs.local_to_global(mesh, c), local);
    }
    drop(locals);
    let a = CsrMatrix::from_triplets(dofs.n_dofs(), dofs.n_dofs(), triplets);
    let b = assemble_bw(mesh, &dofs)?;
    Ok(WgOperatorPair {
        dofs,
        a,
        b,
        spec,
        stabilizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{Domain, Point};

    #[test]
    fn dof_counts() {
        let sq = Mesh::structured(Domain::UnitSquare, 2).unwrap();
        let d1 = DofMap::new(&sq, 1).unwrap();
        assert_eq!((d1.n_dofs(), d1.boundary.len()), (56, 16));
        let d2 = DofMap::new(&sq, 2).unwrap();
        assert_eq!((d2.n_dofs(), d2.boundary.len()), (96, 24));
        let l = Mesh::structured(Domain::LShape, 2).unwrap();
        let dl = DofMap::new(&l, 1).unwrap();
        assert_eq!((dl.n_dofs(), dl.boundary.len()), (44, 16));
        assert!(DofMap::new(&sq, 0).is_err());
    }

    #[test]
    fn boundary_and_interior_partition() {
        let m = Mesh::structured(Domain::LShape, 4).unwrap();
        let d = DofMap::new(&m, 2).unwrap();
        assert_eq!(d.boundary.len() + d.interior.len(), d.n_dofs());
        let mut all: Vec<usize> = d.boundary.iter().chain(&d.interior).copied().collect();
        all.sort();
        assert!(all.iter().enumerate().all(|(i, &v)| i == v));
        assert_eq!(d.boundary.len(), m.stats().n_boundary_edges * 3);
    }

    #[test]
    fn gamma_values() {
        let g = gamma_of_h(GammaSpec::PowerEps(0.1), 1.0 / 16.0).unwrap();
        assert!((g - 0.757858283).abs() < 1e-9);
        let g = gamma_of_h(GammaSpec::NegInvLog, (-1.0f64).exp()).unwrap();
        assert!((g - 1.0).abs() < 1e-15);
        let coarse = gamma_of_h(GammaSpec::PowerEps(0.2), 0.25).unwrap();
        let fine = gamma_of_h(GammaSpec::PowerEps(0.2), 0.125).unwrap();
        assert!(fine < coarse);
        assert!(gamma_of_h(GammaSpec::NegInvLog, 1.0).is_err());
        assert!(gamma_of_h(GammaSpec::NegInvLog, 2.0).is_err());
        assert!(gamma_of_h(GammaSpec::PowerEps(0.0), 0.5).is_err());
    }

    #[test]
    fn stabilizer_spec_parsing() {
        assert_eq!(
            "pow:0.1".parse::<StabilizerSpec>().unwrap(),
            StabilizerSpec::Gamma(GammaSpec::PowerEps(0.1))
        );
        assert_eq!(
            "neglog".parse::<StabilizerSpec>().unwrap(),
            StabilizerSpec::Gamma(GammaSpec::NegInvLog)
        );
        assert_eq!(
            "alpha:0.5".parse::<StabilizerSpec>().unwrap(),
            StabilizerSpec::Alpha(0.5)
        );
        assert!("alpha:-1".parse::<StabilizerSpec>().is_err());
        assert!("pow:x".parse::<StabilizerSpec>().is_err());
        assert!("weird".parse::<StabilizerSpec>().is_err());
        let spec: StabilizerSpec = "const:0.25".parse().unwrap();
        assert_eq!(spec.to_string().parse::<StabilizerSpec>().unwrap(), spec);
    }

    #[test]
    fn constant_interpolant_energy_is_area() {
        for domain in [Domain::UnitSquare, Domain::LShape] {
            let m = Mesh::structured(domain, 4).unwrap();
            let pair = assemble(&m, 2, StabilizerSpec::Gamma(GammaSpec::Constant(1.0))).unwrap();
            let one = WgFunction::interpolate(&m, &pair.dofs, &|_: Point| 1.0).unwrap();
            assert!((pair.aw(&one, &one) - domain.area()).abs() < 1e-12);
            assert!((pair.bw(&one, &one) - domain.perimeter()).abs() < 1e-12);
        }
    }

    #[test]
    fn b_vanishes_on_interior_dofs() {
        let m = Mesh::structured(Domain::UnitSquare, 3).unwrap();
        let pair = assemble(&m, 1, StabilizerSpec::Gamma(GammaSpec::PowerEps(0.1))).unwrap();
        let mut v = vec![0.0; pair.dofs.n_dofs()];
        for (i, &d) in pair.dofs.interior.iter().enumerate() {
            v[d] = 1.0 + i as f64;
        }
        assert!(pair.b.matvec(&v).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn global_commutativity_energy() {
        let m = Mesh::structured(Domain::LShape, 4).unwrap();
        let k = 2;
        let pair = assemble(&m, k, StabilizerSpec::Gamma(GammaSpec::PowerEps(0.1))).unwrap();
        let phi = |p: Point| 1.0 + p.x * p.y - 0.5 * p.y * p.y;
        let v = WgFunction::interpolate(&m, &pair.dofs, &phi).unwrap();
        // ∫ |∇φ|² + φ² over the L-shape, by quadrature of the polynomial.
        let rule = crate::polyquad::triangle_quadrature(6).unwrap();
        let mut want = 0.0;
        for c in 0..m.n_cells() {
            let (pts, w) = rule.on_cell(&m, c);
            for (p, wq) in pts.iter().zip(&w) {
                let g = Point::new(p.y, p.x - p.y);
                want += wq * (g.norm_squared() + phi(*p).powi(2));
            }
        }
        assert!((pair.aw(&v, &v) - want).abs() < 1e-10);
    }

    #[test]
    fn assembly_is_linear_in_gamma() {
        let m = Mesh::structured(Domain::UnitSquare, 3).unwrap();
        let k = 1;
        let a1 = assemble(&m, k, StabilizerSpec::Gamma(GammaSpec::Constant(0.3)))
            .unwrap()
            .a;
        let a2 = assemble(&m, k, StabilizerSpec::Gamma(GammaSpec::Constant(0.8)))
            .unwrap()
            .a;
        let dofs = DofMap::new(&m, k).unwrap();
        let s = assemble_stabilizer(&m, &dofs, Stabilizer::Gamma(0.5)).unwrap();
        let scale = (0.8 - 0.3) / 0.5;
        for r in 0..dofs.n_dofs() {
            for (c, v) in s.row(r) {
                assert!((a2.get(r, c) - a1.get(r, c) - scale * v).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn assembly_is_deterministic() {
        let m = Mesh::structured(Domain::LShape, 4).unwrap();
        let spec = StabilizerSpec::Gamma(GammaSpec::PowerEps(0.1));
        let p1 = assemble(&m, 2, spec).unwrap();
        let p2 = assemble(&m, 2, spec).unwrap();
        assert_eq!(p1.a, p2.a);
        assert_eq!(p1.b, p2.b);
    }
}
