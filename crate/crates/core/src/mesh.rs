//! Conforming triangulations of the unit square and the L-shaped domain.
//!
//! Cells are stored counter-clockwise. Local edge `i` of a cell runs from its
//! vertex `i` to vertex `(i + 1) % 3`. Global edges are stored with the lower
//! vertex index first; the edge parameter `t` runs from that vertex to the
//! other one, and `cell_edges` records whether the local direction agrees.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{check_index, Result, WgError};

pub type Point = Vector2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "square")]
    UnitSquare,
    #[serde(rename = "lshape")]
    LShape,
}

impl Domain {
    pub fn area(self) -> f64 {
        match self {
            Domain::UnitSquare => 1.0,
            Domain::LShape => 0.75,
        }
    }

    pub fn perimeter(self) -> f64 {
        // The L-shape removes a quarter but keeps the perimeter.
        4.0
    }

    /// Closed-set membership test.
    pub fn contains(self, p: Point) -> bool {
        let inside_square = (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y);
        match self {
            Domain::UnitSquare => inside_square,
            Domain::LShape => inside_square && !(p.x > 0.5 && p.y > 0.5),
        }
    }

    /// Sides of the polygon as (start, end) pairs, counter-clockwise.
    pub fn boundary_segments(self) -> Vec<(Point, Point)> {
        let corners: Vec<Point> = match self {
            Domain::UnitSquare => vec![
                Point::new(0.0, 0.0),
                Point::new(1.0, 0.0),
                Point::new(1.0, 1.0),
                Point::new(0.0, 1.0),
            ],
            Domain::LShape => vec![
                Point::new(0.0, 0.0),
                Point::new(1.0, 0.0),
                Point::new(1.0, 0.5),
                Point::new(0.5, 0.5),
                Point::new(0.5, 1.0),
                Point::new(0.0, 1.0),
            ],
        };
        (0..corners.len())
            .map(|i| (corners[i], corners[(i + 1) % corners.len()]))
            .collect()
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::UnitSquare => "square",
            Domain::LShape => "lshape",
        })
    }
}

impl FromStr for Domain {
    type Err = WgError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "square" | "unitsquare" | "unit_square" => Ok(Domain::UnitSquare),
            "lshape" | "l-shape" | "l_shape" => Ok(Domain::LShape),
            other => Err(WgError::param(format!("unknown domain '{other}'"))),
        }
    }
}

/// Reference from a cell to one of its global edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CellEdge {
    pub edge: usize,
    /// +1 when the cell's local direction matches the canonical one.
    pub sign: i8,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub domain: Option<Domain>,
    pub vertices: Vec<Point>,
    pub cells: Vec<[usize; 3]>,
    pub edges: Vec<[usize; 2]>,
    pub cell_edges: Vec<[CellEdge; 3]>,
    pub edge_cells: Vec<Vec<usize>>,
    pub boundary_edge: Vec<bool>,
    pub area: Vec<f64>,
    pub diameter: Vec<f64>,
    pub length: Vec<f64>,
    pub normals: Vec<[Point; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeshStats {
    pub h_max: f64,
    pub n_vertices: usize,
    pub n_cells: usize,
    pub n_edges: usize,
    pub n_boundary_edges: usize,
    pub total_area: f64,
}

impl Mesh {
    /// Uniform grid of `n` squares per unit length, each cut along the
    /// lower-left to upper-right diagonal.
    pub fn structured(domain: Domain, n: usize) -> Result<Mesh> {
        if n == 0 {
            return Err(WgError::param("mesh resolution n must be at least 1"));
        }
        if domain == Domain::LShape && !n.is_multiple_of(2) {
            return Err(WgError::param(format!(
                "L-shape needs even n so (1/2, 1/2) is a grid point, got {n}"
            )));
        }
        let half = n / 2;
        let keep_square = |i: usize, j: usize| match domain {
            Domain::UnitSquare => true,
            Domain::LShape => !(i >= half && j >= half),
        };
        let keep_vertex = |i: usize, j: usize| match domain {
            Domain::UnitSquare => true,
            Domain::LShape => !(i > half && j > half),
        };

        let mut index = vec![usize::MAX; (n + 1) * (n + 1)];
        let mut vertices = Vec::new();
        for j in 0..=n {
            for i in 0..=n {
                if keep_vertex(i, j) {
                    index[j * (n + 1) + i] = vertices.len();
                    vertices.push(Point::new(i as f64 / n as f64, j as f64 / n as f64));
                }
            }
        }
        let id = |i: usize, j: usize| index[j * (n + 1) + i];

        let mut cells = Vec::new();
        for j in 0..n {
            for i in 0..n {
                if !keep_square(i, j) {
                    continue;
                }
                let (v00, v10, v11, v01) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
                cells.push([v00, v10, v11]);
                cells.push([v00, v11, v01]);
            }
        }
        let mut mesh = Mesh::from_cells(vertices, cells)?;
        mesh.domain = Some(domain);
        Ok(mesh)
    }

    /// Builds connectivity and geometry from raw vertices and
    /// counter-clockwise cells.
    pub fn from_cells(vertices: Vec<Point>, cells: Vec<[usize; 3]>) -> Result<Mesh> {
        if cells.is_empty() {
            return Err(WgError::InvalidMesh("no cells".into()));
        }
        let mut edge_index: HashMap<[usize; 2], usize> = HashMap::new();
        let mut edges = Vec::new();
        let mut edge_cells: Vec<Vec<usize>> = Vec::new();
        let mut cell_edges = Vec::with_capacity(cells.len());
        let mut area = Vec::with_capacity(cells.len());
        let mut diameter = Vec::with_capacity(cells.len());
        let mut normals = Vec::with_capacity(cells.len());

        for (c, cell) in cells.iter().enumerate() {
            for &v in cell {
                check_index("vertex", v, vertices.len())?;
            }
            let [a, b, d] = cell.map(|v| vertices[v]);
            let signed = 0.5 * (b - a).perp(&(d - a));
            if signed <= 0.0 {
                return Err(WgError::InvalidMesh(format!(
                    "cell {c} is degenerate or clockwise (signed area {signed:e})"
                )));
            }
            area.push(signed);

            let mut local = [CellEdge { edge: 0, sign: 1 }; 3];
            let mut cell_normals = [Point::zeros(); 3];
            let mut longest: f64 = 0.0;
            for i in 0..3 {
                let (p, q) = (cell[i], cell[(i + 1) % 3]);
                let key = [p.min(q), p.max(q)];
                let e = *edge_index.entry(key).or_insert_with(|| {
                    edges.push(key);
                    edge_cells.push(Vec::new());
                    edges.len() - 1
                });
                edge_cells[e].push(c);
                if edge_cells[e].len() > 2 {
                    return Err(WgError::InvalidMesh(format!(
                        "edge {key:?} shared by more than two cells"
                    )));
                }
                local[i] = CellEdge {
                    edge: e,
                    sign: if p < q { 1 } else { -1 },
                };
                let t = vertices[q] - vertices[p];
                longest = longest.max(t.norm());
                cell_normals[i] = Point::new(t.y, -t.x).normalize();
            }
            cell_edges.push(local);
            diameter.push(longest);
            normals.push(cell_normals);
        }

        let length = edges.iter().map(|&[p, q]| (vertices[q] - vertices[p]).norm()).collect();
        let boundary_edge = edge_cells.iter().map(|cs| cs.len() == 1).collect();

        Ok(Mesh {
            domain: None,
            vertices,
            cells,
            edges,
            cell_edges,
            edge_cells,
            boundary_edge,
            area,
            diameter,
            length,
            normals,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn h_max(&self) -> f64 {
        self.diameter.iter().copied().fold(0.0, f64::max)
    }

    pub fn boundary_edges(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_edges()).filter(|&e| self.boundary_edge[e])
    }

    pub fn stats(&self) -> MeshStats {
        MeshStats {
            h_max: self.h_max(),
            n_vertices: self.vertices.len(),
            n_cells: self.n_cells(),
            n_edges: self.n_edges(),
            n_boundary_edges: self.boundary_edge.iter().filter(|&&b| b).count(),
            total_area: self.area.iter().sum(),
        }
    }

    pub fn cell_vertices(&self, cell: usize) -> [Point; 3] {
        self.cells[cell].map(|v| self.vertices[v])
    }

    pub fn centroid(&self, cell: usize) -> Point {
        let [a, b, c] = self.cell_vertices(cell);
        (a + b + c) / 3.0
    }

    /// Endpoints of local edge `i` of `cell`, in the cell's local direction.
    pub fn local_edge_endpoints(&self, cell: usize, i: usize) -> (Point, Point) {
        let c = self.cells[cell];
        (self.vertices[c[i]], self.vertices[c[(i + 1) % 3]])
    }

    /// Endpoints of a global edge in canonical direction (t = 0 to t = 1).
    pub fn edge_endpoints(&self, edge: usize) -> (Point, Point) {
        let [p, q] = self.edges[edge];
        (self.vertices[p], self.vertices[q])
    }

    pub fn outward_normal(&self, cell: usize, local_edge: usize) -> Result<Point> {
        check_index("cell", cell, self.n_cells())?;
        check_index("local edge", local_edge, 3)?;
        Ok(self.normals[cell][local_edge])
    }

    /// Outward unit normal of a boundary edge with respect to the domain.
    pub fn boundary_normal(&self, edge: usize) -> Result<Point> {
        check_index("edge", edge, self.n_edges())?;
        if !self.boundary_edge[edge] {
            return Err(WgError::param(format!("edge {edge} is not a boundary edge")));
        }
        let cell = self.edge_cells[edge][0];
        let local = self.cell_edges[cell]
            .iter()
            .position(|ce| ce.edge == edge)
            .expect("edge_cells and cell_edges agree");
        Ok(self.normals[cell][local])
    }

    /// Checks every structural invariant; used by tests and the `mesh` command.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(WgError::InvalidMesh(msg));
        for (c, &a) in self.area.iter().enumerate() {
            if a <= 0.0 {
                return fail(format!("cell {c} has non-positive area"));
            }
        }
        if let Some(domain) = self.domain {
            let total: f64 = self.area.iter().sum();
            if (total - domain.area()).abs() > 1e-12 {
                return fail(format!("total area {total} differs from {}", domain.area()));
            }
        }
        for (e, cs) in self.edge_cells.iter().enumerate() {
            let expected = if self.boundary_edge[e] { 1 } else { 2 };
            if cs.len() != expected {
                return fail(format!("edge {e} has {} incident cells", cs.len()));
            }
        }
        let euler = self.vertices.len() as i64 - self.n_edges() as i64 + self.n_cells() as i64;
        if euler != 1 {
            return fail(format!("Euler characteristic {euler} != 1"));
        }
        for c in 0..self.n_cells() {
            let mut closure = Point::zeros();
            for i in 0..3 {
                closure += self.length[self.cell_edges[c][i].edge] * self.normals[c][i];
            }
            if closure.norm() > 1e-12 {
                return fail(format!("cell {c} normals do not close ({:e})", closure.norm()));
            }
        }
        Ok(())
    }

    pub fn to_dump(&self) -> MeshDump {
        MeshDump {
            domain: self.domain,
            stats: self.stats(),
            vertices: self.vertices.iter().map(|p| [p.x, p.y]).collect(),
            cells: self.cells.clone(),
            edges: self.edges.clone(),
            boundary_edge: self.boundary_edge.clone(),
            cell_edges: self.cell_edges.clone(),
        }
    }
}

/// JSON mesh dump. `cells` are counter-clockwise vertex triples; `edges`
/// are sorted vertex pairs; `cell_edges[c][i]` gives the global edge of
/// local edge `i` (from vertex `i` to `i+1`) and its orientation sign.
#[derive(Debug, Clone, Serialize)]
pub struct MeshDump {
    pub domain: Option<Domain>,
    pub stats: MeshStats,
    pub vertices: Vec<[f64; 2]>,
    pub cells: Vec<[usize; 3]>,
    pub edges: Vec<[usize; 2]>,
    pub boundary_edge: Vec<bool>,
    pub cell_edges: Vec<[CellEdge; 3]>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_cell() -> Mesh {
        Mesh::from_cells(
            vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(0.0, 1.0)],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn square_two_counts() {
        let m = Mesh::structured(Domain::UnitSquare, 2).unwrap();
        let s = m.stats();
        assert_eq!((s.n_vertices, s.n_edges, s.n_cells, s.n_boundary_edges), (9, 16, 8, 8));
        assert!((s.h_max - 2f64.sqrt() / 2.0).abs() < 1e-15);
        assert!((s.total_area - 1.0).abs() < 1e-12);
        m.validate().unwrap();
    }

    #[test]
    fn lshape_two_counts() {
        let m = Mesh::structured(Domain::LShape, 2).unwrap();
        let s = m.stats();
        assert_eq!((s.n_vertices, s.n_edges, s.n_cells, s.n_boundary_edges), (8, 13, 6, 8));
        assert!((s.total_area - 0.75).abs() < 1e-12);
        m.validate().unwrap();
    }

    #[test]
    fn square_one_only_diagonal_interior() {
        let m = Mesh::structured(Domain::UnitSquare, 1).unwrap();
        assert_eq!(m.n_cells(), 2);
        let interior: Vec<_> = (0..m.n_edges()).filter(|&e| !m.boundary_edge[e]).collect();
        assert_eq!(interior.len(), 1);
        let (a, b) = m.edge_endpoints(interior[0]);
        assert_eq!((a, b), (Point::new(0.0, 0.0), Point::new(1.0, 1.0)));
    }

    #[test]
    fn square_eight_cell_count() {
        assert_eq!(Mesh::structured(Domain::UnitSquare, 8).unwrap().stats().n_cells, 128);
    }

    #[test]
    fn rejects_bad_resolution() {
        assert!(Mesh::structured(Domain::UnitSquare, 0).is_err());
        assert!(Mesh::structured(Domain::LShape, 3).is_err());
    }

    #[test]
    fn reference_normals() {
        let m = reference_cell();
        let bottom = m.outward_normal(0, 0).unwrap();
        assert!((bottom - Point::new(0.0, -1.0)).norm() < 1e-15);
        let hyp = m.outward_normal(0, 1).unwrap();
        let s = 0.5f64.sqrt();
        assert!((hyp - Point::new(s, s)).norm() < 1e-15);
        assert!(m.outward_normal(0, 3).is_err());
        assert!(m.outward_normal(1, 0).is_err());
    }

    #[test]
    fn normals_point_away_from_centroid() {
        let m = Mesh::structured(Domain::LShape, 4).unwrap();
        for c in 0..m.n_cells() {
            let centroid = m.centroid(c);
            for i in 0..3 {
                let (a, b) = m.local_edge_endpoints(c, i);
                let n = m.outward_normal(c, i).unwrap();
                assert!((n.norm() - 1.0).abs() < 1e-14);
                assert!(n.dot(&(centroid - 0.5 * (a + b))) < 0.0);
            }
        }
    }

    #[test]
    fn refinement_halves_h() {
        for domain in [Domain::UnitSquare, Domain::LShape] {
            let coarse = Mesh::structured(domain, 4).unwrap().h_max();
            let fine = Mesh::structured(domain, 8).unwrap().h_max();
            assert!((coarse / fine - 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn lshape_boundary_edges_on_perimeter() {
        let m = Mesh::structured(Domain::LShape, 8).unwrap();
        m.validate().unwrap();
        let sides = Domain::LShape.boundary_segments();
        let on_side = |p: Point| {
            sides.iter().any(|&(a, b)| {
                let t = b - a;
                let cross = t.perp(&(p - a)).abs();
                let s = t.dot(&(p - a)) / t.norm_squared();
                cross < 1e-14 && (-1e-14..=1.0 + 1e-14).contains(&s)
            })
        };
        let mut perimeter = 0.0;
        for e in m.boundary_edges() {
            let (a, b) = m.edge_endpoints(e);
            assert!(
                on_side(a) && on_side(b) && on_side(0.5 * (a + b)),
                "edge {e} off perimeter"
            );
            perimeter += m.length[e];
        }
        assert!((perimeter - 4.0).abs() < 1e-12);
    }

    #[test]
    fn shared_edges_have_opposite_orientation() {
        let m = Mesh::structured(Domain::UnitSquare, 3).unwrap();
        for e in 0..m.n_edges() {
            if let [c0, c1] = m.edge_cells[e][..] {
                let sign = |c: usize| m.cell_edges[c].iter().find(|ce| ce.edge == e).unwrap().sign;
                assert_eq!(sign(c0), -sign(c1));
            }
        }
    }

    #[test]
    fn rejects_clockwise_cell() {
        let err = Mesh::from_cells(
            vec![Point::new(0.0, 0.0), Point::new(0.0, 1.0), Point::new(1.0, 0.0)],
            vec![[0, 1, 2]],
        );
        assert!(matches!(err, Err(WgError::InvalidMesh(_))));
    }

    #[test]
    fn dump_is_json() {
        let m = Mesh::structured(Domain::UnitSquare, 1).unwrap();
        let json = serde_json::to_value(m.to_dump()).unwrap();
        assert_eq!(json["cells"].as_array().unwrap().len(), 2);
        assert_eq!(json["domain"], "square");
    }
}
