//! Quadrature rules and polynomial bases on cells and edges.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, WgError};
use crate::mesh::{Mesh, Point};

/// Highest exactness degree the rule builders accept.
pub const MAX_QUADRATURE_DEGREE: usize = 60;

/// Gauss–Legendre rule on [0, 1].
#[derive(Debug, Clone)]
pub struct LineRule {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

/// Rule on a triangle in barycentric form; weights sum to 1 so that
/// `∫_T f ≈ |T| Σ w_q f(x_q)`.
#[derive(Debug, Clone)]
pub struct TriangleRule {
    pub bary: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

/// Nodes and weights of the `m`-point Gauss–Legendre rule on [-1, 1].
fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for i in 0..m.div_ceil(2) {
        // Tricomi's initial guess, then Newton on P_m.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(m, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(m, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[m - 1 - i] = x;
        weights[i] = w;
        weights[m - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(m: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if m == 0 {
        return (1.0, 0.0);
    }
    for j in 2..=m {
        let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
        p0 = p1;
        p1 = p2;
    }
    let dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

pub fn edge_quadrature(exactness_degree: usize) -> Result<LineRule> {
    if exactness_degree > MAX_QUADRATURE_DEGREE {
        return Err(WgError::UnsupportedQuadrature {
            degree: exactness_degree,
            max: MAX_QUADRATURE_DEGREE,
        });
    }
    let m = exactness_degree / 2 + 1;
    let (nodes, weights) = gauss_legendre(m);
    Ok(LineRule {
        points: nodes.iter().map(|x| 0.5 * (x + 1.0)).collect(),
        weights: weights.iter().map(|w| 0.5 * w).collect(),
        degree: 2 * m - 1,
    })
}

/// Collapsed-coordinate rule: a Gauss–Legendre tensor rule on the square
/// mapped onto the triangle. All weights are positive.
pub fn triangle_quadrature(exactness_degree: usize) -> Result<TriangleRule> {
    if exactness_degree > MAX_QUADRATURE_DEGREE {
        return Err(WgError::UnsupportedQuadrature {
            degree: exactness_degree,
            max: MAX_QUADRATURE_DEGREE,
        });
    }
    // The Jacobian (1 - u) raises the degree in u by one.
    let u_rule = edge_quadrature(exactness_degree + 1)?;
    let v_rule = edge_quadrature(exactness_degree)?;
    let mut bary = Vec::with_capacity(u_rule.points.len() * v_rule.points.len());
    let mut weights = Vec::with_capacity(bary.capacity());
    for (&u, &wu) in u_rule.points.iter().zip(&u_rule.weights) {
        for (&v, &wv) in v_rule.points.iter().zip(&v_rule.weights) {
            let xi = u;
            let eta = v * (1.0 - u);
            bary.push([1.0 - xi - eta, xi, eta]);
            weights.push(2.0 * wu * wv * (1.0 - u));
        }
    }
    Ok(TriangleRule {
        bary,
        weights,
        degree: exactness_degree,
    })
}

impl TriangleRule {
    /// Physical points and weights (already multiplied by |T|).
    pub fn on_cell(&self, mesh: &Mesh, cell: usize) -> (Vec<Point>, Vec<f64>) {
        let [a, b, c] = mesh.cell_vertices(cell);
        let area = mesh.area[cell];
        let pts = self.bary.iter().map(|l| l[0] * a + l[1] * b + l[2] * c).collect();
        let w = self.weights.iter().map(|w| w * area).collect();
        (pts, w)
    }

    pub fn integrate_reference(&self, f: impl Fn(f64, f64) -> f64) -> f64 {
        0.5 * self
            .bary
            .iter()
            .zip(&self.weights)
            .map(|(l, w)| w * f(l[1], l[2]))
            .sum::<f64>()
    }
}

impl LineRule {
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.points.iter().zip(&self.weights).map(|(&t, w)| w * f(t)).sum()
    }
}

pub fn dim_pk(k: usize) -> usize {
    (k + 1) * (k + 2) / 2
}

/// Orthonormal basis of `P_k(T)`.
///
/// Built from monomials in `((x - x_c)/h_T, (y - y_c)/h_T)`, ordered by total
/// degree, and orthonormalized against the cell mass matrix by a Cholesky
/// factor. The ordering makes the basis hierarchical: the first `dim P_j`
/// functions span `P_j` for every `j <= k`.
#[derive(Debug, Clone)]
pub struct CellBasis {
    degree: usize,
    center: Point,
    scale: f64,
    exponents: Vec<(usize, usize)>,
    /// Row `i` holds the monomial coefficients of basis function `i`.
    coef: DMatrix<f64>,
}

impl CellBasis {
    pub fn new(mesh: &Mesh, cell: usize, degree: usize) -> Result<CellBasis> {
        let exponents: Vec<(usize, usize)> = (0..=degree).flat_map(|s| (0..=s).map(move |b| (s - b, b))).collect();
        let mut basis = CellBasis {
            degree,
            center: mesh.centroid(cell),
            scale: mesh.diameter[cell],
            exponents,
            coef: DMatrix::identity(dim_pk(degree), dim_pk(degree)),
        };
        let rule = triangle_quadrature(2 * degree)?;
        let (pts, w) = rule.on_cell(mesh, cell);
        let n = basis.dim();
        let mut mass = DMatrix::zeros(n, n);
        let mut vals = vec![0.0; n];
        for (p, wq) in pts.iter().zip(&w) {
            basis.monomials(*p, &mut vals);
            for i in 0..n {
                for j in 0..=i {
                    mass[(i, j)] += wq * vals[i] * vals[j];
                }
            }
        }
        mass.fill_upper_triangle_with_lower_triangle();
        let chol = mass.cholesky().ok_or_else(|| WgError::Factorization {
            stage: "cell basis mass matrix",
            detail: format!("cell {cell} mass matrix not positive definite"),
        })?;
        let l = chol.l();
        let inv = l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("Cholesky factor has a positive diagonal");
        basis.coef = inv;
        Ok(basis)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.exponents.len()
    }

    fn monomials(&self, p: Point, out: &mut [f64]) {
        let s = (p - self.center) / self.scale;
        for (o, &(a, b)) in out.iter_mut().zip(&self.exponents) {
            *o = s.x.powi(a as i32) * s.y.powi(b as i32);
        }
    }

    fn monomial_gradients(&self, p: Point, dx: &mut [f64], dy: &mut [f64]) {
        let s = (p - self.center) / self.scale;
        let pow = |x: f64, e: usize| if e == 0 { 1.0 } else { x.powi(e as i32) };
        for (i, &(a, b)) in self.exponents.iter().enumerate() {
            dx[i] = if a == 0 {
                0.0
            } else {
                a as f64 * pow(s.x, a - 1) * pow(s.y, b) / self.scale
            };
            dy[i] = if b == 0 {
                0.0
            } else {
                b as f64 * pow(s.x, a) * pow(s.y, b - 1) / self.scale
            };
        }
    }

    fn combine(&self, mono: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..=i).map(|j| self.coef[(i, j)] * mono[j]).sum();
        }
    }

    pub fn eval_into(&self, p: Point, out: &mut [f64]) {
        let mut mono = vec![0.0; self.dim()];
        self.monomials(p, &mut mono);
        self.combine(&mono, out);
    }

    pub fn eval(&self, p: Point) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.eval_into(p, out.as_mut_slice());
        out
    }

    /// Gradients of all basis functions at `p`, as (d/dx, d/dy) vectors.
    pub fn eval_grad(&self, p: Point) -> (DVector<f64>, DVector<f64>) {
        let n = self.dim();
        let (mut mx, mut my) = (vec![0.0; n], vec![0.0; n]);
        self.monomial_gradients(p, &mut mx, &mut my);
        let (mut gx, mut gy) = (DVector::zeros(n), DVector::zeros(n));
        self.combine(&mx, gx.as_mut_slice());
        self.combine(&my, gy.as_mut_slice());
        (gx, gy)
    }

    /// Value of the polynomial with the given coefficients.
    pub fn evaluate(&self, coeffs: &[f64], p: Point) -> f64 {
        self.eval(p).iter().zip(coeffs).map(|(a, b)| a * b).sum()
    }

    pub fn evaluate_grad(&self, coeffs: &[f64], p: Point) -> Point {
        let (gx, gy) = self.eval_grad(p);
        let c = DVector::from_column_slice(coeffs);
        Point::new(gx.dot(&c), gy.dot(&c))
    }
}

/// Orthonormal basis of `P_k` on [0, 1] with respect to `dt`:
/// shifted Legendre polynomials `sqrt(2m+1) P_m(2t - 1)`.
#[derive(Debug, Clone, Copy)]
pub struct EdgeBasis {
    pub degree: usize,
}

impl EdgeBasis {
    pub fn new(degree: usize) -> EdgeBasis {
        EdgeBasis { degree }
    }

    pub fn dim(&self) -> usize {
        self.degree + 1
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let x = 2.0 * t - 1.0;
        let (mut p0, mut p1) = (1.0, x);
        for (m, o) in out.iter_mut().enumerate().take(self.dim()) {
            let pm = match m {
                0 => 1.0,
                1 => x,
                _ => {
                    let p2 = ((2 * m - 1) as f64 * x * p1 - (m - 1) as f64 * p0) / m as f64;
                    p0 = p1;
                    p1 = p2;
                    p2
                }
            };
            *o = ((2 * m + 1) as f64).sqrt() * pm;
        }
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.eval_into(t, out.as_mut_slice());
        out
    }

    pub fn evaluate(&self, coeffs: &[f64], t: f64) -> f64 {
        self.eval(t).iter().zip(coeffs).map(|(a, b)| a * b).sum()
    }
}

/// Basis of `[P_{k-1}(T)]^2`: the first half is `(φ_j, 0)`, the second
/// `(0, φ_j)` with `φ_j` the degree `k-1` [`CellBasis`].
#[derive(Debug, Clone)]
pub struct VectorBasis {
    pub scalar: CellBasis,
}

impl VectorBasis {
    pub fn new(mesh: &Mesh, cell: usize, k: usize) -> Result<VectorBasis> {
        if k == 0 {
            return Err(WgError::param("vector basis needs k >= 1"));
        }
        Ok(VectorBasis {
            scalar: CellBasis::new(mesh, cell, k - 1)?,
        })
    }

    pub fn dim(&self) -> usize {
        2 * self.scalar.dim()
    }

    /// Values of all vector basis functions at `p`.
    pub fn eval(&self, p: Point) -> Vec<Point> {
        let phi = self.scalar.eval(p);
        let d = self.scalar.dim();
        (0..self.dim())
            .map(|j| {
                if j < d {
                    Point::new(phi[j], 0.0)
                } else {
                    Point::new(0.0, phi[j - d])
                }
            })
            .collect()
    }

    /// Divergences of all vector basis functions at `p`.
    pub fn divergence(&self, p: Point) -> DVector<f64> {
        let (gx, gy) = self.scalar.eval_grad(p);
        let d = self.scalar.dim();
        DVector::from_fn(self.dim(), |j, _| if j < d { gx[j] } else { gy[j - d] })
    }

    pub fn evaluate(&self, coeffs: &[f64], p: Point) -> Point {
        let d = self.scalar.dim();
        Point::new(
            self.scalar.evaluate(&coeffs[..d], p),
            self.scalar.evaluate(&coeffs[d..], p),
        )
    }
}
