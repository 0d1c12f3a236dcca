//! Convergence studies, report formatting and eigenfunction field export.

pub mod cli;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::assembly::{assemble, GammaSpec, StabilizerSpec, WgOperatorPair};
use crate::eigen::{solve_pencil, CondenseOptions, EigenResult};
use crate::error::{Result, WgError};
use crate::mesh::{Domain, Mesh, Point};
use crate::polyquad::CellBasis;
use crate::source::{source_level, ManufacturedSolution, SourceLevel};

/// Reference values for the first four eigenvalues of the unit square.
#[allow(clippy::excessive_precision)]
pub const SQUARE_REFERENCES: [f64; 4] = [
    0.2400790854320629,
    1.492303134033900,
    1.492303134115401,
    2.082647053961881,
];

/// The references are themselves numerical, so lower-bound checks allow this.
pub const LOWER_BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
    Markdown,
}

impl FromStr for OutputFormat {
    type Err = WgError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            "markdown" | "md" => Ok(OutputFormat::Markdown),
            other => Err(WgError::param(format!(
                "unknown format '{other}' (csv, json, markdown)"
            ))),
        }
    }
}

/// `builtin:square` or a comma-separated list of numbers.
pub fn parse_references(s: &str) -> Result<Vec<f64>> {
    let s = s.trim();
    if s == "builtin:square" {
        return Ok(SQUARE_REFERENCES.to_vec());
    }
    if let Some(name) = s.strip_prefix("builtin:") {
        return Err(WgError::param(format!("no built-in references for '{name}'")));
    }
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| WgError::param(format!("bad reference value '{v}'")))
        })
        .collect()
}

/// Comma-separated mesh levels.
pub fn parse_levels(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| WgError::param(format!("bad mesh level '{v}'")))
        })
        .collect()
}

fn check_levels(levels: &[usize]) -> Result<()> {
    if levels.is_empty() {
        return Err(WgError::param("at least one mesh level is required"));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(WgError::param(format!(
            "mesh levels must be strictly increasing, got {levels:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub domain: Domain,
    pub k: usize,
    pub stabilizer: StabilizerSpec,
    pub levels: Vec<usize>,
    /// Number of eigenvalues per level.
    pub eigs: usize,
    pub references: Option<Vec<f64>>,
    pub out: Option<PathBuf>,
    pub format: OutputFormat,
    /// Field-export grid resolution.
    pub grid: Option<usize>,
    pub cell_condensation: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            domain: Domain::UnitSquare,
            k: 1,
            stabilizer: StabilizerSpec::Gamma(GammaSpec::PowerEps(0.1)),
            levels: vec![8, 16, 32, 64],
            eigs: 4,
            references: None,
            out: None,
            format: OutputFormat::Csv,
            grid: None,
            cell_condensation: false,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        check_levels(&self.levels)?;
        if self.k == 0 {
            return Err(WgError::param("WG degree k must be at least 1"));
        }
        if self.eigs == 0 {
            return Err(WgError::param("number of eigenvalues must be at least 1"));
        }
        if self.grid == Some(0) {
            return Err(WgError::param("grid resolution must be positive"));
        }
        Ok(())
    }

    fn condense_options(&self) -> CondenseOptions {
        CondenseOptions {
            cell_condensation: self.cell_condensation,
            ..CondenseOptions::default()
        }
    }
}

/// One mesh level of an eigenvalue study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelResult {
    pub n: usize,
    pub h: f64,
    pub n_dofs: usize,
    pub n_boundary_dofs: usize,
    pub eigenvalues: Vec<f64>,
    pub max_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub domain: Domain,
    pub k: usize,
    pub stabilizer: String,
    pub levels: Vec<LevelResult>,
    pub references: Option<Vec<f64>>,
}

/// `log₂(e_coarse / e_fine)`; defined only for positive errors.
pub fn observed_order(coarse: f64, fine: f64) -> Option<f64> {
    (coarse > 0.0 && fine > 0.0).then(|| (coarse / fine).log2())
}

impl ConvergenceReport {
    /// Number of eigenvalue columns with a reference.
    fn n_ref(&self) -> usize {
        let m = self.levels.first().map_or(0, |l| l.eigenvalues.len());
        self.references.as_ref().map_or(0, |r| r.len().min(m))
    }

    /// `λ_j − λ_{j,h}` per level and referenced `j`.
    pub fn errors(&self) -> Option<Vec<Vec<f64>>> {
        let refs = self.references.as_ref()?;
        let m = self.n_ref();
        Some(
            self.levels
                .iter()
                .map(|l| (0..m).map(|j| refs[j] - l.eigenvalues[j]).collect())
                .collect(),
        )
    }

    /// Orders between consecutive levels: `orders[i][j]` compares levels
    /// `i` and `i + 1`.
    pub fn orders(&self) -> Option<Vec<Vec<Option<f64>>>> {
        let errors = self.errors()?;
        Some(
            errors
                .windows(2)
                .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| observed_order(*a, *b)).collect())
                .collect(),
        )
    }

    /// Strict lower-bound flags `λ_{j,h} < λ_j`.
    pub fn lower_bound_flags(&self) -> Option<Vec<Vec<bool>>> {
        Some(
            self.errors()?
                .into_iter()
                .map(|row| row.into_iter().map(|e| e > 0.0).collect())
                .collect(),
        )
    }

    /// Per eigenvalue index: is `λ_{j,h}` nondecreasing across levels?
    pub fn trends(&self) -> Vec<bool> {
        let m = self.levels.first().map_or(0, |l| l.eigenvalues.len());
        (0..m)
            .map(|j| {
                self.levels
                    .windows(2)
                    .all(|w| w[1].eigenvalues[j] >= w[0].eigenvalues[j])
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let m = self.levels.first().map_or(0, |l| l.eigenvalues.len());
        let nr = self.n_ref();
        let with_orders = self.levels.len() > 1;
        let mut out = String::from("n,h");
        for j in 1..=m {
            write!(out, ",lambda_{j}").unwrap();
        }
        for j in 1..=nr {
            write!(out, ",error_{j}").unwrap();
            if with_orders {
                write!(out, ",order_{j}").unwrap();
            }
        }
        out.push('\n');
        let errors = self.errors();
        let orders = self.orders();
        for (i, l) in self.levels.iter().enumerate() {
            write!(out, "{},{:.6e}", l.n, l.h).unwrap();
            for v in &l.eigenvalues {
                write!(out, ",{v:.15e}").unwrap();
            }
            if let Some(errors) = &errors {
                for (j, e) in errors[i].iter().enumerate().take(nr) {
                    write!(out, ",{e:.6e}").unwrap();
                    if with_orders {
                        let o = (i > 0).then(|| orders.as_ref().unwrap()[i - 1][j]).flatten();
                        match o {
                            Some(o) => write!(out, ",{o:.4}").unwrap(),
                            None => out.push(','),
                        }
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Full<'a> {
            #[serde(flatten)]
            report: &'a ConvergenceReport,
            errors: Option<Vec<Vec<f64>>>,
            orders: Option<Vec<Vec<Option<f64>>>>,
            lower_bound: Option<Vec<Vec<bool>>>,
            nondecreasing: Vec<bool>,
        }
        let full = Full {
            report: self,
            errors: self.errors(),
            orders: self.orders(),
            lower_bound: self.lower_bound_flags(),
            nondecreasing: self.trends(),
        };
        serde_json::to_string_pretty(&full).expect("report serializes") + "\n"
    }

    /// Publication-style table: one column per level, rows per eigenvalue.
    pub fn to_markdown(&self) -> String {
        let m = self.levels.first().map_or(0, |l| l.eigenvalues.len());
        let trends = self.trends();
        let errors = self.errors();
        let orders = self.orders();
        let mut out = format!(
            "{} domain, k = {}, stabilizer {}\n\n|  |",
            self.domain, self.k, self.stabilizer
        );
        for l in &self.levels {
            write!(out, " n = {} |", l.n).unwrap();
        }
        out.push_str(" Trend |\n|---|");
        for _ in &self.levels {
            out.push_str("---|");
        }
        out.push_str("---|\n");
        for j in 0..m {
            write!(out, "| λ{},h |", j + 1).unwrap();
            for l in &self.levels {
                write!(out, " {:.10} |", l.eigenvalues[j]).unwrap();
            }
            writeln!(out, " {} |", if trends[j] { "↗" } else { "not monotone" }).unwrap();
            if let Some(errors) = errors.as_ref().filter(|_| j < self.n_ref()) {
                write!(out, "| error |").unwrap();
                for row in errors {
                    write!(out, " {:.4e} |", row[j]).unwrap();
                }
                out.push_str("  |\n");
                if let Some(orders) = orders.as_ref().filter(|o| !o.is_empty()) {
                    out.push_str("| order |  |");
                    for row in orders {
                        match row[j] {
                            Some(o) => write!(out, " {o:.4} |").unwrap(),
                            None => out.push_str(" – |"),
                        }
                    }
                    out.push_str("  |\n");
                }
            }
        }
        out
    }

    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Csv => self.to_csv(),
            OutputFormat::Json => self.to_json(),
            OutputFormat::Markdown => self.to_markdown(),
        }
    }
}

/// A solved level, kept for field export and diagnostics.
pub struct SolvedLevel {
    pub mesh: Mesh,
    pub pair: WgOperatorPair,
    pub result: EigenResult,
}

/// mesh → assemble → condense → eigensolve for one level.
pub fn solve_level(
    domain: Domain,
    n: usize,
    k: usize,
    spec: StabilizerSpec,
    m: usize,
    opts: CondenseOptions,
) -> Result<SolvedLevel> {
    let mesh = Mesh::structured(domain, n).map_err(|e| e.in_stage("mesh"))?;
    let pair = assemble(&mesh, k, spec).map_err(|e| e.in_stage("assemble"))?;
    let result = solve_pencil(&mesh, &pair, m, opts)?;
    Ok(SolvedLevel { mesh, pair, result })
}

pub fn run_eigen_study(config: &StudyConfig) -> Result<ConvergenceReport> {
    config.validate()?;
    let mut levels = Vec::with_capacity(config.levels.len());
    for &n in &config.levels {
        let solved = solve_level(
            config.domain,
            n,
            config.k,
            config.stabilizer,
            config.eigs,
            config.condense_options(),
        )?;
        levels.push(LevelResult {
            n,
            h: solved.mesh.h_max(),
            n_dofs: solved.pair.dofs.n_dofs(),
            n_boundary_dofs: solved.pair.dofs.boundary.len(),
            eigenvalues: solved.result.values.clone(),
            max_residual: solved.result.residuals.iter().fold(0.0, |a: f64, b| a.max(*b)),
        });
    }
    Ok(ConvergenceReport {
        domain: config.domain,
        k: config.k,
        stabilizer: config.stabilizer.to_string(),
        levels,
        references: config.references.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceStudyConfig {
    pub domain: Domain,
    pub k: usize,
    pub stabilizer: StabilizerSpec,
    pub levels: Vec<usize>,
    pub solution: ManufacturedSolution,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceReport {
    pub domain: Domain,
    pub k: usize,
    pub stabilizer: String,
    pub solution: ManufacturedSolution,
    pub levels: Vec<SourceLevel>,
}

/// Observed orders of one source level against the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SourceOrders {
    pub v_discrete: Option<f64>,
    pub v_total: Option<f64>,
    pub x: Option<f64>,
}

impl SourceReport {
    pub fn orders(&self) -> Vec<SourceOrders> {
        self.levels
            .windows(2)
            .map(|w| SourceOrders {
                v_discrete: observed_order(w[0].v.discrete, w[1].v.discrete),
                v_total: observed_order(w[0].v.total, w[1].v.total),
                x: observed_order(w[0].x_error, w[1].x_error),
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("n,h,v_discrete,v_projection,v_total,x_error,order_v_discrete,order_v_total,order_x\n");
        let orders = self.orders();
        let fmt = |o: Option<f64>| o.map_or(String::new(), |o| format!("{o:.4}"));
        for (i, l) in self.levels.iter().enumerate() {
            write!(
                out,
                "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
                l.n, l.h, l.v.discrete, l.v.projection, l.v.total, l.x_error
            )
            .unwrap();
            match i.checked_sub(1).map(|p| orders[p]) {
                Some(o) => writeln!(out, ",{},{},{}", fmt(o.v_discrete), fmt(o.v_total), fmt(o.x)).unwrap(),
                None => out.push_str(",,,\n"),
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Full<'a> {
            #[serde(flatten)]
            report: &'a SourceReport,
            orders: Vec<SourceOrders>,
        }
        serde_json::to_string_pretty(&Full {
            report: self,
            orders: self.orders(),
        })
        .expect("report serializes")
            + "\n"
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "{} domain, k = {}, stabilizer {}\n\n| n | h | ‖Q_h u − u_h‖_V | ‖u − u_h‖_V | order | ‖u − u_b‖_X | order |\n|---|---|---|---|---|---|---|\n",
            self.domain, self.k, self.stabilizer
        );
        let orders = self.orders();
        let fmt = |o: Option<f64>| o.map_or("–".to_string(), |o| format!("{o:.4}"));
        for (i, l) in self.levels.iter().enumerate() {
            let o = i.checked_sub(1).map(|p| orders[p]);
            writeln!(
                out,
                "| {} | {:.4e} | {:.4e} | {:.4e} | {} | {:.4e} | {} |",
                l.n,
                l.h,
                l.v.discrete,
                l.v.total,
                fmt(o.and_then(|o| o.v_total)),
                l.x_error,
                fmt(o.and_then(|o| o.x))
            )
            .unwrap();
        }
        out
    }

    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Csv => self.to_csv(),
            OutputFormat::Json => self.to_json(),
            OutputFormat::Markdown => self.to_markdown(),
        }
    }
}

pub fn run_source_study(config: &SourceStudyConfig) -> Result<SourceReport> {
    check_levels(&config.levels)?;
    let mut levels = Vec::with_capacity(config.levels.len());
    for &n in &config.levels {
        let mesh = Mesh::structured(config.domain, n).map_err(|e| e.in_stage("mesh"))?;
        levels.push(source_level(&mesh, n, config.k, config.stabilizer, &config.solution)?);
    }
    Ok(SourceReport {
        domain: config.domain,
        k: config.k,
        stabilizer: config.stabilizer.to_string(),
        solution: config.solution,
        levels,
    })
}

/// Barycentric containment with a small tolerance for points on edges.
fn cell_contains(mesh: &Mesh, cell: usize, p: Point) -> bool {
    let [a, b, c] = mesh.cell_vertices(cell);
    let det = (b - a).perp(&(c - a));
    let l1 = (p - a).perp(&(c - a)) / det;
    let l2 = (b - a).perp(&(p - a)) / det;
    let tol = 1e-12;
    l1 >= -tol && l2 >= -tol && l1 + l2 <= 1.0 + tol
}

/// CSV of `(x, y, u₀(x, y))` for eigenfunction `j` (1-based) on a uniform
/// `(grid + 1)²` grid over the bounding box. Points outside the mesh are
/// omitted. The sign is chosen so the sample of largest magnitude is positive.
pub fn export_eigenfunction_field(
    result: &EigenResult,
    mesh: &Mesh,
    k: usize,
    j: usize,
    grid: usize,
) -> Result<String> {
    if j == 0 || j > result.vectors.len() {
        return Err(WgError::param(format!(
            "eigenfunction index {j} out of range 1..={}",
            result.vectors.len()
        )));
    }
    if grid == 0 {
        return Err(WgError::param("grid resolution must be positive"));
    }
    let dofs = crate::assembly::DofMap::new(mesh, k)?;
    let u = &result.vectors[j - 1];
    if u.coeffs.len() != dofs.n_dofs() {
        return Err(WgError::param("eigenvector does not match the mesh and degree"));
    }
    let (mut lo, mut hi) = (mesh.vertices[0], mesh.vertices[0]);
    for v in &mesh.vertices {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    let mut bases: Vec<Option<CellBasis>> = vec![None; mesh.n_cells()];
    let mut samples = Vec::new();
    for iy in 0..=grid {
        for ix in 0..=grid {
            let p = Point::new(
                lo.x + (hi.x - lo.x) * ix as f64 / grid as f64,
                lo.y + (hi.y - lo.y) * iy as f64 / grid as f64,
            );
            let Some(cell) = (0..mesh.n_cells()).find(|&c| cell_contains(mesh, c, p)) else {
                continue;
            };
            if bases[cell].is_none() {
                bases[cell] = Some(CellBasis::new(mesh, cell, k)?);
            }
            let value = bases[cell].as_ref().unwrap().evaluate(u.cell_block(&dofs, cell), p);
            samples.push((p, value));
        }
    }
    let pivot = samples
        .iter()
        .fold(0.0f64, |m, s| if s.1.abs() > m.abs() { s.1 } else { m });
    let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
    let mut out = String::from("x,y,u0\n");
    for (p, v) in samples {
        writeln!(out, "{:.8},{:.8},{:.12e}", p.x, p.y, sign * v).unwrap();
    }
    Ok(out)
}

/// Writes `text` to `path`, or to stdout when no path is given.
pub fn write_output(text: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}
