//! The `wgsteklov` command line.
//!
//! Every flag can also come from a TOML file passed with `--config`; flags
//! given on the command line win. Keys:
//!
//! ```toml
//! domain = "square"          # or "lshape"
//! k = 1
//! gamma = "pow:0.1"          # pow:<eps> | neglog | const:<g> | alpha:<a>
//! n = 16                     # single level (mesh, solve, field)
//! levels = [8, 16, 32, 64]   # studies (converge, source, glb)
//! eigs = 4
//! refs = "builtin:square"    # or a list of numbers
//! out = "table.csv"
//! format = "csv"             # csv | json | markdown
//! grid = 50                  # field export resolution
//! j = 1                      # eigenfunction / eigenvalue index, 1-based
//! cell_condensation = false
//! direction = 0.0            # source: u = exp(x cos θ + y sin θ)
//! alpha = [0.01, 0.1, 1.0]   # glb
//! lambda_const = 1.0         # glb: Λ
//! delta = 0.5                # glb: δ, or "estimate:<probe degree>"
//! reference = 0.2400790854320629  # glb: exact λ_j, optional
//! ```

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use super::{
    export_eigenfunction_field, parse_levels, parse_references, run_eigen_study, run_source_study, solve_level,
    write_output, OutputFormat, SourceStudyConfig, StudyConfig,
};
use crate::assembly::{GammaSpec, StabilizerSpec};
use crate::eigen::CondenseOptions;
use crate::error::{Result, WgError};
use crate::glb::{run_glb_study, DeltaSource};
use crate::mesh::{Domain, Mesh};
use crate::source::ManufacturedSolution;

#[derive(Debug, Parser)]
#[command(
    name = "wgsteklov",
    version,
    about = "Weak Galerkin lower bounds for Steklov eigenvalues"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML file with default values for any flag
    #[arg(long)]
    config: Option<PathBuf>,
    /// square | lshape
    #[arg(long)]
    domain: Option<Domain>,
    /// WG polynomial degree
    #[arg(long)]
    k: Option<usize>,
    /// Stabilizer: pow:<eps>, neglog, const:<gamma> or alpha:<alpha>
    #[arg(long)]
    gamma: Option<StabilizerSpec>,
    /// Output file (stdout if omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv | json | markdown
    #[arg(long)]
    format: Option<OutputFormat>,
    /// Eliminate cell-interior unknowns before the sparse factorization
    #[arg(long)]
    cell_condensation: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a structured mesh and print its statistics
    Mesh {
        #[command(flatten)]
        common: Common,
        /// Subdivisions per unit length (mesh size h = √2/n)
        #[arg(long)]
        n: Option<usize>,
    },
    /// Solve one mesh level and print the smallest eigenvalues
    Solve {
        #[command(flatten)]
        common: Common,
        /// Subdivisions per unit length (mesh size h = √2/n)
        #[arg(long)]
        n: Option<usize>,
        /// Number of smallest eigenvalues
        #[arg(long)]
        eigs: Option<usize>,
        /// Directory to write A.mtx and B.mtx (MatrixMarket)
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Eigenvalue convergence study over several mesh levels
    Converge {
        #[command(flatten)]
        common: Common,
        /// Comma-separated mesh levels, e.g. 8,16,32,64
        #[arg(long)]
        levels: Option<String>,
        /// Number of smallest eigenvalues
        #[arg(long)]
        eigs: Option<usize>,
        /// builtin:square or comma-separated reference eigenvalues
        #[arg(long)]
        refs: Option<String>,
    },
    /// Source-problem convergence study with u = exp(x cos θ + y sin θ)
    Source {
        #[command(flatten)]
        common: Common,
        /// Comma-separated mesh levels, e.g. 8,16,32,64
        #[arg(long)]
        levels: Option<String>,
        /// θ in radians (0 gives u = e^x)
        #[arg(long, allow_hyphen_values = true)]
        direction: Option<f64>,
    },
    /// α-stabilized study with the lower-bound certificate
    Glb {
        #[command(flatten)]
        common: Common,
        /// Comma-separated mesh levels, e.g. 8,16,32,64
        #[arg(long)]
        levels: Option<String>,
        /// Comma-separated α values
        #[arg(long)]
        alpha: Option<String>,
        /// The constant Λ
        #[arg(long)]
        lambda_const: Option<f64>,
        /// δ as a number, or estimate:<probe degree>
        #[arg(long)]
        delta: Option<String>,
        /// Target eigenvalue index, 1-based
        #[arg(long)]
        j: Option<usize>,
        /// Exact λ_j, if known
        #[arg(long)]
        reference: Option<f64>,
    },
    /// Sample an eigenfunction's interior component on a uniform grid
    Field {
        #[command(flatten)]
        common: Common,
        /// Subdivisions per unit length (mesh size h = √2/n)
        #[arg(long)]
        n: Option<usize>,
        /// Eigenfunction index, 1-based
        #[arg(long)]
        j: Option<usize>,
        /// Grid points per direction
        #[arg(long)]
        grid: Option<usize>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum NumbersOrText {
    Numbers(Vec<f64>),
    Number(f64),
    Text(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    domain: Option<Domain>,
    k: Option<usize>,
    gamma: Option<String>,
    n: Option<usize>,
    levels: Option<Vec<usize>>,
    eigs: Option<usize>,
    refs: Option<NumbersOrText>,
    out: Option<PathBuf>,
    format: Option<OutputFormat>,
    grid: Option<usize>,
    j: Option<usize>,
    cell_condensation: Option<bool>,
    direction: Option<f64>,
    alpha: Option<NumbersOrText>,
    lambda_const: Option<f64>,
    delta: Option<NumbersOrText>,
    reference: Option<f64>,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| WgError::param(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| WgError::param(format!("config {}: {e}", path.display())))
}

/// Flags merged over the config file over defaults.
struct Resolved {
    file: FileConfig,
    domain: Domain,
    k: usize,
    stabilizer: StabilizerSpec,
    out: Option<PathBuf>,
    format: OutputFormat,
    cell_condensation: bool,
}

impl Resolved {
    fn new(common: Common) -> Result<Resolved> {
        let file = load_config(common.config.as_deref())?;
        let stabilizer = match (common.gamma, &file.gamma) {
            (Some(s), _) => s,
            (None, Some(text)) => text.parse()?,
            (None, None) => StabilizerSpec::Gamma(GammaSpec::PowerEps(0.1)),
        };
        Ok(Resolved {
            domain: common.domain.or(file.domain).unwrap_or(Domain::UnitSquare),
            k: common.k.or(file.k).unwrap_or(1),
            stabilizer,
            out: common.out.or_else(|| file.out.clone()),
            format: common.format.or(file.format).unwrap_or_default(),
            cell_condensation: common.cell_condensation || file.cell_condensation.unwrap_or(false),
            file,
        })
    }

    fn n(&self, flag: Option<usize>) -> usize {
        flag.or(self.file.n).unwrap_or(8)
    }

    fn levels(&self, flag: Option<String>) -> Result<Vec<usize>> {
        match flag {
            Some(s) => parse_levels(&s),
            None => Ok(self.file.levels.clone().unwrap_or_else(|| vec![8, 16, 32, 64])),
        }
    }

    fn condense(&self) -> CondenseOptions {
        CondenseOptions {
            cell_condensation: self.cell_condensation,
            ..CondenseOptions::default()
        }
    }
}

fn numbers(value: &NumbersOrText) -> Result<Vec<f64>> {
    match value {
        NumbersOrText::Numbers(v) => Ok(v.clone()),
        NumbersOrText::Number(v) => Ok(vec![*v]),
        NumbersOrText::Text(s) => s
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| WgError::param(format!("bad number '{v}'")))
            })
            .collect(),
    }
}

fn parse_delta(text: &str) -> Result<DeltaSource> {
    if let Some(p) = text.strip_prefix("estimate:") {
        let probe_degree = p
            .trim()
            .parse()
            .map_err(|_| WgError::param(format!("bad probe degree '{p}'")))?;
        return Ok(DeltaSource::Estimated { probe_degree });
    }
    text.trim()
        .parse()
        .map(DeltaSource::Fixed)
        .map_err(|_| WgError::param(format!("bad delta '{text}' (number or estimate:<p>)")))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Mesh { common, n } => {
            let r = Resolved::new(common)?;
            let mesh = Mesh::structured(r.domain, r.n(n))?;
            let text = match r.format {
                OutputFormat::Json => serde_json::to_string_pretty(&mesh.to_dump()).expect("mesh serializes") + "\n",
                _ => {
                    let s = mesh.stats();
                    format!(
                        "domain {}\nh_max {:.6e}\nvertices {}\ncells {}\nedges {}\nboundary_edges {}\ntotal_area {:.15}\n",
                        r.domain, s.h_max, s.n_vertices, s.n_cells, s.n_edges, s.n_boundary_edges, s.total_area
                    )
                }
            };
            write_output(&text, r.out.as_deref())
        }
        Command::Solve { common, n, eigs, dump } => {
            let r = Resolved::new(common)?;
            let m = eigs.or(r.file.eigs).unwrap_or(4);
            let solved = solve_level(r.domain, r.n(n), r.k, r.stabilizer, m, r.condense())?;
            if let Some(dir) = dump {
                std::fs::create_dir_all(&dir)?;
                solved
                    .pair
                    .a
                    .write_matrix_market(std::io::BufWriter::new(std::fs::File::create(dir.join("A.mtx"))?))?;
                solved
                    .pair
                    .b
                    .write_matrix_market(std::io::BufWriter::new(std::fs::File::create(dir.join("B.mtx"))?))?;
            }
            let mut text = String::new();
            for (j, (v, res)) in solved.result.values.iter().zip(&solved.result.residuals).enumerate() {
                text.push_str(&format!("lambda_{} = {v:.15e}  residual {res:.2e}\n", j + 1));
            }
            write_output(&text, r.out.as_deref())
        }
        Command::Converge {
            common,
            levels,
            eigs,
            refs,
        } => {
            let r = Resolved::new(common)?;
            let references = match (refs, &r.file.refs) {
                (Some(s), _) => Some(parse_references(&s)?),
                (None, Some(NumbersOrText::Text(s))) => Some(parse_references(s)?),
                (None, Some(v)) => Some(numbers(v)?),
                (None, None) => None,
            };
            let config = StudyConfig {
                domain: r.domain,
                k: r.k,
                stabilizer: r.stabilizer,
                levels: r.levels(levels)?,
                eigs: eigs.or(r.file.eigs).unwrap_or(4),
                references,
                out: r.out.clone(),
                format: r.format,
                grid: r.file.grid,
                cell_condensation: r.cell_condensation,
            };
            let report = run_eigen_study(&config)?;
            write_output(&report.render(config.format), config.out.as_deref())
        }
        Command::Source {
            common,
            levels,
            direction,
        } => {
            let r = Resolved::new(common)?;
            let theta = direction.or(r.file.direction).unwrap_or(0.0);
            let config = SourceStudyConfig {
                domain: r.domain,
                k: r.k,
                stabilizer: r.stabilizer,
                levels: r.levels(levels)?,
                solution: ManufacturedSolution::exp_direction(theta),
            };
            let report = run_source_study(&config)?;
            write_output(&report.render(r.format), r.out.as_deref())
        }
        Command::Glb {
            common,
            levels,
            alpha,
            lambda_const,
            delta,
            j,
            reference,
        } => {
            let r = Resolved::new(common)?;
            let alphas = match (alpha, &r.file.alpha) {
                (Some(s), _) => numbers(&NumbersOrText::Text(s))?,
                (None, Some(v)) => numbers(v)?,
                (None, None) => vec![0.01, 0.1, 1.0],
            };
            let delta = match (delta, &r.file.delta) {
                (Some(s), _) => parse_delta(&s)?,
                (None, Some(NumbersOrText::Number(d))) => DeltaSource::Fixed(*d),
                (None, Some(NumbersOrText::Text(s))) => parse_delta(s)?,
                (None, Some(NumbersOrText::Numbers(_))) => return Err(WgError::param("delta must be a single value")),
                (None, None) => DeltaSource::Estimated { probe_degree: r.k + 1 },
            };
            let report = run_glb_study(
                r.domain,
                &r.levels(levels)?,
                r.k,
                &alphas,
                lambda_const.or(r.file.lambda_const).unwrap_or(1.0),
                delta,
                j.or(r.file.j).unwrap_or(1),
                reference.or(r.file.reference),
            )?;
            let text = match r.format {
                OutputFormat::Json => serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
                _ => report.to_csv(),
            };
            write_output(&text, r.out.as_deref())
        }
        Command::Field { common, n, j, grid } => {
            let r = Resolved::new(common)?;
            let j = j.or(r.file.j).unwrap_or(1);
            let grid = grid.or(r.file.grid).unwrap_or(50);
            if j == 0 {
                return Err(WgError::param("eigenfunction index is 1-based"));
            }
            let solved = solve_level(r.domain, r.n(n), r.k, r.stabilizer, j, r.condense())?;
            let text = export_eigenfunction_field(&solved.result, &solved.mesh, r.k, j, grid)?;
            write_output(&text, r.out.as_deref())
        }
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code: 0 on success, 1 for invalid input, 2 for numerical failures.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(args: &[&str]) -> i32 {
        cli_main(std::iter::once("wgsteklov").chain(args.iter().copied()))
    }

    #[test]
    fn exit_codes() {
        assert_eq!(code(&["--help"]), 0);
        assert_eq!(code(&["bogus"]), 1);
        assert_eq!(code(&["solve", "--nonsense"]), 1);
        assert_eq!(code(&["solve", "--gamma", "pow:2"]), 1);
        assert_eq!(code(&["converge", "--levels", "16,8"]), 1);
        assert_eq!(code(&["mesh", "--domain", "lshape", "--n", "3"]), 1);
    }

    #[test]
    fn delta_parsing() {
        assert_eq!(parse_delta("0.5").unwrap(), DeltaSource::Fixed(0.5));
        assert_eq!(
            parse_delta("estimate:3").unwrap(),
            DeltaSource::Estimated { probe_degree: 3 }
        );
        assert!(parse_delta("x").is_err());
    }

    #[test]
    fn config_file_keys() {
        let cfg: FileConfig = toml::from_str(
            "domain = \"lshape\"\nk = 2\ngamma = \"neglog\"\nlevels = [8, 16]\nrefs = \"builtin:square\"\nalpha = [0.1, 1.0]\ndelta = \"estimate:3\"\n",
        )
        .unwrap();
        assert_eq!(cfg.domain, Some(Domain::LShape));
        assert_eq!(cfg.levels, Some(vec![8, 16]));
        assert!(matches!(cfg.delta, Some(NumbersOrText::Text(_))));
        assert!(toml::from_str::<FileConfig>("unknown_key = 1").is_err());
    }
}
