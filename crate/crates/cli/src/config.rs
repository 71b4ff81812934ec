//! Run configuration read from a TOML file.
//!
//! Every section is optional and falls back to the defaults of the study
//! design on the unit square. Relative paths are resolved against the
//! directory holding the configuration file. Validation happens in full
//! before any command starts computing.

use crate::error::CliError;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use stmix::fem::PdeCoefficients;
use stmix::gcv::{log_grid, LambdaGrid, PdeCandidate};
use stmix::mesh::TriangularMesh;
use stmix::simulate::SimConfig;
use stmix::solver::FitOptions;
use stmix::splines::SplineBasis;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides `simulation.seed` when present.
    pub seed: Option<u64>,
    #[serde(default)]
    pub mesh: MeshSpec,
    #[serde(default)]
    pub time: TimeSpec,
    #[serde(default)]
    pub pde: PdeSpec,
    #[serde(default)]
    pub smoothing: SmoothingSpec,
    #[serde(default)]
    pub solver: FitOptions,
    #[serde(default)]
    pub simulation: SimConfig,
    #[serde(default)]
    pub inference: InferenceSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeshSpec {
    UnitSquare { subdivisions: usize },
    /// `x,y` node rows and 0-based `i,j,k` triangle rows, each with a header.
    Files { nodes: PathBuf, triangles: PathBuf },
}

impl Default for MeshSpec {
    fn default() -> Self {
        MeshSpec::UnitSquare { subdivisions: 12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    /// Number of cubic B-spline basis functions.
    pub n_basis: usize,
    pub t_end: f64,
}

impl Default for TimeSpec {
    fn default() -> Self {
        Self { n_basis: 10, t_end: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PdeSpec {
    #[default]
    Isotropic,
    Anisotropic {
        intensity: f64,
        angle: f64,
    },
    /// Isotropic diffusion plus `xi` times a per-triangle wind field read
    /// from a CSV with columns `gx,gy`.
    Transport {
        xi: f64,
        wind: PathBuf,
    },
    /// Grid search over candidate operators, keeping the lowest GCV.
    Scan {
        candidates: Vec<PdeCandidate>,
        wind: Option<PathBuf>,
    },
}

/// One axis of a smoothing grid: explicit values or a log-spaced range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridAxis {
    Values(Vec<f64>),
    Log { lo: f64, hi: f64, n: usize },
}

impl GridAxis {
    pub fn values(&self) -> Result<Vec<f64>, CliError> {
        match self {
            GridAxis::Values(v) => Ok(v.clone()),
            GridAxis::Log { lo, hi, n } => log_grid(*lo, *hi, *n).map_err(|e| CliError::Config(e.to_string())),
        }
    }
}

impl Default for GridAxis {
    fn default() -> Self {
        GridAxis::Log { lo: 1e-6, hi: 1.0, n: 5 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingSpec {
    /// Fixed smoothing parameters; when both are set `fit` skips the grid.
    pub lambda_d: Option<f64>,
    pub lambda_t: Option<f64>,
    #[serde(default)]
    pub grid_d: GridAxis,
    #[serde(default)]
    pub grid_t: GridAxis,
}

impl SmoothingSpec {
    /// The grid `fit` searches: the fixed pair when given, else the full grid.
    pub fn fit_grid(&self) -> Result<LambdaGrid, CliError> {
        match (self.lambda_d, self.lambda_t) {
            (Some(d), Some(t)) => LambdaGrid::new(vec![d], vec![t]).map_err(|e| CliError::Config(e.to_string())),
            (None, None) => self.scan_grid(),
            _ => Err(CliError::Config("smoothing.lambda_d and smoothing.lambda_t must be given together".into())),
        }
    }

    pub fn scan_grid(&self) -> Result<LambdaGrid, CliError> {
        LambdaGrid::new(self.grid_d.values()?, self.grid_t.values()?).map_err(|e| CliError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSpec {
    pub level: f64,
}

impl Default for InferenceSpec {
    fn default() -> Self {
        Self { level: 0.99 }
    }
}

/// One advection vector per triangle.
pub type WindField = Vec<[f64; 2]>;

/// A parsed configuration together with its source bytes and location.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    /// Raw file contents, hashed into the provenance of fit files.
    pub text: String,
}

impl LoadedConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let (text, base_dir) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (text, base)
            }
            None => (String::new(), PathBuf::from(".")),
        };
        let config: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{e}").replace('\n', " ")))?;
        let loaded = Self { config, base_dir, text };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn require_file(&self, p: &Path) -> Result<(), CliError> {
        let full = self.resolve(p);
        if full.is_file() {
            Ok(())
        } else {
            Err(CliError::Config(format!("referenced file {} does not exist", full.display())))
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        let bad = |m: String| Err(CliError::Config(m));
        match &c.mesh {
            MeshSpec::UnitSquare { subdivisions } if *subdivisions == 0 => return bad("mesh.subdivisions must be >= 1".into()),
            MeshSpec::Files { nodes, triangles } => {
                self.require_file(nodes)?;
                self.require_file(triangles)?;
            }
            _ => {}
        }
        if c.time.n_basis < 4 || !(c.time.t_end > 0.0 && c.time.t_end.is_finite()) {
            return bad("time.n_basis must be >= 4 and time.t_end > 0".into());
        }
        match &c.pde {
            PdeSpec::Isotropic => {}
            PdeSpec::Anisotropic { intensity, angle } => {
                if !(intensity.is_finite() && *intensity > 0.0 && angle.is_finite()) {
                    return bad("pde.intensity must be > 0 and pde.angle finite".into());
                }
            }
            PdeSpec::Transport { xi, wind } => {
                if !(xi.is_finite() && *xi >= 0.0) {
                    return bad("pde.xi must be >= 0".into());
                }
                self.require_file(wind)?;
            }
            PdeSpec::Scan { candidates, wind } => {
                if candidates.is_empty() {
                    return bad("pde.candidates must be nonempty".into());
                }
                let needs_wind = candidates.iter().any(|c| matches!(c, PdeCandidate::Transport { .. }));
                match wind {
                    Some(w) => self.require_file(w)?,
                    None if needs_wind => return bad("transport candidates need pde.wind".into()),
                    None => {}
                }
            }
        }
        c.smoothing.fit_grid()?;
        c.smoothing.scan_grid()?;
        c.solver.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.simulation().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if !(c.inference.level > 0.0 && c.inference.level < 1.0) {
            return bad("inference.level must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// Simulation settings with the top-level seed applied.
    pub fn simulation(&self) -> SimConfig {
        let mut sim = self.config.simulation.clone();
        if let Some(seed) = self.config.seed {
            sim.seed = seed;
        }
        sim
    }

    pub fn mesh(&self) -> Result<TriangularMesh, CliError> {
        match &self.config.mesh {
            MeshSpec::UnitSquare { subdivisions } => Ok(TriangularMesh::unit_square(*subdivisions)?),
            MeshSpec::Files { nodes, triangles } => {
                let open = |p: &Path| {
                    let full = self.resolve(p);
                    std::fs::File::open(&full).map_err(|e| CliError::Io(format!("{}: {e}", full.display())))
                };
                Ok(TriangularMesh::from_csv(open(nodes)?, open(triangles)?)?)
            }
        }
    }

    pub fn basis(&self) -> Result<SplineBasis, CliError> {
        Ok(SplineBasis::uniform(self.config.time.n_basis, self.config.time.t_end)?)
    }

    fn wind(&self, path: &Path, mesh: &TriangularMesh) -> Result<Vec<[f64; 2]>, CliError> {
        let full = self.resolve(path);
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(&full)
            .map_err(|e| CliError::Io(format!("{}: {e}", full.display())))?;
        let headers = rdr.headers().map_err(|e| CliError::Io(e.to_string()))?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CliError::Config(format!("wind file {} lacks column {name}", full.display())))
        };
        let (gx, gy) = (col("gx")?, col("gy")?);
        let mut out = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| CliError::Io(e.to_string()))?;
            let parse = |i: usize| {
                rec.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| CliError::Config(format!("bad wind value in {}", full.display())))
            };
            out.push([parse(gx)?, parse(gy)?]);
        }
        if out.len() != mesh.n_triangles() {
            return Err(CliError::Config(format!(
                "wind file has {} rows for {} triangles",
                out.len(),
                mesh.n_triangles()
            )));
        }
        Ok(out)
    }

    /// The candidate operators to fit; a single one unless scanning.
    pub fn candidates(&self, mesh: &TriangularMesh) -> Result<(Vec<PdeCandidate>, Option<WindField>), CliError> {
        Ok(match &self.config.pde {
            PdeSpec::Isotropic => (vec![PdeCandidate::Isotropic], None),
            PdeSpec::Anisotropic { intensity, angle } => {
                (vec![PdeCandidate::Anisotropic { intensity: *intensity, angle: *angle }], None)
            }
            PdeSpec::Transport { xi, wind } => (vec![PdeCandidate::Transport { xi: *xi }], Some(self.wind(wind, mesh)?)),
            PdeSpec::Scan { candidates, wind } => {
                let wind = wind.as_ref().map(|w| self.wind(w, mesh)).transpose()?;
                (candidates.clone(), wind)
            }
        })
    }

    pub fn coefficients(&self, mesh: &TriangularMesh, cand: &PdeCandidate, wind: Option<&[[f64; 2]]>) -> Result<PdeCoefficients, CliError> {
        Ok(cand.coefficients(mesh, wind)?)
    }
}
