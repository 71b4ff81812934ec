use crate::config::LoadedConfig;
use crate::error::CliError;
use crate::fitfile::{sha256_hex, FitFile, MeshRecord, Provenance, StoredVariances, FORMAT};
use serde::Serialize;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use stmix::data::ObservationSet;
use stmix::gcv::{gcv_select, pde_hyperparameter_scan, CandidateScore, GcvSelection, LambdaGrid, PdeCandidate};
use stmix::inference::{normal_quantile, summarize, variance_component_ci, ComponentInterval, Interval};
use stmix::mesh::TriangularMesh;
use stmix::simulate::{generate_dataset, FemField};
use stmix::solver::ModelSetup;
use stmix::splines::SplineBasis;

pub const OBSERVATIONS: &str = "observations.csv";
pub const LOCATIONS: &str = "locations.csv";
pub const TIMES: &str = "times.csv";

/// Resolution of the truth-field grid written by `simulate`.
const TRUTH_GRID: usize = 50;

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Paths of the three data files.
#[derive(Debug, Clone)]
pub struct DataPaths {
    pub observations: PathBuf,
    pub locations: PathBuf,
    pub times: PathBuf,
}

impl DataPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            observations: dir.join(OBSERVATIONS),
            locations: dir.join(LOCATIONS),
            times: dir.join(TIMES),
        }
    }

    /// Parsed observations and a digest of the raw bytes.
    fn load(&self) -> Result<(ObservationSet, String), CliError> {
        let o = read_bytes(&self.observations)?;
        let l = read_bytes(&self.locations)?;
        let t = read_bytes(&self.times)?;
        let obs = ObservationSet::from_csv(o.as_slice(), l.as_slice(), t.as_slice())?;
        Ok((obs, sha256_hex(&[&o, &l, &t])))
    }
}

pub fn cmd_simulate(cfg: &LoadedConfig, seed: Option<u64>, out_dir: &Path) -> Result<(), CliError> {
    let mut sim = cfg.simulation();
    if let Some(s) = seed {
        sim.seed = s;
    }
    let (obs, truth) = generate_dataset(&sim)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))?;
    let paths = DataPaths::in_dir(out_dir);
    obs.write_csv(create(&paths.observations)?, create(&paths.locations)?, create(&paths.times)?)?;
    truth
        .field
        .write_grid_csv(create(&out_dir.join("truth_field.csv"))?, TRUTH_GRID, obs.times())?;

    #[derive(Serialize)]
    struct TruthFile<'a> {
        simulation: &'a stmix::simulate::SimConfig,
        beta: &'a [f64],
        sigma: f64,
        sigma_b: f64,
        variance_ratio: f64,
        group_labels: &'a [String],
        b: &'a [f64],
    }
    let doc = TruthFile {
        simulation: &sim,
        beta: &truth.beta,
        sigma: truth.sigma,
        sigma_b: truth.sigma_b,
        variance_ratio: sim.variance_ratio,
        group_labels: &truth.group_labels,
        b: &truth.b,
    };
    let mut w = create(&out_dir.join("truth.json"))?;
    serde_json::to_writer_pretty(&mut w, &doc)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// The problem pieces shared by `fit` and `gcv`.
struct Problem {
    obs: ObservationSet,
    data_hash: String,
    mesh: TriangularMesh,
    basis: SplineBasis,
    candidates: Vec<PdeCandidate>,
    wind: Option<Vec<[f64; 2]>>,
}

fn problem(cfg: &LoadedConfig, data: &DataPaths) -> Result<Problem, CliError> {
    let (obs, data_hash) = data.load()?;
    let mesh = cfg.mesh()?;
    let basis = cfg.basis()?;
    let (candidates, wind) = cfg.candidates(&mesh)?;
    Ok(Problem { obs, data_hash, mesh, basis, candidates, wind })
}

/// Selected operator, its GCV selection and the per-candidate scores.
fn select(cfg: &LoadedConfig, p: &Problem, grid: &LambdaGrid) -> Result<(PdeCandidate, GcvSelection, Vec<CandidateScore>), CliError> {
    let opts = &cfg.config.solver;
    if let [cand] = p.candidates.as_slice() {
        let pde = cfg.coefficients(&p.mesh, cand, p.wind.as_deref())?;
        let setup = ModelSetup::from_problem(p.obs.clone(), &p.mesh, &p.basis, &pde, opts.lump_mass)?;
        let sel = gcv_select(&setup, grid, opts)?;
        let score = CandidateScore { candidate: *cand, best_gcv: sel.scan.best_point().gcv, error: None };
        return Ok((*cand, sel, vec![score]));
    }
    let scan = pde_hyperparameter_scan(&p.obs, &p.mesh, &p.basis, &p.candidates, p.wind.as_deref(), grid, opts)?;
    Ok((scan.best_candidate(), scan.selection, scan.scores))
}

fn write_candidates(path: &Path, scores: &[CandidateScore]) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, scores)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn cmd_fit(cfg: &LoadedConfig, data: &DataPaths, out: &Path, scan_out: Option<&Path>) -> Result<(), CliError> {
    let p = problem(cfg, data)?;
    let grid = cfg.config.smoothing.fit_grid()?;
    let (cand, sel, _) = select(cfg, &p, &grid)?;
    if let Some(path) = scan_out {
        sel.scan.write_csv(create(path)?)?;
    }

    let pde = cfg.coefficients(&p.mesh, &cand, p.wind.as_deref())?;
    let setup = ModelSetup::from_problem(p.obs.clone(), &p.mesh, &p.basis, &pde, cfg.config.solver.lump_mass)?;
    let summary = summarize(&setup, &sel.fit, cfg.config.inference.level)?;
    let file = FitFile {
        format: FORMAT.to_string(),
        provenance: Provenance {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: sha256_hex(&[cfg.text.as_bytes()]),
            data_sha256: p.data_hash,
        },
        mesh: MeshRecord { nodes: p.mesh.nodes().to_vec(), triangles: p.mesh.triangles().to_vec() },
        knots: p.basis.knots().to_vec(),
        pde: cand,
        options: cfg.config.solver.clone(),
        fit: sel.fit,
        variances: StoredVariances { var_beta: summary.var_beta, var_f_diagonal: summary.var_f_diagonal },
    };
    file.write(out)
}

pub fn cmd_gcv(
    cfg: &LoadedConfig,
    data: &DataPaths,
    out: &Path,
    candidates_out: Option<&Path>,
) -> Result<(), CliError> {
    let p = problem(cfg, data)?;
    let grid = cfg.config.smoothing.scan_grid()?;
    let (_, sel, scores) = select(cfg, &p, &grid)?;
    sel.scan.write_csv(create(out)?)?;
    if let Some(path) = candidates_out {
        write_candidates(path, &scores)?;
    }
    Ok(())
}

/// Parses `"WxH"` into point counts along x and y.
pub fn parse_grid(spec: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Config(format!("grid spec '{spec}' must look like 50x40"));
    let (w, h) = spec.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

pub fn parse_times(spec: &str) -> Result<Vec<f64>, CliError> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|t| t.is_finite())
                .ok_or_else(|| CliError::Config(format!("bad time '{s}' in list '{spec}'")))
        })
        .collect()
}

fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect()
}

/// Evaluates the fitted field on a regular grid over the mesh bounding box.
/// Points outside the mesh get an empty value cell.
pub fn cmd_predict(fit_path: &Path, grid: &str, times: &str, out: &Path) -> Result<(), CliError> {
    let (w, h) = parse_grid(grid)?;
    let times = parse_times(times)?;
    let file = FitFile::read(fit_path)?;
    let mesh = file.mesh()?;
    let basis = file.basis()?;
    if let Some(t) = times.iter().find(|t| !(**t >= 0.0 && **t <= basis.t_end())) {
        return Err(CliError::Config(format!("time {t} outside [0, {}]", basis.t_end())));
    }
    let field = FemField::new(&mesh, &basis, &file.fit.f_coeffs)?;
    let (lo, hi) = mesh.bounding_box();
    let xs = axis(lo[0], hi[0], w);
    let ys = axis(lo[1], hi[1], h);
    let mut wr = csv::Writer::from_writer(create(out)?);
    let io = |e: csv::Error| CliError::Io(e.to_string());
    wr.write_record(["x", "y", "t", "f"]).map_err(io)?;
    for &t in &times {
        for &y in &ys {
            for &x in &xs {
                let v = field.eval([x, y], t).map(|v| format!("{v:?}")).unwrap_or_default();
                wr.write_record([format!("{x:?}"), format!("{y:?}"), format!("{t:?}"), v]).map_err(io)?;
            }
        }
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct CoefficientReport {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub interval: Interval,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub level: f64,
    pub provenance: Provenance,
    pub pde: PdeCandidate,
    pub lambda_d: f64,
    pub lambda_t: f64,
    pub converged: bool,
    pub n_iter: usize,
    pub n_obs: usize,
    pub edf: Option<f64>,
    pub gcv: Option<f64>,
    pub sigma2: f64,
    pub sigma_b: Vec<Vec<f64>>,
    pub variance_ratio: f64,
    pub beta: Vec<CoefficientReport>,
    pub variance_components: Vec<ComponentInterval>,
    /// Always false: only variance-component intervals are provided.
    pub random_effect_intervals: bool,
}

pub fn build_report(file: &FitFile, level: f64) -> Result<Report, CliError> {
    let z = normal_quantile(level)?;
    let fit = &file.fit;
    let beta = fit
        .beta
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            let se = file.variances.var_beta.get(j).and_then(|r| r.get(j)).copied().unwrap_or(f64::NAN).max(0.0).sqrt();
            CoefficientReport {
                name: format!("beta{}", j + 1),
                estimate: b,
                std_error: se,
                interval: Interval { lower: b - z * se, upper: b + z * se },
            }
        })
        .collect();
    Ok(Report {
        level,
        provenance: file.provenance.clone(),
        pde: file.pde,
        lambda_d: fit.lambda_d,
        lambda_t: fit.lambda_t,
        converged: fit.converged,
        n_iter: fit.n_iter,
        n_obs: fit.n_obs,
        edf: fit.edf,
        gcv: fit.gcv,
        sigma2: fit.sigma2,
        sigma_b: fit.sigma_b.clone(),
        variance_ratio: fit.variance_ratio(),
        beta,
        variance_components: variance_component_ci(fit, level)?,
        random_effect_intervals: false,
    })
}

pub fn cmd_report(fit_path: &Path, level: f64, out: Option<&Path>) -> Result<(), CliError> {
    let file = FitFile::read(fit_path)?;
    let report = build_report(&file, level)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_and_time_parsing() {
        assert_eq!(parse_grid("50x40").unwrap(), (50, 40));
        assert_eq!(parse_grid(" 3 X 2").unwrap(), (3, 2));
        assert!(parse_grid("0x4").is_err());
        assert!(parse_grid("50").is_err());
        assert_eq!(parse_times("0, 0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_times("0,,1").is_err());
        assert!(parse_times("nan").is_err());
    }

    #[test]
    fn axis_covers_endpoints() {
        assert_eq!(axis(0.0, 1.0, 3), vec![0.0, 0.5, 1.0]);
        assert_eq!(axis(0.0, 1.0, 1), vec![0.5]);
    }
}
