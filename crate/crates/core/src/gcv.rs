//! Smoothing-parameter selection by generalized cross-validation, and a grid
//! search over PDE hyperparameters built on top of it.
//!
//! Rows of the grid (one `λ_D` each) run in parallel. Inside a row the fits
//! run in order of the supplied `λ_T` values, each one started from the
//! relative precision matrix of its predecessor. The outcome does not depend
//! on the number of worker threads because every row is computed the same
//! way no matter which thread picks it up.

use crate::covariance::ErrorCovariance;
use crate::data::ObservationSet;
use crate::error::{Error, Result};
use crate::fem::PdeCoefficients;
use crate::mesh::TriangularMesh;
use crate::solver::{gcv_from_parts, FitOptions, ModelFit, ModelSetup, TraceMethod};
use crate::splines::SplineBasis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "log grid needs 0 < lo <= hi and n >= 1 (got lo={lo}, hi={hi}, n={n})"
        )));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.log10(), hi.log10());
    Ok((0..n)
        .map(|i| {
            if i + 1 == n {
                hi
            } else {
                10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)
            }
        })
        .collect())
}

/// The two axes of a smoothing grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaGrid {
    pub lambda_d: Vec<f64>,
    pub lambda_t: Vec<f64>,
}

impl Default for LambdaGrid {
    fn default() -> Self {
        let axis = log_grid(1e-6, 1.0, 5).expect("static grid");
        Self { lambda_d: axis.clone(), lambda_t: axis }
    }
}

impl LambdaGrid {
    pub fn new(lambda_d: Vec<f64>, lambda_t: Vec<f64>) -> Result<Self> {
        let grid = Self { lambda_d, lambda_t };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_d.is_empty() || self.lambda_t.is_empty() {
            return Err(Error::InvalidArgument("smoothing grids must be nonempty".into()));
        }
        if let Some(bad) = self
            .lambda_d
            .iter()
            .chain(&self.lambda_t)
            .find(|l| !(l.is_finite() && **l >= 0.0))
        {
            return Err(Error::InvalidArgument(format!("smoothing parameter {bad} is not finite and >= 0")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.lambda_d.len() * self.lambda_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Outcome at one grid point. `gcv` and `edf` are absent when the fit failed
/// or the model was oversaturated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcvPoint {
    pub lambda_d: f64,
    pub lambda_t: f64,
    pub gcv: Option<f64>,
    pub edf: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

/// Scores over the whole grid, in row-major order (`λ_D` outer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcvScan {
    pub points: Vec<GcvPoint>,
    /// Index into `points` of the selected pair.
    pub best: usize,
}

impl GcvScan {
    pub fn best_point(&self) -> &GcvPoint {
        &self.points[self.best]
    }

    /// CSV with header `lambda_D,lambda_T,gcv,edf`; failed points leave the
    /// last two cells empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["lambda_D", "lambda_T", "gcv", "edf"])?;
        let cell = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
        for p in &self.points {
            out.write_record([
                format!("{:?}", p.lambda_d),
                format!("{:?}", p.lambda_t),
                cell(p.gcv),
                cell(p.edf),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GcvSelection {
    pub scan: GcvScan,
    pub fit: ModelFit,
}

/// GCV score and edf of an existing fit, recomputed from scratch at the
/// fit's smoothing parameters and covariance.
pub fn gcv_score(setup: &ModelSetup, fit: &ModelFit, trace: TraceMethod) -> Result<(f64, f64)> {
    let obs = setup.obs();
    let solver = setup.solver(fit.lambda_d, fit.lambda_t)?;
    let cov = ErrorCovariance::new(obs, &fit.d_matrix())?;
    let fe = solver.solve(&cov)?;
    let bf = setup.basis_matrix().mul_vec(&fe.f);
    let resid: Vec<f64> = obs
        .records()
        .iter()
        .zip(&bf)
        .map(|(r, bf)| r.y - bf - r.x.iter().zip(&fe.beta).map(|(x, b)| x * b).sum::<f64>())
        .collect();
    let edf = solver.edf(&fe, trace);
    let score = gcv_from_parts(cov.quad_inv(&resid), edf, obs.n_obs())?;
    Ok((score, edf))
}

/// `a` is preferred over `b`: lower score, then smaller `λ_D`, then smaller `λ_T`.
fn better(a: &GcvPoint, b: &GcvPoint) -> bool {
    match (a.gcv, b.gcv) {
        (Some(x), Some(y)) => {
            if x != y {
                return x < y;
            }
            (a.lambda_d, a.lambda_t) < (b.lambda_d, b.lambda_t)
        }
        (Some(_), None) => true,
        _ => false,
    }
}

fn run_row(setup: &ModelSetup, lambda_d: f64, lambda_t: &[f64], opts: &FitOptions) -> Vec<(GcvPoint, Option<ModelFit>)> {
    let mut warm: Option<faer::Mat<f64>> = None;
    lambda_t
        .iter()
        .map(|&lt| match setup.fit_from(lambda_d, lt, opts, warm.as_ref()) {
            Ok(fit) => {
                warm = Some(fit.d_matrix());
                let point = GcvPoint {
                    lambda_d,
                    lambda_t: lt,
                    gcv: fit.gcv,
                    edf: fit.edf,
                    converged: fit.converged,
                    error: fit.gcv.is_none().then(|| "oversaturated".to_string()),
                };
                (point, Some(fit))
            }
            Err(e) => (
                GcvPoint { lambda_d, lambda_t: lt, gcv: None, edf: None, converged: false, error: Some(e.to_string()) },
                None,
            ),
        })
        .collect()
}

fn first_failure<'a>(mut errors: impl Iterator<Item = Option<&'a str>>) -> String {
    errors.find_map(|e| e).unwrap_or("no candidate scored").to_string()
}

/// Fits every `(λ_D, λ_T)` pair and returns the scan together with the fit
/// minimizing GCV.
pub fn gcv_select(setup: &ModelSetup, grid: &LambdaGrid, opts: &FitOptions) -> Result<GcvSelection> {
    grid.validate()?;
    opts.validate()?;
    let mut opts = opts.clone();
    opts.compute_gcv = true;
    let rows: Vec<_> = grid
        .lambda_d
        .par_iter()
        .map(|&ld| run_row(setup, ld, &grid.lambda_t, &opts))
        .collect();

    let mut points = Vec::with_capacity(grid.len());
    let mut fits = Vec::with_capacity(grid.len());
    for (point, fit) in rows.into_iter().flatten() {
        points.push(point);
        fits.push(fit);
    }
    let mut best: Option<usize> = None;
    for i in 0..points.len() {
        if points[i].gcv.is_some() && best.is_none_or(|b| better(&points[i], &points[b])) {
            best = Some(i);
        }
    }
    let best = best.ok_or_else(|| Error::AllGridPointsFailed(first_failure(points.iter().map(|p| p.error.as_deref()))))?;
    let fit = fits[best].take().expect("scored point has a fit");
    Ok(GcvSelection { scan: GcvScan { points, best }, fit })
}

/// A candidate operator for the hyperparameter search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PdeCandidate {
    Isotropic,
    /// Unit-determinant diffusion stretched by `intensity` along `angle`.
    Anisotropic { intensity: f64, angle: f64 },
    /// Isotropic diffusion plus the supplied wind field scaled by `xi`.
    Transport { xi: f64 },
}

impl PdeCandidate {
    pub fn coefficients(&self, mesh: &TriangularMesh, wind: Option<&[[f64; 2]]>) -> Result<PdeCoefficients> {
        let nt = mesh.n_triangles();
        match *self {
            PdeCandidate::Isotropic => Ok(PdeCoefficients::isotropic(nt)),
            PdeCandidate::Anisotropic { intensity, angle } => PdeCoefficients::anisotropic(nt, intensity, angle),
            PdeCandidate::Transport { xi } => {
                let wind = wind.ok_or_else(|| Error::InvalidArgument("transport candidate needs a wind field".into()))?;
                let pde = PdeCoefficients::transport(wind.to_vec(), xi);
                pde.validate(mesh)?;
                Ok(pde)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            PdeCandidate::Isotropic => true,
            PdeCandidate::Anisotropic { intensity, angle } => intensity.is_finite() && intensity > 0.0 && angle.is_finite(),
            PdeCandidate::Transport { xi } => xi.is_finite() && xi >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid PDE candidate {self:?}")))
        }
    }
}

/// Best GCV reached by one candidate, or the reason it failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub candidate: PdeCandidate,
    pub best_gcv: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PdeScan {
    pub scores: Vec<CandidateScore>,
    pub best: usize,
    pub selection: GcvSelection,
}

impl PdeScan {
    pub fn best_candidate(&self) -> PdeCandidate {
        self.scores[self.best].candidate
    }
}

/// Runs [`gcv_select`] for every candidate operator and keeps the one with
/// the lowest best-GCV. Ties go to the earlier candidate.
#[allow(clippy::too_many_arguments)]
pub fn pde_hyperparameter_scan(
    obs: &ObservationSet,
    mesh: &TriangularMesh,
    basis: &SplineBasis,
    candidates: &[PdeCandidate],
    wind: Option<&[[f64; 2]]>,
    grid: &LambdaGrid,
    opts: &FitOptions,
) -> Result<PdeScan> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no PDE candidates given".into()));
    }
    for c in candidates {
        c.validate()?;
    }
    let mut scores = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, GcvSelection)> = None;
    for (i, cand) in candidates.iter().enumerate() {
        let outcome = cand
            .coefficients(mesh, wind)
            .and_then(|pde| ModelSetup::from_problem(obs.clone(), mesh, basis, &pde, opts.lump_mass))
            .and_then(|setup| gcv_select(&setup, grid, opts));
        match outcome {
            Ok(sel) => {
                let score = sel.scan.best_point().gcv.expect("selected point is scored");
                scores.push(CandidateScore { candidate: *cand, best_gcv: Some(score), error: None });
                let replace = best
                    .as_ref()
                    .is_none_or(|(_, b)| score < b.scan.best_point().gcv.expect("scored"));
                if replace {
                    best = Some((i, sel));
                }
            }
            Err(e) => scores.push(CandidateScore { candidate: *cand, best_gcv: None, error: Some(e.to_string()) }),
        }
    }
    let (best, selection) =
        best.ok_or_else(|| Error::AllGridPointsFailed(first_failure(scores.iter().map(|s| s.error.as_deref()))))?;
    Ok(PdeScan { scores, best, selection })
}
