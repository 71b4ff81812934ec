//! Asymptotic variances of the estimated field and coefficients, and
//! confidence intervals for the variance components.
//!
//! All matrices are the finite-sample versions evaluated at the converged
//! covariance. Writing `M = BᵀQB` and `A = M + |O|P`, the field sandwich
//! `(σ²/|O|)(Ω⁻¹ + P)⁻¹Ω⁻¹(Ω⁻¹ + P)⁻¹` with `Ω = |O|M⁻¹` simplifies to
//! `σ² A⁻¹ M A⁻¹`, which stays defined when `M` itself is singular (fewer
//! observations than basis functions).

use crate::covariance::ErrorCovariance;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, symmetrize, to_rows};
use crate::solver::{FixedEffects, FixedEffectsSolver, ModelFit, ModelSetup};
use faer::linalg::solvers::DenseSolveCore;
use faer::Mat;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

/// Largest basis dimension for which the dense field covariance is formed.
pub const DENSE_FIELD_LIMIT: usize = 2000;

/// Columns handled per block when only the diagonal is computed.
const COLUMN_BLOCK: usize = 64;

/// Fixed-effects system of a converged fit, reused by all variance formulas.
pub struct FitSystem<'a> {
    solver: FixedEffectsSolver<'a>,
    cov: ErrorCovariance,
    fe: FixedEffects,
    sigma2: f64,
}

impl<'a> FitSystem<'a> {
    pub fn new(setup: &'a ModelSetup, fit: &ModelFit) -> Result<Self> {
        if fit.n_obs != setup.obs().n_obs() || fit.f_coeffs.len() != setup.factors().dim() {
            return Err(Error::Dimension("fit does not belong to this dataset and basis".into()));
        }
        let solver = setup.solver(fit.lambda_d, fit.lambda_t)?;
        let cov = ErrorCovariance::new(setup.obs(), &fit.d_matrix())?;
        let fe = solver.solve(&cov)?;
        Ok(Self { solver, cov, fe, sigma2: fit.sigma2 })
    }

    fn n_obs(&self) -> f64 {
        self.cov.n_obs() as f64
    }

    fn dim(&self) -> usize {
        self.fe.f.len()
    }

    /// `Ω = |O| (BᵀQB)⁻¹`, or `None` when `BᵀQB` is singular.
    pub fn omega(&self) -> Option<Mat<f64>> {
        let m = self.solver.weighted_gram(&self.cov, &self.fe);
        let llt = cholesky(&m, "B^T Q B").ok()?;
        let mut inv = llt.inverse() * self.n_obs();
        symmetrize(&mut inv);
        Some(inv)
    }

    /// `Ξ = XᵀΣₑ⁻¹X / |O|`.
    pub fn xi(&self) -> Result<Mat<f64>> {
        let q = self.fe.beta.len();
        if q == 0 {
            return Err(Error::InvalidArgument("the model has no fixed covariates".into()));
        }
        let g_inv = self.fe.projector().g_inv();
        let mut g = cholesky(g_inv, "(X^T Sigma^-1 X)^-1")?.inverse() * (1.0 / self.n_obs());
        symmetrize(&mut g);
        Ok(g)
    }

    /// `σ² (A⁻¹S)ᵀ M (A⁻¹S)` for a block of directions `S`.
    fn sandwich(&self, s: &Mat<f64>) -> Mat<f64> {
        let a_s = self.solver.apply_system_inverse(&self.fe, s);
        let m_a_s = self.solver.apply_weighted_gram(&self.cov, &self.fe, &a_s);
        let mut out = a_s.transpose() * m_a_s * self.sigma2;
        symmetrize(&mut out);
        out
    }

    /// Dense covariance of the field coefficients.
    pub fn var_field(&self) -> Result<Mat<f64>> {
        let k = self.dim();
        if k > DENSE_FIELD_LIMIT {
            return Err(Error::InvalidArgument(format!(
                "dense field covariance is limited to {DENSE_FIELD_LIMIT} coefficients (have {k}); use the diagonal"
            )));
        }
        Ok(self.sandwich(&Mat::identity(k, k)))
    }

    /// Diagonal of the field covariance by blocked column solves.
    pub fn var_field_diagonal(&self) -> Vec<f64> {
        let k = self.dim();
        let starts: Vec<usize> = (0..k).step_by(COLUMN_BLOCK).collect();
        starts
            .par_iter()
            .map(|&start| {
                let width = COLUMN_BLOCK.min(k - start);
                let e = Mat::from_fn(k, width, |i, j| if i == start + j { 1.0 } else { 0.0 });
                let a_e = self.solver.apply_system_inverse(&self.fe, &e);
                let m_a_e = self.solver.apply_weighted_gram(&self.cov, &self.fe, &a_e);
                (0..width)
                    .map(|j| self.sigma2 * (0..k).map(|i| a_e[(i, j)] * m_a_e[(i, j)]).sum::<f64>())
                    .collect::<Vec<f64>>()
            })
            .collect::<Vec<_>>()
            .concat()
    }

    /// `σ²G⁻¹ + G⁻¹ V₂ᵀ Var(f̂) V₂ G⁻¹` with `G = XᵀΣₑ⁻¹X` and `V₂ = BᵀΣₑ⁻¹X`.
    pub fn var_beta(&self) -> Result<Mat<f64>> {
        let q = self.fe.beta.len();
        if q == 0 {
            return Err(Error::InvalidArgument("the model has no fixed covariates".into()));
        }
        let proj = self.fe.projector();
        let g_inv = proj.g_inv();
        let v2 = self.solver.setup().basis_matrix().tr_mul_dense(proj.sinv_x());
        let middle = self.sandwich(&v2);
        let mut out = g_inv * self.sigma2 + g_inv * middle * g_inv;
        symmetrize(&mut out);
        Ok(out)
    }
}

fn require_diagonal(fit: &ModelFit) -> Result<()> {
    let sb = &fit.sigma_b;
    for i in 0..sb.len() {
        for j in 0..sb.len() {
            if i != j && sb[i][j].abs() > 1e-12 * (sb[i][i] * sb[j][j]).sqrt().max(f64::MIN_POSITIVE) {
                return Err(Error::InvalidArgument(
                    "variance-component information requires a diagonal random-effect covariance".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Diagonal empirical information for `(log σ, σ_b1, …, σ_bp)`.
pub fn info_matrix_sigma(fit: &ModelFit) -> Result<Mat<f64>> {
    require_diagonal(fit)?;
    let p = fit.sigma_b.len();
    let g = fit.b_hat.len() as f64;
    let mut info = Mat::zeros(p + 1, p + 1);
    let eps: f64 = fit.residual_ss.iter().sum();
    info[(0, 0)] = 2.0 / fit.sigma2 * eps;
    for j in 0..p {
        let var = fit.sigma_b[j][j];
        let sum_b2: f64 = fit.b_hat.iter().map(|b| b[j] * b[j]).sum();
        info[(j + 1, j + 1)] = 3.0 * sum_b2 / (var * var) - g / var;
    }
    Ok(info)
}

/// Two-sided standard normal quantile for confidence `level`.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level {level} must lie in (0, 1)")));
    }
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    Ok(n.inverse_cdf(0.5 + level / 2.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentInterval {
    pub name: String,
    pub estimate: f64,
    /// `None` when the information entry is not positive.
    pub interval: Option<Interval>,
}

/// Intervals for `σ` (built on the log scale) and for each `σ_bj`.
pub fn variance_component_ci(fit: &ModelFit, level: f64) -> Result<Vec<ComponentInterval>> {
    let z = normal_quantile(level)?;
    let info = info_matrix_sigma(fit)?;
    let sigma = fit.sigma2.sqrt();
    let mut out = Vec::with_capacity(info.nrows());
    let i00 = info[(0, 0)];
    out.push(ComponentInterval {
        name: "sigma".into(),
        estimate: sigma,
        interval: (i00 > 0.0 && sigma > 0.0).then(|| {
            let half = z / i00.sqrt();
            Interval { lower: (sigma.ln() - half).exp(), upper: (sigma.ln() + half).exp() }
        }),
    });
    for j in 0..fit.sigma_b.len() {
        let sb = fit.sigma_b[j][j].max(0.0).sqrt();
        let ijj = info[(j + 1, j + 1)];
        out.push(ComponentInterval {
            name: format!("sigma_b{}", j + 1),
            estimate: sb,
            interval: (ijj > 0.0 && ijj.is_finite()).then(|| {
                let half = z / ijj.sqrt();
                Interval { lower: sb - half, upper: sb + half }
            }),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientInterval {
    pub estimate: f64,
    pub std_error: f64,
    pub interval: Interval,
}

/// Everything reported for a converged fit.
#[derive(Debug, Clone, Serialize)]
pub struct AsymptoticSummary {
    pub ci_level: f64,
    pub n_obs: usize,
    /// `|O| (BᵀQB)⁻¹`; absent when singular or too large to form.
    #[serde(skip)]
    pub omega: Option<Mat<f64>>,
    /// Dense field covariance, formed only up to [`DENSE_FIELD_LIMIT`].
    #[serde(skip)]
    pub var_f: Option<Mat<f64>>,
    pub var_f_diagonal: Vec<f64>,
    /// Empty when the model has no covariates.
    pub xi: Vec<Vec<f64>>,
    pub var_beta: Vec<Vec<f64>>,
    pub beta: Vec<CoefficientInterval>,
    pub info_sigma: Vec<Vec<f64>>,
    pub variance_components: Vec<ComponentInterval>,
}

pub fn summarize(setup: &ModelSetup, fit: &ModelFit, level: f64) -> Result<AsymptoticSummary> {
    let z = normal_quantile(level)?;
    let sys = FitSystem::new(setup, fit)?;
    let dense = sys.dim() <= DENSE_FIELD_LIMIT;
    let var_f = if dense { Some(sys.var_field()?) } else { None };
    let var_f_diagonal = match &var_f {
        Some(v) => (0..v.nrows()).map(|i| v[(i, i)]).collect(),
        None => sys.var_field_diagonal(),
    };
    let omega = if dense { sys.omega() } else { None };
    let q = fit.beta.len();
    let (xi, var_beta) = if q > 0 { (to_rows(&sys.xi()?), to_rows(&sys.var_beta()?)) } else { (Vec::new(), Vec::new()) };
    let beta = fit
        .beta
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            let se = var_beta[j][j].max(0.0).sqrt();
            CoefficientInterval { estimate: b, std_error: se, interval: Interval { lower: b - z * se, upper: b + z * se } }
        })
        .collect();
    Ok(AsymptoticSummary {
        ci_level: level,
        n_obs: fit.n_obs,
        omega,
        var_f,
        var_f_diagonal,
        xi,
        var_beta,
        beta,
        info_sigma: to_rows(&info_matrix_sigma(fit)?),
        variance_components: variance_component_ci(fit, level)?,
    })
}
