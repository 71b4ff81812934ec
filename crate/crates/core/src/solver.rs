//! Penalized mixed-model fitting: the closed-form fixed-effects solve, the
//! EM update of the random-effect covariance and the outer loop that
//! alternates them.
//!
//! The large system `A = BᵀQB + |O| P` is never factored directly. It is
//! written as `A0 − V C Vᵀ` with `A0 = BᵀB + |O| P`, which depends only on
//! the smoothing parameters, and a low-rank correction of rank `g p + q`.
//! One Cholesky factorization of `A0` therefore serves every outer
//! iteration.

use crate::covariance::{ErrorCovariance, GlsProjector};
use crate::data::{build_basis_matrix, ObservationSet};
use crate::error::{Error, Result};
use crate::fem::{spatial_eval_matrix, PdeCoefficients};
use crate::linalg::{cholesky, dot, from_rows, qr_r_positive, symmetrize, to_rows, trace, trace_of_product, upper_inverse};
use crate::mesh::TriangularMesh;
use crate::penalty::{PenaltyFactors, PenaltySystem};
use crate::sparse::CsrMatrix;
use crate::splines::SplineBasis;
use faer::linalg::solvers::{DenseSolveCore, Llt, PartialPivLu, Solve};
use faer::{Mat, Par};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::{Arc, OnceLock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceStructure {
    /// Unstructured symmetric `Σ_b`.
    Full,
    /// Independent random effects.
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sigma2Rule {
    /// Augmented residual sum of squares plus `|O| fᵀPf`, all over `|O|`.
    /// This is the exact maximizer of the tracked objective, so the trace
    /// never decreases.
    Penalized,
    /// Augmented residual sum of squares over `|O|`.
    AugmentedResidual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum TraceMethod {
    Exact,
    /// Rademacher-probe estimate of the smoother trace.
    Hutchinson { probes: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub alpha_init: f64,
    /// Lower bound on the diagonal of `D`; hitting it flags the fit.
    pub d_floor: f64,
    pub covariance: CovarianceStructure,
    pub sigma2_rule: Sigma2Rule,
    pub trace: TraceMethod,
    /// Compute edf and the GCV score at the final iterate.
    pub compute_gcv: bool,
    pub lump_mass: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 50,
            alpha_init: 0.375,
            d_floor: 1e-10,
            covariance: CovarianceStructure::Full,
            sigma2_rule: Sigma2Rule::Penalized,
            trace: TraceMethod::Exact,
            compute_gcv: true,
            lump_mass: false,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::InvalidArgument(format!("tol = {} must be positive", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        if !(self.alpha_init > 0.0 && self.alpha_init.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha_init = {} must be positive", self.alpha_init)));
        }
        if !(self.d_floor > 0.0 && self.d_floor.is_finite()) {
            return Err(Error::InvalidArgument(format!("d_floor = {} must be positive", self.d_floor)));
        }
        if let TraceMethod::Hutchinson { probes: 0, .. } = self.trace {
            return Err(Error::InvalidArgument("Hutchinson trace needs at least one probe".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub beta: Vec<f64>,
    pub f_coeffs: Vec<f64>,
    pub sigma_b: Vec<Vec<f64>>,
    pub sigma2: f64,
    /// `Σ_b / σ²`
    pub d: Vec<Vec<f64>>,
    /// Upper-triangular factor with `ΔᵀΔ = D⁻¹`.
    pub delta: Vec<Vec<f64>>,
    /// Predicted random effects, one row per group.
    pub b_hat: Vec<Vec<f64>>,
    pub group_labels: Vec<String>,
    /// `‖y_k − X_kβ − B_kf − Z_k b_k‖²` per group.
    pub residual_ss: Vec<f64>,
    pub lambda_d: f64,
    pub lambda_t: f64,
    pub n_obs: usize,
    pub n_iter: usize,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    /// Some diagonal entry of `D` was clamped at the floor.
    pub boundary: bool,
    pub edf: Option<f64>,
    pub gcv: Option<f64>,
}

impl ModelFit {
    /// `σ_b² / (σ² + σ_b²)` for the first random effect.
    pub fn variance_ratio(&self) -> f64 {
        let sb = self.sigma_b[0][0];
        let total = self.sigma2 + sb;
        if total > 0.0 { sb / total } else { 0.0 }
    }

    pub fn d_matrix(&self) -> Mat<f64> {
        from_rows(&self.d)
    }

    pub fn sigma_b_matrix(&self) -> Mat<f64> {
        from_rows(&self.sigma_b)
    }
}

/// Result of the closed-form fixed-effects solve, together with the pieces
/// needed for the smoother trace.
#[derive(Debug, Clone)]
pub struct FixedEffects {
    pub beta: Vec<f64>,
    pub f: Vec<f64>,
    projector: GlsProjector,
    /// `A0⁻¹ V`
    y: Mat<f64>,
    /// `Vᵀ A0⁻¹ V`
    vty: Mat<f64>,
    c: Mat<f64>,
    k_lu: PartialPivLu<f64>,
}

impl FixedEffects {
    pub fn projector(&self) -> &GlsProjector {
        &self.projector
    }
}

/// Random-effect predictions from the augmented least-squares problems.
#[derive(Debug, Clone)]
pub struct RandomEffects {
    pub b_hat: Vec<Vec<f64>>,
    /// `R_k` from the QR decomposition of `[Z_k; Δ]`.
    pub r_factors: Vec<Mat<f64>>,
    /// `‖r_k − Z_k b_k‖² + ‖Δ b_k‖²`, which equals `r_kᵀ Σₑ,k⁻¹ r_k`.
    pub augmented_rss: Vec<f64>,
    /// `‖r_k − Z_k b_k‖²`
    pub residual_ss: Vec<f64>,
}

/// Data-dependent pieces shared by all fits of one dataset and one PDE.
#[derive(Debug, Clone)]
pub struct ModelSetup {
    obs: ObservationSet,
    b: CsrMatrix,
    factors: Arc<PenaltyFactors>,
    btb: Mat<f64>,
}

impl ModelSetup {
    pub fn new(obs: ObservationSet, b: CsrMatrix, factors: Arc<PenaltyFactors>) -> Result<Self> {
        if b.nrows() != obs.n_obs() || b.ncols() != factors.dim() {
            return Err(Error::Dimension(format!(
                "B is {}x{}, expected {}x{}",
                b.nrows(),
                b.ncols(),
                obs.n_obs(),
                factors.dim()
            )));
        }
        let btb = b.gram();
        Ok(Self { obs, b, factors, btb })
    }

    pub fn from_problem(
        obs: ObservationSet,
        mesh: &TriangularMesh,
        basis: &SplineBasis,
        pde: &PdeCoefficients,
        lump_mass: bool,
    ) -> Result<Self> {
        let factors = Arc::new(PenaltyFactors::from_problem(mesh, basis, pde, lump_mass)?);
        let psi = spatial_eval_matrix(mesh, obs.locations())?;
        let phi = basis.eval_matrix(obs.times())?;
        let b = build_basis_matrix(&obs, &psi, &phi)?;
        Self::new(obs, b, factors)
    }

    pub fn obs(&self) -> &ObservationSet {
        &self.obs
    }

    pub fn basis_matrix(&self) -> &CsrMatrix {
        &self.b
    }

    pub fn factors(&self) -> &Arc<PenaltyFactors> {
        &self.factors
    }

    pub fn penalty(&self, lambda_d: f64, lambda_t: f64) -> Result<PenaltySystem> {
        PenaltySystem::new(self.factors.clone(), lambda_d, lambda_t)
    }

    /// Factors `A0` for one pair of smoothing parameters.
    pub fn solver(&self, lambda_d: f64, lambda_t: f64) -> Result<FixedEffectsSolver<'_>> {
        FixedEffectsSolver::new(self, self.penalty(lambda_d, lambda_t)?)
    }

    pub fn fit(&self, lambda_d: f64, lambda_t: f64, opts: &FitOptions) -> Result<ModelFit> {
        self.fit_from(lambda_d, lambda_t, opts, None)
    }

    /// Runs the outer loop; `start_d` replaces the default initial `D`.
    pub fn fit_from(&self, lambda_d: f64, lambda_t: f64, opts: &FitOptions, start_d: Option<&Mat<f64>>) -> Result<ModelFit> {
        let solver = self.solver(lambda_d, lambda_t)?;
        fpirls_loop(&solver, opts, start_d)
    }
}

/// The factored `A0 = BᵀB + |O| P` for one `(λ_D, λ_T)`.
pub struct FixedEffectsSolver<'a> {
    setup: &'a ModelSetup,
    penalty: PenaltySystem,
    a0: Llt<f64>,
    t0: OnceLock<f64>,
}

impl<'a> FixedEffectsSolver<'a> {
    pub fn new(setup: &'a ModelSetup, penalty: PenaltySystem) -> Result<Self> {
        let n_obs = setup.obs.n_obs() as f64;
        let p = penalty.matrix();
        let k = penalty.dim();
        let mut a0 = Mat::from_fn(k, k, |i, j| setup.btb[(i, j)] + n_obs * p[(i, j)]);
        symmetrize(&mut a0);
        let a0 = cholesky(&a0, "B^T B + |O| P (smoothing parameters too small for the data support)")?;
        Ok(Self {
            setup,
            penalty,
            a0,
            t0: OnceLock::new(),
        })
    }

    pub fn penalty(&self) -> &PenaltySystem {
        &self.penalty
    }

    pub fn setup(&self) -> &ModelSetup {
        self.setup
    }

    /// Columns `B_kᵀ Z_k` for every group followed by `BᵀΣₑ⁻¹X`, and the
    /// matching block-diagonal `C = blockdiag(W_k, G⁻¹)`.
    fn low_rank_terms(&self, cov: &ErrorCovariance, proj: &GlsProjector) -> (Mat<f64>, Mat<f64>) {
        let obs = &self.setup.obs;
        let b = &self.setup.b;
        let (g, p, q) = (obs.n_groups(), obs.n_random(), obs.n_fixed());
        let rank = g * p + q;
        let mut v = Mat::zeros(b.ncols(), rank);
        let mut c = Mat::zeros(rank, rank);
        for k in 0..g {
            let z = cov.z(k);
            let start = cov.group_start(k);
            for i in 0..z.nrows() {
                let (cols, vals) = b.row(start + i);
                for j in 0..p {
                    let zij = z[(i, j)];
                    for (&col, &val) in cols.iter().zip(vals) {
                        v[(col, k * p + j)] += val * zij;
                    }
                }
            }
            let w = cov.w(k);
            for i in 0..p {
                for j in 0..p {
                    c[(k * p + i, k * p + j)] = w[(i, j)];
                }
            }
        }
        if q > 0 {
            let btsx = b.tr_mul_dense(proj.sinv_x());
            let g_inv = proj.g_inv();
            for j in 0..q {
                for i in 0..b.ncols() {
                    v[(i, g * p + j)] = btsx[(i, j)];
                }
                for i in 0..q {
                    c[(g * p + i, g * p + j)] = g_inv[(i, j)];
                }
            }
        }
        (v, c)
    }

    /// Minimizes `(1/|O|)(y − Xβ − Bf)ᵀΣₑ⁻¹(y − Xβ − Bf) + fᵀPf`.
    pub fn solve(&self, cov: &ErrorCovariance) -> Result<FixedEffects> {
        self.solve_for(cov, &self.setup.obs.y())
    }

    /// As [`solve`](Self::solve) for an arbitrary response vector.
    pub fn solve_for(&self, cov: &ErrorCovariance, y: &[f64]) -> Result<FixedEffects> {
        let obs = &self.setup.obs;
        let b = &self.setup.b;
        let proj = GlsProjector::new(cov, &obs.x_matrix())?;
        let (v, c) = self.low_rank_terms(cov, &proj);
        let y_mat = self.a0.solve(&v);
        let vty = v.transpose() * &y_mat;
        let r = v.ncols();
        let k_mat = Mat::<f64>::identity(r, r) - &c * &vty;
        let k_lu = k_mat.partial_piv_lu();

        let rhs = b.tr_mul_vec(&proj.apply_q(cov, y));
        let u = crate::linalg::solve_vec(&self.a0, &rhs);
        let vtu = v.transpose() * crate::linalg::col_from(&u);
        let corr = k_lu.solve(&c * &vtu);
        if !crate::linalg::all_finite(&corr) {
            return Err(Error::Singular("low-rank correction of the fixed-effects system".into()));
        }
        let ycorr = &y_mat * &corr;
        let f: Vec<f64> = (0..u.len()).map(|i| u[i] + ycorr[(i, 0)]).collect();
        let bf = b.mul_vec(&f);
        let resid: Vec<f64> = y.iter().zip(&bf).map(|(a, b)| a - b).collect();
        let beta = proj.gls_coefficients(&resid);
        Ok(FixedEffects {
            beta,
            f,
            projector: proj,
            y: y_mat,
            vty,
            c,
            k_lu,
        })
    }

    /// `tr(A0⁻¹ BᵀB)`, computed once per smoothing pair.
    fn base_trace(&self, method: TraceMethod) -> f64 {
        *self.t0.get_or_init(|| match method {
            TraceMethod::Exact => {
                let mut w = self.setup.b.transpose().to_dense();
                faer::linalg::triangular_solve::solve_lower_triangular_in_place(self.a0.L(), w.as_mut(), Par::Seq);
                let fro = w.norm_l2();
                fro * fro
            }
            TraceMethod::Hutchinson { probes, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let k = self.penalty.dim();
                let mut acc = 0.0;
                for _ in 0..probes {
                    let z: Vec<f64> = (0..k).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
                    let bz = self.setup.b.mul_vec(&z);
                    let btbz = self.setup.b.tr_mul_vec(&bz);
                    acc += dot(&z, &crate::linalg::solve_vec(&self.a0, &btbz));
                }
                acc / probes as f64
            }
        })
    }

    /// Effective degrees of freedom `q + tr(A⁻¹ BᵀQB)` of the smoother at
    /// the covariance used for `fe`.
    pub fn edf(&self, fe: &FixedEffects, method: TraceMethod) -> f64 {
        let t0 = self.base_trace(method);
        let by = self.setup.b.mul_dense(&fe.y);
        let byby = by.transpose() * &by;
        let c_vty = &fe.c * &fe.vty;
        let kc = fe.k_lu.solve(&fe.c);
        let t1 = trace(&c_vty);
        let t2 = trace_of_product(&kc, &byby);
        let t3 = trace_of_product(&(&kc * fe.vty.transpose()), &c_vty);
        fe.beta.len() as f64 + t0 - t1 + t2 - t3
    }

    /// Dense `A⁻¹ = (BᵀQB + |O|P)⁻¹` for the covariance used in `fe`.
    pub fn system_inverse(&self, fe: &FixedEffects) -> Mat<f64> {
        let mut inv = self.a0.inverse();
        let corr = &fe.y * fe.k_lu.solve(&fe.c * fe.y.transpose());
        inv += corr;
        symmetrize(&mut inv);
        inv
    }

    /// `A⁻¹ M` for a block of columns, without forming `A⁻¹`.
    pub fn apply_system_inverse(&self, fe: &FixedEffects, m: &Mat<f64>) -> Mat<f64> {
        let mut out = self.a0.solve(m);
        let corr = &fe.y * fe.k_lu.solve(&fe.c * (fe.y.transpose() * m));
        out += corr;
        out
    }

    /// `BᵀQB M` for a block of columns, without forming `BᵀQB`.
    pub fn apply_weighted_gram(&self, cov: &ErrorCovariance, fe: &FixedEffects, m: &Mat<f64>) -> Mat<f64> {
        let (v, c) = self.low_rank_terms(cov, &fe.projector);
        let b = &self.setup.b;
        b.tr_mul_dense(&b.mul_dense(m)) - &v * (&c * (v.transpose() * m))
    }

    /// Dense `BᵀQB`.
    pub fn weighted_gram(&self, cov: &ErrorCovariance, fe: &FixedEffects) -> Mat<f64> {
        let (v, c) = self.low_rank_terms(cov, &fe.projector);
        let mut m = &self.setup.btb - &v * &c * v.transpose();
        symmetrize(&mut m);
        m
    }
}

/// `Δ = α · diag(sqrt(Σ_k ‖Z_k^(j)‖² / g))`.
pub fn init_delta(obs: &ObservationSet, alpha: f64) -> Result<Mat<f64>> {
    let p = obs.n_random();
    if p == 0 {
        return Err(Error::InvalidArgument("the model has no random effects".into()));
    }
    let g = obs.n_groups() as f64;
    let mut col_ss = vec![0.0; p];
    for r in obs.records() {
        for (j, z) in r.z.iter().enumerate() {
            col_ss[j] += z * z;
        }
    }
    let mut delta = Mat::zeros(p, p);
    for j in 0..p {
        if col_ss[j] == 0.0 {
            return Err(Error::InvalidObservations(format!("random-effect column z{} is identically zero", j + 1)));
        }
        delta[(j, j)] = alpha * (col_ss[j] / g).sqrt();
    }
    if (0..p).any(|j| !(delta[(j, j)] > 0.0 && delta[(j, j)].is_finite())) {
        return Err(Error::Singular("initial relative precision factor is not invertible".into()));
    }
    Ok(delta)
}

/// Solves the augmented least-squares problem of every group for the
/// residual `r = y − Xβ − Bf`.
pub fn predict_random_effects(obs: &ObservationSet, resid: &[f64], delta: &Mat<f64>) -> Result<RandomEffects> {
    let p = obs.n_random();
    let g = obs.n_groups();
    let mut out = RandomEffects {
        b_hat: Vec::with_capacity(g),
        r_factors: Vec::with_capacity(g),
        augmented_rss: Vec::with_capacity(g),
        residual_ss: Vec::with_capacity(g),
    };
    for k in 0..g {
        let range = obs.group_range(k);
        let z = obs.z_block(k);
        let nk = z.nrows();
        let zt = Mat::from_fn(nk + p, p, |i, j| if i < nk { z[(i, j)] } else { delta[(i - nk, j)] });
        let r = qr_r_positive(&zt);
        let r_inv = upper_inverse(&r, &format!("augmented random-effect design of group {k}"))?;
        let rk = &resid[range];
        let ztr: Vec<f64> = (0..p).map(|j| (0..nk).map(|i| z[(i, j)] * rk[i]).sum()).collect();
        // b = R⁻¹ R⁻ᵀ Zᵀr
        let tmp: Vec<f64> = (0..p).map(|i| (0..p).map(|j| r_inv[(j, i)] * ztr[j]).sum()).collect();
        let b: Vec<f64> = (0..p).map(|i| (0..p).map(|j| r_inv[(i, j)] * tmp[j]).sum()).collect();
        let mut rss = 0.0;
        for i in 0..nk {
            let e = rk[i] - (0..p).map(|j| z[(i, j)] * b[j]).sum::<f64>();
            rss += e * e;
        }
        let shrink: f64 = (0..p)
            .map(|i| {
                let v: f64 = (0..p).map(|j| delta[(i, j)] * b[j]).sum();
                v * v
            })
            .sum();
        out.b_hat.push(b);
        out.r_factors.push(r);
        out.augmented_rss.push(rss + shrink);
        out.residual_ss.push(rss);
    }
    Ok(out)
}

/// `D̂ = AAᵀ/g` where `A` is the transposed triangular factor of the QR
/// decomposition of `L`, which stacks `b̂_kᵀ/σ` over `(R_k⁻¹)ᵀ` for every
/// group. Equivalently `D̂ = LᵀL/g`.
pub fn em_step(b_hat: &[Vec<f64>], r_factors: &[Mat<f64>], sigma: f64) -> Result<Mat<f64>> {
    let g = b_hat.len();
    if g == 0 || r_factors.len() != g {
        return Err(Error::Dimension("one random-effect prediction and factor per group required".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma = {sigma} must be positive")));
    }
    let p = b_hat[0].len();
    let mut l = Mat::zeros(g * (p + 1), p);
    for k in 0..g {
        let r_inv = upper_inverse(&r_factors[k], &format!("R factor of group {k}"))?;
        let base = k * (p + 1);
        for j in 0..p {
            l[(base, j)] = b_hat[k][j] / sigma;
        }
        for i in 0..p {
            for j in 0..p {
                l[(base + 1 + i, j)] = r_inv[(j, i)];
            }
        }
    }
    let r_l = qr_r_positive(&l);
    let a = r_l.transpose().to_owned();
    let mut d = &a * a.transpose() * (1.0 / g as f64);
    symmetrize(&mut d);
    Ok(d)
}

/// Applies the structural constraint and the diagonal floor. Returns the
/// adjusted matrix and whether the floor was hit.
pub fn constrain_d(d: &Mat<f64>, structure: CovarianceStructure, floor: f64) -> (Mat<f64>, bool) {
    let p = d.nrows();
    let mut out = d.clone();
    if structure == CovarianceStructure::Diagonal {
        for i in 0..p {
            for j in 0..p {
                if i != j {
                    out[(i, j)] = 0.0;
                }
            }
        }
    }
    let mut clamped = false;
    for i in 0..p {
        if !(out[(i, i)] >= floor) {
            clamped = true;
            out[(i, i)] = floor;
            for j in 0..p {
                if j != i {
                    out[(i, j)] = 0.0;
                    out[(j, i)] = 0.0;
                }
            }
        }
    }
    (out, clamped)
}

/// Upper-triangular `Δ` with `ΔᵀΔ = D⁻¹`.
pub fn delta_from_d(d: &Mat<f64>) -> Result<Mat<f64>> {
    let d_inv = cholesky(d, "relative covariance D")?.inverse();
    let mut d_inv = d_inv;
    symmetrize(&mut d_inv);
    let l = cholesky(&d_inv, "inverse of D")?;
    Ok(l.L().transpose().to_owned())
}

/// `D = (ΔᵀΔ)⁻¹`.
pub fn d_from_delta(delta: &Mat<f64>) -> Result<Mat<f64>> {
    let dtd = delta.transpose() * delta;
    let mut d = cholesky(&dtd, "Delta^T Delta")?.inverse();
    symmetrize(&mut d);
    Ok(d)
}

/// Noise-variance update.
pub fn update_sigma2(augmented_rss: &[f64], n_obs: usize, penalty_value: f64, rule: Sigma2Rule) -> f64 {
    let rss: f64 = augmented_rss.iter().sum();
    let n = n_obs as f64;
    match rule {
        Sigma2Rule::Penalized => (rss + n * penalty_value) / n,
        Sigma2Rule::AugmentedResidual => rss / n,
    }
}

/// The objective tracked by the outer loop, per observation:
/// `−½ log 2π − ½ log σ² − log det Σₑ /(2|O|) − (rᵀΣₑ⁻¹r/|O| + fᵀPf)/(2σ²)`.
pub fn penalized_loglik(re: &RandomEffects, delta: &Mat<f64>, sigma2: f64, penalty_value: f64, n_obs: usize) -> f64 {
    let n = n_obs as f64;
    let p = delta.nrows();
    let log_det_delta: f64 = (0..p).map(|i| delta[(i, i)].abs().ln()).sum();
    let logdet: f64 = re
        .r_factors
        .iter()
        .map(|r| 2.0 * (0..p).map(|i| r[(i, i)].abs().ln()).sum::<f64>() - 2.0 * log_det_delta)
        .sum();
    let quad: f64 = re.augmented_rss.iter().sum();
    -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * sigma2.ln() - logdet / (2.0 * n) - (quad / n + penalty_value) / (2.0 * sigma2)
}

fn residuals(setup: &ModelSetup, fe: &FixedEffects) -> Vec<f64> {
    let obs = &setup.obs;
    let bf = setup.b.mul_vec(&fe.f);
    obs.records()
        .iter()
        .zip(&bf)
        .map(|(r, bf)| r.y - bf - dot(&r.x, &fe.beta))
        .collect()
}

fn rel_change(new: f64, old: f64) -> f64 {
    (new - old).abs() / old.abs().max(1e-8)
}

/// GCV score `|O| rᵀΣₑ⁻¹r / (|O| − edf)²`.
pub fn gcv_from_parts(whitened_rss: f64, edf: f64, n_obs: usize) -> Result<f64> {
    let n = n_obs as f64;
    if !(edf < n) {
        return Err(Error::Oversaturated { edf, n_obs });
    }
    Ok(n * whitened_rss / ((n - edf) * (n - edf)))
}

fn fpirls_loop(solver: &FixedEffectsSolver<'_>, opts: &FitOptions, start_d: Option<&Mat<f64>>) -> Result<ModelFit> {
    opts.validate()?;
    let setup = solver.setup;
    let obs = &setup.obs;
    let n_obs = obs.n_obs();
    let p = obs.n_random();

    let (mut d, mut delta) = match start_d {
        Some(d0) => {
            let (d0, _) = constrain_d(d0, opts.covariance, opts.d_floor);
            let delta = delta_from_d(&d0)?;
            (d0, delta)
        }
        None => {
            let delta = init_delta(obs, opts.alpha_init)?;
            (d_from_delta(&delta)?, delta)
        }
    };
    let mut sigma2 = f64::NAN;
    let mut trace_ll = Vec::with_capacity(opts.max_iter);
    let mut boundary = false;
    let mut converged = false;
    let mut prev: Option<(f64, Vec<f64>)> = None;
    let mut n_iter = 0;
    let y_scale = obs.records().iter().map(|r| r.y * r.y).sum::<f64>() / n_obs as f64;
    let exact_threshold = 1e-24 * y_scale;

    for iter in 0..opts.max_iter {
        n_iter = iter + 1;
        let cov = ErrorCovariance::new(obs, &d)?;
        let fe = solver.solve(&cov)?;
        let resid = residuals(setup, &fe);
        let pen = solver.penalty.quadratic_form(&fe.f);
        let re = predict_random_effects(obs, &resid, &delta)?;
        if iter == 0 {
            sigma2 = update_sigma2(&re.augmented_rss, n_obs, pen, opts.sigma2_rule);
            if sigma2 <= exact_threshold {
                return Ok(exact_fit(solver, opts, fe, re, d, delta, n_iter));
            }
        }
        let d_em = em_step(&re.b_hat, &re.r_factors, sigma2.sqrt())?;
        let (d_new, clamped) = constrain_d(&d_em, opts.covariance, opts.d_floor);
        boundary = clamped;
        d = d_new;
        delta = delta_from_d(&d)?;
        let re = predict_random_effects(obs, &resid, &delta)?;
        sigma2 = update_sigma2(&re.augmented_rss, n_obs, pen, opts.sigma2_rule);
        if !(sigma2 > 0.0) {
            return Err(Error::Singular("residual variance is zero; the data are fitted exactly".into()));
        }
        let ll = penalized_loglik(&re, &delta, sigma2, pen, n_obs);
        trace_ll.push(ll);

        let mut params = fe.beta.clone();
        params.push(sigma2);
        params.extend((0..p).map(|j| sigma2 * d[(j, j)]));
        if let Some((prev_ll, prev_params)) = &prev {
            let ll_ok = rel_change(ll, *prev_ll) < opts.tol;
            let par_ok = params
                .iter()
                .zip(prev_params)
                .all(|(a, b)| rel_change(*a, *b) < opts.tol);
            if ll_ok && par_ok {
                converged = true;
                break;
            }
        }
        prev = Some((ll, params));
    }

    // final fixed-effects solve at the final covariance
    let cov = ErrorCovariance::new(obs, &d)?;
    let fe = solver.solve(&cov)?;
    let resid = residuals(setup, &fe);
    let pen = solver.penalty.quadratic_form(&fe.f);
    let re = predict_random_effects(obs, &resid, &delta)?;
    sigma2 = update_sigma2(&re.augmented_rss, n_obs, pen, opts.sigma2_rule);

    let (edf, gcv) = if opts.compute_gcv {
        let edf = solver.edf(&fe, opts.trace);
        let whitened: f64 = re.augmented_rss.iter().sum();
        (Some(edf), gcv_from_parts(whitened, edf, n_obs).ok())
    } else {
        (None, None)
    };

    let sigma_b = &d * sigma2;
    Ok(ModelFit {
        beta: fe.beta,
        f_coeffs: fe.f,
        sigma_b: to_rows(&sigma_b),
        sigma2,
        d: to_rows(&d),
        delta: to_rows(&delta),
        b_hat: re.b_hat,
        group_labels: obs.group_labels().to_vec(),
        residual_ss: re.residual_ss,
        lambda_d: solver.penalty.lambda_d(),
        lambda_t: solver.penalty.lambda_t(),
        n_obs,
        n_iter,
        loglik_trace: trace_ll,
        converged,
        boundary,
        edf,
        gcv,
    })
}

/// Result for data the fixed part reproduces exactly: zero residual
/// variance, no random-effect variance and a GCV score of zero.
fn exact_fit(
    solver: &FixedEffectsSolver<'_>,
    opts: &FitOptions,
    fe: FixedEffects,
    re: RandomEffects,
    d: Mat<f64>,
    delta: Mat<f64>,
    n_iter: usize,
) -> ModelFit {
    let n_obs = solver.setup.obs.n_obs();
    let p = d.nrows();
    let (edf, gcv) = if opts.compute_gcv {
        let edf = solver.edf(&fe, opts.trace);
        (Some(edf), gcv_from_parts(0.0, edf, n_obs).ok())
    } else {
        (None, None)
    };
    ModelFit {
        beta: fe.beta,
        f_coeffs: fe.f,
        sigma_b: vec![vec![0.0; p]; p],
        sigma2: 0.0,
        d: to_rows(&d),
        delta: to_rows(&delta),
        b_hat: vec![vec![0.0; p]; re.b_hat.len()],
        group_labels: solver.setup.obs.group_labels().to_vec(),
        residual_ss: re.residual_ss,
        lambda_d: solver.penalty.lambda_d(),
        lambda_t: solver.penalty.lambda_t(),
        n_obs,
        n_iter,
        loglik_trace: Vec::new(),
        converged: true,
        boundary: false,
        edf,
        gcv,
    }
}

/// Convenience wrapper building the setup and running one fit.
#[allow(clippy::too_many_arguments)]
pub fn fpirls_fit(
    obs: &ObservationSet,
    mesh: &TriangularMesh,
    basis: &SplineBasis,
    pde: &PdeCoefficients,
    lambda_d: f64,
    lambda_t: f64,
    opts: &FitOptions,
) -> Result<ModelFit> {
    ModelSetup::from_problem(obs.clone(), mesh, basis, pde, opts.lump_mass)?.fit(lambda_d, lambda_t, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RawRecord;
    use crate::linalg::{col_to_vec, max_abs, spd_inverse};

    fn random_problem(seed: u64, q: usize, p: usize, groups: usize) -> (ObservationSet, TriangularMesh, SplineBasis) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mesh = TriangularMesh::unit_square(2).unwrap();
        let basis = SplineBasis::uniform(4, 1.0).unwrap();
        let locations: Vec<_> = (0..6).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
        let times = vec![0.0, 0.3, 0.55, 0.8, 1.0];
        let mut raw = Vec::new();
        for j in 0..times.len() {
            for i in 0..locations.len() {
                if rng.random::<f64>() < 0.15 {
                    continue;
                }
                let mut z = vec![1.0];
                z.extend((1..p).map(|_| rng.random_range(-1.0..1.0)));
                raw.push(RawRecord {
                    loc: i,
                    time: j,
                    group: format!("g{}", (i + j) % groups),
                    y: rng.random_range(-1.0..1.0),
                    x: (0..q).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    z,
                });
            }
        }
        (ObservationSet::new(locations, times, raw).unwrap(), mesh, basis)
    }

    /// Dense joint normal equations in (β, f).
    fn dense_oracle(setup: &ModelSetup, cov: &ErrorCovariance, pen: &PenaltySystem) -> (Vec<f64>, Vec<f64>) {
        let obs = setup.obs();
        let x = obs.x_matrix();
        let b = setup.basis_matrix().to_dense();
        let sinv = spd_inverse(&cov.dense(), "sigma").unwrap();
        let (q, k) = (x.ncols(), b.ncols());
        let design = Mat::from_fn(obs.n_obs(), q + k, |i, j| if j < q { x[(i, j)] } else { b[(i, j - q)] });
        let mut lhs = design.transpose() * &sinv * &design;
        let n = obs.n_obs() as f64;
        for i in 0..k {
            for j in 0..k {
                lhs[(q + i, q + j)] += n * pen.matrix()[(i, j)];
            }
        }
        let rhs = design.transpose() * &sinv * crate::linalg::col_from(&obs.y());
        let sol = col_to_vec(&lhs.partial_piv_lu().solve(&rhs));
        (sol[..q].to_vec(), sol[q..].to_vec())
    }

    #[test]
    fn fixed_effects_match_dense_oracle() {
        for seed in 0..4 {
            let (obs, mesh, basis) = random_problem(seed, 2, 2, 3);
            let pde = PdeCoefficients::anisotropic(mesh.n_triangles(), 3.0, 0.4).unwrap();
            let setup = ModelSetup::from_problem(obs, &mesh, &basis, &pde, false).unwrap();
            let solver = setup.solver(0.05, 0.02).unwrap();
            let d = from_rows(&[vec![0.8, 0.2], vec![0.2, 0.5]]);
            let cov = ErrorCovariance::new(setup.obs(), &d).unwrap();
            let fe = solver.solve(&cov).unwrap();
            let (beta, f) = dense_oracle(&setup, &cov, solver.penalty());
            for (a, b) in fe.beta.iter().zip(&beta).chain(fe.f.iter().zip(&f)) {
                assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()), "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn exact_linear_response_recovers_beta() {
        let (obs, mesh, basis) = random_problem(3, 2, 1, 2);
        let y: Vec<f64> = obs.records().iter().map(|r| 1.5 * r.x[0] - 0.5 * r.x[1]).collect();
        let obs = obs.with_response(&y).unwrap();
        let pde = PdeCoefficients::isotropic(mesh.n_triangles());
        let setup = ModelSetup::from_problem(obs, &mesh, &basis, &pde, false).unwrap();
        let solver = setup.solver(0.1, 0.1).unwrap();
        let cov = ErrorCovariance::new(setup.obs(), &Mat::zeros(1, 1)).unwrap();
        let fe = solver.solve(&cov).unwrap();
        assert!((fe.beta[0] - 1.5).abs() < 1e-8 && (fe.beta[1] + 0.5).abs() < 1e-8);
        assert!(crate::linalg::norm2(&fe.f) < 1e-6);
    }

    #[test]
    fn constant_field_is_unpenalized() {
        let (obs, mesh, basis) = random_problem(5, 0, 1, 2);
        let obs = obs.with_response(&vec![2.0; obs.n_obs()]).unwrap();
        let pde = PdeCoefficients::isotropic(mesh.n_triangles());
        let setup = ModelSetup::from_problem(obs, &mesh, &basis, &pde, false).unwrap();
        let solver = setup.solver(1.0, 1.0).unwrap();
        let cov = ErrorCovariance::new(setup.obs(), &from_rows(&[vec![0.3]])).unwrap();
        let fe = solver.solve(&cov).unwrap();
        assert!(fe.f.iter().all(|v| (v - 2.0).abs() < 1e-8));
    }

    #[test]
    fn edf_matches_brute_force_trace() {
        let (obs, mesh, basis) = random_problem(9, 1, 1, 3);
        let pde = PdeCoefficients::isotropic(mesh.n_triangles());
        let setup = ModelSetup::from_problem(obs, &mesh, &basis, &pde, false).unwrap();
        let solver = setup.solver(0.01, 0.01).unwrap();
        let cov = ErrorCovariance::new(setup.obs(), &from_rows(&[vec![0.6]])).unwrap();
        let fe = solver.solve(&cov).unwrap();
        let edf = solver.edf(&fe, TraceMethod::Exact);
        let n = setup.obs().n_obs();
        let x = setup.obs().x_matrix();
        let mut brute = 0.0;
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            let sol = solver.solve_for(&cov, &e).unwrap();
            let fitted = setup.basis_matrix().mul_vec(&sol.f)[i] + (0..x.ncols()).map(|j| x[(i, j)] * sol.beta[j]).sum::<f64>();
            brute += fitted;
        }
        assert!((edf - brute).abs() < 1e-8, "{edf} vs {brute}");

        let hutch = solver.edf(&fe, TraceMethod::Hutchinson { probes: 1, seed: 1 });
        assert!(hutch.is_finite());
    }

    #[test]
    fn system_inverse_matches_dense() {
        let (obs, mesh, basis) = random_problem(2, 1, 2, 2);
        let pde = PdeCoefficients::isotropic(mesh.n_triangles());
        let setup = ModelSetup::from_problem(obs, &mesh, &basis, &pde, false).unwrap();
        let solver = setup.solver(0.02, 0.05).unwrap();
        let d = from_rows(&[vec![0.4, -0.1], vec![-0.1, 0.3]]);
        let cov = ErrorCovariance::new(setup.obs(), &d).unwrap();
        let fe = solver.solve(&cov).unwrap();
        let b = setup.basis_matrix().to_dense();
        let q = fe.projector().dense_q(&cov);
        let m = b.transpose() * &q * &b;
        assert!(max_abs(&(solver.weighted_gram(&cov, &fe) - &m)) < 1e-10);
        let a = &m + solver.penalty().matrix() * setup.obs().n_obs() as f64;
        let want = spd_inverse(&a, "a").unwrap();
        let got = solver.system_inverse(&fe);
        assert!(max_abs(&(got - &want)) <= 1e-8 * max_abs(&want));
    }

    #[test]
    fn random_effects_solve_augmented_least_squares() {
        let (obs, _, _) = random_problem(4, 0, 2, 3);
        let resid: Vec<f64> = (0..obs.n_obs()).map(|i| (i as f64 * 0.3).sin()).collect();
        let delta = from_rows(&[vec![1.2, 0.3], vec![0.0, 0.7]]);
        let re = predict_random_effects(&obs, &resid, &delta).unwrap();
        let d = d_from_delta(&delta).unwrap();
        let cov = ErrorCovariance::new(&obs, &d).unwrap();
        let total: f64 = re.augmented_rss.iter().sum();
        assert!((total - cov.quad_inv(&resid)).abs() < 1e-10);
        for k in 0..obs.n_groups() {
            let z = obs.z_block(k);
            let zt = Mat::from_fn(z.nrows() + 2, 2, |i, j| if i < z.nrows() { z[(i, j)] } else { delta[(i - z.nrows(), j)] });
            let mut target = resid[obs.group_range(k)].to_vec();
            target.extend([0.0, 0.0]);
            let normal = spd_inverse(&(zt.transpose() * &zt), "n").unwrap();
            let b = col_to_vec(&(normal * zt.transpose() * crate::linalg::col_from(&target)));
            for j in 0..2 {
                assert!((re.b_hat[k][j] - b[j]).abs() < 1e-10);
            }
        }
        let zero = predict_random_effects(&obs, &vec![0.0; obs.n_obs()], &delta).unwrap();
        assert!(zero.b_hat.iter().flatten().all(|&v| v == 0.0));
        let huge = predict_random_effects(&obs, &resid, &(delta * 1e6)).unwrap();
        assert!(huge.b_hat.iter().flatten().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn em_step_identity_cases() {
        let id = Mat::<f64>::identity(2, 2);
        let d = em_step(&[vec![0.0, 0.0]], std::slice::from_ref(&id), 1.0).unwrap();
        assert!(max_abs(&(d - &id)) < 1e-15);
        let d = em_step(&vec![vec![0.0, 0.0]; 4], &vec![id.clone(); 4], 2.0).unwrap();
        assert!(max_abs(&(d - &id)) < 1e-14);
        // D̂ = (1/g) Σ (b bᵀ/σ² + R⁻¹R⁻ᵀ)
        let r = from_rows(&[vec![2.0, 0.5], vec![0.0, 1.0]]);
        let b = vec![0.3, -0.6];
        let d = em_step(std::slice::from_ref(&b), std::slice::from_ref(&r), 0.5).unwrap();
        let r_inv = upper_inverse(&r, "r").unwrap();
        let want = &r_inv * r_inv.transpose() + Mat::from_fn(2, 2, |i, j| b[i] * b[j] / 0.25);
        assert!(max_abs(&(d - want)) < 1e-14);
    }

    #[test]
    fn init_delta_formula() {
        let locations: Vec<_> = (0..10).map(|i| [i as f64, 0.0]).collect();
        let raw: Vec<_> = (0..3)
            .flat_map(|k| {
                (0..10).map(move |i| RawRecord {
                    loc: i,
                    time: k,
                    group: format!("{k}"),
                    y: 0.0,
                    x: vec![],
                    z: vec![1.0, i as f64],
                })
            })
            .collect();
        let obs = ObservationSet::new(locations, vec![0.0, 1.0, 2.0], raw).unwrap();
        let delta = init_delta(&obs, 0.375).unwrap();
        assert!((delta[(0, 0)] - 0.375 * 10f64.sqrt()).abs() < 1e-14);
        let ss: f64 = (0..10).map(|i| (i * i) as f64).sum();
        assert!((delta[(1, 1)] - 0.375 * ss.sqrt()).abs() < 1e-12);
        assert_eq!(delta[(0, 1)], 0.0);
        assert!(init_delta(&obs, 0.0).is_err());
    }

    #[test]
    fn delta_round_trip() {
        let d = from_rows(&[vec![0.9, 0.3], vec![0.3, 0.4]]);
        let delta = delta_from_d(&d).unwrap();
        assert_eq!(delta[(1, 0)], 0.0);
        let back = d_from_delta(&delta).unwrap();
        assert!(max_abs(&(back - &d)) < 1e-12);
        let d_inv = spd_inverse(&d, "d").unwrap();
        assert!(max_abs(&(delta.transpose() * &delta - d_inv)) < 1e-10);
    }

    #[test]
    fn sigma2_rules() {
        assert_eq!(update_sigma2(&[30.0, 20.0], 50, 0.0, Sigma2Rule::AugmentedResidual), 1.0);
        assert_eq!(update_sigma2(&[30.0, 20.0], 50, 0.1, Sigma2Rule::Penalized), 1.1);
        assert_eq!(update_sigma2(&[0.0], 10, 0.0, Sigma2Rule::Penalized), 0.0);
    }

    #[test]
    fn constrain_clamps_and_diagonalizes() {
        let d = from_rows(&[vec![1e-12, 0.1], vec![0.1, 2.0]]);
        let (c, hit) = constrain_d(&d, CovarianceStructure::Full, 1e-10);
        assert!(hit);
        assert_eq!(to_rows(&c), vec![vec![1e-10, 0.0], vec![0.0, 2.0]]);
        let (c, hit) = constrain_d(&from_rows(&[vec![1.0, 0.4], vec![0.4, 2.0]]), CovarianceStructure::Diagonal, 1e-10);
        assert!(!hit);
        assert_eq!(c[(0, 1)], 0.0);
    }

    #[test]
    fn likelihood_trace_is_monotone() {
        let (obs, mesh, basis) = random_problem(12, 1, 1, 3);
        let pde = PdeCoefficients::isotropic(mesh.n_triangles());
        let fit = fpirls_fit(&obs, &mesh, &basis, &pde, 0.01, 0.01, &FitOptions::default()).unwrap();
        for w in fit.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{:?}", fit.loglik_trace);
        }
        assert_eq!(fit.loglik_trace.len(), fit.n_iter);
        let sb = fit.sigma_b_matrix();
        assert!((sb[(0, 0)] - fit.sigma2 * fit.d[0][0]).abs() < 1e-14);
    }

    #[test]
    fn loglik_matches_dense_evaluation() {
        let (obs, _, _) = random_problem(6, 0, 2, 2);
        let resid: Vec<f64> = (0..obs.n_obs()).map(|i| (i as f64).cos()).collect();
        let delta = from_rows(&[vec![1.1, -0.2], vec![0.0, 0.9]]);
        let re = predict_random_effects(&obs, &resid, &delta).unwrap();
        let cov = ErrorCovariance::new(&obs, &d_from_delta(&delta).unwrap()).unwrap();
        let n = obs.n_obs() as f64;
        let (s2, pen) = (0.7, 0.05);
        let want = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * f64::ln(s2) - cov.logdet() / (2.0 * n)
            - (cov.quad_inv(&resid) / n + pen) / (2.0 * s2);
        let got = penalized_loglik(&re, &delta, s2, pen, obs.n_obs());
        assert!((got - want).abs() < 1e-12);
    }
}
