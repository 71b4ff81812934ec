//! Block-diagonal error covariance `Σₑ = blockdiag(Z_k D Z_kᵀ + I)` with
//! `D = Σ_b / σ²`, applied through the Woodbury identity.
//!
//! Each block inverse is `I − Z_k W_k Z_kᵀ` with `W_k = D (I + Z_kᵀZ_k D)⁻¹`.
//! That form stays valid when `D` is singular, which is where the EM
//! iterates go when a variance component collapses.

use crate::data::ObservationSet;
use crate::error::{Error, Result};
use crate::linalg::{all_finite, cholesky, symmetrize};
use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::Mat;

#[derive(Debug, Clone)]
struct Block {
    start: usize,
    z: Mat<f64>,
    w: Mat<f64>,
    logdet: f64,
}

#[derive(Debug, Clone)]
pub struct ErrorCovariance {
    d: Mat<f64>,
    blocks: Vec<Block>,
    n_obs: usize,
}

impl ErrorCovariance {
    /// Covariance for the relative precision matrix `d = Σ_b / σ²`.
    pub fn new(obs: &ObservationSet, d: &Mat<f64>) -> Result<Self> {
        let p = obs.n_random();
        if d.nrows() != p || d.ncols() != p {
            return Err(Error::Dimension(format!("D is {}x{}, expected {p}x{p}", d.nrows(), d.ncols())));
        }
        let mut blocks = Vec::with_capacity(obs.n_groups());
        for k in 0..obs.n_groups() {
            let z = obs.z_block(k);
            let ztz = z.transpose() * &z;
            // I + D ZᵀZ is similar to I + D^½ ZᵀZ D^½, so its determinant
            // is positive and equals det(I + Z D Zᵀ).
            let inner = Mat::<f64>::identity(p, p) + d * &ztz;
            let lu = inner.partial_piv_lu();
            let mut w = lu.solve(d);
            symmetrize(&mut w);
            let u = lu.U();
            let logdet = (0..p).map(|i| u[(i, i)].abs().ln()).sum::<f64>();
            if !logdet.is_finite() || !all_finite(&w) {
                return Err(Error::Singular(format!("inner Woodbury matrix of group {k}")));
            }
            blocks.push(Block {
                start: obs.group_range(k).start,
                z,
                w,
                logdet,
            });
        }
        Ok(Self {
            d: d.clone(),
            blocks,
            n_obs: obs.n_obs(),
        })
    }

    /// Covariance from `Σ_b` and `σ²` directly.
    pub fn from_sigma(obs: &ObservationSet, sigma_b: &Mat<f64>, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma^2 = {sigma2} must be positive")));
        }
        Self::new(obs, &(sigma_b * (1.0 / sigma2)))
    }

    pub fn d(&self) -> &Mat<f64> {
        &self.d
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_groups(&self) -> usize {
        self.blocks.len()
    }

    /// `Z_k` of group `k`.
    pub fn z(&self, k: usize) -> &Mat<f64> {
        &self.blocks[k].z
    }

    /// `W_k = (D⁻¹ + Z_kᵀZ_k)⁻¹`, written so that singular `D` is allowed.
    pub fn w(&self, k: usize) -> &Mat<f64> {
        &self.blocks[k].w
    }

    pub fn group_start(&self, k: usize) -> usize {
        self.blocks[k].start
    }

    /// `log det Σₑ`.
    pub fn logdet(&self) -> f64 {
        self.blocks.iter().map(|b| b.logdet).sum()
    }

    /// `Σₑ⁻¹ v`.
    pub fn apply_inv(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n_obs);
        let mut out = v.to_vec();
        for b in &self.blocks {
            let nk = b.z.nrows();
            let p = b.z.ncols();
            let seg = &v[b.start..b.start + nk];
            let zt_v: Vec<f64> = (0..p).map(|j| (0..nk).map(|i| b.z[(i, j)] * seg[i]).sum()).collect();
            let wz: Vec<f64> = (0..p).map(|i| (0..p).map(|j| b.w[(i, j)] * zt_v[j]).sum()).collect();
            for i in 0..nk {
                let corr: f64 = (0..p).map(|j| b.z[(i, j)] * wz[j]).sum();
                out[b.start + i] -= corr;
            }
        }
        out
    }

    /// `Σₑ⁻¹ M` column by column.
    pub fn apply_inv_mat(&self, m: &Mat<f64>) -> Mat<f64> {
        let mut out = Mat::zeros(m.nrows(), m.ncols());
        for c in 0..m.ncols() {
            let col: Vec<f64> = (0..m.nrows()).map(|i| m[(i, c)]).collect();
            for (i, v) in self.apply_inv(&col).into_iter().enumerate() {
                out[(i, c)] = v;
            }
        }
        out
    }

    /// `vᵀ Σₑ⁻¹ v`.
    pub fn quad_inv(&self, v: &[f64]) -> f64 {
        crate::linalg::dot(v, &self.apply_inv(v))
    }

    /// Dense `Σₑ`; meant for small problems and tests.
    pub fn dense(&self) -> Mat<f64> {
        let mut out = Mat::identity(self.n_obs, self.n_obs);
        for b in &self.blocks {
            let block = &b.z * &self.d * b.z.transpose();
            for i in 0..b.z.nrows() {
                for j in 0..b.z.nrows() {
                    out[(b.start + i, b.start + j)] += block[(i, j)];
                }
            }
        }
        out
    }

    /// Dense `Σₑ⁻¹` from the Woodbury blocks.
    pub fn dense_inverse(&self) -> Mat<f64> {
        let mut out = Mat::identity(self.n_obs, self.n_obs);
        for b in &self.blocks {
            let block = &b.z * &b.w * b.z.transpose();
            for i in 0..b.z.nrows() {
                for j in 0..b.z.nrows() {
                    out[(b.start + i, b.start + j)] -= block[(i, j)];
                }
            }
        }
        out
    }
}

/// Generalized least-squares projections for a fixed-effects design:
/// `H = X G⁻¹ XᵀΣₑ⁻¹` and `Q = Σₑ⁻¹ (I − H)` with `G = XᵀΣₑ⁻¹X`.
///
/// With no covariates `H = 0` and `Q = Σₑ⁻¹`.
#[derive(Debug, Clone)]
pub struct GlsProjector {
    x: Mat<f64>,
    sinv_x: Mat<f64>,
    g_inv: Mat<f64>,
}

impl GlsProjector {
    pub fn new(cov: &ErrorCovariance, x: &Mat<f64>) -> Result<Self> {
        if x.nrows() != cov.n_obs() {
            return Err(Error::Dimension(format!("X has {} rows for {} records", x.nrows(), cov.n_obs())));
        }
        let sinv_x = cov.apply_inv_mat(x);
        let q = x.ncols();
        let g_inv = if q == 0 {
            Mat::zeros(0, 0)
        } else {
            let mut g = x.transpose() * &sinv_x;
            symmetrize(&mut g);
            let llt = cholesky(&g, "X^T Sigma_e^-1 X")
                .map_err(|_| Error::RankDeficientDesign { rank: q.saturating_sub(1), q })?;
            let mut inv = llt.inverse();
            symmetrize(&mut inv);
            inv
        };
        Ok(Self {
            x: x.clone(),
            sinv_x,
            g_inv,
        })
    }

    pub fn n_fixed(&self) -> usize {
        self.x.ncols()
    }

    /// `Σₑ⁻¹ X`
    pub fn sinv_x(&self) -> &Mat<f64> {
        &self.sinv_x
    }

    /// `(XᵀΣₑ⁻¹X)⁻¹`
    pub fn g_inv(&self) -> &Mat<f64> {
        &self.g_inv
    }

    /// `G⁻¹ XᵀΣₑ⁻¹ v`, the GLS coefficient for response `v`.
    pub fn gls_coefficients(&self, v: &[f64]) -> Vec<f64> {
        let q = self.n_fixed();
        let xs: Vec<f64> = (0..q).map(|j| (0..v.len()).map(|i| self.sinv_x[(i, j)] * v[i]).sum()).collect();
        (0..q).map(|i| (0..q).map(|j| self.g_inv[(i, j)] * xs[j]).sum()).collect()
    }

    pub fn apply_h(&self, v: &[f64]) -> Vec<f64> {
        let beta = self.gls_coefficients(v);
        (0..v.len())
            .map(|i| (0..beta.len()).map(|j| self.x[(i, j)] * beta[j]).sum())
            .collect()
    }

    pub fn apply_q(&self, cov: &ErrorCovariance, v: &[f64]) -> Vec<f64> {
        let beta = self.gls_coefficients(v);
        let mut out = cov.apply_inv(v);
        for (i, o) in out.iter_mut().enumerate() {
            *o -= (0..beta.len()).map(|j| self.sinv_x[(i, j)] * beta[j]).sum::<f64>();
        }
        out
    }

    pub fn dense_h(&self) -> Mat<f64> {
        if self.n_fixed() == 0 {
            return Mat::zeros(self.x.nrows(), self.x.nrows());
        }
        &self.x * &self.g_inv * self.sinv_x.transpose()
    }

    pub fn dense_q(&self, cov: &ErrorCovariance) -> Mat<f64> {
        let mut q = cov.dense_inverse();
        if self.n_fixed() > 0 {
            q -= &self.sinv_x * &self.g_inv * self.sinv_x.transpose();
        }
        q
    }
}
