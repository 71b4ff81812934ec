//! Discrete space-time roughness penalty.
//!
//! Coefficient vectors are laid out with space running fastest: entry
//! `l + N * r` multiplies `ψ_l(p) φ_r(t)`.

use crate::error::{Error, Result};
use crate::fem::{assemble_mass, assemble_operator, PdeCoefficients};
use crate::linalg::{cholesky, kron, symmetrize};
use crate::mesh::TriangularMesh;
use crate::sparse::CsrMatrix;
use crate::splines::SplineBasis;
use faer::linalg::solvers::{Llt, Solve};
use faer::Mat;
use std::sync::Arc;

/// The λ-independent parts of the penalty, shared by every grid point.
#[derive(Debug, Clone)]
pub struct PenaltyFactors {
    r0: CsrMatrix,
    r1: CsrMatrix,
    rt: Mat<f64>,
    pt: Mat<f64>,
    r0_llt: Option<Llt<f64>>,
    lumped_mass: Option<Vec<f64>>,
    /// `R1ᵀ R0⁻¹ R1`
    spatial: Mat<f64>,
    /// `R_T ⊗ spatial`
    pd: Mat<f64>,
    /// `P_T ⊗ R0`
    pt_r0: Mat<f64>,
}

impl PenaltyFactors {
    /// With `lump_mass`, `R0⁻¹` inside the misfit term is replaced by the
    /// inverse of the row-sum diagonal.
    pub fn new(r0: CsrMatrix, r1: CsrMatrix, rt: Mat<f64>, pt: Mat<f64>, lump_mass: bool) -> Result<Self> {
        let n = r0.nrows();
        let m = rt.nrows();
        if r0.ncols() != n || r1.nrows() != n || r1.ncols() != n {
            return Err(Error::Dimension(format!(
                "R0 is {}x{}, R1 is {}x{}",
                n,
                r0.ncols(),
                r1.nrows(),
                r1.ncols()
            )));
        }
        if rt.ncols() != m || pt.nrows() != m || pt.ncols() != m {
            return Err(Error::Dimension(format!(
                "R_T is {}x{}, P_T is {}x{}",
                m,
                rt.ncols(),
                pt.nrows(),
                pt.ncols()
            )));
        }

        let r1_dense = r1.to_dense();
        let (r0_llt, lumped_mass, r0_inv_r1) = if lump_mass {
            let diag = r0.row_sums();
            if diag.iter().any(|&d| d <= 0.0) {
                return Err(Error::Singular("lumped mass has a nonpositive entry".into()));
            }
            let solved = Mat::from_fn(n, n, |i, j| r1_dense[(i, j)] / diag[i]);
            (None, Some(diag), solved)
        } else {
            let llt = cholesky(&r0.to_dense(), "mass matrix R0")?;
            let solved = llt.solve(&r1_dense);
            (Some(llt), None, solved)
        };
        let mut spatial = r1.tr_mul_dense(&r0_inv_r1);
        symmetrize(&mut spatial);
        let pd = kron(&rt, &spatial);
        let pt_r0 = kron(&pt, &r0.to_dense());
        Ok(Self {
            r0,
            r1,
            rt,
            pt,
            r0_llt,
            lumped_mass,
            spatial,
            pd,
            pt_r0,
        })
    }

    pub fn from_problem(
        mesh: &TriangularMesh,
        basis: &SplineBasis,
        pde: &PdeCoefficients,
        lump_mass: bool,
    ) -> Result<Self> {
        let r0 = assemble_mass(mesh);
        let r1 = assemble_operator(mesh, pde)?;
        Self::new(r0, r1, basis.mass_matrix(), basis.curvature_penalty(), lump_mass)
    }

    pub fn n_space(&self) -> usize {
        self.r0.nrows()
    }

    pub fn n_time(&self) -> usize {
        self.rt.nrows()
    }

    pub fn dim(&self) -> usize {
        self.n_space() * self.n_time()
    }

    pub fn r0(&self) -> &CsrMatrix {
        &self.r0
    }

    pub fn r1(&self) -> &CsrMatrix {
        &self.r1
    }

    pub fn rt(&self) -> &Mat<f64> {
        &self.rt
    }

    pub fn pt(&self) -> &Mat<f64> {
        &self.pt
    }

    /// `R1ᵀ R0⁻¹ R1`
    pub fn spatial_penalty(&self) -> &Mat<f64> {
        &self.spatial
    }

    /// `R_T ⊗ R1ᵀR0⁻¹R1`
    pub fn misfit_part(&self) -> &Mat<f64> {
        &self.pd
    }

    /// `P_T ⊗ R0`
    pub fn curvature_part(&self) -> &Mat<f64> {
        &self.pt_r0
    }

    fn mass_solve(&self, v: &[f64]) -> Vec<f64> {
        match (&self.r0_llt, &self.lumped_mass) {
            (Some(llt), _) => crate::linalg::solve_vec(llt, v),
            (None, Some(d)) => v.iter().zip(d).map(|(x, di)| x / di).collect(),
            (None, None) => unreachable!("penalty factors always hold a mass solver"),
        }
    }

    /// Mass matrix used inside the misfit term (lumped or consistent).
    fn misfit_mass_apply(&self, v: &[f64]) -> Vec<f64> {
        match &self.lumped_mass {
            Some(d) => v.iter().zip(d).map(|(x, di)| x * di).collect(),
            None => self.r0.mul_vec(v),
        }
    }
}

/// The assembled penalty `P = λ_D (R_T ⊗ R1ᵀR0⁻¹R1) + λ_T (P_T ⊗ R0)`.
#[derive(Debug, Clone)]
pub struct PenaltySystem {
    factors: Arc<PenaltyFactors>,
    lambda_d: f64,
    lambda_t: f64,
    p: Mat<f64>,
}

impl PenaltySystem {
    pub fn new(factors: Arc<PenaltyFactors>, lambda_d: f64, lambda_t: f64) -> Result<Self> {
        for (name, v) in [("lambda_D", lambda_d), ("lambda_T", lambda_t)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} = {v} must be finite and nonnegative")));
            }
        }
        let (pd, pt) = (&factors.pd, &factors.pt_r0);
        let k = factors.dim();
        let p = Mat::from_fn(k, k, |i, j| lambda_d * pd[(i, j)] + lambda_t * pt[(i, j)]);
        Ok(Self {
            factors,
            lambda_d,
            lambda_t,
            p,
        })
    }

    pub fn assemble(
        r0: CsrMatrix,
        r1: CsrMatrix,
        rt: Mat<f64>,
        pt: Mat<f64>,
        lambda_d: f64,
        lambda_t: f64,
    ) -> Result<Self> {
        Self::new(Arc::new(PenaltyFactors::new(r0, r1, rt, pt, false)?), lambda_d, lambda_t)
    }

    pub fn factors(&self) -> &Arc<PenaltyFactors> {
        &self.factors
    }

    pub fn lambda_d(&self) -> f64 {
        self.lambda_d
    }

    pub fn lambda_t(&self) -> f64 {
        self.lambda_t
    }

    pub fn dim(&self) -> usize {
        self.factors.dim()
    }

    pub fn matrix(&self) -> &Mat<f64> {
        &self.p
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        assert_eq!(f.len(), self.dim());
        let k = self.dim();
        (0..k)
            .map(|i| (0..k).map(|j| self.p[(i, j)] * f[j]).sum())
            .collect()
    }

    /// `fᵀ P f`
    pub fn quadratic_form(&self, f: &[f64]) -> f64 {
        crate::linalg::dot(f, &self.apply(f))
    }

    /// The auxiliary misfit field `δ` with `δ_r = −R0⁻¹ R1 f_r` on every
    /// temporal block `r`.
    pub fn misfit_block_residual(&self, f: &[f64]) -> Vec<f64> {
        let n = self.factors.n_space();
        assert_eq!(f.len(), self.dim());
        let mut out = Vec::with_capacity(f.len());
        for block in f.chunks(n) {
            let r1f = self.factors.r1.mul_vec(block);
            out.extend(self.factors.mass_solve(&r1f).into_iter().map(|v| -v));
        }
        out
    }

    /// `fᵀPf` evaluated through the misfit field; agrees with
    /// [`quadratic_form`](Self::quadratic_form) up to rounding.
    pub fn quadratic_form_via_misfit(&self, f: &[f64]) -> f64 {
        let n = self.factors.n_space();
        let m = self.factors.n_time();
        let delta = self.misfit_block_residual(f);
        let mass_delta: Vec<Vec<f64>> = delta.chunks(n).map(|b| self.factors.misfit_mass_apply(b)).collect();
        let mass_f: Vec<Vec<f64>> = f.chunks(n).map(|b| self.factors.r0.mul_vec(b)).collect();
        let (rt, pt) = (&self.factors.rt, &self.factors.pt);
        let (mut misfit, mut curvature) = (0.0, 0.0);
        for r in 0..m {
            for s in 0..m {
                let dd = crate::linalg::dot(&delta[r * n..(r + 1) * n], &mass_delta[s]);
                let ff = crate::linalg::dot(&f[r * n..(r + 1) * n], &mass_f[s]);
                misfit += rt[(r, s)] * dd;
                curvature += pt[(r, s)] * ff;
            }
        }
        self.lambda_d * misfit + self.lambda_t * curvature
    }
}
