//! P1 finite elements: evaluation matrix, mass matrix and the weak form of
//! the diffusion-transport-reaction operator.
//!
//! Coefficients are constant on each triangle. With linear hat functions
//! every element integrand is at most quadratic, so the three-point edge
//! midpoint rule integrates all of them exactly.

use crate::error::{Error, Result};
use crate::mesh::{Point, PointLocator, TriangularMesh};
use crate::sparse::CsrMatrix;
use serde::{Deserialize, Serialize};

/// Barycentric coordinates of the three edge midpoints.
const MIDPOINTS: [[f64; 3]; 3] = [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]];

pub type Tensor2 = [[f64; 2]; 2];

/// Per-triangle coefficients of `-div(K grad f) + xi * gamma . grad f + c f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeCoefficients {
    pub diffusion: Vec<Tensor2>,
    pub advection: Vec<[f64; 2]>,
    pub reaction: Vec<f64>,
    /// Multiplier applied to the advection field.
    pub xi: f64,
}

impl PdeCoefficients {
    /// Laplacian: `K = I`, no transport, no reaction.
    pub fn isotropic(n_triangles: usize) -> Self {
        Self::constant(n_triangles, [[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0], 0.0)
    }

    pub fn constant(n_triangles: usize, k: Tensor2, gamma: [f64; 2], c: f64) -> Self {
        Self {
            diffusion: vec![k; n_triangles],
            advection: vec![gamma; n_triangles],
            reaction: vec![c; n_triangles],
            xi: 1.0,
        }
    }

    /// Unit-determinant diffusion `R(angle) diag(intensity, 1) R(angle)ᵀ / sqrt(intensity)`.
    pub fn anisotropic(n_triangles: usize, intensity: f64, angle: f64) -> Result<Self> {
        Ok(Self::constant(
            n_triangles,
            anisotropic_tensor(intensity, angle)?,
            [0.0, 0.0],
            0.0,
        ))
    }

    /// Isotropic diffusion plus a per-triangle transport field scaled by `xi`.
    pub fn transport(wind: Vec<[f64; 2]>, xi: f64) -> Self {
        let n = wind.len();
        Self {
            diffusion: vec![[[1.0, 0.0], [0.0, 1.0]]; n],
            advection: wind,
            reaction: vec![0.0; n],
            xi,
        }
    }

    pub fn validate(&self, mesh: &TriangularMesh) -> Result<()> {
        let nt = mesh.n_triangles();
        if self.diffusion.len() != nt || self.advection.len() != nt || self.reaction.len() != nt {
            return Err(Error::InvalidCoefficients(format!(
                "expected {nt} per-triangle entries, got K={}, gamma={}, c={}",
                self.diffusion.len(),
                self.advection.len(),
                self.reaction.len()
            )));
        }
        if !(self.xi.is_finite() && self.xi >= 0.0) {
            return Err(Error::InvalidCoefficients(format!("xi = {} must be >= 0", self.xi)));
        }
        for (t, k) in self.diffusion.iter().enumerate() {
            if !is_spd(k) {
                return Err(Error::NonSpdDiffusion(t));
            }
        }
        let finite = self.advection.iter().all(|g| g[0].is_finite() && g[1].is_finite())
            && self.reaction.iter().all(|c| c.is_finite());
        if !finite {
            return Err(Error::InvalidCoefficients("non-finite advection or reaction".into()));
        }
        Ok(())
    }
}

pub fn anisotropic_tensor(intensity: f64, angle: f64) -> Result<Tensor2> {
    if !(intensity.is_finite() && intensity > 0.0 && angle.is_finite()) {
        return Err(Error::InvalidCoefficients(format!(
            "anisotropy intensity {intensity} must be positive"
        )));
    }
    let (s, c) = angle.sin_cos();
    let scale = 1.0 / intensity.sqrt();
    let (a, b) = (intensity * scale, scale);
    Ok([
        [a * c * c + b * s * s, (a - b) * c * s],
        [(a - b) * c * s, a * s * s + b * c * c],
    ])
}

fn is_spd(k: &Tensor2) -> bool {
    let sym = (k[0][1] - k[1][0]).abs() <= 1e-12 * (k[0][0].abs() + k[1][1].abs());
    let det = k[0][0] * k[1][1] - k[0][1] * k[1][0];
    sym && k[0][0] > 0.0 && det > 0.0 && k.iter().flatten().all(|v| v.is_finite())
}

/// Separately assembled pieces of the operator matrix.
#[derive(Debug, Clone)]
pub struct OperatorParts {
    pub diffusion: CsrMatrix,
    /// Transport term before scaling by `xi`.
    pub advection: CsrMatrix,
    pub reaction: CsrMatrix,
}

impl OperatorParts {
    /// `R1 = diffusion + xi * advection + reaction`.
    pub fn combine(&self, xi: f64) -> CsrMatrix {
        self.diffusion
            .add(&self.advection.scaled(xi))
            .add(&self.reaction)
    }
}

/// Mass matrix `R0[l][r] = ∫ ψ_l ψ_r`.
pub fn assemble_mass(mesh: &TriangularMesh) -> CsrMatrix {
    let mut trip = Vec::with_capacity(9 * mesh.n_triangles());
    for t in 0..mesh.n_triangles() {
        let tri = mesh.triangles()[t];
        let w = mesh.area(t) / 3.0;
        for a in 0..3 {
            for b in 0..3 {
                let v: f64 = MIDPOINTS.iter().map(|m| w * m[a] * m[b]).sum();
                trip.push((tri[a], tri[b], v));
            }
        }
    }
    CsrMatrix::from_triplets(mesh.n_nodes(), mesh.n_nodes(), &trip)
}

/// Assembles the three operator pieces; row `l` is tested against `ψ_l`.
pub fn assemble_operator_parts(mesh: &TriangularMesh, pde: &PdeCoefficients) -> Result<OperatorParts> {
    pde.validate(mesh)?;
    let n = mesh.n_nodes();
    let mut diff = Vec::with_capacity(9 * mesh.n_triangles());
    let mut adv = Vec::with_capacity(9 * mesh.n_triangles());
    let mut reac = Vec::with_capacity(9 * mesh.n_triangles());
    for t in 0..mesh.n_triangles() {
        let tri = mesh.triangles()[t];
        let area = mesh.area(t);
        let grads = mesh.hat_gradients(t);
        let k = pde.diffusion[t];
        let gamma = pde.advection[t];
        let c = pde.reaction[t];
        let w = area / 3.0;
        for a in 0..3 {
            for b in 0..3 {
                let kg = [
                    k[0][0] * grads[b][0] + k[0][1] * grads[b][1],
                    k[1][0] * grads[b][0] + k[1][1] * grads[b][1],
                ];
                let d = area * (grads[a][0] * kg[0] + grads[a][1] * kg[1]);
                let transport = gamma[0] * grads[b][0] + gamma[1] * grads[b][1];
                let (mut av, mut rv) = (0.0, 0.0);
                for m in &MIDPOINTS {
                    av += w * m[a] * transport;
                    rv += w * c * m[a] * m[b];
                }
                diff.push((tri[a], tri[b], d));
                adv.push((tri[a], tri[b], av));
                reac.push((tri[a], tri[b], rv));
            }
        }
    }
    Ok(OperatorParts {
        diffusion: CsrMatrix::from_triplets(n, n, &diff),
        advection: CsrMatrix::from_triplets(n, n, &adv),
        reaction: CsrMatrix::from_triplets(n, n, &reac),
    })
}

/// Operator matrix `R1`.
pub fn assemble_operator(mesh: &TriangularMesh, pde: &PdeCoefficients) -> Result<CsrMatrix> {
    Ok(assemble_operator_parts(mesh, pde)?.combine(pde.xi))
}

/// `Ψ[i][l] = ψ_l(p_i)`; errors when a point is outside the mesh.
pub fn spatial_eval_matrix(mesh: &TriangularMesh, points: &[Point]) -> Result<CsrMatrix> {
    let locator = PointLocator::new(mesh);
    let mut trip = Vec::with_capacity(3 * points.len());
    for (i, &p) in points.iter().enumerate() {
        let loc = locator.locate(p).ok_or(Error::OutsideMesh(p[0], p[1]))?;
        let tri = mesh.triangles()[loc.triangle];
        for a in 0..3 {
            if loc.bary[a] != 0.0 {
                trip.push((i, tri[a], loc.bary[a]));
            }
        }
    }
    Ok(CsrMatrix::from_triplets(points.len(), mesh.n_nodes(), &trip))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> TriangularMesh {
        TriangularMesh::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]]).unwrap()
    }

    fn dense(m: &CsrMatrix) -> Vec<Vec<f64>> {
        crate::linalg::to_rows(&m.to_dense())
    }

    #[test]
    fn reference_mass() {
        let r0 = dense(&assemble_mass(&reference()));
        let expected = [[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((r0[i][j] - expected[i][j] / 24.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn reference_stiffness() {
        let m = reference();
        let r1 = dense(&assemble_operator(&m, &PdeCoefficients::isotropic(1)).unwrap());
        let expected = [[2.0, -1.0, -1.0], [-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((r1[i][j] - expected[i][j] / 2.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mass_sums_to_area() {
        let m = TriangularMesh::unit_square(6).unwrap();
        let total: f64 = assemble_mass(&m).triplets().map(|(_, _, v)| v).sum();
        assert!((total - 1.0).abs() < 1e-13);
    }

    #[test]
    fn laplacian_kills_constants_and_reaction_adds_mass() {
        let m = TriangularMesh::unit_square(4).unwrap();
        let r1 = assemble_operator(&m, &PdeCoefficients::isotropic(m.n_triangles())).unwrap();
        assert!(r1.row_sums().iter().all(|s| s.abs() < 1e-13));

        let with_c = PdeCoefficients::constant(m.n_triangles(), [[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0], 1.0);
        let r1c = assemble_operator(&m, &with_c).unwrap();
        let expected = r1.add(&assemble_mass(&m));
        let diff = r1c.to_dense() - expected.to_dense();
        assert!(crate::linalg::max_abs(&diff) < 1e-15);
    }

    #[test]
    fn advection_rows_sum_to_zero() {
        let m = TriangularMesh::unit_square(3).unwrap();
        let wind: Vec<[f64; 2]> = (0..m.n_triangles()).map(|t| [t as f64 * 0.1, 1.0 - t as f64 * 0.05]).collect();
        let parts = assemble_operator_parts(&m, &PdeCoefficients::transport(wind, 2.0)).unwrap();
        assert!(parts.advection.row_sums().iter().all(|s| s.abs() < 1e-14));
    }

    #[test]
    fn anisotropic_tensor_has_unit_determinant() {
        let k = anisotropic_tensor(8.0, std::f64::consts::FRAC_PI_4).unwrap();
        let det = k[0][0] * k[1][1] - k[0][1] * k[1][0];
        assert!((det - 1.0).abs() < 1e-14);
        // principal direction along the angle carries the larger eigenvalue
        let v = [std::f64::consts::FRAC_1_SQRT_2; 2];
        let kv0 = k[0][0] * v[0] + k[0][1] * v[1];
        assert!((kv0 / v[0] - 8f64.sqrt()).abs() < 1e-13);
    }

    #[test]
    fn non_spd_diffusion_is_rejected() {
        let m = reference();
        let pde = PdeCoefficients::constant(1, [[1.0, 2.0], [2.0, 1.0]], [0.0, 0.0], 0.0);
        assert!(matches!(assemble_operator(&m, &pde), Err(Error::NonSpdDiffusion(0))));
        let wrong_len = PdeCoefficients::isotropic(2);
        assert!(matches!(assemble_operator(&m, &wrong_len), Err(Error::InvalidCoefficients(_))));
    }

    #[test]
    fn eval_matrix_rows() {
        let m = TriangularMesh::unit_square(2).unwrap();
        let pts: Vec<Point> = vec![[0.5, 0.5], [0.3, 0.1], [1.0, 1.0]];
        let psi = spatial_eval_matrix(&m, &pts).unwrap();
        for s in psi.row_sums() {
            assert!((s - 1.0).abs() < 1e-14);
        }
        // node 4 sits at the centre
        assert_eq!(psi.row(0).0, &[4]);
        assert!(spatial_eval_matrix(&m, &[[1.5, 0.0]]).is_err());
    }
}
