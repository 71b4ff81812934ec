//! Clamped cubic B-splines on `[0, T]`.

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use faer::Mat;
use serde::{Deserialize, Serialize};

pub const DEGREE: usize = 3;

// Gauss-Legendre nodes and weights on [-1, 1].
const GAUSS2: [(f64, f64); 2] = [(-0.577_350_269_189_625_8, 1.0), (0.577_350_269_189_625_8, 1.0)];
const GAUSS4: [(f64, f64); 4] = [
    (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
    (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    knots: Vec<f64>,
}

impl SplineBasis {
    /// Validates a clamped knot vector on `[knots[0] = 0, T]`.
    pub fn new(knots: Vec<f64>) -> Result<Self> {
        let p = DEGREE;
        if knots.len() < 2 * (p + 1) {
            return Err(Error::InvalidBasis(format!(
                "need at least {} knots, got {}",
                2 * (p + 1),
                knots.len()
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidBasis("knots must be finite and nondecreasing".into()));
        }
        let (t0, t_end) = (knots[0], knots[knots.len() - 1]);
        if t0 != 0.0 || t_end <= 0.0 {
            return Err(Error::InvalidBasis("knots must span [0, T] with T > 0".into()));
        }
        let n = knots.len();
        if knots[..=p].iter().any(|&k| k != t0) || knots[n - p - 1..].iter().any(|&k| k != t_end) {
            return Err(Error::InvalidBasis("end knots must be repeated degree+1 times".into()));
        }
        if knots[p + 1..n - p - 1].iter().any(|&k| k <= t0 || k >= t_end) {
            return Err(Error::InvalidBasis("interior knots must lie strictly inside (0, T)".into()));
        }
        Ok(Self { knots })
    }

    /// `n_basis` functions with equally spaced interior knots.
    pub fn uniform(n_basis: usize, t_end: f64) -> Result<Self> {
        if n_basis < DEGREE + 1 {
            return Err(Error::InvalidBasis(format!("need at least {} basis functions", DEGREE + 1)));
        }
        if !(t_end.is_finite() && t_end > 0.0) {
            return Err(Error::InvalidBasis(format!("T = {t_end} must be positive")));
        }
        let n_spans = n_basis - DEGREE;
        let mut knots = vec![0.0; DEGREE + 1];
        knots.extend((1..n_spans).map(|k| t_end * k as f64 / n_spans as f64));
        knots.extend(std::iter::repeat_n(t_end, DEGREE + 1));
        Self::new(knots)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn n_basis(&self) -> usize {
        self.knots.len() - DEGREE - 1
    }

    pub fn t_end(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    /// Greville abscissae; coefficients sampled from a linear function at
    /// these points reproduce it exactly.
    pub fn greville(&self) -> Vec<f64> {
        (0..self.n_basis())
            .map(|i| self.knots[i + 1..=i + DEGREE].iter().sum::<f64>() / DEGREE as f64)
            .collect()
    }

    /// Index `s` of the knot span `[knots[s], knots[s+1])` containing `t`.
    fn span(&self, t: f64) -> usize {
        let last = self.n_basis() - 1;
        if t >= self.knots[last + 1] {
            return last;
        }
        // upper_bound over knots in [DEGREE, last + 1]
        let slice = &self.knots[DEGREE..=last + 1];
        let pos = slice.partition_point(|&k| k <= t);
        (DEGREE + pos - 1).min(last)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= 0.0 && t <= self.t_end()) {
            return Err(Error::TimeOutOfRange { time: t, t_end: self.t_end() });
        }
        Ok(())
    }

    /// Values and first `n_deriv` derivatives of the `DEGREE + 1` nonzero
    /// functions at `t`; returns the span index and `ders[k][j]` for basis
    /// `span - DEGREE + j`.
    pub fn local_derivatives(&self, t: f64, n_deriv: usize) -> (usize, Vec<[f64; DEGREE + 1]>) {
        let p = DEGREE;
        let s = self.span(t);
        let u = &self.knots;
        let mut ndu = [[0.0f64; DEGREE + 1]; DEGREE + 1];
        let mut left = [0.0; DEGREE + 1];
        let mut right = [0.0; DEGREE + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[s + 1 - j];
            right[j] = u[s + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let mut ders = vec![[0.0; DEGREE + 1]; n_deriv + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let mut a = [[0.0f64; DEGREE + 1]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0] = [0.0; DEGREE + 1];
            a[0][0] = 1.0;
            for k in 1..=n_deriv.min(p) {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if (r as isize - 1) <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = p as f64;
        for k in 1..=n_deriv.min(p) {
            for v in ders[k].iter_mut() {
                *v *= factor;
            }
            factor *= (p - k) as f64;
        }
        (s, ders)
    }

    /// All basis values at `t` as a dense row.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        self.check_time(t)?;
        let (s, ders) = self.local_derivatives(t, 0);
        let mut row = vec![0.0; self.n_basis()];
        for j in 0..=DEGREE {
            row[s - DEGREE + j] = ders[0][j];
        }
        Ok(row)
    }

    /// Φ with `Φ[j][r] = φ_r(t_j)`.
    pub fn eval_matrix(&self, times: &[f64]) -> Result<CsrMatrix> {
        let mut trip = Vec::with_capacity(times.len() * (DEGREE + 1));
        for (i, &t) in times.iter().enumerate() {
            self.check_time(t)?;
            let (s, ders) = self.local_derivatives(t, 0);
            for j in 0..=DEGREE {
                if ders[0][j] != 0.0 {
                    trip.push((i, s - DEGREE + j, ders[0][j]));
                }
            }
        }
        Ok(CsrMatrix::from_triplets(times.len(), self.n_basis(), &trip))
    }

    /// `∫ φ^(d) φ^(d)ᵀ dt` by Gauss rules applied on every nonempty span.
    fn gram(&self, deriv: usize, rule: &[(f64, f64)]) -> Mat<f64> {
        let m = self.n_basis();
        let mut out = Mat::zeros(m, m);
        for s in DEGREE..m {
            let (a, b) = (self.knots[s], self.knots[s + 1]);
            if b <= a {
                continue;
            }
            let half = 0.5 * (b - a);
            for &(x, w) in rule {
                let t = a + half * (x + 1.0);
                let (span, ders) = self.local_derivatives(t, deriv);
                debug_assert_eq!(span, s);
                let vals = &ders[deriv];
                for i in 0..=DEGREE {
                    for j in 0..=DEGREE {
                        out[(span - DEGREE + i, span - DEGREE + j)] += half * w * vals[i] * vals[j];
                    }
                }
            }
        }
        out
    }

    /// Temporal mass matrix `R_T = ∫ φ φᵀ`.
    pub fn mass_matrix(&self) -> Mat<f64> {
        self.gram(0, &GAUSS4)
    }

    /// Curvature penalty `P_T = ∫ φ'' φ''ᵀ`.
    pub fn curvature_penalty(&self) -> Mat<f64> {
        self.gram(2, &GAUSS2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Cox-de Boor recursion, straight from the definition.
    fn cox_de_boor(knots: &[f64], i: usize, k: usize, t: f64, t_end: f64) -> f64 {
        if k == 0 {
            let (a, b) = (knots[i], knots[i + 1]);
            let inside = (a <= t && t < b) || (t == t_end && b == t_end && a < b);
            return if inside { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = knots[i + k] - knots[i];
        if d1 > 0.0 {
            v += (t - knots[i]) / d1 * cox_de_boor(knots, i, k - 1, t, t_end);
        }
        let d2 = knots[i + k + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + k + 1] - t) / d2 * cox_de_boor(knots, i + 1, k - 1, t, t_end);
        }
        v
    }

    fn nonuniform() -> SplineBasis {
        SplineBasis::new(vec![0.0, 0.0, 0.0, 0.0, 0.13, 0.4, 0.41, 0.77, 1.5, 1.5, 1.5, 1.5]).unwrap()
    }

    #[test]
    fn matches_recursive_definition() {
        for basis in [SplineBasis::uniform(10, 1.0).unwrap(), nonuniform()] {
            let t_end = basis.t_end();
            for k in 0..=60 {
                let t = t_end * k as f64 / 60.0;
                let row = basis.eval(t).unwrap();
                for (r, &v) in row.iter().enumerate() {
                    let oracle = cox_de_boor(basis.knots(), r, DEGREE, t, t_end);
                    assert!((v - oracle).abs() < 1e-13, "t={t} r={r}: {v} vs {oracle}");
                }
            }
        }
    }

    #[test]
    fn partition_of_unity_and_clamped_ends() {
        let b = SplineBasis::uniform(7, 2.0).unwrap();
        assert_eq!(b.n_basis(), 7);
        let phi = b.eval_matrix(&[0.0, 0.3, 1.1, 1.99, 2.0]).unwrap();
        for s in phi.row_sums() {
            assert!((s - 1.0).abs() < 1e-14);
        }
        assert_eq!(b.eval(0.0).unwrap()[0], 1.0);
        assert_eq!(b.eval(2.0).unwrap()[6], 1.0);
        for i in 0..phi.nrows() {
            assert!(phi.row(i).0.len() <= DEGREE + 1);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let b = SplineBasis::uniform(5, 1.0).unwrap();
        assert!(matches!(b.eval(1.2), Err(Error::TimeOutOfRange { .. })));
        assert!(b.eval(-0.1).is_err());
        assert!(SplineBasis::uniform(3, 1.0).is_err());
        assert!(SplineBasis::new(vec![0.0, 0.0, 0.0, 0.5, 1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(SplineBasis::new(vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn second_derivative_matches_finite_differences() {
        let b = nonuniform();
        let h = 1e-4;
        for &t in &[0.05, 0.2, 0.6, 1.0, 1.3] {
            let (s, ders) = b.local_derivatives(t, 2);
            let lo = b.eval(t - h).unwrap();
            let mid = b.eval(t).unwrap();
            let hi = b.eval(t + h).unwrap();
            for j in 0..=DEGREE {
                let r = s - DEGREE + j;
                let fd = (hi[r] - 2.0 * mid[r] + lo[r]) / (h * h);
                assert!((ders[2][j] - fd).abs() < 1e-4 * (1.0 + fd.abs()), "t={t} r={r}");
            }
        }
    }
    /// Derivative of order `d` from the textbook recursion.
    fn recursive_deriv(knots: &[f64], i: usize, k: usize, d: usize, t: f64, t_end: f64) -> f64 {
        if d == 0 {
            return cox_de_boor(knots, i, k, t, t_end);
        }
        let mut v = 0.0;
        let d1 = knots[i + k] - knots[i];
        if d1 > 0.0 {
            v += k as f64 / d1 * recursive_deriv(knots, i, k - 1, d - 1, t, t_end);
        }
        let d2 = knots[i + k + 1] - knots[i + 1];
        if d2 > 0.0 {
            v -= k as f64 / d2 * recursive_deriv(knots, i + 1, k - 1, d - 1, t, t_end);
        }
        v
    }

    /// Gauss-Legendre rule of order `n` by Newton iteration on P_n.
    fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
                let mut dp = 0.0;
                for _ in 0..100 {
                    let (mut p0, mut p1) = (1.0, x);
                    for k in 2..=n {
                        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                        p0 = p1;
                        p1 = p2;
                    }
                    dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                    let step = p1 / dp;
                    x -= step;
                    if step.abs() < 1e-16 {
                        break;
                    }
                }
                (x, 2.0 / ((1.0 - x * x) * dp * dp))
            })
            .collect()
    }

    fn oracle_gram(b: &SplineBasis, d: usize) -> Vec<Vec<f64>> {
        let m = b.n_basis();
        let rule = gauss_legendre(10);
        let mut out = vec![vec![0.0; m]; m];
        let knots = b.knots();
        for s in 0..knots.len() - 1 {
            let (lo, hi) = (knots[s], knots[s + 1]);
            if hi <= lo {
                continue;
            }
            for &(x, w) in &rule {
                let t = lo + 0.5 * (hi - lo) * (x + 1.0);
                let vals: Vec<f64> =
                    (0..m).map(|r| recursive_deriv(knots, r, DEGREE, d, t, b.t_end())).collect();
                for i in 0..m {
                    for j in 0..m {
                        out[i][j] += 0.5 * (hi - lo) * w * vals[i] * vals[j];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn mass_and_penalty_match_high_order_quadrature() {
        for b in [SplineBasis::uniform(10, 1.0).unwrap(), nonuniform()] {
            for (d, got) in [(0, b.mass_matrix()), (2, b.curvature_penalty())] {
                let want = oracle_gram(&b, d);
                let scale = want.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
                for i in 0..b.n_basis() {
                    for j in 0..b.n_basis() {
                        assert!(
                            (got[(i, j)] - want[i][j]).abs() <= 1e-12 * scale.max(1.0),
                            "d={d} ({i},{j}): {} vs {}",
                            got[(i, j)],
                            want[i][j]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn mass_sums_to_interval_length() {
        let b = SplineBasis::uniform(8, 2.5).unwrap();
        let rt = b.mass_matrix();
        let mut total = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                total += rt[(i, j)];
            }
        }
        assert!((total - 2.5).abs() < 1e-13);
    }

    #[test]
    fn curvature_penalty_kills_linear_functions() {
        let b = nonuniform();
        let pt = b.curvature_penalty();
        let g = b.greville();
        let coef: Vec<f64> = g.iter().map(|t| 0.7 - 2.0 * t).collect();
        // the Greville coefficients really do reproduce the line
        let row = b.eval(0.9).unwrap();
        assert!((crate::linalg::dot(&row, &coef) - (0.7 - 1.8)).abs() < 1e-13);
        for i in 0..b.n_basis() {
            let v: f64 = (0..b.n_basis()).map(|j| pt[(i, j)] * coef[j]).sum();
            assert!(v.abs() < 1e-10, "row {i}: {v}");
        }
    }

    #[test]
    fn curvature_penalty_has_rank_m_minus_two() {
        let b = SplineBasis::uniform(9, 1.0).unwrap();
        let pt = b.curvature_penalty();
        let eig = pt.self_adjoint_eigenvalues(faer::Side::Lower).unwrap();
        let top = eig.iter().cloned().fold(0.0, f64::max);
        let positive = eig.iter().filter(|&&e| e > 1e-10 * top).count();
        assert_eq!(positive, 7);
        assert!(eig.iter().all(|&e| e > -1e-10 * top));
    }
}
