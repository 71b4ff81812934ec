//! Synthetic data in the style of the unit-square simulation study, and
//! field error measures.

use crate::data::{ObservationSet, RawRecord};
use crate::error::{Error, Result};
use crate::mesh::{Point, PointLocator, TriangularMesh};
use crate::splines::SplineBasis;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;

const N_BUMPS: usize = 12;
const N_WAVES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub m: usize,
    pub g: usize,
    pub beta_true: Vec<f64>,
    pub noise_sd: f64,
    /// `σ_b² / (σ² + σ_b²)`
    pub variance_ratio: f64,
    /// `(intensity, angle)` of the stretching applied to the field.
    pub anisotropy: (f64, f64),
    pub seed: u64,
    pub missing_fraction: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 100,
            m: 11,
            g: 6,
            beta_true: vec![1.0, -1.0],
            noise_sd: 0.25,
            variance_ratio: 0.30,
            anisotropy: (8.0, PI / 4.0),
            seed: 0,
            missing_fraction: 0.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n == 0 || self.m < 2 || self.g == 0 || self.g > self.n {
            return bad(format!("need n >= g >= 1 and m >= 2 (n={}, m={}, g={})", self.n, self.m, self.g));
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise_sd = {} must be positive", self.noise_sd));
        }
        if !(0.0..1.0).contains(&self.variance_ratio) {
            return bad(format!("variance_ratio = {} must lie in [0, 1)", self.variance_ratio));
        }
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return bad(format!("missing_fraction = {} must lie in [0, 1)", self.missing_fraction));
        }
        let (a, theta) = self.anisotropy;
        if !(a >= 1.0 && a.is_finite() && theta.is_finite()) {
            return bad(format!("anisotropy intensity {a} must be at least 1"));
        }
        if self.beta_true.iter().any(|b| !b.is_finite()) {
            return bad("beta_true must be finite".into());
        }
        Ok(())
    }

    /// Random-effect standard deviation implied by the variance ratio.
    pub fn sigma_b(&self) -> f64 {
        self.noise_sd * (self.variance_ratio / (1.0 - self.variance_ratio)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Bump {
    amplitude: f64,
    center: Point,
    velocity: Point,
    /// Inverse covariance of the Gaussian profile.
    precision: [[f64; 2]; 2],
}

/// Sum of Gaussian bumps whose centers drift linearly in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueField {
    bumps: Vec<Bump>,
}

impl TrueField {
    /// Bumps stretched along `angle`, with covariance eigenvalue ratio
    /// `intensity` between the stretched and the cross direction.
    pub fn random<R: Rng>(rng: &mut R, intensity: f64, angle: f64) -> Self {
        let (c, s) = (angle.cos(), angle.sin());
        let bumps = (0..N_BUMPS)
            .map(|_| {
                let width: f64 = rng.random_range(0.1..0.2);
                let along = 1.0 / (intensity * width * width);
                let across = 1.0 / (width * width);
                let precision = [
                    [along * c * c + across * s * s, (along - across) * c * s],
                    [(along - across) * c * s, along * s * s + across * c * c],
                ];
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                Bump {
                    amplitude: sign * rng.random_range(0.6..1.4),
                    center: [rng.random_range(-0.1..1.1), rng.random_range(-0.1..1.1)],
                    velocity: [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)],
                    precision,
                }
            })
            .collect();
        Self { bumps }
    }

    pub fn eval(&self, p: Point, t: f64) -> f64 {
        self.bumps
            .iter()
            .map(|b| {
                let dx = p[0] - b.center[0] - b.velocity[0] * t;
                let dy = p[1] - b.center[1] - b.velocity[1] * t;
                let q = b.precision[0][0] * dx * dx + 2.0 * b.precision[0][1] * dx * dy + b.precision[1][1] * dy * dy;
                b.amplitude * (-0.5 * q).exp()
            })
            .sum()
    }

    /// Writes `x,y,t,f` on a `resolution x resolution` grid of the unit
    /// square at each of the given times.
    pub fn write_grid_csv<W: Write>(&self, w: W, resolution: usize, times: &[f64]) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["x", "y", "t", "f"])?;
        let step = 1.0 / (resolution.max(2) - 1) as f64;
        for &t in times {
            for j in 0..resolution {
                for i in 0..resolution {
                    let p = [i as f64 * step, j as f64 * step];
                    w.write_record([p[0], p[1], t, self.eval(p, t)].map(|v| format!("{v:?}")))?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Smooth covariate: a sum of plane waves in space and time.
#[derive(Debug, Clone)]
struct WaveField {
    waves: Vec<([f64; 2], f64, f64)>,
    amplitude: f64,
}

impl WaveField {
    fn random<R: Rng>(rng: &mut R) -> Self {
        let waves = (0..N_WAVES)
            .map(|_| {
                let dir = rng.random_range(0.0..2.0 * PI);
                let freq = 2.0 * PI * rng.random_range(0.5..1.5);
                let omega_t = 2.0 * PI * rng.random_range(0.2..1.0);
                ([freq * dir.cos(), freq * dir.sin()], omega_t, rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        Self {
            waves,
            amplitude: (2.0 / N_WAVES as f64).sqrt(),
        }
    }

    fn eval(&self, p: Point, t: f64) -> f64 {
        self.amplitude
            * self
                .waves
                .iter()
                .map(|(k, w, phase)| (k[0] * p[0] + k[1] * p[1] + w * t + phase).sin())
                .sum::<f64>()
    }
}

/// Everything the generator drew, for scoring estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub beta: Vec<f64>,
    pub sigma: f64,
    pub sigma_b: f64,
    /// Group labels with their random intercepts.
    pub group_labels: Vec<String>,
    pub b: Vec<f64>,
    pub field: TrueField,
}

impl Truth {
    pub fn b_of(&self, label: &str) -> Option<f64> {
        self.group_labels.iter().position(|l| l == label).map(|k| self.b[k])
    }
}

/// Draws one dataset. Every random quantity comes from a single ChaCha8
/// stream seeded by `config.seed`, in a fixed order.
pub fn generate_dataset(config: &SimConfig) -> Result<(ObservationSet, Truth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let locations: Vec<Point> = (0..config.n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
    let times: Vec<f64> = (0..config.m).map(|j| j as f64 / (config.m - 1) as f64).collect();

    let mut order: Vec<usize> = (0..config.n).collect();
    order.shuffle(&mut rng);
    let mut group_of = vec![0; config.n];
    for (rank, &i) in order.iter().enumerate() {
        group_of[i] = rank % config.g;
    }

    let field = TrueField::random(&mut rng, config.anisotropy.0, config.anisotropy.1);
    let covariates: Vec<WaveField> = config.beta_true.iter().map(|_| WaveField::random(&mut rng)).collect();
    let sigma_b = config.sigma_b();
    let b: Vec<f64> = (0..config.g).map(|_| sigma_b * normal.sample(&mut rng)).collect();

    let mut raw = Vec::with_capacity(config.n * config.m);
    for (j, &t) in times.iter().enumerate() {
        for (i, &p) in locations.iter().enumerate() {
            let x: Vec<f64> = covariates.iter().map(|c| c.eval(p, t)).collect();
            let k = group_of[i];
            let eps = config.noise_sd * normal.sample(&mut rng);
            let y = crate::linalg::dot(&x, &config.beta_true) + field.eval(p, t) + b[k] + eps;
            raw.push(RawRecord {
                loc: i,
                time: j,
                group: format!("g{}", k + 1),
                y,
                x,
                z: vec![1.0],
            });
        }
    }

    let n_drop = (config.missing_fraction * raw.len() as f64).round() as usize;
    if n_drop > 0 {
        let mut drop = sample(&mut rng, raw.len(), n_drop).into_vec();
        drop.sort_unstable();
        for idx in drop.into_iter().rev() {
            raw.remove(idx);
        }
    }

    let obs = ObservationSet::new(locations, times, raw)?;
    let truth = Truth {
        beta: config.beta_true.clone(),
        sigma: config.noise_sd,
        sigma_b,
        group_labels: (1..=config.g).map(|k| format!("g{k}")).collect(),
        b,
        field,
    };
    Ok((obs, truth))
}

/// A fitted field `Σ_l Σ_r f_lr ψ_l(p) φ_r(t)`.
pub struct FemField<'a> {
    mesh: &'a TriangularMesh,
    locator: PointLocator<'a>,
    basis: &'a SplineBasis,
    coeffs: &'a [f64],
}

impl<'a> FemField<'a> {
    pub fn new(mesh: &'a TriangularMesh, basis: &'a SplineBasis, coeffs: &'a [f64]) -> Result<Self> {
        if coeffs.len() != mesh.n_nodes() * basis.n_basis() {
            return Err(Error::Dimension(format!(
                "{} coefficients for {} nodes and {} temporal functions",
                coeffs.len(),
                mesh.n_nodes(),
                basis.n_basis()
            )));
        }
        Ok(Self {
            mesh,
            locator: PointLocator::new(mesh),
            basis,
            coeffs,
        })
    }

    /// `None` outside the mesh or outside the time interval.
    pub fn eval(&self, p: Point, t: f64) -> Option<f64> {
        let loc = self.locator.locate(p)?;
        if !(t >= 0.0 && t <= self.basis.t_end()) {
            return None;
        }
        let (span, ders) = self.basis.local_derivatives(t, 0);
        let tri = self.mesh.triangles()[loc.triangle];
        let n = self.mesh.n_nodes();
        let mut acc = 0.0;
        for (j, &phi) in ders[0].iter().enumerate() {
            let r = span - crate::splines::DEGREE + j;
            for a in 0..3 {
                acc += phi * loc.bary[a] * self.coeffs[tri[a] + n * r];
            }
        }
        Some(acc)
    }
}

/// `sqrt(∫∫ (f − g)² dp dt)` using the edge-midpoint rule on the triangles
/// of `mesh` and four Gauss points on each of `time_spans` equal pieces of
/// `[0, t_end]`.
pub fn rmse_field<F, G>(f: F, g: G, mesh: &TriangularMesh, t_end: f64, time_spans: usize) -> f64
where
    F: Fn(Point, f64) -> f64,
    G: Fn(Point, f64) -> f64,
{
    const GAUSS4: [(f64, f64); 4] = [
        (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
        (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
        (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
        (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
    ];
    let h = t_end / time_spans as f64;
    let mut time_nodes = Vec::with_capacity(4 * time_spans);
    for s in 0..time_spans {
        for (x, w) in GAUSS4 {
            time_nodes.push((h * (s as f64 + 0.5 * (x + 1.0)), 0.5 * h * w));
        }
    }
    let mut acc = 0.0;
    for t in 0..mesh.n_triangles() {
        let v = mesh.vertices(t);
        let w_space = mesh.area(t) / 3.0;
        for (a, b) in [(0, 1), (1, 2), (2, 0)] {
            let p = [0.5 * (v[a][0] + v[b][0]), 0.5 * (v[a][1] + v[b][1])];
            for &(tt, wt) in &time_nodes {
                let d = f(p, tt) - g(p, tt);
                acc += w_space * wt * d * d;
            }
        }
    }
    acc.sqrt()
}
