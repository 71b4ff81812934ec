//! Monte Carlo checks of the variance formulas on a small design.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use stmix::data::{ObservationSet, RawRecord};
use stmix::fem::PdeCoefficients;
use stmix::inference::FitSystem;
use stmix::mesh::TriangularMesh;
use stmix::solver::{FitOptions, ModelSetup};
use stmix::splines::SplineBasis;

const REPLICAS: usize = 200;
const LAMBDA: (f64, f64) = (1e-4, 1e-3);

struct Design {
    mesh: TriangularMesh,
    basis: SplineBasis,
    locations: Vec<[f64; 2]>,
    times: Vec<f64>,
    x: Vec<Vec<f64>>,
    groups: Vec<usize>,
}

fn design() -> Design {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let locations: Vec<[f64; 2]> = (0..24).map(|_| [rng.random(), rng.random()]).collect();
    let times: Vec<f64> = (0..6).map(|j| j as f64 / 5.0).collect();
    let x = (0..locations.len() * times.len())
        .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let groups = (0..locations.len()).map(|i| i % 6).collect();
    Design {
        mesh: TriangularMesh::unit_square(3).unwrap(),
        basis: SplineBasis::uniform(5, 1.0).unwrap(),
        locations,
        times,
        x,
        groups,
    }
}

fn dataset(d: &Design, seed: u64) -> ObservationSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.25).unwrap();
    let re = Normal::new(0.0, 0.25 * (0.3f64 / 0.7).sqrt()).unwrap();
    let b: Vec<f64> = (0..6).map(|_| re.sample(&mut rng)).collect();
    let mut raw = Vec::new();
    for (j, &t) in d.times.iter().enumerate() {
        for (i, p) in d.locations.iter().enumerate() {
            let x = d.x[j * d.locations.len() + i].clone();
            let f = (2.0 * p[0]).sin() * (1.0 + t) - p[1] * p[1];
            let y = f + x[0] - x[1] + b[d.groups[i]] + noise.sample(&mut rng);
            raw.push(RawRecord { loc: i, time: j, group: format!("g{}", d.groups[i]), y, x, z: vec![1.0] });
        }
    }
    ObservationSet::new(d.locations.clone(), d.times.clone(), raw).unwrap()
}

fn setup(d: &Design, obs: ObservationSet) -> ModelSetup {
    let pde = PdeCoefficients::isotropic(d.mesh.n_triangles());
    ModelSetup::from_problem(obs, &d.mesh, &d.basis, &pde, false).unwrap()
}

fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

#[test]
fn field_variance_matches_replicates() {
    let d = design();
    let opts = FitOptions::default();
    let mut coeffs: Vec<Vec<f64>> = Vec::new();
    let mut predicted = Vec::new();
    for rep in 0..REPLICAS {
        let s = setup(&d, dataset(&d, 1000 + rep as u64));
        let fit = s.fit(LAMBDA.0, LAMBDA.1, &opts).unwrap();
        let diag = FitSystem::new(&s, &fit).unwrap().var_field_diagonal();
        if predicted.is_empty() {
            predicted = vec![0.0; diag.len()];
            coeffs = vec![Vec::new(); diag.len()];
        }
        for (i, v) in diag.iter().enumerate() {
            predicted[i] += v / REPLICAS as f64;
            coeffs[i].push(fit.f_coeffs[i]);
        }
    }
    for (i, c) in coeffs.iter().enumerate() {
        let ratio = sample_variance(c) / predicted[i];
        assert!((0.5..=2.0).contains(&ratio), "coefficient {i}: empirical/predicted = {ratio}");
    }
}

#[test]
fn beta_standard_error_matches_replicates() {
    let d = design();
    let opts = FitOptions::default();
    let mut beta1 = Vec::with_capacity(REPLICAS);
    let mut predicted = 0.0;
    for rep in 0..REPLICAS {
        let s = setup(&d, dataset(&d, 5000 + rep as u64));
        let fit = s.fit(LAMBDA.0, LAMBDA.1, &opts).unwrap();
        let vb = FitSystem::new(&s, &fit).unwrap().var_beta().unwrap();
        predicted += vb[(0, 0)] / REPLICAS as f64;
        beta1.push(fit.beta[0]);
    }
    let ratio = sample_variance(&beta1).sqrt() / predicted.sqrt();
    assert!((0.5..=2.0).contains(&ratio), "empirical/predicted sd = {ratio}");
}
