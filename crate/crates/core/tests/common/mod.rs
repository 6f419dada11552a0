#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use toscca_mm::data::{standardize, LongView, PairedStudy};
use toscca_mm::simulation::{simulate, SimulationConfig, SimulationTruth};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn center_scale(m: &Array2<f64>) -> Array2<f64> {
    let mean = m.mean_axis(Axis(0)).unwrap();
    let sd = m.std_axis(Axis(0), 1.0);
    (m - &mean) / &sd
}

/// Two views sharing one latent factor `z`: `x = z a' + noise`, `y = z b' + noise`.
pub fn cca_instance(n: usize, p: usize, q: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut r = rng(seed);
    let z: Vec<f64> = (0..n).map(|_| normal(&mut r)).collect();
    let a: Vec<f64> = (0..p).map(|_| normal(&mut r)).collect();
    let b: Vec<f64> = (0..q).map(|_| normal(&mut r)).collect();
    let x = Array2::from_shape_fn((n, p), |(i, j)| 0.6 * z[i] * a[j]);
    let y = Array2::from_shape_fn((n, q), |(i, j)| 0.6 * z[i] * b[j]);
    let x = x + Array2::from_shape_fn((n, p), |_| normal(&mut r));
    let y = y + Array2::from_shape_fn((n, q), |_| normal(&mut r));
    (center_scale(&x), center_scale(&y))
}

fn to_na(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// First canonical pair from the generalized eigenproblem
/// `Sxy Syy^{-1} Syx a = rho^2 Sxx a`, reduced with the Cholesky factor of `Sxx`.
pub fn cca_oracle(x: &Array2<f64>, y: &Array2<f64>) -> (f64, Array1<f64>, Array1<f64>) {
    let (x, y) = (to_na(x), to_na(y));
    let sxx = x.transpose() * &x;
    let syy = y.transpose() * &y;
    let sxy = x.transpose() * &y;
    let l = sxx.clone().cholesky().unwrap().l();
    let linv = l.clone().try_inverse().unwrap();
    let syy_inv = syy.try_inverse().unwrap();
    let c = &linv * &sxy * &syy_inv * sxy.transpose() * linv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let (imax, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
    let rho = eig.eigenvalues[imax].sqrt();
    let u: DVector<f64> = eig.eigenvectors.column(imax).into();
    let a = linv.transpose() * u;
    let b = &syy_inv * sxy.transpose() * &a;
    (rho, Array1::from_iter(a.iter().copied()), Array1::from_iter(b.iter().copied()))
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt())
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let sab: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let saa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let sbb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    sab / (saa * sbb).sqrt()
}

/// Single-measurement view (one row per subject, all at t = 0).
pub fn cross_sectional(m: &Array2<f64>) -> LongView {
    let n = m.nrows();
    LongView::new(
        m.clone(),
        (1..=n).map(|i| i.to_string()).collect(),
        vec![0.0; n],
        (1..=m.ncols()).map(|j| format!("f{j}")).collect(),
    )
    .unwrap()
}

/// Scaled-down simulation with `p` X features, standardized views.
pub fn standardized_simulation(p: usize, seed: u64) -> (PairedStudy, PairedStudy, SimulationTruth) {
    let sim = simulate(&SimulationConfig {
        p,
        seed,
        ..Default::default()
    })
    .unwrap();
    let (x, _) = standardize(&sim.study.x).unwrap();
    let (y, _) = standardize(&sim.study.y).unwrap();
    (PairedStudy::new(x, y), sim.study, sim.truth)
}

pub fn unique_times(v: &LongView) -> Vec<f64> {
    let mut t = v.times().to_vec();
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    t.dedup();
    t
}

/// Balanced random-intercept data: `n` subjects, `m` visits at t = 0..m-1.
pub fn lme_data(n: usize, m: usize, beta: &[f64], sd_b: f64, sd_e: f64, seed: u64) -> (Vec<String>, Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let mut ids = Vec::new();
    let mut times = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let b = sd_b * normal(&mut r);
        for a in 0..m {
            let t = a as f64;
            let mut v = b + sd_e * normal(&mut r);
            let mut pow = 1.0;
            for c in beta {
                v += c * pow;
                pow *= t;
            }
            ids.push(format!("s{i}"));
            times.push(t);
            y.push(v);
        }
    }
    (ids, times, y)
}
