//! Ground-truth generator for paired longitudinal studies and recovery scores.
//!
//! A single latent variable per component drives both views:
//! `x_i(t) = sum_k z_{k,i}(t) w_{x,k}' + e_x`, where the feature noise of a
//! subject is independent across features and AR(1)-correlated across time.
//! Whole measurements are then removed at random from each view.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LongView, PairedStudy};
use crate::error::{Error, Result};
use crate::lme::mean_trajectory;
use crate::mm::ComponentResult;

/// Reading of the oscillating term of the first latent path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinReading {
    /// `sign(sin(a t)) * |sin(a t)|^t`
    #[default]
    SignedPower,
    /// `sin(a t * t)`
    ArgumentProduct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub theta0: f64,
    pub theta1: f64,
    pub theta2: f64,
}

impl Default for Theta {
    fn default() -> Self {
        Self {
            theta0: 0.3,
            theta1: 1.0,
            theta2: -0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n_subjects: usize,
    pub p: usize,
    pub q: usize,
    /// Measurements are taken at `t = 1, ..., n_times`.
    pub n_times: usize,
    /// Number of true components (1 or 2).
    pub n_components: usize,
    pub nnz_x: usize,
    pub nnz_y: usize,
    pub drop_x: f64,
    pub drop_y: f64,
    pub theta: Theta,
    pub latent_noise_sd: f64,
    pub feature_noise_sd: f64,
    pub ar_x: f64,
    pub ar_y: f64,
    pub sin_reading: SinReading,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_subjects: 100,
            p: 10_000,
            q: 200,
            n_times: 10,
            n_components: 2,
            nnz_x: 10,
            nnz_y: 20,
            drop_x: 0.2,
            drop_y: 0.3,
            theta: Theta::default(),
            latent_noise_sd: 0.25,
            feature_noise_sd: 1.0,
            ar_x: 0.5,
            ar_y: 0.5,
            sin_reading: SinReading::SignedPower,
            seed: 0,
        }
    }
}

impl SimulationConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_subjects == 0 || self.p == 0 || self.q == 0 || self.n_times == 0 {
            return bad("dimensions must be positive");
        }
        if !(1..=2).contains(&self.n_components) {
            return bad("n_components must be 1 or 2");
        }
        if self.nnz_x == 0 || self.nnz_x * self.n_components > self.p {
            return bad("nnz_x times n_components must fit in p");
        }
        if self.nnz_y == 0 || self.nnz_y * self.n_components > self.q {
            return bad("nnz_y times n_components must fit in q");
        }
        if !(0.0..1.0).contains(&self.drop_x) || !(0.0..1.0).contains(&self.drop_y) {
            return bad("drop fractions must lie in [0, 1)");
        }
        if !(self.latent_noise_sd >= 0.0 && self.feature_noise_sd >= 0.0) {
            return bad("noise scales must be non-negative");
        }
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        (1..=self.n_times).map(|t| t as f64).collect()
    }
}

/// Everything needed to score a fit against the generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTruth {
    pub config: SimulationConfig,
    pub times: Vec<f64>,
    /// True weights per component.
    pub w_x: Vec<Vec<f64>>,
    pub w_y: Vec<Vec<f64>>,
    /// Latent values `z[component][subject][time]`.
    pub z: Vec<Vec<Vec<f64>>>,
    pub psi_x: Vec<Vec<f64>>,
    pub psi_y: Vec<Vec<f64>>,
    /// `true` where a measurement was removed, `[subject][time]`.
    pub removed_x: Vec<Vec<bool>>,
    pub removed_y: Vec<Vec<bool>>,
}

impl SimulationTruth {
    pub fn support_x(&self, component: usize) -> BTreeSet<usize> {
        support(&self.w_x[component - 1])
    }

    pub fn support_y(&self, component: usize) -> BTreeSet<usize> {
        support(&self.w_y[component - 1])
    }

    /// Noise-free latent path of a component on a time grid.
    pub fn path(&self, component: usize, grid: &[f64]) -> Vec<f64> {
        let tmax = self.times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        grid.iter()
            .map(|&t| deterministic_path(component, t, tmax, &self.config.theta, self.config.sin_reading))
            .collect()
    }
}

fn support(w: &[f64]) -> BTreeSet<usize> {
    w.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect()
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub study: PairedStudy,
    pub truth: SimulationTruth,
}

/// Noise-free part of the latent path of `component` (1-based) at time `t`.
pub fn deterministic_path(component: usize, t: f64, tmax: f64, theta: &Theta, reading: SinReading) -> f64 {
    match component {
        1 => {
            let osc = match reading {
                SinReading::SignedPower => {
                    let s = (theta.theta1 * t).sin();
                    s.signum() * s.abs().powf(t)
                }
                SinReading::ArgumentProduct => (theta.theta1 * t * t).sin(),
            };
            theta.theta0 * t + osc
        }
        2 => theta.theta2 * t + (1.0 + t / tmax).powi(3),
        _ => 0.0,
    }
}

/// AR(1) correlation matrix `coef^|a - b|` over time indices.
pub fn ar1_matrix(n: usize, coef: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(a, b)| coef.powi((a as i32 - b as i32).abs()))
}

fn cholesky_lower(psi: &Array2<f64>) -> Result<Array2<f64>> {
    let n = psi.nrows();
    let m = DMatrix::from_fn(n, n, |i, j| psi[[i, j]]);
    let chol = m.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let l = chol.l();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| l[(i, j)]))
}

const STREAM_WEIGHTS: u64 = 1;
const STREAM_LATENT: u64 = 2;
const STREAM_X: u64 = 3;
const STREAM_Y: u64 = 4;
const STREAM_MASK: u64 = 5;

fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 40) | index);
    rng
}

/// Latent paths `z[component][subject]` over `times`: deterministic part plus
/// i.i.d. Gaussian noise with sd `noise_sd`, one substream per subject.
pub fn gen_latent_paths(
    times: &[f64],
    theta: &Theta,
    reading: SinReading,
    n_subjects: usize,
    n_components: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<Vec<Array2<f64>>> {
    if times.is_empty() {
        return Err(Error::InvalidArgument("empty time grid".into()));
    }
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let tmax = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let per_subject: Vec<Vec<Vec<f64>>> = (0..n_subjects)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, STREAM_LATENT, i as u64);
            (1..=n_components)
                .map(|k| {
                    times
                        .iter()
                        .map(|&t| deterministic_path(k, t, tmax, theta, reading) + noise.sample(&mut rng))
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok((0..n_components)
        .map(|k| Array2::from_shape_fn((n_subjects, times.len()), |(i, a)| per_subject[i][k][a]))
        .collect())
}

fn sparse_weights(rng: &mut ChaCha8Rng, dim: usize, nnz: usize, components: usize) -> Vec<Vec<f64>> {
    let mut idx: Vec<usize> = (0..dim).collect();
    idx.shuffle(rng);
    let mag = Uniform::new(0.5, 1.0).expect("valid range");
    (0..components)
        .map(|k| {
            let mut w = vec![0.0; dim];
            let mut chosen = idx[k * nnz..(k + 1) * nnz].to_vec();
            chosen.sort_unstable();
            for j in chosen {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                w[j] = sign * mag.sample(rng);
            }
            w
        })
        .collect()
}

fn removal_mask(rng: &mut ChaCha8Rng, n: usize, t: usize, frac: f64) -> Vec<Vec<bool>> {
    let total = n * t;
    let count = (frac * total as f64).round() as usize;
    let mut cells: Vec<usize> = (0..total).collect();
    cells.shuffle(rng);
    let mut mask = vec![vec![false; t]; n];
    for &c in &cells[..count] {
        mask[c / t][c % t] = true;
    }
    mask
}

/// Draws weights, latent paths, covariance factors and removal masks.
pub fn gen_truth(cfg: &SimulationConfig) -> Result<SimulationTruth> {
    cfg.validate()?;
    let times = cfg.times();
    let nt = times.len();
    let mut wrng = stream(cfg.seed, STREAM_WEIGHTS, 0);
    let w_x = sparse_weights(&mut wrng, cfg.p, cfg.nnz_x, cfg.n_components);
    let w_y = sparse_weights(&mut wrng, cfg.q, cfg.nnz_y, cfg.n_components);
    let z = gen_latent_paths(
        &times,
        &cfg.theta,
        cfg.sin_reading,
        cfg.n_subjects,
        cfg.n_components,
        cfg.latent_noise_sd,
        cfg.seed,
    )?;
    let psi_x = ar1_matrix(nt, cfg.ar_x);
    let psi_y = ar1_matrix(nt, cfg.ar_y);
    let mut mrng = stream(cfg.seed, STREAM_MASK, 0);
    let removed_x = removal_mask(&mut mrng, cfg.n_subjects, nt, cfg.drop_x);
    let removed_y = removal_mask(&mut mrng, cfg.n_subjects, nt, cfg.drop_y);
    let to_rows = |m: &Array2<f64>| m.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
    Ok(SimulationTruth {
        config: cfg.clone(),
        times,
        w_x,
        w_y,
        z: z.iter().map(to_rows).collect(),
        psi_x: to_rows(&psi_x),
        psi_y: to_rows(&psi_y),
        removed_x,
        removed_y,
    })
}

/// Generates one view: per subject a `T x dim` block with mean `sum_k z_k w_k'`
/// and noise `noise_sd * L g` per feature (`L L' = psi`), then drops the
/// removed measurements.
#[allow(clippy::too_many_arguments)]
fn gen_view(
    truth: &SimulationTruth,
    weights: &[Vec<f64>],
    psi: &[Vec<f64>],
    removed: &[Vec<bool>],
    noise_sd: f64,
    tag: u64,
    prefix: &str,
) -> Result<LongView> {
    let nt = truth.times.len();
    let dim = weights[0].len();
    let psi = Array2::from_shape_fn((nt, nt), |(a, b)| psi[a][b]);
    let l = cholesky_lower(&psi)?;
    let seed = truth.config.seed;

    let blocks: Vec<Array2<f64>> = (0..truth.z[0].len())
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, tag, i as u64);
            let mut block = Array2::<f64>::zeros((nt, dim));
            for (k, w) in weights.iter().enumerate() {
                let z = &truth.z[k][i];
                for (j, &wj) in w.iter().enumerate() {
                    if wj != 0.0 {
                        for a in 0..nt {
                            block[[a, j]] += z[a] * wj;
                        }
                    }
                }
            }
            let mut g = Array1::<f64>::zeros(nt);
            for j in 0..dim {
                for v in g.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                let e = l.dot(&g);
                for a in 0..nt {
                    block[[a, j]] += noise_sd * e[a];
                }
            }
            block
        })
        .collect();

    let mut ids = Vec::new();
    let mut times = Vec::new();
    let mut flat = Vec::new();
    for (i, block) in blocks.iter().enumerate() {
        for a in 0..nt {
            if !removed[i][a] {
                ids.push((i + 1).to_string());
                times.push(truth.times[a]);
                flat.extend(block.row(a).iter());
            }
        }
    }
    let names = (1..=dim).map(|j| format!("{prefix}{j}")).collect();
    let values = Array2::from_shape_vec((ids.len(), dim), flat).map_err(|e| Error::InvalidView(e.to_string()))?;
    LongView::new(values, ids, times, names)
}

/// Builds both views from a truth.
pub fn gen_views(truth: &SimulationTruth) -> Result<PairedStudy> {
    let cfg = &truth.config;
    let x = gen_view(
        truth,
        &truth.w_x,
        &truth.psi_x,
        &truth.removed_x,
        cfg.feature_noise_sd,
        STREAM_X,
        "f",
    )?;
    let y = gen_view(
        truth,
        &truth.w_y,
        &truth.psi_y,
        &truth.removed_y,
        cfg.feature_noise_sd,
        STREAM_Y,
        "f",
    )?;
    Ok(PairedStudy::new(x, y))
}

pub fn simulate(cfg: &SimulationConfig) -> Result<Simulated> {
    let truth = gen_truth(cfg)?;
    let study = gen_views(&truth)?;
    Ok(Simulated { study, truth })
}

/// Agreement between an estimated component and one true component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryMetrics {
    /// Sign applied to the estimate before scoring.
    pub sign: f64,
    pub precision_x: f64,
    pub recall_x: f64,
    pub precision_y: f64,
    pub recall_y: f64,
    pub cosine_x: f64,
    pub cosine_y: f64,
    pub path_corr_x: f64,
    pub path_corr_y: f64,
    /// Median |weight| of selected features outside the true support divided
    /// by the median |weight| of selected true features (NaN when either set is empty).
    pub false_positive_ratio_x: f64,
    pub false_positive_ratio_y: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn support_scores(est: &[f64], truth: &[f64]) -> (f64, f64, f64) {
    let est_s = support(est);
    let true_s = support(truth);
    let hits = est_s.intersection(&true_s).count() as f64;
    let precision = if est_s.is_empty() { 0.0 } else { hits / est_s.len() as f64 };
    let recall = if true_s.is_empty() { 0.0 } else { hits / true_s.len() as f64 };
    let tp: Vec<f64> = est_s.intersection(&true_s).map(|&j| est[j].abs()).collect();
    let fp: Vec<f64> = est_s.difference(&true_s).map(|&j| est[j].abs()).collect();
    (precision, recall, median(fp) / median(tp))
}

/// Scores estimated weights and mean latent curves against true component
/// `component` (1-based). Curves are evaluated on `grid_x` / `grid_y`.
pub fn score_parts(
    w_x: &[f64],
    w_y: &[f64],
    grid_x: &[f64],
    curve_x: &[f64],
    grid_y: &[f64],
    curve_y: &[f64],
    truth: &SimulationTruth,
    component: usize,
) -> Result<RecoveryMetrics> {
    if component == 0 || component > truth.w_x.len() {
        return Err(Error::InvalidArgument(format!("no true component {component}")));
    }
    let (tx, ty) = (&truth.w_x[component - 1], &truth.w_y[component - 1]);
    if w_x.len() != tx.len() || w_y.len() != ty.len() {
        return Err(Error::DimensionMismatch("estimated and true weights differ in length".into()));
    }
    let cx = cosine(w_x, tx);
    let cy = cosine(w_y, ty);
    let sign = if cx != 0.0 { cx.signum() } else if cy != 0.0 { cy.signum() } else { 1.0 };
    let (precision_x, recall_x, fpr_x) = support_scores(w_x, tx);
    let (precision_y, recall_y, fpr_y) = support_scores(w_y, ty);
    Ok(RecoveryMetrics {
        sign,
        precision_x,
        recall_x,
        precision_y,
        recall_y,
        cosine_x: sign * cx,
        cosine_y: sign * cy,
        path_corr_x: sign * pearson(curve_x, &truth.path(component, grid_x)),
        path_corr_y: sign * pearson(curve_y, &truth.path(component, grid_y)),
        false_positive_ratio_x: fpr_x,
        false_positive_ratio_y: fpr_y,
    })
}

fn unique_times(view: &LongView) -> Vec<f64> {
    let mut t = view.times().to_vec();
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    t.dedup();
    t
}

/// Scores a fitted component: mean curves are the fixed-effects trajectories
/// of its latent models on each view's observed time grid.
pub fn score_recovery(
    result: &ComponentResult,
    study: &PairedStudy,
    truth: &SimulationTruth,
    component: usize,
) -> Result<RecoveryMetrics> {
    let gx = unique_times(&study.x);
    let gy = unique_times(&study.y);
    score_parts(
        result.weights.w_x.as_slice().expect("contiguous"),
        result.weights.w_y.as_slice().expect("contiguous"),
        &gx,
        &mean_trajectory(&result.fit_x, &gx),
        &gy,
        &mean_trajectory(&result.fit_y, &gy),
        truth,
        component,
    )
}
