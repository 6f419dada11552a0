//! The longitudinal NIPALS loop.
//!
//! Each half-step fits a mixed model to one view's latent series on its own
//! grid, predicts that series on the other view's grid, and uses the
//! prediction to update the other view's sparse weights. Components are
//! extracted one at a time with projection deflation in between.

use std::collections::HashMap;

use log::{info, warn};
use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LongView, PairedStudy};
use crate::error::{Error, Result};
use crate::lme::{LambdaMode, LatentSeries, LmeProblem, MixedModelFit, TimeBasis};
use crate::scca::{
    canonical_correlation, check_sparsity, deflate, normalize, soft_threshold_topk, standardize_latent,
    CanonicalWeights, DeflationState, Init, WeightSolver, WeightUpdate, NULL_THRESHOLD,
};

/// Grid on which the convergence correlation is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoGrid {
    /// `cor(eta, gamma~)` on the `X` grid.
    #[default]
    X,
    /// Average of the `X`-grid and `Y`-grid correlations.
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmConfig {
    /// Number of components.
    pub k: usize,
    pub px: usize,
    pub qy: usize,
    pub basis_x: TimeBasis,
    pub basis_y: TimeBasis,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub init: Init,
    /// Extra seeded random starts per component; the best correlation wins.
    pub starts: usize,
    pub update: WeightUpdate,
    pub rho_grid: RhoGrid,
    pub lambda: LambdaMode,
}

impl Default for MmConfig {
    fn default() -> Self {
        Self {
            k: 1,
            px: 10,
            qy: 10,
            basis_x: TimeBasis::linear(),
            basis_y: TimeBasis::linear(),
            tol: 1e-6,
            max_iter: 200,
            seed: 0,
            init: Init::Sketch,
            starts: 0,
            update: WeightUpdate::CrossProduct,
            rho_grid: RhoGrid::X,
            lambda: LambdaMode::Profiled,
        }
    }
}

impl MmConfig {
    pub fn validate(&self, p: usize, q: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("need at least one component".into()));
        }
        check_sparsity(self.px, p)?;
        check_sparsity(self.qy, q)?;
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("tolerance must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// One extracted component with its latent trajectory models.
#[derive(Debug, Clone)]
pub struct ComponentResult {
    pub weights: CanonicalWeights,
    /// Model of `eta` over the `X` grid.
    pub fit_x: MixedModelFit,
    /// Model of `gamma` over the `Y` grid.
    pub fit_y: MixedModelFit,
    pub rho: f64,
    pub iterations: usize,
    pub converged: bool,
    /// No signal left: weights and latent series are zero.
    pub null: bool,
    pub latent_x: LatentSeries,
    pub latent_y: LatentSeries,
    pub predicted_x_on_ty: LatentSeries,
    pub predicted_y_on_tx: LatentSeries,
    pub trace: Vec<f64>,
}

/// Correlation between `eta` and the model-predicted `gamma` on the `X` grid.
pub fn cor_mode(eta: ArrayView1<f64>, gamma_pred: ArrayView1<f64>) -> Result<f64> {
    canonical_correlation(eta, gamma_pred)
}

struct Grids<'a> {
    x: &'a LongView,
    y: &'a LongView,
    lme_x: LmeProblem,
    lme_y: LmeProblem,
}

impl<'a> Grids<'a> {
    fn new(study: &'a PairedStudy, cfg: &MmConfig) -> Result<Self> {
        Ok(Self {
            x: &study.x,
            y: &study.y,
            lme_x: LmeProblem::from_view(cfg.basis_x, &study.x)?,
            lme_y: LmeProblem::from_view(cfg.basis_y, &study.y)?,
        })
    }
}

/// Rows of both views observed at the same (subject, time).
fn matched_rows(x: &LongView, y: &LongView) -> (Vec<usize>, Vec<usize>) {
    let index: HashMap<(&str, u64), usize> = y
        .subject_ids()
        .iter()
        .zip(y.times())
        .enumerate()
        .map(|(r, (s, t))| ((s.as_str(), t.to_bits()), r))
        .collect();
    x.subject_ids()
        .iter()
        .zip(x.times())
        .enumerate()
        .filter_map(|(r, (s, t))| index.get(&(s.as_str(), t.to_bits())).map(|&ry| (r, ry)))
        .unzip()
}

enum Step<T> {
    Ok(T),
    Null,
}

fn null_on_zero_variance<T>(r: Result<T>) -> Result<Step<T>> {
    match r {
        Ok(v) => Ok(Step::Ok(v)),
        Err(Error::ZeroVariance) | Err(Error::ZeroNorm) => Ok(Step::Null),
        Err(e) => Err(e),
    }
}

macro_rules! or_null {
    ($e:expr, $null:expr) => {
        match null_on_zero_variance($e)? {
            Step::Ok(v) => v,
            Step::Null => return $null,
        }
    };
}

fn max_abs(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[derive(Clone)]
struct Iterate {
    rho: f64,
    w_x: Array1<f64>,
    w_y: Array1<f64>,
    eta: Array1<f64>,
    gamma: Array1<f64>,
    fit_x: MixedModelFit,
    fit_y: MixedModelFit,
    gamma_tilde: Array1<f64>,
}

fn null_result(grids: &Grids, component: usize, p: usize, q: usize, iterations: usize, trace: Vec<f64>) -> Result<ComponentResult> {
    let zx = Array1::zeros(grids.x.n_rows());
    let zy = Array1::zeros(grids.y.n_rows());
    let fit_x = grids.lme_x.fit(zx.as_slice().unwrap(), LambdaMode::Fixed(0.0))?;
    let fit_y = grids.lme_y.fit(zy.as_slice().unwrap(), LambdaMode::Fixed(0.0))?;
    Ok(ComponentResult {
        weights: CanonicalWeights {
            w_x: Array1::zeros(p),
            w_y: Array1::zeros(q),
            component,
        },
        fit_x,
        fit_y,
        rho: 0.0,
        iterations,
        converged: true,
        null: true,
        latent_x: zx.clone(),
        latent_y: zy.clone(),
        predicted_x_on_ty: zy,
        predicted_y_on_tx: zx,
        trace,
    })
}

fn run_from(
    grids: &Grids,
    xm: ArrayView2<f64>,
    ym: ArrayView2<f64>,
    cfg: &MmConfig,
    init: &Init,
    component: usize,
) -> Result<ComponentResult> {
    let (p, q) = (xm.ncols(), ym.ncols());
    let sx = WeightSolver::new(xm, cfg.update)?;
    let sy = WeightSolver::new(ym, cfg.update)?;
    let null = |it: usize, trace: Vec<f64>| null_result(grids, component, p, q, it, trace);

    let (mx, my) = matched_rows(grids.x, grids.y);
    let xs = xm.select(Axis(0), &mx);
    let ys = ym.select(Axis(0), &my);
    let w0 = or_null!(init.resolve(xm, Some((xs.view(), ys.view()))), null(0, vec![]));
    let mut eta = or_null!(standardize_latent(xm.dot(&w0).view()), null(0, vec![]));
    let mut fit_x = grids.lme_x.fit(eta.as_slice().unwrap(), cfg.lambda)?;

    let mut prev = 0.0;
    let mut trace = Vec::new();
    let mut best: Option<Iterate> = None;
    let mut last: Option<Iterate> = None;
    let mut converged = false;

    for l in 1..=cfg.max_iter {
        let eta_tilde = fit_x.predict(grids.y.subject_ids(), grids.y.times());
        let raw_y = sy.solve(ym, eta_tilde.view());
        if max_abs(&raw_y) < NULL_THRESHOLD {
            return null(l, trace);
        }
        let w_y = or_null!(normalize(soft_threshold_topk(raw_y.view(), cfg.qy)?), null(l, trace));
        let gamma = or_null!(standardize_latent(ym.dot(&w_y).view()), null(l, trace));
        let fit_y = grids.lme_y.fit(gamma.as_slice().unwrap(), cfg.lambda)?;
        let gamma_tilde = fit_y.predict(grids.x.subject_ids(), grids.x.times());

        let raw_x = sx.solve(xm, gamma_tilde.view());
        if max_abs(&raw_x) < NULL_THRESHOLD {
            return null(l, trace);
        }
        let w_x = or_null!(normalize(soft_threshold_topk(raw_x.view(), cfg.px)?), null(l, trace));
        eta = or_null!(standardize_latent(xm.dot(&w_x).view()), null(l, trace));
        fit_x = grids.lme_x.fit(eta.as_slice().unwrap(), cfg.lambda)?;

        let mut rho = or_null!(cor_mode(eta.view(), gamma_tilde.view()), null(l, trace));
        if cfg.rho_grid == RhoGrid::Symmetric {
            let eta_on_y = fit_x.predict(grids.y.subject_ids(), grids.y.times());
            let rho_y = or_null!(canonical_correlation(eta_on_y.view(), gamma.view()), null(l, trace));
            rho = 0.5 * (rho + rho_y);
        }
        trace.push(rho);

        let it = Iterate {
            rho,
            w_x,
            w_y,
            eta: eta.clone(),
            gamma,
            fit_x: fit_x.clone(),
            fit_y,
            gamma_tilde,
        };
        if best.as_ref().is_none_or(|b| rho > b.rho) {
            best = Some(it.clone());
        }
        last = Some(it);

        let change = (rho - prev).abs();
        prev = rho;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!(
            "component {component} did not converge in {} iterations",
            cfg.max_iter
        );
    }
    let it = if converged { last } else { best }.expect("at least one iteration");
    let iterations = trace.len();

    let mut weights = CanonicalWeights {
        w_x: it.w_x,
        w_y: it.w_y,
        component,
    };
    let s = weights.orientation();
    let (mut fit_x, mut fit_y) = (it.fit_x, it.fit_y);
    if s < 0.0 {
        weights.w_x.mapv_inplace(|v| -v);
        weights.w_y.mapv_inplace(|v| -v);
        fit_x = fit_x.negated();
        fit_y = fit_y.negated();
    }
    let predicted_x_on_ty = fit_x.predict(grids.y.subject_ids(), grids.y.times());
    Ok(ComponentResult {
        weights,
        predicted_x_on_ty,
        predicted_y_on_tx: it.gamma_tilde * s,
        fit_x,
        fit_y,
        rho: it.rho,
        iterations,
        converged,
        null: false,
        latent_x: it.eta * s,
        latent_y: it.gamma * s,
        trace,
    })
}

fn start_seed(seed: u64, component: usize, start: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((component as u64) << 32)
        .wrapping_add(start as u64 + 1)
}

/// Fits one component on the current (possibly deflated) views.
///
/// `study` supplies the subject/time grids; `state` the matrices to use.
pub fn fit_component_mm(
    study: &PairedStudy,
    cfg: &MmConfig,
    state: &DeflationState,
    component: usize,
) -> Result<ComponentResult> {
    if state.x.dim() != study.x.values().dim() || state.y.dim() != study.y.values().dim() {
        return Err(Error::DimensionMismatch("deflation state does not match the study".into()));
    }
    cfg.validate(state.x.ncols(), state.y.ncols())?;
    let grids = Grids::new(study, cfg)?;

    let mut inits = vec![cfg.init.clone()];
    inits.extend((0..cfg.starts).map(|s| Init::Random(start_seed(cfg.seed, component, s))));
    let runs: Vec<Result<ComponentResult>> = inits
        .par_iter()
        .map(|init| run_from(&grids, state.x.view(), state.y.view(), cfg, init, component))
        .collect();

    let mut best: Option<ComponentResult> = None;
    for run in runs {
        let run = run?;
        let better = match &best {
            None => true,
            Some(b) => (b.null && !run.null) || (!run.null && run.rho > b.rho),
        };
        if better {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one start"))
}

/// Extracts up to `cfg.k` components, deflating both views after each one.
/// Stops early after a null component.
pub fn fit(study: &PairedStudy, cfg: &MmConfig) -> Result<Vec<ComponentResult>> {
    cfg.validate(study.x.n_features(), study.y.n_features())?;
    let mut state = DeflationState::new(study.x.values().to_owned(), study.y.values().to_owned());
    let mut out = Vec::with_capacity(cfg.k);
    for k in 1..=cfg.k {
        let comp = fit_component_mm(study, cfg, &state, k)?;
        info!(
            "component {k}: rho = {:.6}, {} iterations, converged = {}, null = {}",
            comp.rho, comp.iterations, comp.converged, comp.null
        );
        let null = comp.null;
        if !null && k < cfg.k {
            state = deflate(&state, comp.latent_x.view(), comp.latent_y.view())?;
        }
        out.push(comp);
        if null {
            break;
        }
    }
    Ok(out)
}
