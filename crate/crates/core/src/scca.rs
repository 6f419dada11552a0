//! Sparse CCA building blocks: exact-cardinality soft-thresholding, the
//! alternating NIPALS pair update, latent standardization, and projection
//! deflation.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Latent (or pre-threshold weight) magnitudes below this mark a null component.
pub const NULL_THRESHOLD: f64 = 1e-12;

/// Soft-thresholds `w` so that exactly `k` coefficients survive.
///
/// The threshold is the `(k+1)`-th largest magnitude (zero when `k == len`).
/// When that magnitude ties with the `k`-th largest, plain shrinkage would
/// keep fewer than `k` entries; instead the `k` largest magnitudes are kept,
/// ties going to the lowest index, and each is shrunk by the largest
/// magnitude strictly below the tied value.
pub fn soft_threshold_topk(w: ArrayView1<f64>, k: usize) -> Result<Array1<f64>> {
    let n = w.len();
    if k == 0 || k > n {
        return Err(Error::SparsityOutOfRange { k, len: n });
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite weight".into()));
    }
    if k == n {
        return Ok(w.to_owned());
    }
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal magnitudes keep ascending index order
    order.sort_by(|&a, &b| w[b].abs().partial_cmp(&w[a].abs()).unwrap());
    let kth = w[order[k - 1]].abs();
    let cut = w[order[k]].abs();

    let mut out = Array1::zeros(n);
    if kth > cut {
        for &j in &order[..k] {
            out[j] = w[j].signum() * (w[j].abs() - cut);
        }
    } else {
        let shrink = order[k..]
            .iter()
            .map(|&j| w[j].abs())
            .find(|&m| m < kth)
            .unwrap_or(0.0);
        for &j in &order[..k] {
            if w[j] != 0.0 {
                out[j] = w[j].signum() * (w[j].abs() - shrink);
            }
        }
    }
    Ok(out)
}

/// Pearson correlation.
pub fn canonical_correlation(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::TooFewRows { needed: 2, got: a.len() });
    }
    let ma = a.mean().unwrap();
    let mb = b.mean().unwrap();
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let degenerate = |ss: f64, v: ArrayView1<f64>| ss <= 1e-24 * v.dot(&v) || ss == 0.0;
    if degenerate(saa, a) || degenerate(sbb, b) {
        return Err(Error::ZeroVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Divides a latent vector by its sample sd (the mean is left in place).
pub fn standardize_latent(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    if v.len() < 2 {
        return Err(Error::TooFewRows { needed: 2, got: v.len() });
    }
    let var = v.var(1.0);
    if !(var >= NULL_THRESHOLD) {
        return Err(Error::ZeroVariance);
    }
    Ok(&v / var.sqrt())
}

/// How a view's weights are recovered from the other view's latent series.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightUpdate {
    /// `w = X' v` (identity within-view covariance; required when p > n).
    #[default]
    CrossProduct,
    /// `w = (X'X + ridge I)^{-1} X' v`, the least-squares update.
    Regression { ridge: f64 },
}

/// Precomputed solver for one view's weight update.
#[derive(Debug, Clone)]
pub(crate) enum WeightSolver {
    CrossProduct,
    Regression(nalgebra::Cholesky<f64, nalgebra::Dyn>),
}

impl WeightSolver {
    pub(crate) fn new(x: ArrayView2<f64>, update: WeightUpdate) -> Result<Self> {
        match update {
            WeightUpdate::CrossProduct => Ok(WeightSolver::CrossProduct),
            WeightUpdate::Regression { ridge } => {
                if !(ridge >= 0.0) {
                    return Err(Error::InvalidArgument("ridge must be non-negative".into()));
                }
                let p = x.ncols();
                let gram = x.t().dot(&x);
                let mut m = DMatrix::from_fn(p, p, |i, j| gram[[i, j]]);
                for i in 0..p {
                    m[(i, i)] += ridge;
                }
                m.cholesky().map(WeightSolver::Regression).ok_or_else(|| {
                    Error::LinAlg("X'X + ridge I is singular; use a positive ridge or the cross-product update".into())
                })
            }
        }
    }

    pub(crate) fn solve(&self, x: ArrayView2<f64>, v: ArrayView1<f64>) -> Array1<f64> {
        let xtv = x.t().dot(&v);
        match self {
            WeightSolver::CrossProduct => xtv,
            WeightSolver::Regression(chol) => {
                let sol = chol.solve(&DVector::from_iterator(xtv.len(), xtv.iter().copied()));
                Array1::from_iter(sol.iter().copied())
            }
        }
    }
}

/// Starting weights for the `X` view.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Init {
    /// Leading left singular vector of the cross-product `X'Y` over matched rows.
    #[default]
    Sketch,
    /// Seeded standard-normal direction.
    Random(u64),
    Given(Vec<f64>),
}

impl Init {
    /// Resolves a start vector given matched-row blocks of both views.
    pub(crate) fn resolve(
        &self,
        x: ArrayView2<f64>,
        matched: Option<(ArrayView2<f64>, ArrayView2<f64>)>,
    ) -> Result<Array1<f64>> {
        let p = x.ncols();
        let v = match self {
            Init::Given(w) => {
                if w.len() != p {
                    return Err(Error::DimensionMismatch(format!("initial weights have {} entries, view has {p}", w.len())));
                }
                Array1::from(w.clone())
            }
            Init::Random(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Array1::from_iter((0..p).map(|_| StandardNormal.sample(&mut rng)))
            }
            Init::Sketch => match matched {
                Some((xm, ym)) if xm.nrows() >= 2 => cross_sketch(xm, ym),
                _ => leading_right_singular(x),
            },
        };
        let norm = v.dot(&v).sqrt();
        if !(norm > 0.0) {
            return Err(Error::ZeroNorm);
        }
        Ok(v / norm)
    }
}

const SKETCH_ITERS: usize = 50;

/// Power iteration for the leading left singular vector of `X'Y`.
fn cross_sketch(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Array1<f64> {
    let mut v = x.t().dot(&y.dot(&Array1::ones(y.ncols())));
    if v.dot(&v) == 0.0 {
        v = Array1::ones(x.ncols());
    }
    for _ in 0..SKETCH_ITERS {
        let next = x.t().dot(&y.dot(&y.t().dot(&x.dot(&v))));
        let n = next.dot(&next).sqrt();
        if !(n > 0.0) {
            return leading_right_singular(x);
        }
        v = next / n;
    }
    v
}

/// Power iteration for the leading right singular vector of `X`.
fn leading_right_singular(x: ArrayView2<f64>) -> Array1<f64> {
    let mut v: Array1<f64> = x.map_axis(Axis(0), |c| c.dot(&c).sqrt() + 1.0);
    for _ in 0..SKETCH_ITERS {
        let next = x.t().dot(&x.dot(&v));
        let n = next.dot(&next).sqrt();
        if !(n > 0.0) {
            break;
        }
        v = next / n;
    }
    v
}

/// One pair of canonical weight vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalWeights {
    pub w_x: Array1<f64>,
    pub w_y: Array1<f64>,
    /// Extraction index, starting at 1.
    pub component: usize,
}

impl CanonicalWeights {
    pub fn nnz_x(&self) -> usize {
        self.w_x.iter().filter(|v| **v != 0.0).count()
    }

    pub fn nnz_y(&self) -> usize {
        self.w_y.iter().filter(|v| **v != 0.0).count()
    }

    pub fn is_null(&self) -> bool {
        self.nnz_x() == 0 && self.nnz_y() == 0
    }

    /// Sign making the largest-magnitude entry of `w_x` positive (first index on ties).
    pub fn orientation(&self) -> f64 {
        let mut best = (0.0f64, 1.0);
        for v in self.w_x.iter() {
            if v.abs() > best.0 {
                best = (v.abs(), v.signum());
            }
        }
        best.1
    }
}

pub(crate) fn normalize(w: Array1<f64>) -> Result<Array1<f64>> {
    let n = w.dot(&w).sqrt();
    if !(n > 0.0) {
        return Err(Error::ZeroNorm);
    }
    Ok(w / n)
}

pub(crate) fn check_sparsity(k: usize, len: usize) -> Result<()> {
    if k == 0 || k > len {
        Err(Error::SparsityOutOfRange { k, len })
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NipalsOptions {
    pub px: usize,
    pub qy: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub init: Init,
    pub update: WeightUpdate,
}

impl NipalsOptions {
    pub fn full(p: usize, q: usize) -> Self {
        Self {
            px: p,
            qy: q,
            tol: 1e-6,
            max_iter: 200,
            init: Init::Sketch,
            update: WeightUpdate::CrossProduct,
        }
    }
}

/// Result of the non-longitudinal alternating fit.
#[derive(Debug, Clone)]
pub struct PairFit {
    pub weights: CanonicalWeights,
    pub rho: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `rho` after every iteration.
    pub trace: Vec<f64>,
    pub eta: Array1<f64>,
    pub gamma: Array1<f64>,
}

/// Sparse NIPALS on two views sharing their rows.
///
/// Alternates `w_y <- T(Y' eta)`, `gamma <- std(Y w_y)`, `w_x <- T(X' gamma)`,
/// `eta <- std(X w_x)` with `T` the top-k soft-threshold, until the change
/// in `cor(eta, gamma)` drops below `tol`. Weights are returned with unit
/// norm; a run that hits `max_iter` returns its best iterate unconverged.
pub fn nipals_pair(x: ArrayView2<f64>, y: ArrayView2<f64>, opts: &NipalsOptions) -> Result<PairFit> {
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "views have {} and {} rows",
            x.nrows(),
            y.nrows()
        )));
    }
    check_sparsity(opts.px, x.ncols())?;
    check_sparsity(opts.qy, y.ncols())?;
    let sx = WeightSolver::new(x, opts.update)?;
    let sy = WeightSolver::new(y, opts.update)?;

    let mut w_x = opts.init.resolve(x, Some((x, y)))?;
    let mut eta = standardize_latent(x.dot(&w_x).view())?;
    let mut prev = 0.0;
    let mut trace = Vec::new();
    let mut best: Option<(f64, Array1<f64>, Array1<f64>, Array1<f64>, Array1<f64>)> = None;
    let mut last = None;
    let mut converged = false;

    for _ in 0..opts.max_iter {
        let raw_y = sy.solve(y, eta.view());
        let w_y = normalize(soft_threshold_topk(raw_y.view(), opts.qy)?)?;
        let gamma = standardize_latent(y.dot(&w_y).view())?;
        let raw_x = sx.solve(x, gamma.view());
        w_x = normalize(soft_threshold_topk(raw_x.view(), opts.px)?)?;
        eta = standardize_latent(x.dot(&w_x).view())?;
        let rho = canonical_correlation(eta.view(), gamma.view())?;
        trace.push(rho);
        let state = (rho, w_x.clone(), w_y, eta.clone(), gamma);
        if best.as_ref().is_none_or(|b| rho > b.0) {
            best = Some(state.clone());
        }
        last = Some(state);
        let change = (rho - prev).abs();
        prev = rho;
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("NIPALS did not converge in {} iterations", opts.max_iter);
    }
    let chosen = if converged { last } else { best };
    let (rho, w_x, w_y, eta, gamma) =
        chosen.ok_or_else(|| Error::InvalidArgument("max_iter must be positive".into()))?;
    let mut weights = CanonicalWeights { w_x, w_y, component: 1 };
    let s = weights.orientation();
    weights.w_x *= s;
    weights.w_y *= s;
    Ok(PairFit {
        weights,
        rho,
        iterations: trace.len(),
        converged,
        trace,
        eta: eta * s,
        gamma: gamma * s,
    })
}

/// Residualized views for extracting further components.
#[derive(Debug, Clone)]
pub struct DeflationState {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub prior_eta: Vec<Array1<f64>>,
    pub prior_gamma: Vec<Array1<f64>>,
}

impl DeflationState {
    pub fn new(x: Array2<f64>, y: Array2<f64>) -> Self {
        Self {
            x,
            y,
            prior_eta: Vec::new(),
            prior_gamma: Vec::new(),
        }
    }
}

/// `M - v (v'M) / (v'v)`: removes the span of `v` from every column of `M`.
pub fn project_out(m: ArrayView2<f64>, v: ArrayView1<f64>) -> Result<Array2<f64>> {
    if m.nrows() != v.len() {
        return Err(Error::DimensionMismatch(format!("{} rows vs latent of length {}", m.nrows(), v.len())));
    }
    let vv = v.dot(&v);
    if !(vv > 0.0) || !vv.is_finite() {
        return Err(Error::ZeroNorm);
    }
    let coef = m.t().dot(&v) / vv;
    let mut out = m.to_owned();
    for (mut row, &vi) in out.axis_iter_mut(Axis(0)).zip(v.iter()) {
        row.scaled_add(-vi, &coef);
    }
    Ok(out)
}

/// Residualizes each view against its own latent vector.
pub fn deflate(state: &DeflationState, eta: ArrayView1<f64>, gamma: ArrayView1<f64>) -> Result<DeflationState> {
    let x = project_out(state.x.view(), eta)?;
    let y = project_out(state.y.view(), gamma)?;
    let mut prior_eta = state.prior_eta.clone();
    let mut prior_gamma = state.prior_gamma.clone();
    prior_eta.push(eta.to_owned());
    prior_gamma.push(gamma.to_owned());
    Ok(DeflationState {
        x,
        y,
        prior_eta,
        prior_gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn topk_basic() {
        let out = soft_threshold_topk(array![3.0, -1.0, 0.5, 2.0].view(), 2).unwrap();
        assert_eq!(out, array![2.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn topk_full_is_identity() {
        let w = array![3.0, -1.0, 0.5, 2.0];
        assert_eq!(soft_threshold_topk(w.view(), 4).unwrap(), w);
    }

    #[test]
    fn topk_tie_at_cut_keeps_lowest_index() {
        let out = soft_threshold_topk(array![2.0, 2.0, 1.0].view(), 1).unwrap();
        assert_eq!(out, array![1.0, 0.0, 0.0]);
        let out = soft_threshold_topk(array![1.0, -3.0, 3.0, 3.0, 0.5].view(), 2).unwrap();
        assert_eq!(out, array![0.0, -2.0, 2.0, 0.0, 0.0]);
        // tie with nothing smaller: shrink by zero
        let out = soft_threshold_topk(array![-2.0, 2.0, 2.0].view(), 2).unwrap();
        assert_eq!(out, array![-2.0, 2.0, 0.0]);
    }

    #[test]
    fn topk_out_of_range() {
        let w = array![1.0, 2.0];
        assert!(matches!(soft_threshold_topk(w.view(), 0), Err(Error::SparsityOutOfRange { .. })));
        assert!(matches!(soft_threshold_topk(w.view(), 3), Err(Error::SparsityOutOfRange { .. })));
    }

    #[test]
    fn correlation_edge_cases() {
        let a = array![1.0, 2.0, 4.0, 7.0];
        assert!((canonical_correlation(a.view(), a.view()).unwrap() - 1.0).abs() < 1e-15);
        let neg = -&a;
        assert!((canonical_correlation(a.view(), neg.view()).unwrap() + 1.0).abs() < 1e-15);
        let u = array![1.0, -1.0, 1.0, -1.0];
        let v = array![1.0, 1.0, -1.0, -1.0];
        assert!(canonical_correlation(u.view(), v.view()).unwrap().abs() < 1e-12);
        let c = array![3.0, 3.0, 3.0, 3.0];
        assert!(matches!(canonical_correlation(a.view(), c.view()), Err(Error::ZeroVariance)));
        assert!(canonical_correlation(a.view(), array![1.0].view()).is_err());
    }

    #[test]
    fn standardize_latent_scales_only() {
        let v = array![1.0, 2.0, 3.0];
        let s = standardize_latent(v.view()).unwrap();
        assert_eq!(s, array![1.0, 2.0, 3.0]);
        assert!(matches!(standardize_latent(array![2.0, 2.0].view()), Err(Error::ZeroVariance)));
    }

    #[test]
    fn identical_views_give_unit_correlation() {
        let x = array![[1.0, 0.5], [-0.3, 1.0], [-1.2, -0.4], [0.5, -1.1]];
        let fit = nipals_pair(x.view(), x.view(), &NipalsOptions::full(2, 2)).unwrap();
        assert!((fit.rho - 1.0).abs() < 1e-8);
        assert!(fit.converged);
    }

    #[test]
    fn deflation_removes_latent_direction() {
        let x = array![[1.0, 0.5, 2.0], [-0.3, 1.0, 0.1], [-1.2, -0.4, 0.7], [0.5, -1.1, -2.8]];
        let eta = array![0.2, -1.0, 0.4, 0.4];
        let d = project_out(x.view(), eta.view()).unwrap();
        for v in eta.dot(&d).iter() {
            assert!(v.abs() < 1e-12);
        }
        let d2 = project_out(d.view(), eta.view()).unwrap();
        for (a, b) in d.iter().zip(d2.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(matches!(project_out(x.view(), Array1::zeros(4).view()), Err(Error::ZeroNorm)));
    }
}
