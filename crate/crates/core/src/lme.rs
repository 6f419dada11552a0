//! Random-intercept linear mixed models for latent series.
//!
//! The model for row `(i, t)` is `y = x(t)'beta + b_i + e`, with
//! `b_i ~ N(0, s2_alpha)` and `e ~ N(0, s2_eps)`. For a fixed variance ratio
//! `lambda = s2_alpha / s2_eps` the GLS estimate of `beta`, the residual
//! variance and the BLUPs are closed-form, so the likelihood is profiled down
//! to a one-dimensional function of `log(lambda)` and maximized by a coarse
//! grid followed by golden-section refinement.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{LongView, SubjectBlock};
use crate::error::{Error, Result};

/// Per-row latent values aligned with the rows of a [`LongView`].
pub type LatentSeries = Array1<f64>;

/// Fixed-effects expansion of a scalar time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeBasis {
    /// `[1, t, ..., t^d]`
    Polynomial { degree: usize },
    /// `[1, t, ..., t^d, t * 1{t > knot}]`
    ChangePoint { degree: usize, knot: f64 },
}

impl TimeBasis {
    pub fn linear() -> Self {
        TimeBasis::Polynomial { degree: 1 }
    }

    pub fn polynomial(degree: usize) -> Self {
        TimeBasis::Polynomial { degree }
    }

    pub fn degree(&self) -> usize {
        match *self {
            TimeBasis::Polynomial { degree } | TimeBasis::ChangePoint { degree, .. } => degree,
        }
    }

    pub fn n_columns(&self) -> usize {
        match self {
            TimeBasis::Polynomial { degree } => degree + 1,
            TimeBasis::ChangePoint { degree, .. } => degree + 2,
        }
    }

    /// Design row in raw time units.
    pub fn row(&self, t: f64) -> Vec<f64> {
        self.scaled_row(t, &TimeScaling::IDENTITY)
    }

    fn scaled_row(&self, t: f64, sc: &TimeScaling) -> Vec<f64> {
        let u = (t - sc.center) / sc.half_range;
        let mut row = Vec::with_capacity(self.n_columns());
        let mut pow = 1.0;
        for _ in 0..=self.degree() {
            row.push(pow);
            pow *= u;
        }
        if let TimeBasis::ChangePoint { knot, .. } = *self {
            row.push(if t > knot { t / sc.half_range } else { 0.0 });
        }
        row
    }

    fn validate(&self) -> Result<()> {
        if self.degree() == 0 {
            return Err(Error::InvalidArgument("basis degree must be at least 1".into()));
        }
        if let TimeBasis::ChangePoint { knot, .. } = self {
            if !knot.is_finite() {
                return Err(Error::InvalidArgument("change-point knot must be finite".into()));
            }
        }
        Ok(())
    }
}

impl fmt::Display for TimeBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeBasis::Polynomial { degree: 1 } => write!(f, "linear"),
            TimeBasis::Polynomial { degree } => write!(f, "poly:{degree}"),
            TimeBasis::ChangePoint { degree, knot } => write!(f, "changepoint:{degree}:{knot}"),
        }
    }
}

impl FromStr for TimeBasis {
    type Err = Error;

    /// Accepts `linear`, `poly:<d>` and `changepoint:<d>[:<knot>]` (knot defaults to 0).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unrecognized basis `{s}`"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        let degree = |p: &str| p.parse::<usize>().map_err(|_| bad());
        let basis = match parts.as_slice() {
            ["linear"] => TimeBasis::linear(),
            ["poly", d] => TimeBasis::Polynomial { degree: degree(d)? },
            ["changepoint", d] => TimeBasis::ChangePoint {
                degree: degree(d)?,
                knot: 0.0,
            },
            ["changepoint", d, k] => TimeBasis::ChangePoint {
                degree: degree(d)?,
                knot: k.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        basis.validate()?;
        Ok(basis)
    }
}

/// Raw design matrix, columns `[1, t, ..., t^d, (t * 1{t > s})?]`.
pub fn build_design(basis: &TimeBasis, times: &[f64]) -> Array2<f64> {
    let k = basis.n_columns();
    let mut out = Array2::zeros((times.len(), k));
    for (mut r, &t) in out.rows_mut().into_iter().zip(times) {
        for (dst, v) in r.iter_mut().zip(basis.row(t)) {
            *dst = v;
        }
    }
    out
}

/// Affine map of time onto roughly `[-1, 1]` used to condition polynomial designs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeScaling {
    pub center: f64,
    pub half_range: f64,
}

impl TimeScaling {
    pub const IDENTITY: TimeScaling = TimeScaling {
        center: 0.0,
        half_range: 1.0,
    };

    fn from_times(times: &[f64]) -> Self {
        let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let half = (hi - lo) / 2.0;
        TimeScaling {
            center: (hi + lo) / 2.0,
            half_range: if half > 0.0 { half } else { 1.0 },
        }
    }
}

/// How the variance ratio `lambda = s2_alpha / s2_eps` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum LambdaMode {
    /// Maximize the profiled likelihood over `log(lambda)` in `[LOG_LAMBDA_MIN, LOG_LAMBDA_MAX]`.
    #[default]
    Profiled,
    Fixed(f64),
}

pub const LOG_LAMBDA_MIN: f64 = -14.0;
pub const LOG_LAMBDA_MAX: f64 = 7.0;
const LOG_LAMBDA_TOL: f64 = 1e-10;
const GRID_STEP: f64 = 0.25;

/// A fitted random-intercept model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedModelFit {
    pub basis: TimeBasis,
    /// Fixed effects in raw time units, ordered like [`build_design`] columns.
    pub fixed_effects: Vec<f64>,
    pub random_intercepts: BTreeMap<String, f64>,
    pub var_random: f64,
    pub var_resid: f64,
    pub lambda: f64,
    pub loglik: f64,
    pub warnings: Vec<String>,
    scaling: TimeScaling,
    coef_scaled: Vec<f64>,
}

impl MixedModelFit {
    /// Assembles a fit from raw-unit parameters.
    pub fn from_parts(
        basis: TimeBasis,
        fixed_effects: Vec<f64>,
        random_intercepts: BTreeMap<String, f64>,
        var_random: f64,
        var_resid: f64,
    ) -> Result<Self> {
        if fixed_effects.len() != basis.n_columns() {
            return Err(Error::DimensionMismatch(format!(
                "basis {basis} needs {} coefficients, got {}",
                basis.n_columns(),
                fixed_effects.len()
            )));
        }
        Ok(Self {
            basis,
            coef_scaled: fixed_effects.clone(),
            fixed_effects,
            random_intercepts,
            var_random,
            var_resid,
            lambda: if var_resid > 0.0 { var_random / var_resid } else { 0.0 },
            loglik: f64::NAN,
            warnings: Vec::new(),
            scaling: TimeScaling::IDENTITY,
        })
    }

    /// Population curve `x(t)'beta`.
    pub fn fixed_part(&self, t: f64) -> f64 {
        self.basis
            .scaled_row(t, &self.scaling)
            .iter()
            .zip(&self.coef_scaled)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// BLUP of a subject, zero for subjects not seen at fit time.
    pub fn blup(&self, subject: &str) -> f64 {
        self.random_intercepts.get(subject).copied().unwrap_or(0.0)
    }

    pub fn predict_one(&self, subject: &str, t: f64) -> f64 {
        self.fixed_part(t) + self.blup(subject)
    }

    pub fn predict(&self, subjects: &[String], times: &[f64]) -> LatentSeries {
        subjects
            .iter()
            .zip(times)
            .map(|(s, &t)| self.predict_one(s, t))
            .collect()
    }

    /// Sign-flipped model, i.e. the fit of the negated series.
    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        out.fixed_effects.iter_mut().for_each(|v| *v = -*v);
        out.coef_scaled.iter_mut().for_each(|v| *v = -*v);
        out.random_intercepts.values_mut().for_each(|v| *v = -*v);
        out
    }
}

/// Evaluates the predicted value of every row of a target grid.
pub fn predict_latent(fit: &MixedModelFit, target: &LongView) -> LatentSeries {
    fit.predict(target.subject_ids(), target.times())
}

/// Fixed-effects curve over a time grid.
pub fn mean_trajectory(fit: &MixedModelFit, grid: &[f64]) -> Vec<f64> {
    grid.iter().map(|&t| fit.fixed_part(t)).collect()
}

/// Design and grouping of one observation grid, reusable across series.
#[derive(Debug, Clone)]
pub struct LmeProblem {
    basis: TimeBasis,
    scaling: TimeScaling,
    design: Array2<f64>,
    groups: Vec<SubjectBlock>,
}

/// GLS solution at a fixed variance ratio.
#[derive(Debug, Clone)]
pub struct GlsSolution {
    pub lambda: f64,
    /// Coefficients on the internally scaled design.
    pub beta_scaled: Vec<f64>,
    /// `sum_i r_i' (I - c_i J) r_i` with `c_i = lambda / (1 + lambda m_i)`.
    pub weighted_rss: f64,
    pub residuals: Vec<f64>,
}

impl LmeProblem {
    pub fn new(basis: TimeBasis, subject_ids: &[String], times: &[f64]) -> Result<Self> {
        basis.validate()?;
        if subject_ids.len() != times.len() {
            return Err(Error::DimensionMismatch("subject ids and times differ in length".into()));
        }
        let groups = contiguous_groups(subject_ids)?;
        if groups.len() < 2 {
            return Err(Error::LmeFailure(format!(
                "need at least 2 subjects, got {}",
                groups.len()
            )));
        }
        let scaling = TimeScaling::from_times(times);
        let k = basis.n_columns();
        let n = times.len();
        if n < k {
            return Err(Error::RankDeficient(format!(
                "{n} observations for {k} fixed effects of basis {basis}"
            )));
        }
        let mut design = Array2::zeros((n, k));
        for (mut r, &t) in design.rows_mut().into_iter().zip(times) {
            for (dst, v) in r.iter_mut().zip(basis.scaled_row(t, &scaling)) {
                *dst = v;
            }
        }
        let dm = DMatrix::from_fn(n, k, |i, j| design[[i, j]]);
        let sv = dm.singular_values();
        let (smax, smin) = (sv.max(), sv.min());
        if !(smin > 1e-10 * smax) {
            return Err(Error::RankDeficient(format!(
                "basis {basis} on {} distinct time(s)",
                distinct_count(times)
            )));
        }
        Ok(Self {
            basis,
            scaling,
            design,
            groups,
        })
    }

    pub fn from_view(basis: TimeBasis, view: &LongView) -> Result<Self> {
        Self::new(basis, view.subject_ids(), view.times())
    }

    pub fn n_rows(&self) -> usize {
        self.design.nrows()
    }

    pub fn groups(&self) -> &[SubjectBlock] {
        &self.groups
    }

    fn check_len(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.n_rows() {
            return Err(Error::DimensionMismatch(format!(
                "series has {} values, grid has {} rows",
                y.len(),
                self.n_rows()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::LmeFailure("non-finite latent value".into()));
        }
        Ok(())
    }

    /// Generalized least squares at a fixed variance ratio, using the
    /// closed-form inverse `V_i^{-1} ∝ I - lambda / (1 + lambda m_i) J`.
    pub fn gls(&self, y: &[f64], lambda: f64) -> Result<GlsSolution> {
        self.check_len(y)?;
        let k = self.basis.n_columns();
        let mut a = DMatrix::<f64>::zeros(k, k);
        let mut b = DVector::<f64>::zeros(k);
        for g in &self.groups {
            let c = lambda / (1.0 + lambda * g.len as f64);
            let mut s = DVector::<f64>::zeros(k);
            let mut ysum = 0.0;
            for r in g.rows() {
                let x = self.design.row(r);
                for i in 0..k {
                    s[i] += x[i];
                    b[i] += x[i] * y[r];
                    for j in 0..=i {
                        a[(i, j)] += x[i] * x[j];
                    }
                }
                ysum += y[r];
            }
            for i in 0..k {
                b[i] -= c * s[i] * ysum;
                for j in 0..=i {
                    a[(i, j)] -= c * s[i] * s[j];
                }
            }
        }
        for i in 0..k {
            for j in 0..i {
                a[(j, i)] = a[(i, j)];
            }
        }
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::LinAlg("GLS normal equations not positive definite".into()))?;
        let beta = chol.solve(&b);

        let mut residuals = Vec::with_capacity(y.len());
        for (r, &yr) in y.iter().enumerate() {
            let fitted: f64 = self.design.row(r).iter().zip(beta.iter()).map(|(x, bb)| x * bb).sum();
            residuals.push(yr - fitted);
        }
        let mut rss = 0.0;
        for g in &self.groups {
            let c = lambda / (1.0 + lambda * g.len as f64);
            let res = &residuals[g.rows()];
            let ss: f64 = res.iter().map(|v| v * v).sum();
            let sum: f64 = res.iter().sum();
            rss += ss - c * sum * sum;
        }
        Ok(GlsSolution {
            lambda,
            beta_scaled: beta.iter().copied().collect(),
            weighted_rss: rss.max(0.0),
            residuals,
        })
    }

    /// Profiled ML log-likelihood at `lambda`, with `beta` and `s2_eps`
    /// replaced by their maximizers.
    pub fn profiled_loglik(&self, y: &[f64], lambda: f64) -> Result<f64> {
        let sol = self.gls(y, lambda)?;
        Ok(self.loglik_of(&sol))
    }

    fn loglik_of(&self, sol: &GlsSolution) -> f64 {
        let n = self.n_rows() as f64;
        let s2 = (sol.weighted_rss / n).max(f64::MIN_POSITIVE);
        let logdet: f64 = self
            .groups
            .iter()
            .map(|g| (sol.lambda * g.len as f64).ln_1p())
            .sum();
        -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + n * s2.ln() + n + logdet)
    }

    pub fn fit(&self, y: &[f64], mode: LambdaMode) -> Result<MixedModelFit> {
        self.check_len(y)?;
        // Work on the centered series so that a constant shift of the input
        // only moves the intercept.
        let shift = y.iter().sum::<f64>() / y.len() as f64;
        let centered: Vec<f64> = y.iter().map(|v| v - shift).collect();
        let y = centered.as_slice();
        let mut warnings = Vec::new();
        let ols = self.gls(y, 0.0)?;
        let ysq: f64 = y.iter().map(|v| v * v).sum();
        let exact = ols.weighted_rss <= 1e-20 * ysq || ysq == 0.0;
        let all_singleton = self.groups.iter().all(|g| g.len == 1);

        let lambda = match mode {
            LambdaMode::Fixed(l) => {
                if !(l >= 0.0 && l.is_finite()) {
                    return Err(Error::InvalidArgument(format!("fixed lambda must be >= 0, got {l}")));
                }
                l
            }
            LambdaMode::Profiled if exact => 0.0,
            LambdaMode::Profiled if all_singleton => {
                let msg = "every subject has a single observation; random-intercept variance is \
                           not identifiable, using s2_alpha = 0";
                warn!("{msg}");
                warnings.push(msg.to_string());
                0.0
            }
            LambdaMode::Profiled => self.optimize_lambda(y)?,
        };

        let mut sol = if lambda == 0.0 { ols } else { self.gls(y, lambda)? };
        sol.beta_scaled[0] += shift;
        let loglik = self.loglik_of(&sol);
        let var_resid = (sol.weighted_rss / self.n_rows() as f64).max(f64::MIN_POSITIVE);
        let random_intercepts = self
            .groups
            .iter()
            .map(|g| {
                let m = g.len as f64;
                let mean_res = sol.residuals[g.rows()].iter().sum::<f64>() / m;
                (g.id.clone(), lambda * m / (1.0 + lambda * m) * mean_res)
            })
            .collect();

        Ok(MixedModelFit {
            basis: self.basis,
            fixed_effects: unscale_coefficients(&self.basis, &self.scaling, &sol.beta_scaled),
            random_intercepts,
            var_random: lambda * var_resid,
            var_resid,
            lambda,
            loglik,
            warnings,
            scaling: self.scaling,
            coef_scaled: sol.beta_scaled,
        })
    }

    fn optimize_lambda(&self, y: &[f64]) -> Result<f64> {
        let f = |log_l: f64| self.profiled_loglik(y, log_l.exp());
        let steps = ((LOG_LAMBDA_MAX - LOG_LAMBDA_MIN) / GRID_STEP).round() as usize;
        let grid: Vec<f64> = (0..=steps)
            .map(|i| LOG_LAMBDA_MIN + i as f64 * GRID_STEP)
            .collect();
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, &g) in grid.iter().enumerate() {
            let v = f(g)?;
            if v > best.1 {
                best = (i, v);
            }
        }
        let lo = grid[best.0.saturating_sub(1)];
        let hi = grid[(best.0 + 1).min(steps)];
        let (x, fx) = if self.score(y, lo)? > 0.0 && self.score(y, hi)? < 0.0 {
            let x = bisect_decreasing(|v| self.score(y, v), lo, hi)?;
            (x, f(x)?)
        } else {
            golden_section_max(&f, lo, hi, LOG_LAMBDA_TOL)?
        };
        Ok(if fx >= best.1 { x } else { grid[best.0] }.exp())
    }

    /// Derivative of the profiled log-likelihood with respect to `log(lambda)`.
    /// With `s_i` the residual sum of subject `i` at the GLS solution,
    /// `d RSS / d lambda = -sum_i s_i^2 / (1 + lambda m_i)^2`.
    fn score(&self, y: &[f64], log_lambda: f64) -> Result<f64> {
        let lambda = log_lambda.exp();
        let sol = self.gls(y, lambda)?;
        let n = self.n_rows() as f64;
        let mut drss = 0.0;
        let mut dlogdet = 0.0;
        for g in &self.groups {
            let m = g.len as f64;
            let s: f64 = sol.residuals[g.rows()].iter().sum();
            let d = 1.0 + lambda * m;
            drss -= s * s / (d * d);
            dlogdet += m / d;
        }
        if !(sol.weighted_rss > 0.0) {
            return Ok(0.0);
        }
        Ok(-0.5 * lambda * (n * drss / sol.weighted_rss + dlogdet))
    }
}

/// Convenience wrapper: profiled ML fit of one series on one grid.
pub fn fit_lme(series: &[f64], view: &LongView, basis: TimeBasis) -> Result<MixedModelFit> {
    LmeProblem::from_view(basis, view)?.fit(series, LambdaMode::Profiled)
}

fn golden_section_max<F>(f: &F, mut a: f64, mut b: f64, tol: f64) -> Result<(f64, f64)>
where
    F: Fn(f64) -> Result<f64>,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while (b - a).abs() > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc >= fd { (c, fc) } else { (d, fd) })
}

/// Root of a function that is positive at `a` and negative at `b`, to
/// machine precision in the argument.
fn bisect_decreasing<F>(g: F, mut a: f64, mut b: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if g(mid)? > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

fn contiguous_groups(ids: &[String]) -> Result<Vec<SubjectBlock>> {
    let mut groups: Vec<SubjectBlock> = Vec::new();
    for (row, id) in ids.iter().enumerate() {
        match groups.last_mut() {
            Some(g) if &g.id == id => g.len += 1,
            _ => {
                if groups.iter().any(|g| &g.id == id) {
                    return Err(Error::InvalidView(format!("rows of subject `{id}` are not contiguous")));
                }
                groups.push(SubjectBlock {
                    id: id.clone(),
                    start: row,
                    len: 1,
                })
            }
        }
    }
    Ok(groups)
}

fn distinct_count(times: &[f64]) -> usize {
    let mut t = times.to_vec();
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    t.dedup();
    t.len()
}

/// Maps coefficients on `[1, u, ..., u^d, (t/h) 1{t>s}]` with `u = (t - c)/h`
/// back onto the raw design `[1, t, ..., t^d, t 1{t>s}]`.
fn unscale_coefficients(basis: &TimeBasis, sc: &TimeScaling, coef: &[f64]) -> Vec<f64> {
    let d = basis.degree();
    let (c, h) = (sc.center, sc.half_range);
    let mut raw = vec![0.0; coef.len()];
    for (k, &a) in coef.iter().enumerate().take(d + 1) {
        let scale = a / h.powi(k as i32);
        let mut binom = 1.0;
        for j in 0..=k {
            raw[j] += scale * binom * (-c).powi((k - j) as i32);
            binom = binom * (k - j) as f64 / (j + 1) as f64;
        }
    }
    if coef.len() > d + 1 {
        raw[d + 1] = coef[d + 1] / h;
    }
    raw
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n_subjects: usize, m: usize) -> (Vec<String>, Vec<f64>) {
        let mut ids = Vec::new();
        let mut times = Vec::new();
        for i in 0..n_subjects {
            for j in 0..m {
                ids.push(format!("s{i}"));
                times.push(j as f64);
            }
        }
        (ids, times)
    }

    #[test]
    fn design_rows() {
        assert_eq!(TimeBasis::polynomial(3).row(2.0), vec![1.0, 2.0, 4.0, 8.0]);
        let cp = TimeBasis::ChangePoint { degree: 1, knot: 0.0 };
        assert_eq!(cp.row(-1.0), vec![1.0, -1.0, 0.0]);
        assert_eq!(cp.row(1.0), vec![1.0, 1.0, 1.0]);
        assert_eq!(TimeBasis::linear().row(0.0), vec![1.0, 0.0]);
        let d = build_design(&TimeBasis::linear(), &[0.0, 3.0]);
        assert_eq!(d, ndarray::array![[1.0, 0.0], [1.0, 3.0]]);
    }

    #[test]
    fn parse_and_display_basis() {
        for s in ["linear", "poly:3", "changepoint:3:0", "changepoint:2:-1.5"] {
            let b: TimeBasis = s.parse().unwrap();
            assert_eq!(b.to_string(), s);
        }
        assert_eq!("poly:1".parse::<TimeBasis>().unwrap(), TimeBasis::linear());
        assert_eq!(
            "changepoint:3".parse::<TimeBasis>().unwrap(),
            TimeBasis::ChangePoint { degree: 3, knot: 0.0 }
        );
        assert!("poly:0".parse::<TimeBasis>().is_err());
        assert!("spline:3".parse::<TimeBasis>().is_err());
    }

    #[test]
    fn unscaling_reproduces_raw_design() {
        let basis = TimeBasis::ChangePoint { degree: 3, knot: 4.5 };
        let sc = TimeScaling {
            center: 5.5,
            half_range: 4.5,
        };
        let coef = [0.3, -1.2, 0.7, 0.25, -0.4];
        let raw = unscale_coefficients(&basis, &sc, &coef);
        for t in [1.0, 3.3, 4.5, 7.0, 10.0] {
            let a: f64 = basis.scaled_row(t, &sc).iter().zip(&coef).map(|(x, b)| x * b).sum();
            let b: f64 = basis.row(t).iter().zip(&raw).map(|(x, b)| x * b).sum();
            assert!((a - b).abs() < 1e-12, "{t}: {a} vs {b}");
        }
    }

    #[test]
    fn rank_deficient_design() {
        let (ids, _) = grid(4, 2);
        let times = vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let err = LmeProblem::new(TimeBasis::polynomial(3), &ids, &times).unwrap_err();
        assert!(matches!(err, Error::RankDeficient(_)));
    }

    #[test]
    fn single_subject_rejected() {
        let ids = vec!["a".to_string(); 3];
        assert!(LmeProblem::new(TimeBasis::linear(), &ids, &[0.0, 1.0, 2.0]).is_err());
    }

    #[test]
    fn noiseless_linear_is_reproduced() {
        let (ids, times) = grid(5, 4);
        let y: Vec<f64> = times.iter().map(|t| 1.5 - 0.5 * t).collect();
        let p = LmeProblem::new(TimeBasis::linear(), &ids, &times).unwrap();
        let fit = p.fit(&y, LambdaMode::Profiled).unwrap();
        let pred = fit.predict(&ids, &times);
        for (a, b) in pred.iter().zip(&y) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!((fit.fixed_effects[0] - 1.5).abs() < 1e-10);
        assert!((fit.fixed_effects[1] + 0.5).abs() < 1e-10);
    }

    #[test]
    fn constant_zero_series_gives_zero_curve() {
        let (ids, times) = grid(3, 3);
        let p = LmeProblem::new(TimeBasis::polynomial(2), &ids, &times).unwrap();
        let fit = p.fit(&vec![0.0; 9], LambdaMode::Profiled).unwrap();
        assert!(mean_trajectory(&fit, &[0.0, 1.0, 2.5]).iter().all(|v| *v == 0.0));
        assert!(fit.var_resid > 0.0);
    }

    #[test]
    fn prediction_contract() {
        let mut blups = BTreeMap::new();
        blups.insert("a".to_string(), 2.0);
        let fit = MixedModelFit::from_parts(TimeBasis::linear(), vec![0.0, 1.0], blups, 1.0, 1.0).unwrap();
        assert_eq!(fit.predict_one("a", 3.0), 5.0);
        assert_eq!(fit.predict_one("unseen", 3.0), 3.0);
        assert_eq!(mean_trajectory(&fit, &[0.0]), vec![0.0]);
    }

    #[test]
    fn singleton_subjects_fall_back_to_zero_variance() {
        let ids: Vec<String> = (0..6).map(|i| i.to_string()).collect();
        let times = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let y = vec![0.1, 1.3, 1.8, 3.4, 3.9, 5.2];
        let p = LmeProblem::new(TimeBasis::linear(), &ids, &times).unwrap();
        let fit = p.fit(&y, LambdaMode::Profiled).unwrap();
        assert_eq!(fit.var_random, 0.0);
        assert!(!fit.warnings.is_empty());
        assert!(fit.random_intercepts.values().all(|b| *b == 0.0));
    }

    #[test]
    fn fixed_lambda_mode() {
        let (ids, times) = grid(4, 3);
        let y: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64).collect();
        let p = LmeProblem::new(TimeBasis::linear(), &ids, &times).unwrap();
        let fit = p.fit(&y, LambdaMode::Fixed(2.5)).unwrap();
        assert_eq!(fit.lambda, 2.5);
        assert!((fit.var_random - 2.5 * fit.var_resid).abs() < 1e-12);
        assert!(p.fit(&y, LambdaMode::Fixed(-1.0)).is_err());
    }

    #[test]
    fn negated_fit_predicts_negated_values() {
        let (ids, times) = grid(4, 3);
        let y: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 + 0.1 * i as f64).collect();
        let p = LmeProblem::new(TimeBasis::polynomial(2), &ids, &times).unwrap();
        let fit = p.fit(&y, LambdaMode::Profiled).unwrap();
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        let fit_neg = p.fit(&neg, LambdaMode::Profiled).unwrap();
        let a = fit.negated().predict(&ids, &times);
        let b = fit_neg.predict(&ids, &times);
        for (x, z) in a.iter().zip(b.iter()) {
            assert!((x - z).abs() < 1e-10);
        }
    }
}
