//! ARIMA(p, d, q) by conditional sum of squares.
//!
//! On the d-times differenced series w the model is
//!
//! ```text
//! w[t] = c + Σ φ[i]·w[t-i] + Σ θ[j]·e[t-j] + e[t]
//! ```
//!
//! with pre-sample residuals taken as zero. The intercept `c` is only
//! estimated for d = 0; a differenced model has no drift term, so (0, 1, 0)
//! is the plain random walk.
//!
//! Parameters minimise Σ e[t]² (t ≥ p) with damped Gauss-Newton; the residual
//! derivatives follow the same recursion as the residuals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::Instant;

pub const MAX_ITERATIONS: usize = 200;
pub const CONVERGENCE_TOL: f64 = 1e-8;
/// Forecasts beyond this multiple of the series' largest magnitude mark an
/// unstable fit.
pub const EXPLOSION_FACTOR: f64 = 10.0;
/// Observations needed per estimated parameter.
pub const OBS_PER_PARAM: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl ArimaOrder {
    pub const fn new(p: usize, d: usize, q: usize) -> Self {
        ArimaOrder { p, d, q }
    }

    pub const RANDOM_WALK: ArimaOrder = ArimaOrder::new(0, 1, 0);

    fn has_intercept(&self) -> bool {
        self.d == 0
    }

    fn n_params(&self) -> usize {
        self.p + self.q + usize::from(self.has_intercept())
    }

    /// Observations of level history a forecast needs.
    pub fn min_history(&self) -> usize {
        self.p.max(self.q) + self.d + 1
    }
}

impl std::fmt::Display for ArimaOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.p, self.d, self.q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaModel {
    pub order: ArimaOrder,
    pub coeffs: Coefficients,
    pub intercept: f64,
    pub sigma2: f64,
    pub fitted_at: Option<Instant>,
}

impl ArimaModel {
    /// A model with no estimated parameters: forecasts repeat (d = 1) or
    /// return the intercept (d = 0).
    pub fn naive(d: usize, intercept: f64) -> Self {
        ArimaModel {
            order: ArimaOrder::new(0, d, 0),
            coeffs: Coefficients { ar: vec![], ma: vec![] },
            intercept: if d == 0 { intercept } else { 0.0 },
            sigma2: 0.0,
            fitted_at: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: ArimaModel = serde_json::from_str(s)?;
        if m.coeffs.ar.len() != m.order.p || m.coeffs.ma.len() != m.order.q {
            return Err(Error::Parse("coefficient count does not match order".into()));
        }
        Ok(m)
    }

    fn params(&self) -> Params {
        Params {
            c: self.intercept,
            ar: self.coeffs.ar.clone(),
            ma: self.coeffs.ma.clone(),
        }
    }
}

/// d-fold first differences.
pub fn difference(series: &[f64], d: usize) -> Result<Vec<f64>> {
    if series.len() <= d {
        return Err(Error::InsufficientHistory {
            need: d + 1,
            have: series.len(),
        });
    }
    let mut out = series.to_vec();
    for _ in 0..d {
        out = out.windows(2).map(|w| w[1] - w[0]).collect();
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Params {
    c: f64,
    ar: Vec<f64>,
    ma: Vec<f64>,
}

impl Params {
    fn to_vec(&self, with_c: bool) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.ar.len() + self.ma.len() + 1);
        if with_c {
            v.push(self.c);
        }
        v.extend(&self.ar);
        v.extend(&self.ma);
        v
    }

    fn from_vec(v: &[f64], order: &ArimaOrder) -> Params {
        let off = usize::from(order.has_intercept());
        Params {
            c: if off == 1 { v[0] } else { 0.0 },
            ar: v[off..off + order.p].to_vec(),
            ma: v[off + order.p..off + order.p + order.q].to_vec(),
        }
    }
}

/// Residuals e[t] for t in 0..n; entries before p are zero by convention.
fn residuals(w: &[f64], prm: &Params) -> Vec<f64> {
    let p = prm.ar.len();
    let mut e = vec![0.0; w.len()];
    for t in p..w.len() {
        let mut pred = prm.c;
        for (i, phi) in prm.ar.iter().enumerate() {
            pred += phi * w[t - 1 - i];
        }
        for (j, theta) in prm.ma.iter().enumerate() {
            if t > j {
                pred += theta * e[t - 1 - j];
            }
        }
        e[t] = w[t] - pred;
    }
    e
}

fn sse(e: &[f64], from: usize) -> f64 {
    e[from..].iter().map(|x| x * x).sum()
}

/// Residuals and their Jacobian with respect to the parameter vector.
fn residuals_and_jacobian(w: &[f64], prm: &Params, order: &ArimaOrder) -> (Vec<f64>, DMatrix<f64>) {
    let n = w.len();
    let p = order.p;
    let k = order.n_params();
    let off = usize::from(order.has_intercept());
    let e = residuals(w, prm);
    let rows = n - p;
    let mut jac = DMatrix::<f64>::zeros(rows, k);
    // de[t]/dβ for every t, kept for the MA recursion.
    let mut de = vec![vec![0.0; k]; n];
    for t in p..n {
        let mut g = vec![0.0; k];
        if off == 1 {
            g[0] = -1.0;
        }
        for i in 0..p {
            g[off + i] = -w[t - 1 - i];
        }
        for j in 0..order.q {
            if t > j {
                g[off + p + j] = -e[t - 1 - j];
            }
        }
        for (j, theta) in prm.ma.iter().enumerate() {
            if t > j {
                let prev = &de[t - 1 - j];
                for (gi, pi) in g.iter_mut().zip(prev) {
                    *gi -= theta * pi;
                }
            }
        }
        for (col, v) in g.iter().enumerate() {
            jac[(t - p, col)] = *v;
        }
        de[t] = g;
    }
    (e, jac)
}

/// Least-squares AR start: regress w[t] on (1, w[t-1..t-p]).
fn ar_start(w: &[f64], order: &ArimaOrder) -> Params {
    let p = order.p;
    let off = usize::from(order.has_intercept());
    let k = p + off;
    if k == 0 {
        return Params { c: 0.0, ar: vec![], ma: vec![0.0; order.q] };
    }
    let rows = w.len() - p;
    let mut x = DMatrix::<f64>::zeros(rows, k);
    let mut y = DVector::<f64>::zeros(rows);
    for t in p..w.len() {
        if off == 1 {
            x[(t - p, 0)] = 1.0;
        }
        for i in 0..p {
            x[(t - p, off + i)] = w[t - 1 - i];
        }
        y[t - p] = w[t];
    }
    let sol = lstsq(&x, &y).unwrap_or_else(|| DVector::zeros(k));
    let mut v: Vec<f64> = sol.iter().copied().collect();
    v.extend(std::iter::repeat(0.0).take(order.q));
    Params::from_vec(&v, order)
}

fn lstsq(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = x.clone().svd(true, true);
    svd.solve(y, 1e-12).ok()
}

/// Fits `order` to the level series by conditional sum of squares.
pub fn fit(series: &[f64], order: ArimaOrder) -> Result<ArimaModel> {
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("series contains non-finite values"));
    }
    let w = difference(series, order.d)?;
    let need = OBS_PER_PARAM * (order.p + order.q + 1);
    if w.len() < need {
        return Err(Error::InsufficientHistory { need: need + order.d, have: series.len() });
    }
    let with_c = order.has_intercept();
    let p = order.p;

    let mut prm = ar_start(&w, &order);
    let mut cur_sse = sse(&residuals(&w, &prm), p);

    if order.n_params() > 0 {
        let mut converged = false;
        for _ in 0..MAX_ITERATIONS {
            let (e, jac) = residuals_and_jacobian(&w, &prm, &order);
            let r = DVector::from_iterator(w.len() - p, e[p..].iter().copied());
            // Gauss-Newton direction solves J·δ ≈ -r.
            let Some(delta) = lstsq(&jac, &(-r)) else {
                return Err(Error::FitFailed("singular Jacobian".into()));
            };
            let base = prm.to_vec(with_c);
            let mut step = 1.0;
            let mut improved = None;
            for _ in 0..40 {
                let cand: Vec<f64> = base.iter().zip(delta.iter()).map(|(b, d)| b + step * d).collect();
                let cp = Params::from_vec(&cand, &order);
                let s = sse(&residuals(&w, &cp), p);
                if s.is_finite() && s <= cur_sse {
                    improved = Some((cp, s));
                    break;
                }
                step *= 0.5;
            }
            let Some((np, ns)) = improved else {
                converged = true;
                break;
            };
            let rel = if cur_sse > 0.0 { (cur_sse - ns) / cur_sse } else { 0.0 };
            prm = np;
            cur_sse = ns;
            if rel < CONVERGENCE_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::FitFailed(format!(
                "no convergence in {MAX_ITERATIONS} iterations for order {order}"
            )));
        }
    }

    let m = (w.len() - p) as f64;
    let model = ArimaModel {
        order,
        coeffs: Coefficients { ar: prm.ar.clone(), ma: prm.ma.clone() },
        intercept: prm.c,
        sigma2: cur_sse / m.max(1.0),
        fitted_at: None,
    };
    if model.coeffs.ar.iter().chain(&model.coeffs.ma).any(|v| !v.is_finite()) || !model.intercept.is_finite() {
        return Err(Error::FitFailed("non-finite coefficients".into()));
    }
    check_stability(&model, series)?;
    Ok(model)
}

fn check_stability(model: &ArimaModel, series: &[f64]) -> Result<()> {
    let scale = series.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let horizon = series.len().max(20);
    let f = forecast(model, series, horizon)?;
    if f.iter().any(|v| !v.is_finite() || v.abs() > EXPLOSION_FACTOR * scale) {
        return Err(Error::FitFailed(format!("forecast of order {} explodes", model.order)));
    }
    Ok(())
}

/// h-step recursive point forecast from the trailing observations, returned
/// on the level scale.
pub fn forecast(model: &ArimaModel, history: &[f64], h: usize) -> Result<Vec<f64>> {
    if h == 0 {
        return Err(Error::invalid("forecast horizon must be at least 1"));
    }
    let order = model.order;
    if history.len() < order.min_history() {
        return Err(Error::InsufficientHistory {
            need: order.min_history(),
            have: history.len(),
        });
    }
    let prm = model.params();
    let w = difference(history, order.d)?;
    let e = residuals(&w, &prm);

    let mut ext_w = w.clone();
    let mut ext_e = e;
    let n = w.len();
    for t in n..n + h {
        let mut pred = prm.c;
        for (i, phi) in prm.ar.iter().enumerate() {
            pred += phi * ext_w[t - 1 - i];
        }
        for (j, theta) in prm.ma.iter().enumerate() {
            pred += theta * ext_e[t - 1 - j];
        }
        ext_w.push(pred);
        ext_e.push(0.0);
    }
    let mut out: Vec<f64> = ext_w[n..].to_vec();
    // Undo each differencing level, innermost first.
    for level in (0..order.d).rev() {
        let base = difference(history, level)?;
        let mut last = *base.last().expect("non-empty");
        for v in out.iter_mut() {
            last += *v;
            *v = last;
        }
    }
    Ok(out)
}

/// Mean squared one-step-ahead error over the trailing `holdout_frac` of the
/// series, with the model fitted on the head only.
pub fn holdout_mse(series: &[f64], order: ArimaOrder, holdout_frac: f64) -> Result<f64> {
    let n = series.len();
    let split = n - ((n as f64 * holdout_frac).round() as usize).clamp(1, n - 1);
    let model = fit(&series[..split], order)?;
    Ok(rolling_mse(&model, series, split))
}

/// One-step rolling errors from `split` onwards with fixed coefficients.
fn rolling_mse(model: &ArimaModel, series: &[f64], split: usize) -> f64 {
    let d = model.order.d;
    let w = difference(series, d).expect("series longer than d");
    let e = residuals(&w, &model.params());
    // Level value series[t] corresponds to w[t - d]; its one-step error equals
    // the residual at that index.
    let errs: Vec<f64> = (split.max(d + model.order.p)..series.len()).map(|t| e[t - d]).collect();
    if errs.is_empty() {
        return f64::INFINITY;
    }
    errs.iter().map(|x| x * x).sum::<f64>() / errs.len() as f64
}

pub const HOLDOUT_FRACTION: f64 = 0.2;

/// The default search space: p ≤ 3, d ≤ 1, q ≤ 2.
pub fn default_grid() -> Vec<ArimaOrder> {
    let mut g = Vec::new();
    for p in 0..=3 {
        for d in 0..=1 {
            for q in 0..=2 {
                g.push(ArimaOrder::new(p, d, q));
            }
        }
    }
    g
}

/// Picks the order with the smallest holdout MSE. Ties go to the smaller
/// p + q, then smaller p, then smaller d. Falls back to the random walk when
/// nothing fits.
pub fn grid_search(series: &[f64], grid: &[ArimaOrder]) -> ArimaOrder {
    if series.len() < 5 {
        return ArimaOrder::RANDOM_WALK;
    }
    let mut best: Option<(f64, ArimaOrder)> = None;
    for &order in grid {
        let Ok(mse) = holdout_mse(series, order, HOLDOUT_FRACTION) else {
            continue;
        };
        if !mse.is_finite() {
            continue;
        }
        let key = |o: &ArimaOrder| (o.p + o.q, o.p, o.d);
        best = match best {
            None => Some((mse, order)),
            Some((bm, bo)) => {
                if mse < bm || (mse == bm && key(&order) < key(&bo)) {
                    Some((mse, order))
                } else {
                    Some((bm, bo))
                }
            }
        };
    }
    best.map_or(ArimaOrder::RANDOM_WALK, |(_, o)| o)
}
