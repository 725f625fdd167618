//! Forecasts how much free memory a producer will have over a lease.

mod arima;

use serde::{Deserialize, Serialize};

pub use arima::{
    default_grid, difference, fit, forecast, grid_search, holdout_mse, ArimaModel, ArimaOrder, Coefficients,
    CONVERGENCE_TOL, EXPLOSION_FACTOR, HOLDOUT_FRACTION, MAX_ITERATIONS,
};

use crate::error::{Error, Result};
use crate::units::{Duration, Instant, MS_PER_DAY};

/// Regularly spaced samples of free memory in GB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub start: Instant,
    pub step: Duration,
    pub values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(start: Instant, step: Duration) -> Self {
        TimeSeries { start, step, values: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn span(&self) -> Duration {
        Duration(self.step.0 * self.values.len().saturating_sub(1) as u64)
    }

    pub fn last_at(&self) -> Option<Instant> {
        (!self.values.is_empty()).then(|| self.start + self.span())
    }

    pub fn push(&mut self, v: f64) -> Result<()> {
        if !v.is_finite() {
            return Err(Error::invalid("time series values must be finite"));
        }
        self.values.push(v);
        Ok(())
    }

    /// The trailing `n` values.
    pub fn tail(&self, n: usize) -> &[f64] {
        &self.values[self.values.len().saturating_sub(n)..]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub grid: Vec<ArimaOrder>,
    pub retune_every: Duration,
    /// History needed before ARIMA is used instead of the last value.
    pub min_history: Duration,
    /// Only the trailing samples are used for fitting and tuning.
    pub fit_window: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            grid: default_grid(),
            retune_every: Duration(MS_PER_DAY),
            min_history: Duration(MS_PER_DAY),
            fit_window: 576,
        }
    }
}

/// Per-producer availability forecaster with daily order tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityPredictor {
    pub cfg: PredictorConfig,
    pub order: Option<ArimaOrder>,
    pub tuned_at: Option<Instant>,
    pub tune_count: u64,
}

impl Default for AvailabilityPredictor {
    fn default() -> Self {
        Self::new(PredictorConfig::default())
    }
}

impl AvailabilityPredictor {
    pub fn new(cfg: PredictorConfig) -> Self {
        AvailabilityPredictor { cfg, order: None, tuned_at: None, tune_count: 0 }
    }

    fn enough_history(&self, history: &TimeSeries) -> bool {
        history.len() >= 2 && history.span() >= self.cfg.min_history
    }

    /// Re-runs the grid search when the history is long enough and the last
    /// tuning is at least `retune_every` old. Returns whether it ran.
    pub fn maybe_retune(&mut self, history: &TimeSeries, now: Instant) -> bool {
        if !self.enough_history(history) {
            return false;
        }
        if self.tuned_at.is_some_and(|t| now.since(t) < self.cfg.retune_every) {
            return false;
        }
        let window = history.tail(self.cfg.fit_window);
        self.order = Some(grid_search(window, &self.cfg.grid));
        self.tuned_at = Some(now);
        self.tune_count += 1;
        true
    }

    /// Smallest forecast free memory over the lease, floored at zero. Uses
    /// the last observed value when there is not enough history or the fit
    /// fails.
    pub fn predict_min_free(&mut self, history: &TimeSeries, lease: Duration, now: Instant) -> f64 {
        let Some(&last) = history.values.last() else {
            return 0.0;
        };
        self.maybe_retune(history, now);
        let steps = if history.step.0 == 0 { 1 } else { lease.0.div_ceil(history.step.0).max(1) as usize };
        let naive = last.max(0.0);
        let Some(order) = self.order.filter(|_| self.enough_history(history)) else {
            return naive;
        };
        let window = history.tail(self.cfg.fit_window);
        let model = match fit(window, order) {
            Ok(m) => m,
            Err(_) => return naive,
        };
        match forecast(&model, window, steps) {
            Ok(f) => f.into_iter().fold(f64::INFINITY, f64::min).max(0.0),
            Err(_) => naive,
        }
    }
}

/// Fraction of intervals where the prediction exceeds the actual value by
/// more than `margin` (relative to the actual value).
pub fn over_prediction_rate(predicted: &[f64], actual: &[f64], margin: f64) -> f64 {
    let n = predicted.len().min(actual.len());
    if n == 0 {
        return 0.0;
    }
    let over = predicted
        .iter()
        .zip(actual)
        .filter(|(p, a)| **p > **a * (1.0 + margin))
        .count();
    over as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::MS_PER_MIN;

    fn series(step_min: u64, values: Vec<f64>) -> TimeSeries {
        TimeSeries { start: Instant(0), step: Duration(step_min * MS_PER_MIN), values }
    }

    #[test]
    fn flat_history() {
        let h = series(5, vec![10.0; 400]);
        let mut p = AvailabilityPredictor::default();
        let got = p.predict_min_free(&h, Duration::from_hours(2), h.last_at().unwrap());
        assert!((got - 10.0).abs() < 1e-6, "{got}");
    }

    #[test]
    fn short_history_uses_last_value() {
        let h = series(5, vec![4.0, 6.0, 5.0]);
        let mut p = AvailabilityPredictor::default();
        assert_eq!(p.predict_min_free(&h, Duration::from_mins(5), Instant(10 * MS_PER_MIN)), 5.0);
        assert_eq!(p.tune_count, 0);
    }

    #[test]
    fn five_minute_lease_is_one_step() {
        // the five-minute history predicts the next five minutes
        let h = series(5, vec![8.0, 7.0]);
        let mut p = AvailabilityPredictor::default();
        assert_eq!(p.predict_min_free(&h, Duration::from_mins(5), Instant(5 * MS_PER_MIN)), 7.0);
    }

    #[test]
    fn diurnal_trough_is_found() {
        // two days of a sinusoid with a 24 h period, 5-minute steps
        let per_day = 288usize;
        let vals: Vec<f64> = (0..2 * per_day)
            .map(|i| 20.0 + 8.0 * (2.0 * std::f64::consts::PI * i as f64 / per_day as f64).sin())
            .collect();
        let h = series(5, vals);
        let mut p = AvailabilityPredictor::default();
        // next 24 h spans the trough at 12.0
        let got = p.predict_min_free(&h, Duration::from_hours(24), h.last_at().unwrap());
        assert!((got - 12.0).abs() < 1.5, "predicted min {got}");
        assert_eq!(p.tune_count, 1);
    }

    #[test]
    fn retune_daily() {
        let mut p = AvailabilityPredictor::default();
        let mut h = series(5, vec![]);
        let mut tunes = 0;
        for i in 0..(2 * 288) {
            h.push(10.0 + (i % 7) as f64).unwrap();
            if p.maybe_retune(&h, h.last_at().unwrap()) {
                tunes += 1;
            }
        }
        assert_eq!(tunes, 1);
        h.push(1.0).unwrap();
        assert!(p.maybe_retune(&h, h.last_at().unwrap()));
    }

    #[test]
    fn negative_forecasts_are_floored() {
        let vals: Vec<f64> = (0..400).map(|i| 30.0 - 0.1 * i as f64).collect();
        let h = series(5, vals);
        let mut p = AvailabilityPredictor::default();
        let got = p.predict_min_free(&h, Duration::from_hours(24), h.last_at().unwrap());
        assert!(got >= 0.0);
    }

    #[test]
    fn over_prediction() {
        let pred = [10.0, 10.5, 11.0, 9.0];
        let act = [10.0, 10.0, 10.0, 10.0];
        assert_eq!(over_prediction_rate(&pred, &act, 0.04), 0.5);
        assert_eq!(over_prediction_rate(&[], &[], 0.04), 0.0);
    }
}
