//! Producer-side harvesting control loop.
//!
//! Once per epoch the harvester compares the tail of recent application
//! performance with a baseline gathered while the application was not paging
//! in. Stable performance tightens the memory limit by one chunk; a tail drop
//! lifts the limit for a recovery period and hands back one chunk; a sample
//! worse than every baseline point for several epochs in a row also asks the
//! silo to prefetch recently swapped-out pages.

mod window;

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

pub use window::{p99, p99_rank, Orientation, OrderStatTree, PerfWindow};

use crate::error::{Error, Result};
use crate::units::{ByteSize, Duration, Instant, MIB};

/// Absolute tolerance used when the baseline tail is exactly zero.
pub const ZERO_BASELINE_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvesterConfig {
    pub chunk_size: ByteSize,
    pub cooling_period: Duration,
    pub window_size: Duration,
    pub p99_threshold: f64,
    pub epoch: Duration,
    pub severe_epochs: u32,
    pub recovery_period: Duration,
    pub metric_orientation: Orientation,
}

impl Default for HarvesterConfig {
    fn default() -> Self {
        HarvesterConfig {
            chunk_size: ByteSize(64 * MIB),
            cooling_period: Duration::from_mins(5),
            window_size: Duration::from_hours(6),
            p99_threshold: 0.01,
            epoch: Duration::from_secs(1),
            severe_epochs: 3,
            recovery_period: Duration::from_secs(60),
            metric_orientation: Orientation::LowerIsBetter,
        }
    }
}

impl HarvesterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_size.0 == 0
            || self.cooling_period.0 == 0
            || self.window_size.0 == 0
            || self.epoch.0 == 0
            || self.severe_epochs == 0
            || self.recovery_period.0 == 0
        {
            return Err(Error::invalid("harvester parameters must be positive"));
        }
        if !(self.p99_threshold > 0.0 && self.p99_threshold < 1.0) {
            return Err(Error::invalid("p99 threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfSample {
    pub at: Instant,
    pub metric: f64,
    pub had_page_in: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Harvesting,
    Recovery { until: Instant },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestState {
    pub mode: Mode,
    /// Memory the application is allowed before harvesting started.
    pub memory_size: ByteSize,
    /// Net bytes currently taken away from the application.
    pub harvested: ByteSize,
    /// Current limit; `None` while disabled.
    pub limit: Option<ByteSize>,
    pub last_decrease: Option<Instant>,
    /// No further decrease before this instant after pages moved to the silo.
    pub caution_until: Option<Instant>,
    pub consecutive_severe: u32,
    pub last_step: Option<Instant>,
}

impl HarvestState {
    pub fn new(memory_size: ByteSize) -> Self {
        HarvestState {
            mode: Mode::Harvesting,
            memory_size,
            harvested: ByteSize::ZERO,
            limit: Some(memory_size),
            last_decrease: None,
            caution_until: None,
            consecutive_severe: 0,
            last_step: None,
        }
    }
}

/// What the limit should do this epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Hold,
    Harvest(ByteSize),
    Recover { until: Instant, returned: ByteSize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub decision: Decision,
    /// Bytes the silo should prefetch from its backing store.
    pub prefetch: Option<ByteSize>,
}

impl Action {
    pub fn is_harvest(&self) -> bool {
        matches!(self.decision, Decision::Harvest(_))
    }

    pub fn label(&self) -> String {
        let base = match self.decision {
            Decision::Hold => "hold",
            Decision::Harvest(_) => "harvest",
            Decision::Recover { .. } => "recover",
        };
        if self.prefetch.is_some() {
            format!("{base}+prefetch")
        } else {
            base.to_string()
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Inserts `s` into `recent`, and into `baseline` only when the epoch saw no
/// page-in. Both windows are then expired to their window size.
pub fn record_sample(baseline: &mut PerfWindow, recent: &mut PerfWindow, s: PerfSample) -> Result<()> {
    if recent.latest().is_some_and(|l| s.at < l) || baseline.latest().is_some_and(|l| s.at < l) {
        return Err(Error::invalid(format!("non-monotone sample time {}", s.at.0)));
    }
    if !s.metric.is_finite() {
        return Err(Error::invalid("performance metric must be finite"));
    }
    recent.insert(s.metric, s.at)?;
    if !s.had_page_in {
        baseline.insert(s.metric, s.at)?;
    }
    recent.expire(s.at);
    baseline.expire(s.at);
    Ok(())
}

/// True iff the recent tail is worse than the baseline tail by more than
/// `threshold` (relative). A zero baseline falls back to an absolute check.
pub fn detect_drop(baseline_p99: f64, recent_p99: f64, threshold: f64, orientation: Orientation) -> bool {
    if baseline_p99 == 0.0 {
        return match orientation {
            Orientation::LowerIsBetter => recent_p99 - baseline_p99 > ZERO_BASELINE_EPSILON,
            Orientation::HigherIsBetter => baseline_p99 - recent_p99 > ZERO_BASELINE_EPSILON,
        };
    }
    match orientation {
        Orientation::LowerIsBetter => recent_p99 > baseline_p99 * (1.0 + threshold),
        Orientation::HigherIsBetter => recent_p99 < baseline_p99 * (1.0 - threshold),
    }
}

/// Updates the consecutive-severe streak with this epoch's sample and reports
/// whether it has reached `severe_epochs`.
pub fn detect_severe(
    recent_sample: f64,
    baseline: &PerfWindow,
    state: &mut HarvestState,
    cfg: &HarvesterConfig,
) -> bool {
    let worse_than_all = baseline
        .worst(cfg.metric_orientation)
        .is_some_and(|worst| cfg.metric_orientation.worse(recent_sample, worst));
    if worse_than_all {
        state.consecutive_severe += 1;
    } else {
        state.consecutive_severe = 0;
    }
    state.consecutive_severe >= cfg.severe_epochs
}

/// Inputs the harvester observes at an epoch boundary.
pub struct Windows<'a> {
    pub baseline: &'a PerfWindow,
    pub recent: &'a PerfWindow,
    /// The sample recorded this epoch, if any.
    pub latest: Option<f64>,
}

/// One epoch of the control loop.
pub fn step(
    state: &mut HarvestState,
    cfg: &HarvesterConfig,
    windows: &Windows<'_>,
    silo_occupancy_grew: bool,
    now: Instant,
) -> Result<Action> {
    if state.last_step.is_some_and(|l| now < l) {
        return Err(Error::invalid(format!("non-monotone epoch time {}", now.0)));
    }
    state.last_step = Some(now);

    let severe = match windows.latest {
        Some(sample) if !windows.baseline.is_empty() => detect_severe(sample, windows.baseline, state, cfg),
        _ => {
            state.consecutive_severe = 0;
            false
        }
    };
    let prefetch = severe.then_some(cfg.chunk_size);

    if silo_occupancy_grew {
        state.caution_until = Some(now + cfg.cooling_period);
    }

    if let Mode::Recovery { until } = state.mode {
        if now < until {
            return Ok(Action { decision: Decision::Hold, prefetch });
        }
        state.mode = Mode::Harvesting;
        state.limit = Some(state.memory_size - state.harvested);
    }

    let hold = Action { decision: Decision::Hold, prefetch };

    let (Ok(base), Ok(recent)) = (
        p99(windows.baseline, cfg.metric_orientation),
        p99(windows.recent, cfg.metric_orientation),
    ) else {
        return Ok(hold);
    };

    if detect_drop(base, recent, cfg.p99_threshold, cfg.metric_orientation) {
        let returned = ByteSize(cfg.chunk_size.0.min(state.harvested.0));
        state.harvested = state.harvested - returned;
        let until = now + cfg.recovery_period;
        state.mode = Mode::Recovery { until };
        state.limit = None;
        return Ok(Action {
            decision: Decision::Recover { until, returned },
            prefetch,
        });
    }

    if state
        .last_decrease
        .is_some_and(|t| now.since(t) < cfg.cooling_period)
        || state.caution_until.is_some_and(|t| now < t)
    {
        return Ok(hold);
    }

    let limit = state.memory_size - state.harvested;
    if limit < cfg.chunk_size {
        return Ok(hold);
    }
    state.harvested += cfg.chunk_size;
    state.limit = Some(limit - cfg.chunk_size);
    state.last_decrease = Some(now);
    Ok(Action {
        decision: Decision::Harvest(cfg.chunk_size),
        prefetch,
    })
}

/// One row of the per-epoch action log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub epoch_ms: u64,
    pub mode: String,
    pub limit_bytes: Option<u64>,
    pub action: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HarvestStats {
    pub total_harvested: ByteSize,
    /// Net harvested bytes as a fraction of the application's memory size.
    pub idle_fraction: f64,
}

/// Folds an action history into the net harvested amount.
pub fn harvest_stats<'a>(actions: impl IntoIterator<Item = &'a Action>, memory_size: ByteSize) -> HarvestStats {
    let mut net: u64 = 0;
    for a in actions {
        match a.decision {
            Decision::Harvest(b) => net += b.0,
            Decision::Recover { returned, .. } => net = net.saturating_sub(returned.0),
            Decision::Hold => {}
        }
    }
    let idle_fraction = if memory_size.0 == 0 {
        0.0
    } else {
        net as f64 / memory_size.0 as f64
    };
    HarvestStats {
        total_harvested: ByteSize(net),
        idle_fraction,
    }
}

/// Owns the windows and state for one producer.
#[derive(Debug)]
pub struct Harvester {
    cfg: HarvesterConfig,
    state: HarvestState,
    baseline: PerfWindow,
    recent: PerfWindow,
    latest: Option<f64>,
    actions: Vec<Action>,
    log: Vec<ActionRecord>,
}

impl Harvester {
    pub fn new(cfg: HarvesterConfig, memory_size: ByteSize) -> Result<Self> {
        cfg.validate()?;
        Ok(Harvester {
            baseline: PerfWindow::new(cfg.window_size),
            recent: PerfWindow::new(cfg.window_size),
            cfg,
            state: HarvestState::new(memory_size),
            latest: None,
            actions: Vec::new(),
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &HarvesterConfig {
        &self.cfg
    }

    pub fn state(&self) -> &HarvestState {
        &self.state
    }

    pub fn baseline(&self) -> &PerfWindow {
        &self.baseline
    }

    pub fn recent(&self) -> &PerfWindow {
        &self.recent
    }

    pub fn record(&mut self, s: PerfSample) -> Result<()> {
        record_sample(&mut self.baseline, &mut self.recent, s)?;
        self.latest = Some(s.metric);
        Ok(())
    }

    pub fn step(&mut self, silo_occupancy_grew: bool, now: Instant) -> Result<Action> {
        let windows = Windows {
            baseline: &self.baseline,
            recent: &self.recent,
            latest: self.latest.take(),
        };
        let action = step(&mut self.state, &self.cfg, &windows, silo_occupancy_grew, now)?;
        self.actions.push(action);
        self.log.push(ActionRecord {
            epoch_ms: now.0,
            mode: match self.state.mode {
                Mode::Harvesting => "harvesting".into(),
                Mode::Recovery { .. } => "recovery".into(),
            },
            limit_bytes: self.state.limit.map(|l| l.0),
            action: action.label(),
        });
        Ok(action)
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn stats(&self) -> HarvestStats {
        harvest_stats(&self.actions, self.state.memory_size)
    }

    pub fn log(&self) -> &[ActionRecord] {
        &self.log
    }

    /// Writes the action log as `epoch_ms,mode,limit_bytes,action`; a
    /// disabled limit is an empty field.
    pub fn write_log_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch_ms", "mode", "limit_bytes", "action"])?;
        for r in &self.log {
            out.write_record([
                r.epoch_ms.to_string(),
                r.mode.clone(),
                r.limit_bytes.map(|l| l.to_string()).unwrap_or_default(),
                r.action.clone(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}
