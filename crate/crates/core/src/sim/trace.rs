//! Cluster usage traces: CSV I/O, a seeded synthetic generator and the
//! producer/consumer split.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::{Duration, Instant, MS_PER_HOUR};

/// GB per machine-capacity unit in the public Google trace.
pub const GOOGLE_UNIT_GB: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub timestamp_ms: u64,
    pub machine_id: u64,
    pub mem_capacity_gb: f64,
    /// Memory demand. May exceed capacity on machines that want more.
    pub mem_used_gb: f64,
    pub cpu_used_frac: f64,
    pub bw_used_frac: f64,
}

/// Per-machine usage series sampled on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTrace {
    pub machines: BTreeMap<u64, MachineSeries>,
    pub step: Duration,
    pub start: Instant,
    pub ticks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MachineSeries {
    pub capacity_gb: f64,
    pub used_gb: Vec<f64>,
    pub cpu_used: Vec<f64>,
    pub bw_used: Vec<f64>,
}

impl MachineSeries {
    pub fn min_usage_frac(&self) -> f64 {
        self.used_gb.iter().fold(f64::INFINITY, |a, &u| a.min(u / self.capacity_gb))
    }

    pub fn ever_over(&self) -> bool {
        self.used_gb.iter().any(|&u| u > self.capacity_gb)
    }
}

impl ClusterTrace {
    /// Builds a trace from rows. Every machine must report at the same
    /// timestamps, which are evenly spaced.
    pub fn from_rows(rows: &[TraceRow]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("empty trace"));
        }
        let mut by_machine: BTreeMap<u64, Vec<&TraceRow>> = BTreeMap::new();
        for r in rows {
            let ok = [r.mem_capacity_gb, r.mem_used_gb, r.cpu_used_frac, r.bw_used_frac]
                .iter()
                .all(|v| v.is_finite() && *v >= 0.0);
            if !ok || r.mem_capacity_gb <= 0.0 {
                return Err(Error::Parse(format!("bad trace row for machine {}", r.machine_id)));
            }
            by_machine.entry(r.machine_id).or_default().push(r);
        }
        let mut stamps: Option<Vec<u64>> = None;
        let mut machines = BTreeMap::new();
        for (id, rs) in by_machine {
            let ts: Vec<u64> = rs.iter().map(|r| r.timestamp_ms).collect();
            if ts.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Parse(format!("machine {id}: timestamps not increasing")));
            }
            match &stamps {
                None => stamps = Some(ts),
                Some(s) if *s != ts => {
                    return Err(Error::Parse(format!("machine {id}: timestamps differ from other machines")));
                }
                _ => {}
            }
            let cap = rs[0].mem_capacity_gb;
            machines.insert(
                id,
                MachineSeries {
                    capacity_gb: cap,
                    used_gb: rs.iter().map(|r| r.mem_used_gb).collect(),
                    cpu_used: rs.iter().map(|r| r.cpu_used_frac.min(1.0)).collect(),
                    bw_used: rs.iter().map(|r| r.bw_used_frac.min(1.0)).collect(),
                },
            );
        }
        let stamps = stamps.expect("non-empty");
        let step = if stamps.len() > 1 { stamps[1] - stamps[0] } else { 5 * 60_000 };
        if stamps.windows(2).any(|w| w[1] - w[0] != step) {
            return Err(Error::Parse("trace timestamps are not evenly spaced".into()));
        }
        Ok(ClusterTrace { machines, step: Duration(step), start: Instant(stamps[0]), ticks: stamps.len() })
    }

    pub fn rows(&self) -> Vec<TraceRow> {
        let mut out = Vec::with_capacity(self.ticks * self.machines.len());
        for t in 0..self.ticks {
            let ts = self.start.0 + t as u64 * self.step.0;
            for (&id, m) in &self.machines {
                out.push(TraceRow {
                    timestamp_ms: ts,
                    machine_id: id,
                    mem_capacity_gb: m.capacity_gb,
                    mem_used_gb: m.used_gb[t],
                    cpu_used_frac: m.cpu_used[t],
                    bw_used_frac: m.bw_used[t],
                });
            }
        }
        out
    }

    pub fn at(&self, tick: usize) -> Instant {
        Instant(self.start.0 + tick as u64 * self.step.0)
    }

    /// `unit_gb` scales capacity and usage, e.g. [`GOOGLE_UNIT_GB`] for
    /// normalized Google traces; use 1.0 for traces already in GB.
    pub fn from_csv_reader<R: Read>(r: R, unit_gb: f64) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut rows = Vec::new();
        for rec in rd.deserialize() {
            let mut row: TraceRow = rec?;
            row.mem_capacity_gb *= unit_gb;
            row.mem_used_gb *= unit_gb;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }

    pub fn from_csv_path(path: &Path, unit_gb: f64) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?, unit_gb)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in self.rows() {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Roles {
    pub producers: Vec<u64>,
    pub consumers: Vec<u64>,
    pub idle: Vec<u64>,
}

/// Consumers are machines whose demand ever exceeds capacity. Producers
/// never exceed it and always use at least `min_producer_frac` of it.
pub fn classify_machines(trace: &ClusterTrace, min_producer_frac: f64) -> Result<Roles> {
    if trace.machines.is_empty() || trace.ticks == 0 {
        return Err(Error::invalid("empty trace"));
    }
    let mut roles = Roles::default();
    for (&id, m) in &trace.machines {
        if m.ever_over() {
            roles.consumers.push(id);
        } else if m.min_usage_frac() >= min_producer_frac {
            roles.producers.push(id);
        } else {
            roles.idle.push(id);
        }
    }
    Ok(roles)
}

/// Shape of the synthetic diurnal trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTrace {
    pub seed: u64,
    pub producers: usize,
    pub consumers: usize,
    pub idle: usize,
    pub hours: u64,
    pub step: Duration,
    pub producer_capacity_gb: f64,
    pub consumer_capacity_gb: f64,
    /// Probability per machine and tick that a burst starts.
    pub burst_prob: f64,
}

impl Default for SyntheticTrace {
    fn default() -> Self {
        SyntheticTrace {
            seed: 7,
            producers: 20,
            consumers: 50,
            idle: 5,
            hours: 48,
            step: Duration::from_mins(5),
            producer_capacity_gb: 64.0,
            consumer_capacity_gb: 16.0,
            burst_prob: 0.01,
        }
    }
}

struct Shape {
    base: f64,
    amp: f64,
    phase: f64,
    noise: f64,
    lo: f64,
    hi: f64,
    burst: f64,
}

impl SyntheticTrace {
    /// Diurnal sinusoid plus Gaussian noise plus short bursts, per machine.
    /// Producers stay within [0.42, 0.95] of capacity, consumers peak above
    /// capacity and idle machines stay under 0.4.
    pub fn generate(&self) -> Result<ClusterTrace> {
        if self.step.0 == 0 || self.hours == 0 {
            return Err(Error::invalid("trace step and length must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let ticks = (self.hours * MS_PER_HOUR / self.step.0) as usize;
        let mut rows = Vec::new();
        let mut id = 1u64;
        let mut kinds = Vec::new();
        for _ in 0..self.producers {
            let s = Shape {
                base: rng.gen_range(0.48..0.62),
                amp: rng.gen_range(0.04..0.1),
                phase: rng.gen_range(-0.5..0.5),
                noise: 0.01,
                lo: 0.42,
                hi: 0.95,
                burst: 0.08,
            };
            kinds.push((self.producer_capacity_gb, s));
        }
        for _ in 0..self.consumers {
            let s = Shape {
                base: rng.gen_range(1.0..1.2),
                amp: rng.gen_range(0.08..0.2),
                phase: rng.gen_range(-0.5..0.5),
                noise: 0.02,
                lo: 0.5,
                hi: 1.8,
                burst: 0.15,
            };
            kinds.push((self.consumer_capacity_gb, s));
        }
        for _ in 0..self.idle {
            let s = Shape {
                base: rng.gen_range(0.1..0.25),
                amp: rng.gen_range(0.02..0.08),
                phase: rng.gen_range(-0.5..0.5),
                noise: 0.01,
                lo: 0.02,
                hi: 0.38,
                burst: 0.05,
            };
            kinds.push((self.producer_capacity_gb, s));
        }
        for (cap, s) in kinds {
            let noise = Normal::new(0.0, s.noise).map_err(|e| Error::invalid(e.to_string()))?;
            let mut burst_left = 0u32;
            for t in 0..ticks {
                let at = t as u64 * self.step.0;
                let day = at as f64 / (24.0 * MS_PER_HOUR as f64);
                if burst_left == 0 && rng.gen_bool(self.burst_prob) {
                    burst_left = rng.gen_range(2..8);
                }
                let b = if burst_left > 0 {
                    burst_left -= 1;
                    s.burst
                } else {
                    0.0
                };
                let frac = (s.base + s.amp * (2.0 * PI * (day + s.phase)).sin() + noise.sample(&mut rng) + b).clamp(s.lo, s.hi);
                let cpu = (0.2 + 0.5 * frac + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
                let bw = rng.gen_range(0.05..0.6);
                rows.push(TraceRow {
                    timestamp_ms: at,
                    machine_id: id,
                    mem_capacity_gb: cap,
                    mem_used_gb: frac * cap,
                    cpu_used_frac: cpu,
                    bw_used_frac: bw,
                });
            }
            id += 1;
        }
        ClusterTrace::from_rows(&rows)
    }
}
