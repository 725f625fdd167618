//! Flat `key = value` settings files for the CLI. Every key has a default;
//! `key=value` overrides from the command line win over the file.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::broker::BrokerConfig;
use crate::consumer::SecurityMode;
use crate::error::{Error, Result};
use crate::net::{BenchConfig, BrokerServerConfig, ProducerServerConfig};
use crate::pricing::{PricingStrategy, SpotPricePoint, StrategyKind};
use crate::sim::{SimConfig, SyntheticTrace, GOOGLE_UNIT_GB};
use crate::units::{ByteSize, Duration, Instant, Money, MIB};

/// Parses `key=value`. The value is read as a TOML value, falling back to
/// a bare string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::invalid(format!("expected key=value, got {s:?}")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::invalid(format!("empty key in {s:?}")));
    }
    let v = v.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {v}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(v.to_string()),
    };
    Ok((k.to_string(), value))
}

/// The file's table with overrides applied.
pub fn load_table(path: Option<&Path>, overrides: &[String]) -> Result<toml::Table> {
    let mut t = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            text.parse::<toml::Table>().map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (k, v) = parse_override(o)?;
        t.insert(k, v);
    }
    Ok(t)
}

pub fn from_table<T: DeserializeOwned>(t: toml::Table) -> Result<T> {
    toml::Value::Table(t).try_into().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrokerSettings {
    pub listen: String,
    pub run_dir: PathBuf,
    pub tick_ms: u64,
    pub slab_mb: u64,
    pub min_lease_ms: u64,
    pub queue_timeout_ms: u64,
    pub renew_grace_ms: u64,
    pub rebate_rate_ppm: u64,
    pub report_step_ms: u64,
    pub registration_token: Option<String>,
    pub seed: u64,
    pub spot_price: u64,
    pub spot_mem_gb: f64,
    pub strategy: String,
    pub price_step: u64,
    pub price_round_ms: u64,
    pub resume: bool,
}

impl Default for BrokerSettings {
    fn default() -> Self {
        let s = BrokerServerConfig::default();
        let b = s.broker;
        BrokerSettings {
            listen: s.listen,
            run_dir: s.run_dir,
            tick_ms: s.tick.0,
            slab_mb: b.slab_size.0 / MIB,
            min_lease_ms: b.min_lease.0,
            queue_timeout_ms: b.queue_timeout.0,
            renew_grace_ms: b.renew_grace.0,
            rebate_rate_ppm: b.rebate_rate_ppm,
            report_step_ms: b.report_step.0,
            registration_token: b.registration_token,
            seed: b.seed,
            spot_price: s.spot.price_per_instance_hour.0,
            spot_mem_gb: s.spot.instance_mem_gb,
            strategy: s.strategy.name(),
            price_step: s.strategy.step.0,
            price_round_ms: s.price_round.0,
            resume: s.resume,
        }
    }
}

impl BrokerSettings {
    pub fn into_config(self) -> Result<BrokerServerConfig> {
        let broker = BrokerConfig {
            slab_size: ByteSize(self.slab_mb * MIB),
            min_lease: Duration(self.min_lease_ms),
            queue_timeout: Duration(self.queue_timeout_ms),
            rebate_rate_ppm: self.rebate_rate_ppm,
            renew_grace: Duration(self.renew_grace_ms),
            report_step: Duration(self.report_step_ms),
            registration_token: self.registration_token,
            seed: self.seed,
            ..BrokerConfig::default()
        };
        if broker.slab_size.0 == 0 || broker.report_step.0 == 0 {
            return Err(Error::invalid("slab size and report step must be positive"));
        }
        Ok(BrokerServerConfig {
            listen: self.listen,
            run_dir: self.run_dir,
            tick: Duration(self.tick_ms),
            broker,
            spot: SpotPricePoint { at: Instant(0), price_per_instance_hour: Money(self.spot_price), instance_mem_gb: self.spot_mem_gb },
            strategy: PricingStrategy { kind: self.strategy.parse()?, step: Money(self.price_step) },
            price_round: Duration(self.price_round_ms),
            resume: self.resume,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProducerSettings {
    pub broker: String,
    pub listen: String,
    pub token: String,
    pub slabs: u32,
    pub report_ms: u64,
    pub reclaim_trigger: Option<PathBuf>,
    pub run_dir: PathBuf,
    pub kv_rate: f64,
    pub lru_sample_size: usize,
    pub seed: u64,
}

impl Default for ProducerSettings {
    fn default() -> Self {
        let p = ProducerServerConfig::default();
        ProducerSettings {
            broker: p.broker,
            listen: p.listen,
            token: p.token,
            slabs: p.slabs,
            report_ms: p.report_interval.0,
            reclaim_trigger: p.reclaim_trigger,
            run_dir: p.run_dir,
            kv_rate: p.kv_rate,
            lru_sample_size: p.lru_sample_size,
            seed: p.seed,
        }
    }
}

impl ProducerSettings {
    pub fn into_config(self) -> ProducerServerConfig {
        ProducerServerConfig {
            broker: self.broker,
            listen: self.listen,
            token: self.token,
            slabs: self.slabs,
            report_interval: Duration(self.report_ms),
            reclaim_trigger: self.reclaim_trigger,
            run_dir: self.run_dir,
            kv_rate: self.kv_rate,
            lru_sample_size: self.lru_sample_size,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub broker: String,
    pub token: String,
    pub slabs: u32,
    pub min_slabs: u32,
    pub lease_ms: u64,
    pub max_unit_price: u64,
    pub ops: usize,
    pub value_size: usize,
    pub mode: String,
    pub seed: u64,
    pub check_expiry: bool,
    pub poll_timeout_ms: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        let b = BenchConfig::default();
        BenchSettings {
            broker: b.broker,
            token: b.token,
            slabs: b.slabs,
            min_slabs: b.min_slabs,
            lease_ms: b.lease.0,
            max_unit_price: b.max_unit_price,
            ops: b.ops,
            value_size: b.value_size,
            mode: "full".into(),
            seed: b.seed,
            check_expiry: b.check_expiry,
            poll_timeout_ms: b.poll_timeout.0,
        }
    }
}

impl BenchSettings {
    pub fn into_config(self) -> Result<BenchConfig> {
        Ok(BenchConfig {
            broker: self.broker,
            token: self.token,
            slabs: self.slabs,
            min_slabs: self.min_slabs,
            lease: Duration(self.lease_ms),
            max_unit_price: self.max_unit_price,
            ops: self.ops,
            value_size: self.value_size,
            mode: self.mode.parse::<SecurityMode>()?,
            seed: self.seed,
            check_expiry: self.check_expiry,
            poll_timeout: Duration(self.poll_timeout_ms),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    /// Trace CSV; a synthetic trace is generated when absent.
    pub trace: Option<PathBuf>,
    /// GB per memory unit in the trace.
    pub trace_unit_gb: f64,
    pub synthetic_seed: u64,
    pub synthetic_producers: usize,
    pub synthetic_consumers: usize,
    pub synthetic_idle: usize,
    pub synthetic_hours: u64,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub tick_ms: u64,
    pub consumer_capacity_gb: f64,
    pub min_lease_ms: u64,
    pub producer_min_frac: f64,
    pub strategy: String,
    /// Strategies for `sim compare`.
    pub strategies: Vec<String>,
    pub price_step: u64,
    pub spot_series: Option<PathBuf>,
    pub mrc_dir: Option<PathBuf>,
    pub slab_mb: u64,
    pub price_sensitive: bool,
    pub harvest: bool,
    pub harvest_chunk_gb: f64,
    pub harvest_window_ms: u64,
    pub cold_frac_min: f64,
    pub cold_frac_max: f64,
    pub remote_hit_discount: f64,
    pub spot_price: u64,
    pub spot_mem_gb: f64,
    /// Grid step of the per-tick price oracle; 0 turns it off.
    pub oracle_step: u64,
}

impl Default for SimSettings {
    fn default() -> Self {
        let c = SimConfig::default();
        let t = SyntheticTrace::default();
        SimSettings {
            trace: None,
            trace_unit_gb: GOOGLE_UNIT_GB,
            synthetic_seed: t.seed,
            synthetic_producers: t.producers,
            synthetic_consumers: t.consumers,
            synthetic_idle: t.idle,
            synthetic_hours: t.hours,
            out_dir: PathBuf::from("runs/sim"),
            seed: c.seed,
            tick_ms: c.tick.0,
            consumer_capacity_gb: c.consumer_capacity_gb,
            min_lease_ms: c.min_lease.0,
            producer_min_frac: c.producer_min_frac,
            strategy: c.strategy.name(),
            strategies: vec!["max-revenue".into(), "max-volume".into(), "fixed-0.25".into()],
            price_step: c.strategy.step.0,
            spot_series: None,
            mrc_dir: None,
            slab_mb: c.slab_size.0 / MIB,
            price_sensitive: c.price_sensitive,
            harvest: c.harvest,
            harvest_chunk_gb: c.harvest_chunk_gb,
            harvest_window_ms: c.harvest_window.0,
            cold_frac_min: c.cold_frac.0,
            cold_frac_max: c.cold_frac.1,
            remote_hit_discount: c.remote_hit_discount,
            spot_price: c.spot_price_per_hour.0,
            spot_mem_gb: c.spot_instance_gb,
            oracle_step: 0,
        }
    }
}

impl SimSettings {
    pub fn strategy_of(&self, name: &str) -> Result<PricingStrategy> {
        let s = PricingStrategy { kind: name.parse::<StrategyKind>()?, step: Money(self.price_step) };
        s.validate()?;
        Ok(s)
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let c = SimConfig {
            seed: self.seed,
            tick: Duration(self.tick_ms),
            consumer_capacity_gb: self.consumer_capacity_gb,
            min_lease: Duration(self.min_lease_ms),
            producer_min_frac: self.producer_min_frac,
            strategy: self.strategy_of(&self.strategy)?,
            spot_series: self.spot_series.clone(),
            mrc_dir: self.mrc_dir.clone(),
            slab_size: ByteSize(self.slab_mb * MIB),
            price_sensitive: self.price_sensitive,
            harvest: self.harvest,
            harvest_chunk_gb: self.harvest_chunk_gb,
            harvest_window: Duration(self.harvest_window_ms),
            cold_frac: (self.cold_frac_min, self.cold_frac_max),
            remote_hit_discount: self.remote_hit_discount,
            spot_price_per_hour: Money(self.spot_price),
            spot_instance_gb: self.spot_mem_gb,
            oracle_step: (self.oracle_step > 0).then_some(Money(self.oracle_step)),
            ..SimConfig::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn synthetic(&self) -> SyntheticTrace {
        SyntheticTrace {
            seed: self.synthetic_seed,
            producers: self.synthetic_producers,
            consumers: self.synthetic_consumers,
            idle: self.synthetic_idle,
            hours: self.synthetic_hours,
            ..SyntheticTrace::default()
        }
    }
}
