//! Trace-driven market simulation.
//!
//! Each tick: producers run a harvester and silo over a synthetic hot/cold
//! page model and report what they can lease, slabs that no longer fit are
//! revoked, consumers renew or drop expiring leases and ask for their
//! shortfall, and the pricing strategy picks the next price. Everything is
//! single-threaded and a pure function of (trace, config).

mod trace;

pub use trace::{classify_machines, ClusterTrace, MachineSeries, Roles, SyntheticTrace, TraceRow, GOOGLE_UNIT_GB};

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::broker::{AllocationOutcome, Broker, BrokerConfig, LeaseRequest, Party, RenewOutcome, UsageSample};
use crate::consumer::{purchase_decision, ConsumerProfile, MissRatioCurve};
use crate::error::{Error, Result};
use crate::harvester::{Harvester, HarvesterConfig, PerfSample};
use crate::predictor::PredictorConfig;
use crate::pricing::{
    ceiling, consumer_demand, read_spot_csv_path, spot_at, DemandProfile, MarketObservation, PriceEngine,
    PricingStrategy, SpotPricePoint, StrategyKind,
};
use crate::silo::{Backing, PageId, Silo, SiloConfig, Where};
use crate::units::{
    byte_ms, floor_price_volume, ByteSize, ConsumerId, Duration, Instant, LeaseId, LeaseTerms, Money, ProducerId, GB,
    SLAB_SIZE,
};

type PredictionCache = HashMap<(ProducerId, usize, u64), f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub tick: Duration,
    /// Most remote memory a single consumer will hold, GB.
    pub consumer_capacity_gb: f64,
    pub min_lease: Duration,
    /// Producers use at least this share of capacity throughout the trace.
    pub producer_min_frac: f64,
    pub strategy: PricingStrategy,
    pub spot_series: Option<PathBuf>,
    /// Directory of `<machine_id>.csv` MRCs; consumers without one get a
    /// synthetic curve.
    pub mrc_dir: Option<PathBuf>,
    pub slab_size: ByteSize,
    /// Consumers size purchases from their MRC at the market price. When
    /// false they ask for their whole excess at any price.
    pub price_sensitive: bool,
    /// Run a harvester and silo per producer. When false producers offer
    /// their unallocated memory directly.
    pub harvest: bool,
    pub harvest_chunk_gb: f64,
    pub harvest_window: Duration,
    /// Range of the cold share of a producer's allocated memory.
    pub cold_frac: (f64, f64),
    pub remote_hit_discount: f64,
    /// Spot quote used when no series is given.
    pub spot_price_per_hour: Money,
    pub spot_instance_gb: f64,
    /// Grid step for the per-tick revenue-optimal price, if wanted.
    pub oracle_step: Option<Money>,
    pub predictor: PredictorConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 1,
            tick: Duration::from_mins(5),
            consumer_capacity_gb: 512.0,
            min_lease: Duration::from_mins(10),
            producer_min_frac: 0.4,
            strategy: PricingStrategy::new(StrategyKind::MaxRevenue),
            spot_series: None,
            mrc_dir: None,
            slab_size: SLAB_SIZE,
            price_sensitive: true,
            harvest: true,
            harvest_chunk_gb: 1.0,
            harvest_window: Duration::from_mins(15),
            cold_frac: (0.03, 0.1),
            remote_hit_discount: 0.5,
            spot_price_per_hour: Money(7_000_000),
            spot_instance_gb: 16.0,
            oracle_step: None,
            predictor: PredictorConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tick.0 == 0 || self.min_lease.0 == 0 || self.slab_size.0 == 0 {
            return Err(Error::invalid("tick, lease and slab size must be positive"));
        }
        if !(self.harvest_chunk_gb > 0.0) || self.harvest_window.0 == 0 {
            return Err(Error::invalid("harvest chunk and window must be positive"));
        }
        let (lo, hi) = self.cold_frac;
        if !(0.0..1.0).contains(&lo) || !(lo..1.0).contains(&hi) {
            return Err(Error::invalid("cold fraction range must lie in [0, 1)"));
        }
        if !(self.remote_hit_discount > 0.0 && self.remote_hit_discount <= 1.0) {
            return Err(Error::invalid("remote hit discount must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.producer_min_frac) || !(self.consumer_capacity_gb >= 0.0) {
            return Err(Error::invalid("bad producer threshold or consumer capacity"));
        }
        if self.oracle_step.is_some_and(|s| s.0 == 0) {
            return Err(Error::invalid("oracle step must be positive"));
        }
        self.strategy.validate()
    }

    fn slab_gb(&self) -> f64 {
        self.slab_size.0 as f64 / GB as f64
    }
}

/// One row of the metrics series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickMetrics {
    pub tick: usize,
    pub at_ms: u64,
    pub price: u64,
    pub trading_volume_gb: f64,
    pub producer_revenue: u64,
    pub cluster_utilization: f64,
    pub baseline_utilization: f64,
    pub mean_consumer_hit_ratio: f64,
    pub satisfied_request_fraction: f64,
    pub revoked_slab_fraction: f64,
    pub supply_gb: f64,
    pub demand_gb: f64,
    pub requests: u32,
    pub satisfied_requests: u32,
    pub allocated_slabs: u32,
    pub revoked_slabs: u32,
    pub oracle_price: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub strategy: String,
    pub ticks: usize,
    pub producers: usize,
    pub consumers: usize,
    pub total_revenue: u64,
    pub mean_price: f64,
    pub mean_volume_gb: f64,
    pub mean_utilization: f64,
    pub mean_baseline_utilization: f64,
    pub mean_hit_ratio: f64,
    pub satisfied_request_fraction: f64,
    pub revoked_slab_fraction: f64,
    /// Mean |p - p*| / p* over ticks with a positive oracle price.
    pub oracle_deviation: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Lease,
    Renew,
    Expire,
    Revoke,
}

/// A lease-level event. Machines are named by trace machine id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub tick: usize,
    pub kind: EventKind,
    pub lease_id: LeaseId,
    pub consumer: u64,
    pub producer: Option<u64>,
    pub slabs: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub metrics: Vec<TickMetrics>,
    pub summary: SimSummary,
    pub events: Vec<SimEvent>,
}

struct ProducerSim {
    machine: u64,
    id: ProducerId,
    cap_gb: f64,
    cold_frac: f64,
    harvester: Option<Harvester>,
    silo: Option<Silo>,
    /// Application pages pushed out by the limit, oldest first.
    swapped: Vec<PageId>,
    next_page: PageId,
    swapped_last: bool,
    paged_in_last: bool,
    rng: ChaCha8Rng,
    /// What can be leased right now.
    net: ByteSize,
    /// RAM held by the application and the silo, GB.
    ram_gb: f64,
}

impl ProducerSim {
    fn step(&mut self, used_gb: f64, now: Instant, chunk: ByteSize) -> Result<()> {
        let used_gb = used_gb.min(self.cap_gb);
        let (Some(h), Some(silo)) = (self.harvester.as_mut(), self.silo.as_mut()) else {
            self.net = ByteSize::from_gb(self.cap_gb - used_gb);
            self.ram_gb = used_gb;
            return Ok(());
        };
        let limit_gb = self.cap_gb - h.state().harvested.as_gb();
        let hot_gb = (1.0 - self.cold_frac) * used_gb;
        let pressure = if hot_gb > 0.0 { ((hot_gb - limit_gb) / hot_gb).max(0.0) } else { 0.0 };
        let metric = 1.0 + self.rng.gen_range(-0.002..0.002) + 2.0 * pressure;
        h.record(PerfSample { at: now, metric, had_page_in: pressure > 0.0 || self.paged_in_last })?;
        let action = h.step(self.swapped_last, now)?;
        if let Some(b) = action.prefetch {
            silo.prefetch(b, now);
        }
        silo.tick(now)?;

        let chunk_gb = chunk.as_gb();
        let harvested_gb = h.state().harvested.as_gb();
        let over = harvested_gb - (self.cap_gb - used_gb);
        let want = if over > 0.0 { (over / chunk_gb - 1e-9).ceil() as usize } else { 0 };
        self.swapped_last = self.swapped.len() < want;
        self.paged_in_last = false;
        while self.swapped.len() < want {
            silo.swap_out(self.next_page, now)?;
            self.swapped.push(self.next_page);
            self.next_page += 1;
        }
        while self.swapped.len() > want {
            let p = self.swapped.pop().expect("non-empty");
            if silo.access(p, now).location == Where::Disk {
                self.paged_in_last = true;
            }
        }
        self.net = silo.net_harvestable(h.state().harvested);
        let app_gb = (used_gb - self.swapped.len() as f64 * chunk_gb).max(0.0);
        self.ram_gb = app_gb + silo.ram_footprint().as_gb();
        Ok(())
    }
}

struct ConsumerSim {
    machine: u64,
    id: ConsumerId,
    cap_gb: f64,
    mrc: Arc<MissRatioCurve>,
    profile: ConsumerProfile,
}

/// Exponential miss-ratio curve: floor + (1 - floor)·exp(-x/scale), sampled
/// every quarter GB up to `extent` GB.
pub fn synthetic_mrc(scale_gb: f64, floor: f64, extent_gb: f64) -> Result<MissRatioCurve> {
    let n = (extent_gb / 0.25).ceil().max(1.0) as usize;
    let knots = (0..=n)
        .map(|i| {
            let x = i as f64 * 0.25;
            (x, floor + (1.0 - floor) * (-x / scale_gb).exp())
        })
        .collect();
    MissRatioCurve::new(knots)
}

/// `purchase_decision` for one consumer as a step function of price. The
/// amounts are the running totals that function would return, so the
/// lookup is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandCurve {
    /// Non-increasing: the smallest floored marginal value up to each step.
    thresholds: Vec<f64>,
    amounts: Vec<f64>,
    increment_gb: f64,
}

impl DemandCurve {
    pub fn new(mrc: &MissRatioCurve, params: &ConsumerProfile) -> Self {
        let inc = params.increment_gb;
        let mut curve = DemandCurve { thresholds: Vec::new(), amounts: Vec::new(), increment_gb: inc };
        if inc <= 0.0 {
            return curve;
        }
        let requests_per_hour = params.request_rate * 3600.0;
        let hits_per_hour = requests_per_hour * (1.0 - mrc.at(params.current_gb));
        if hits_per_hour <= 0.0 || !hits_per_hour.is_finite() {
            return curve;
        }
        let price_per_hit = params.vm_cost_per_hour.0 as f64 / hits_per_hour;
        let cap = params.max_gb.unwrap_or(f64::INFINITY).min(mrc.max_gb() - params.current_gb).max(0.0);
        let mut bought = 0.0;
        let mut min = f64::INFINITY;
        loop {
            let next = bought + inc;
            if next > cap + 1e-9 {
                break;
            }
            let from = params.current_gb + bought;
            let gain = mrc.at(from) - mrc.at(from + inc);
            if gain <= 0.0 {
                break;
            }
            let marginal = (params.remote_hit_discount * price_per_hit * requests_per_hour * gain).max(0.0).floor();
            min = min.min(marginal);
            curve.thresholds.push(min);
            curve.amounts.push(next);
            bought = next;
        }
        curve
    }

    pub fn at(&self, price: Money) -> f64 {
        let cost = price.0 as f64 * self.increment_gb;
        let k = self.thresholds.partition_point(|&m| m >= cost);
        if k == 0 {
            0.0
        } else {
            self.amounts[k - 1]
        }
    }
}

/// Lowest grid price with the highest revenue `p·min(D(p), S)`. The grid is
/// 0, step, 2·step, … below `cap`, plus `cap` itself.
pub fn grid_argmax<F: Fn(Money) -> f64>(demand_gb: F, supply_gb: f64, step: Money, cap: Money, hours: f64) -> Money {
    let mut best = (0u64, Money::ZERO);
    let mut p = 0u64;
    loop {
        let price = Money(p.min(cap.0));
        let rev = MarketObservation::new(price, demand_gb(price).min(supply_gb) * hours).revenue.0;
        if rev > best.0 {
            best = (rev, price);
        }
        if p >= cap.0 {
            break;
        }
        p += step.0;
    }
    best.1
}

pub struct Simulation {
    trace: ClusterTrace,
    cfg: SimConfig,
    roles: Roles,
    spot: Vec<SpotPricePoint>,
    mrcs: BTreeMap<u64, Arc<MissRatioCurve>>,
}

impl Simulation {
    pub fn new(trace: ClusterTrace, cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let roles = classify_machines(&trace, cfg.producer_min_frac)?;
        let spot = match &cfg.spot_series {
            Some(p) => read_spot_csv_path(p)?,
            None => vec![SpotPricePoint {
                at: trace.start,
                price_per_instance_hour: cfg.spot_price_per_hour,
                instance_mem_gb: cfg.spot_instance_gb,
            }],
        };
        if spot.is_empty() {
            return Err(Error::invalid("empty spot series"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d72_6373);
        let mut mrcs = BTreeMap::new();
        for &m in &roles.consumers {
            let cap = trace.machines[&m].capacity_gb;
            let scale = cap * rng.gen_range(0.3..0.6);
            let floor = rng.gen_range(0.02..0.1);
            let file = cfg.mrc_dir.as_ref().map(|d| d.join(format!("{m}.csv")));
            let mrc = match file {
                Some(f) if f.exists() => MissRatioCurve::from_csv_path(&f)?,
                _ => synthetic_mrc(scale, floor, 3.0 * cap)?,
            };
            mrcs.insert(m, Arc::new(mrc));
        }
        Ok(Simulation { trace, cfg, roles, spot, mrcs })
    }

    pub fn roles(&self) -> &Roles {
        &self.roles
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn run(&self) -> Result<SimResult> {
        self.run_shared(&mut PredictionCache::new())
    }

    /// Runs with forecasts shared across runs that see the same reports.
    /// Supply does not depend on the market, so runs over one trace and
    /// config differing only in strategy can share them.
    fn run_shared(&self, cache: &mut PredictionCache) -> Result<SimResult> {
        let cfg = &self.cfg;
        let slab = cfg.slab_size;
        let slab_gb = cfg.slab_gb();
        let tick_h = cfg.tick.as_hours();
        let chunk = ByteSize::from_gb(cfg.harvest_chunk_gb);
        let mut broker = Broker::new(BrokerConfig {
            slab_size: slab,
            min_lease: cfg.min_lease,
            queue_timeout: Duration::ZERO,
            renew_grace: Duration::ZERO,
            report_step: self.trace.step,
            predictor: cfg.predictor.clone(),
            seed: cfg.seed,
            ..Default::default()
        });
        broker.preload_predictions(cache);

        let mut producers = Vec::new();
        for &m in &self.roles.producers {
            let id = broker.register(Party::Producer, &format!("sim:{m}"), "")?;
            let cap_gb = self.trace.machines[&m].capacity_gb;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(m));
            let cold_frac = if cfg.cold_frac.1 > cfg.cold_frac.0 {
                rng.gen_range(cfg.cold_frac.0..cfg.cold_frac.1)
            } else {
                cfg.cold_frac.0
            };
            let (harvester, silo) = if cfg.harvest {
                let hcfg = HarvesterConfig {
                    chunk_size: chunk,
                    window_size: cfg.harvest_window,
                    epoch: self.trace.step,
                    ..Default::default()
                };
                let scfg = SiloConfig { page_size: chunk, backing: Backing::ssd(), ..Default::default() };
                (
                    Some(Harvester::new(hcfg, ByteSize::from_gb(cap_gb))?),
                    Some(Silo::new(scfg)?),
                )
            } else {
                (None, None)
            };
            producers.push(ProducerSim {
                machine: m,
                id,
                cap_gb,
                cold_frac,
                harvester,
                silo,
                swapped: Vec::new(),
                next_page: 0,
                swapped_last: false,
                paged_in_last: false,
                rng,
                net: ByteSize::ZERO,
                ram_gb: 0.0,
            });
        }
        let mut prof_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x636f_6e73);
        let mut consumers = Vec::new();
        for &m in &self.roles.consumers {
            let id = broker.register(Party::Consumer, &format!("sim:{m}"), "")?;
            let cap_gb = self.trace.machines[&m].capacity_gb;
            let vm_cost = prof_rng.gen_range(1.0e7..3.0e7) * cap_gb / 16.0;
            let rate = prof_rng.gen_range(1_000.0..5_000.0);
            consumers.push(ConsumerSim {
                machine: m,
                id,
                cap_gb,
                mrc: self.mrcs[&m].clone(),
                profile: ConsumerProfile {
                    vm_cost_per_hour: Money(vm_cost as u64),
                    request_rate: rate,
                    current_gb: cap_gb,
                    remote_hit_discount: cfg.remote_hit_discount,
                    increment_gb: slab_gb,
                    max_gb: Some(0.0),
                },
            });
        }
        let mut lat_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6c61_74);
        for p in &producers {
            for c in &consumers {
                broker.set_latency(p.id, c.id, Duration(lat_rng.gen_range(1..6)))?;
            }
        }
        let machine_of_producer: BTreeMap<ProducerId, u64> = producers.iter().map(|p| (p.id, p.machine)).collect();
        let machine_of_consumer: BTreeMap<ConsumerId, u64> = consumers.iter().map(|c| (c.id, c.machine)).collect();

        let mut engine = PriceEngine::new(cfg.strategy)?;
        let mut metrics = Vec::with_capacity(self.trace.ticks);
        let mut events = Vec::new();
        let total_cap: f64 = self.trace.machines.values().map(|m| m.capacity_gb).sum();

        for t in 0..self.trace.ticks {
            let now = self.trace.at(t);
            let spot = spot_at(&self.spot, now).expect("non-empty spot series");
            let price = engine.quote(&spot)?;
            broker.price = price;

            // producers
            for p in producers.iter_mut() {
                let m = &self.trace.machines[&p.machine];
                p.step(m.used_gb[t], now, chunk)?;
                let sample = UsageSample {
                    free_bytes: p.net.0,
                    offered_slabs: (p.net.0 / slab.0).min(u32::MAX as u64) as u32,
                    bw: ((1.0 - m.bw_used[t]) * 1.25e9) as u64,
                    cpu: 1.0 - m.cpu_used[t],
                };
                broker.report_usage(p.id, sample, now)?;
            }

            // revoke what no longer fits, newest leases first
            let leased_before = broker.leased_slabs();
            let mut revoked = 0u32;
            for p in &producers {
                let fits = p.net.0 / slab.0;
                let in_use = broker.producer(p.id).map_or(0, |e| e.slabs_in_use.len() as u64);
                if in_use <= fits {
                    continue;
                }
                let mut need = (in_use - fits) as u32;
                let mut parts: Vec<(LeaseId, u32, ConsumerId)> = broker
                    .leases_on(p.id)
                    .into_iter()
                    .map(|(a, part)| (a.lease_id, part.slab_indices.len() as u32, a.consumer_id))
                    .collect();
                parts.sort_by(|a, b| b.0.cmp(&a.0));
                for (lease_id, n, consumer_id) in parts {
                    if need == 0 {
                        break;
                    }
                    let k = n.min(need);
                    if k == 0 {
                        continue;
                    }
                    broker.record_eviction(lease_id, p.id, k, now)?;
                    need -= k;
                    revoked += k;
                    events.push(SimEvent {
                        tick: t,
                        kind: EventKind::Revoke,
                        lease_id,
                        consumer: machine_of_consumer[&consumer_id],
                        producer: Some(p.machine),
                        slabs: k,
                    });
                }
            }

            // what each consumer wants at this price
            let mut targets = Vec::with_capacity(consumers.len());
            let mut population = Vec::with_capacity(consumers.len());
            for c in consumers.iter_mut() {
                let demand = self.trace.machines[&c.machine].used_gb[t];
                let excess = (demand - c.cap_gb).max(0.0).min(cfg.consumer_capacity_gb);
                let max_slabs = (excess * GB as f64 / slab.0 as f64 - 1e-9).ceil().max(0.0) as u32;
                c.profile.max_gb = Some(max_slabs as f64 * slab_gb);
                let target = if cfg.price_sensitive {
                    let gb = purchase_decision(&c.mrc, price, &c.profile);
                    ((gb / slab_gb).round() as u32).min(max_slabs)
                } else {
                    max_slabs
                };
                targets.push(target);
                population.push(DemandProfile { mrc: c.mrc.clone(), profile: c.profile.clone() });
            }

            // renew or let go of leases ending now
            let mut held: BTreeMap<ConsumerId, Vec<(LeaseId, u32, Instant)>> = BTreeMap::new();
            for l in broker.leases() {
                let a = &l.assignment;
                held.entry(a.consumer_id).or_default().push((a.lease_id, a.slab_count(), a.end));
            }
            for (c, &target) in consumers.iter().zip(&targets) {
                let Some(ls) = held.get(&c.id) else { continue };
                let mut total: u32 = ls.iter().map(|l| l.1).sum();
                for &(lease_id, n, end) in ls {
                    if end > now {
                        continue;
                    }
                    if n == 0 || total - n >= target {
                        total -= n;
                        continue;
                    }
                    match broker.renew(lease_id, now)? {
                        RenewOutcome::Renewed(a) => {
                            for part in &a.parts {
                                events.push(SimEvent {
                                    tick: t,
                                    kind: EventKind::Renew,
                                    lease_id,
                                    consumer: c.machine,
                                    producer: Some(machine_of_producer[&part.producer_id]),
                                    slabs: part.slab_indices.len() as u32,
                                });
                            }
                        }
                        RenewOutcome::Expired => {
                            total -= n;
                            events.push(SimEvent {
                                tick: t,
                                kind: EventKind::Expire,
                                lease_id,
                                consumer: c.machine,
                                producer: None,
                                slabs: n,
                            });
                        }
                    }
                }
            }
            for bill in broker.tick(now).ended {
                events.push(SimEvent {
                    tick: t,
                    kind: EventKind::Expire,
                    lease_id: bill.lease_id,
                    consumer: machine_of_consumer[&bill.consumer_id],
                    producer: None,
                    slabs: bill.slabs - bill.evicted_slabs,
                });
            }

            // ask for the shortfall
            let mut holding: BTreeMap<ConsumerId, u32> = BTreeMap::new();
            for l in broker.leases() {
                *holding.entry(l.assignment.consumer_id).or_default() += l.assignment.slab_count();
            }
            let (mut requests, mut satisfied, mut allocated) = (0u32, 0u32, 0u32);
            for (c, &target) in consumers.iter().zip(&targets) {
                let have = holding.get(&c.id).copied().unwrap_or(0);
                if target <= have {
                    continue;
                }
                let want = target - have;
                let mut terms = LeaseTerms::new(want, cfg.min_lease);
                terms.min_slabs = 1;
                terms.max_unit_price = if cfg.price_sensitive { price } else { Money(u64::MAX) };
                requests += 1;
                let out = broker.allocate(LeaseRequest { consumer_id: c.id, terms }, now)?;
                if let AllocationOutcome::Assigned(a, _) = out {
                    let got = a.slab_count();
                    allocated += got;
                    *holding.entry(c.id).or_default() += got;
                    if got == want {
                        satisfied += 1;
                    }
                    for part in &a.parts {
                        events.push(SimEvent {
                            tick: t,
                            kind: EventKind::Lease,
                            lease_id: a.lease_id,
                            consumer: c.machine,
                            producer: Some(machine_of_producer[&part.producer_id]),
                            slabs: part.slab_indices.len() as u32,
                        });
                    }
                }
            }

            // accounting for this tick
            let mut leased_slabs = 0u64;
            let mut revenue = 0u64;
            for l in broker.leases() {
                let a = &l.assignment;
                if a.start <= now && now < a.end {
                    let n = a.slab_count() as u64;
                    leased_slabs += n;
                    revenue += floor_price_volume(a.unit_price.0, byte_ms(ByteSize(slab.0 * n), cfg.tick));
                }
            }
            let mut used = 0.0;
            let mut base = 0.0;
            for (&m, series) in &self.trace.machines {
                let u = series.used_gb[t].min(series.capacity_gb);
                base += u;
                if !self.roles.producers.contains(&m) {
                    used += u;
                }
            }
            for p in &producers {
                let leased = broker.producer(p.id).map_or(0, |e| e.slabs_in_use.len()) as f64 * slab_gb;
                used += p.ram_gb + leased;
            }
            let hit: f64 = consumers
                .iter()
                .map(|c| 1.0 - c.mrc.at(c.cap_gb + holding.get(&c.id).copied().unwrap_or(0) as f64 * slab_gb))
                .sum::<f64>()
                / consumers.len().max(1) as f64;

            // supply the pricing step may sell: forecast availability
            // capped by the offer
            let mut supply_gb = 0.0;
            for p in &producers {
                let pred = broker.predicted_free_gb(p.id, cfg.min_lease, now);
                let offered = broker.producer(p.id).map_or(0, |e| e.offered_slabs) as f64 * slab_gb;
                supply_gb += pred.min(offered);
            }
            let demand_at = |q: Money| -> f64 {
                if cfg.price_sensitive {
                    consumer_demand(&population, q)
                } else {
                    population.iter().map(|d| d.profile.max_gb.unwrap_or(0.0)).sum()
                }
            };
            let demand_gb = demand_at(price);
            let oracle_price = match cfg.oracle_step {
                Some(step) => {
                    let curves: Vec<DemandCurve> =
                        population.iter().map(|d| DemandCurve::new(&d.mrc, &d.profile)).collect();
                    let fixed: f64 = population.iter().map(|d| d.profile.max_gb.unwrap_or(0.0)).sum();
                    let d = |q: Money| -> f64 {
                        if cfg.price_sensitive {
                            curves.iter().map(|c| c.at(q)).sum()
                        } else {
                            fixed
                        }
                    };
                    Some(grid_argmax(d, supply_gb, step, ceiling(&spot)?, tick_h).0)
                }
                None => None,
            };

            metrics.push(TickMetrics {
                tick: t,
                at_ms: now.0,
                price: price.0,
                trading_volume_gb: leased_slabs as f64 * slab_gb,
                producer_revenue: revenue,
                cluster_utilization: used / total_cap,
                baseline_utilization: base / total_cap,
                mean_consumer_hit_ratio: hit,
                satisfied_request_fraction: if requests == 0 { 1.0 } else { satisfied as f64 / requests as f64 },
                revoked_slab_fraction: if leased_before == 0 { 0.0 } else { revoked as f64 / leased_before as f64 },
                supply_gb,
                demand_gb,
                requests,
                satisfied_requests: satisfied,
                allocated_slabs: allocated,
                revoked_slabs: revoked,
                oracle_price,
            });

            engine.advance(&spot, |q| MarketObservation::new(q, demand_at(q).min(supply_gb) * tick_h))?;
        }
        cache.extend(broker.prediction_cache().iter().map(|(k, v)| (*k, *v)));
        let summary = summarize(&cfg.strategy.name(), &metrics, producers.len(), consumers.len());
        Ok(SimResult { metrics, summary, events })
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn summarize(strategy: &str, m: &[TickMetrics], producers: usize, consumers: usize) -> SimSummary {
    let requests: u64 = m.iter().map(|r| r.requests as u64).sum();
    let satisfied: u64 = m.iter().map(|r| r.satisfied_requests as u64).sum();
    let allocated: u64 = m.iter().map(|r| r.allocated_slabs as u64).sum();
    let revoked: u64 = m.iter().map(|r| r.revoked_slabs as u64).sum();
    let devs: Vec<f64> = m
        .iter()
        .filter_map(|r| r.oracle_price.filter(|&o| o > 0).map(|o| (r.price as f64 - o as f64).abs() / o as f64))
        .collect();
    SimSummary {
        strategy: strategy.to_string(),
        ticks: m.len(),
        producers,
        consumers,
        total_revenue: m.iter().map(|r| r.producer_revenue).sum(),
        mean_price: mean(m.iter().map(|r| r.price as f64)),
        mean_volume_gb: mean(m.iter().map(|r| r.trading_volume_gb)),
        mean_utilization: mean(m.iter().map(|r| r.cluster_utilization)),
        mean_baseline_utilization: mean(m.iter().map(|r| r.baseline_utilization)),
        mean_hit_ratio: mean(m.iter().map(|r| r.mean_consumer_hit_ratio)),
        satisfied_request_fraction: if requests == 0 { 1.0 } else { satisfied as f64 / requests as f64 },
        revoked_slab_fraction: if allocated == 0 { 0.0 } else { (revoked as f64 / allocated as f64).min(1.0) },
        oracle_deviation: (!devs.is_empty()).then(|| mean(devs.into_iter())),
    }
}

/// Runs `trace` once with the config as given.
pub fn run(trace: &ClusterTrace, cfg: &SimConfig) -> Result<SimResult> {
    Simulation::new(trace.clone(), cfg.clone())?.run()
}

/// Runs every strategy on the same trace and seed.
pub fn compare_strategies(
    trace: &ClusterTrace,
    cfg: &SimConfig,
    strategies: &[PricingStrategy],
) -> Result<Vec<SimResult>> {
    let mut cache = PredictionCache::new();
    let mut out = Vec::with_capacity(strategies.len());
    for s in strategies {
        let sim = Simulation::new(trace.clone(), SimConfig { strategy: *s, ..cfg.clone() })?;
        out.push(sim.run_shared(&mut cache)?);
    }
    Ok(out)
}

/// Revenue-optimal price per tick on a grid of `step`.
pub fn price_oracle(trace: &ClusterTrace, cfg: &SimConfig, step: Money) -> Result<Vec<Money>> {
    let res = run(trace, &SimConfig { oracle_step: Some(step), ..cfg.clone() })?;
    Ok(res.metrics.iter().map(|m| Money(m.oracle_price.unwrap_or(0))).collect())
}

pub fn write_metrics_csv<W: Write>(w: W, metrics: &[TickMetrics]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for m in metrics {
        wr.serialize(m)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_events_csv<W: Write>(w: W, events: &[SimEvent]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for e in events {
        wr.serialize(e)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_events_csv<R: std::io::Read>(r: R) -> Result<Vec<SimEvent>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for e in rd.deserialize() {
        out.push(e?);
    }
    Ok(out)
}

/// Side-by-side per-tick series: price, volume, revenue and utilization
/// for each strategy.
pub fn write_comparison_csv<W: Write>(w: W, results: &[SimResult]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["tick".to_string()];
    for r in results {
        let n = &r.summary.strategy;
        for col in ["price", "volume_gb", "revenue", "utilization"] {
            header.push(format!("{n}:{col}"));
        }
    }
    wr.write_record(&header)?;
    let ticks = results.iter().map(|r| r.metrics.len()).min().unwrap_or(0);
    for t in 0..ticks {
        let mut row = vec![t.to_string()];
        for r in results {
            let m = &r.metrics[t];
            row.push(m.price.to_string());
            row.push(m.trading_volume_gb.to_string());
            row.push(m.producer_revenue.to_string());
            row.push(m.cluster_utilization.to_string());
        }
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

/// Config, seed and source revision of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: SimConfig,
    pub seed: u64,
    pub git_revision: Option<String>,
    pub trace: String,
    pub command: String,
}

impl RunManifest {
    pub fn new(config: &SimConfig, trace: &str, command: &str) -> Self {
        RunManifest {
            config: config.clone(),
            seed: config.seed,
            git_revision: git_revision(),
            trace: trace.to_string(),
            command: command.to_string(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn git_revision() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

#[cfg(test)]
mod tests;
