//! Matchmaking between producers and consumers.
//!
//! The broker is a single-threaded state machine: every command (register,
//! report, request, tick) goes through `&mut Broker`, so placement is
//! deterministic for a given command sequence. Network front ends funnel
//! into it.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::Write;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::{AvailabilityPredictor, PredictorConfig, TimeSeries};
use crate::units::{
    byte_ms, floor_price_volume, ByteSize, ConsumerId, Duration, Instant, LeaseId, LeaseTerms, Money,
    PlacementWeights, ProducerId, MS_PER_MIN, SLAB_SIZE,
};

pub const SNAPSHOT_VERSION: u32 = 1;

pub type RequestId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrokerConfig {
    pub slab_size: ByteSize,
    pub min_lease: Duration,
    pub queue_timeout: Duration,
    /// Rebate per unit of unserved value, in parts per million.
    pub rebate_rate_ppm: u64,
    /// How long after a lease ends it may still be renewed.
    pub renew_grace: Duration,
    /// Expected spacing of producer reports.
    pub report_step: Duration,
    pub registration_token: Option<String>,
    pub predictor: PredictorConfig,
    pub seed: u64,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            slab_size: SLAB_SIZE,
            min_lease: Duration::from_mins(10),
            queue_timeout: Duration::from_mins(10),
            rebate_rate_ppm: 1_000_000,
            renew_grace: Duration::from_secs(30),
            report_step: Duration(5 * MS_PER_MIN),
            registration_token: None,
            predictor: PredictorConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageSample {
    /// Memory the producer could lease out, leased slabs included.
    pub free_bytes: u64,
    pub offered_slabs: u32,
    pub bw: u64,
    pub cpu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProducerLedgerEntry {
    pub producer_id: ProducerId,
    pub endpoint: String,
    pub offered_slabs: u32,
    /// Free memory in GB, one value per report.
    pub usage_history: TimeSeries,
    pub available_bw: u64,
    pub available_cpu: f64,
    pub latency_to: BTreeMap<ConsumerId, Duration>,
    pub honored_slab_ms: u128,
    pub leased_slab_ms: u128,
    pub active_leases: BTreeSet<LeaseId>,
    pub slabs_in_use: BTreeSet<u32>,
    pub last_report: Option<Instant>,
    pub predictor: AvailabilityPredictor,
}

impl ProducerLedgerEntry {
    /// Fraction of leased slab·time not cut short by eviction.
    pub fn reputation(&self) -> f64 {
        if self.leased_slab_ms == 0 {
            1.0
        } else {
            self.honored_slab_ms as f64 / self.leased_slab_ms as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumerEntry {
    pub consumer_id: ConsumerId,
    pub endpoint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Party {
    Producer,
    Consumer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaseRequest {
    pub consumer_id: ConsumerId,
    pub terms: LeaseTerms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingRequest {
    pub id: RequestId,
    pub request: LeaseRequest,
    pub remaining_slabs: u32,
    pub enqueued_at: Instant,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentPart {
    pub producer_id: ProducerId,
    pub slab_indices: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub lease_id: LeaseId,
    pub consumer_id: ConsumerId,
    pub parts: Vec<AssignmentPart>,
    pub start: Instant,
    pub end: Instant,
    pub unit_price: Money,
    pub token: u64,
    /// The request this answers, when it came through the queue.
    pub request_id: Option<RequestId>,
}

impl Assignment {
    pub fn slab_count(&self) -> u32 {
        self.parts.iter().map(|p| p.slab_indices.len() as u32).sum()
    }

    pub fn duration(&self) -> Duration {
        self.end.since(self.start)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AllocationOutcome {
    /// Slabs were placed. A shortfall, if any, waits in the queue under the
    /// given id.
    Assigned(Assignment, Option<RequestId>),
    Queued(RequestId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionRecord {
    pub producer_id: ProducerId,
    pub slabs: u32,
    pub at: Instant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub assignment: Assignment,
    pub evictions: Vec<EvictionRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bill {
    pub charge: Money,
    pub rebate: Money,
    /// Value of the whole term at the lease price.
    pub total_value: Money,
    pub unserved: Money,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BillRecord {
    pub lease_id: LeaseId,
    pub consumer_id: ConsumerId,
    pub start: Instant,
    pub end: Instant,
    pub unit_price: Money,
    pub slabs: u32,
    pub evicted_slabs: u32,
    pub bill: Bill,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RenewOutcome {
    Renewed(Assignment),
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TickOutcome {
    pub assigned: Vec<Assignment>,
    pub dropped: Vec<RequestId>,
    pub ended: Vec<BillRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RequestState {
    Pending,
    Done,
    Dropped,
}

/// A request that went through the queue and the leases placed for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub state: RequestState,
    pub leases: Vec<LeaseId>,
}

/// Bills one lease term. Evicted slab·time is not charged; the rebate is
/// `rate` of what was not served.
pub fn bill_lease(lease: &Lease, slab_size: ByteSize, rebate_rate_ppm: u64) -> Bill {
    let a = &lease.assignment;
    let slabs = a.slab_count() as u64;
    let evicted: u64 = lease.evictions.iter().map(|e| e.slabs as u64).sum();
    let total_vol = byte_ms(ByteSize(slab_size.0 * (slabs + evicted)), a.duration());
    let lost_vol: u128 = lease
        .evictions
        .iter()
        .map(|e| byte_ms(ByteSize(slab_size.0 * e.slabs as u64), a.end.since(e.at.max(a.start).min(a.end))))
        .sum();
    let price = a.unit_price.0;
    let total_value = floor_price_volume(price, total_vol);
    let charge = floor_price_volume(price, total_vol - lost_vol);
    let unserved = total_value - charge;
    let rebate = (unserved as u128 * rebate_rate_ppm as u128 / 1_000_000) as u64;
    Bill { charge: Money(charge), rebate: Money(rebate), total_value: Money(total_value), unserved: Money(unserved) }
}

/// Placement cost of each candidate. Goodness metrics count as
/// 1 - norm(g), latency as norm(latency); norm is min-max over the
/// candidates, 0.5 for a degenerate span.
pub fn placement_costs(metrics: &[[f64; 6]], weights: &PlacementWeights) -> Vec<f64> {
    let w = weights.as_array();
    let n = metrics.len();
    let mut cost = vec![0.0; n];
    for k in 0..6 {
        let lo = metrics.iter().map(|m| m[k]).fold(f64::INFINITY, f64::min);
        let hi = metrics.iter().map(|m| m[k]).fold(f64::NEG_INFINITY, f64::max);
        for (i, m) in metrics.iter().enumerate() {
            let norm = if hi - lo > 0.0 { (m[k] - lo) / (hi - lo) } else { 0.5 };
            // index 4 is latency: lower is better
            let term = if k == 4 { norm } else { 1.0 - norm };
            cost[i] += w[k] * term;
        }
    }
    cost
}

/// One producer in the placement candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub producer_id: ProducerId,
    pub slabs: u32,
    pub predicted_free_gb: f64,
    pub bw: f64,
    pub cpu: f64,
    pub latency_ms: f64,
    pub reputation: f64,
}

impl Candidate {
    pub fn metrics(&self) -> [f64; 6] {
        [self.slabs as f64, self.predicted_free_gb, self.bw, self.cpu, self.latency_ms, self.reputation]
    }
}

/// Greedy split of `want` slabs over candidates by ascending cost, lower id
/// on ties. Returns (candidate index, slabs taken).
pub fn greedy_split(candidates: &[Candidate], costs: &[f64], want: u32) -> Vec<(usize, u32)> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(candidates[a].producer_id.cmp(&candidates[b].producer_id)));
    let mut left = want;
    let mut out = Vec::new();
    for i in order {
        if left == 0 {
            break;
        }
        let take = left.min(candidates[i].slabs);
        if take > 0 {
            out.push((i, take));
            left -= take;
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Broker {
    pub version: u32,
    pub cfg: BrokerConfig,
    pub price: Money,
    producers: BTreeMap<ProducerId, ProducerLedgerEntry>,
    consumers: BTreeMap<ConsumerId, ConsumerEntry>,
    leases: BTreeMap<LeaseId, Lease>,
    queue: VecDeque<PendingRequest>,
    requests: BTreeMap<RequestId, RequestRecord>,
    bills: Vec<BillRecord>,
    next_producer: u64,
    next_consumer: u64,
    next_lease: u64,
    next_request: u64,
    rng_state: u64,
    #[serde(skip)]
    prediction_cache: HashMap<(ProducerId, usize, u64), f64>,
}

impl Broker {
    pub fn new(cfg: BrokerConfig) -> Self {
        let seed = cfg.seed;
        Broker {
            version: SNAPSHOT_VERSION,
            cfg,
            price: Money::ZERO,
            producers: BTreeMap::new(),
            consumers: BTreeMap::new(),
            leases: BTreeMap::new(),
            queue: VecDeque::new(),
            requests: BTreeMap::new(),
            bills: Vec::new(),
            next_producer: 1,
            next_consumer: 1,
            next_lease: 1,
            next_request: 1,
            rng_state: seed,
            prediction_cache: HashMap::new(),
        }
    }

    fn token(&mut self) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_state);
        self.rng_state = rng.next_u64();
        rng.next_u64()
    }

    fn check_token(&self, credentials: &str) -> Result<()> {
        match &self.cfg.registration_token {
            Some(t) if t != credentials => Err(Error::invalid("bad registration token")),
            _ => Ok(()),
        }
    }

    pub fn register(&mut self, party: Party, endpoint: &str, credentials: &str) -> Result<u64> {
        self.check_token(credentials)?;
        if endpoint.is_empty() || endpoint.chars().any(char::is_whitespace) {
            return Err(Error::invalid(format!("malformed endpoint {endpoint:?}")));
        }
        match party {
            Party::Producer => {
                if self.producers.values().any(|p| p.endpoint == endpoint) {
                    return Err(Error::Duplicate(format!("producer endpoint {endpoint}")));
                }
                let id = self.next_producer;
                self.next_producer += 1;
                self.producers.insert(
                    id,
                    ProducerLedgerEntry {
                        producer_id: id,
                        endpoint: endpoint.to_string(),
                        offered_slabs: 0,
                        usage_history: TimeSeries::new(Instant(0), self.cfg.report_step),
                        available_bw: 0,
                        available_cpu: 0.0,
                        latency_to: BTreeMap::new(),
                        honored_slab_ms: 0,
                        leased_slab_ms: 0,
                        active_leases: BTreeSet::new(),
                        slabs_in_use: BTreeSet::new(),
                        last_report: None,
                        predictor: AvailabilityPredictor::new(self.cfg.predictor.clone()),
                    },
                );
                Ok(id)
            }
            Party::Consumer => {
                if self.consumers.values().any(|c| c.endpoint == endpoint) {
                    return Err(Error::Duplicate(format!("consumer endpoint {endpoint}")));
                }
                let id = self.next_consumer;
                self.next_consumer += 1;
                self.consumers.insert(id, ConsumerEntry { consumer_id: id, endpoint: endpoint.to_string() });
                Ok(id)
            }
        }
    }

    /// Removes a party. A producer's live leases count as evicted now.
    pub fn deregister(&mut self, party: Party, id: u64, now: Instant) -> Result<()> {
        match party {
            Party::Producer => {
                let leases: Vec<LeaseId> = self
                    .producers
                    .get(&id)
                    .ok_or_else(|| Error::NotFound(format!("producer {id}")))?
                    .active_leases
                    .iter()
                    .copied()
                    .collect();
                for l in leases {
                    let n = self.part_slabs(l, id);
                    if n > 0 {
                        self.record_eviction(l, id, n, now)?;
                    }
                }
                self.producers.remove(&id);
            }
            Party::Consumer => {
                self.consumers.remove(&id).ok_or_else(|| Error::NotFound(format!("consumer {id}")))?;
                self.queue.retain(|p| p.request.consumer_id != id);
            }
        }
        Ok(())
    }

    fn part_slabs(&self, lease_id: LeaseId, producer_id: ProducerId) -> u32 {
        self.leases
            .get(&lease_id)
            .and_then(|l| l.assignment.parts.iter().find(|p| p.producer_id == producer_id))
            .map_or(0, |p| p.slab_indices.len() as u32)
    }

    pub fn report_usage(&mut self, producer_id: ProducerId, sample: UsageSample, at: Instant) -> Result<()> {
        let p = self
            .producers
            .get_mut(&producer_id)
            .ok_or_else(|| Error::NotFound(format!("producer {producer_id}")))?;
        if p.last_report.is_some_and(|t| at <= t) {
            return Err(Error::invalid(format!("report at {} is not after the previous one", at.0)));
        }
        if !sample.cpu.is_finite() {
            return Err(Error::invalid("cpu must be finite"));
        }
        if p.usage_history.is_empty() {
            p.usage_history.start = at;
        }
        p.usage_history.push(sample.free_bytes as f64 / crate::units::GB as f64)?;
        p.offered_slabs = sample.offered_slabs;
        p.available_bw = sample.bw;
        p.available_cpu = sample.cpu;
        p.last_report = Some(at);
        p.predictor.maybe_retune(&p.usage_history, at);
        Ok(())
    }

    pub fn set_latency(&mut self, producer_id: ProducerId, consumer_id: ConsumerId, latency: Duration) -> Result<()> {
        let p = self
            .producers
            .get_mut(&producer_id)
            .ok_or_else(|| Error::NotFound(format!("producer {producer_id}")))?;
        p.latency_to.insert(consumer_id, latency);
        Ok(())
    }

    /// Forecast minimum free GB over `lease`, cached per report.
    pub fn predicted_free_gb(&mut self, producer_id: ProducerId, lease: Duration, now: Instant) -> f64 {
        let Some(p) = self.producers.get_mut(&producer_id) else {
            return 0.0;
        };
        let key = (producer_id, p.usage_history.len(), lease.0);
        if let Some(&v) = self.prediction_cache.get(&key) {
            return v;
        }
        let v = p.predictor.predict_min_free(&p.usage_history, lease, now);
        if self.prediction_cache.len() > 1_000_000 {
            self.prediction_cache.clear();
        }
        self.prediction_cache.insert(key, v);
        v
    }

    /// Forecasts computed so far, keyed by (producer, history length, lease ms).
    pub fn prediction_cache(&self) -> &HashMap<(ProducerId, usize, u64), f64> {
        &self.prediction_cache
    }

    /// Preloads forecasts from a run that saw the same usage reports.
    pub fn preload_predictions(&mut self, entries: &HashMap<(ProducerId, usize, u64), f64>) {
        self.prediction_cache.extend(entries.iter().map(|(k, v)| (*k, *v)));
    }

    /// Slabs a producer can still lease for the whole of `lease`.
    pub fn available_slabs(&mut self, producer_id: ProducerId, lease: Duration, now: Instant) -> u32 {
        let pred = self.predicted_free_gb(producer_id, lease, now);
        let Some(p) = self.producers.get(&producer_id) else {
            return 0;
        };
        let predicted_slabs = ((pred * crate::units::GB as f64) / self.cfg.slab_size.0 as f64).floor().max(0.0) as u64;
        let cap = predicted_slabs.min(p.offered_slabs as u64) as u32;
        cap.saturating_sub(p.slabs_in_use.len() as u32)
    }

    pub fn candidates(&mut self, consumer_id: ConsumerId, terms: &LeaseTerms, now: Instant) -> Vec<Candidate> {
        if self.price > terms.max_unit_price {
            return Vec::new();
        }
        let ids: Vec<ProducerId> = self.producers.keys().copied().collect();
        let mut out = Vec::new();
        for id in ids {
            let slabs = self.available_slabs(id, terms.duration, now);
            if slabs == 0 {
                continue;
            }
            let pred = self.predicted_free_gb(id, terms.duration, now);
            let p = &self.producers[&id];
            let latency = p.latency_to.get(&consumer_id).copied().unwrap_or(Duration::ZERO);
            if latency > terms.latency_bound {
                continue;
            }
            out.push(Candidate {
                producer_id: id,
                slabs,
                predicted_free_gb: pred,
                bw: p.available_bw as f64,
                cpu: p.available_cpu,
                latency_ms: latency.0 as f64,
                reputation: p.reputation(),
            });
        }
        out
    }

    fn validate_request(&self, req: &LeaseRequest) -> Result<()> {
        if !self.consumers.contains_key(&req.consumer_id) {
            return Err(Error::NotFound(format!("consumer {}", req.consumer_id)));
        }
        req.terms.validate(self.cfg.min_lease)
    }

    /// Tries to place `want` slabs with at least `min` of them.
    fn place(&mut self, req: &LeaseRequest, want: u32, min: u32, now: Instant) -> Option<Assignment> {
        let cands = self.candidates(req.consumer_id, &req.terms, now);
        if cands.is_empty() {
            return None;
        }
        let metrics: Vec<[f64; 6]> = cands.iter().map(Candidate::metrics).collect();
        let weights = req.terms.weights.unwrap_or_default();
        let costs = placement_costs(&metrics, &weights);
        let split = greedy_split(&cands, &costs, want);
        let got: u32 = split.iter().map(|s| s.1).sum();
        if got < min {
            return None;
        }
        let lease_id = self.next_lease;
        self.next_lease += 1;
        let token = self.token();
        let end = now + req.terms.duration;
        let mut parts = Vec::new();
        for (i, take) in split {
            let pid = cands[i].producer_id;
            let p = self.producers.get_mut(&pid).expect("candidate exists");
            let mut idx = Vec::new();
            let mut s = 0u32;
            while idx.len() < take as usize {
                if !p.slabs_in_use.contains(&s) {
                    idx.push(s);
                }
                s += 1;
            }
            p.slabs_in_use.extend(idx.iter().copied());
            p.active_leases.insert(lease_id);
            let slab_ms = take as u128 * req.terms.duration.0 as u128;
            p.leased_slab_ms += slab_ms;
            p.honored_slab_ms += slab_ms;
            parts.push(AssignmentPart { producer_id: pid, slab_indices: idx });
        }
        parts.sort_by_key(|p| p.producer_id);
        let a = Assignment {
            lease_id,
            consumer_id: req.consumer_id,
            parts,
            start: now,
            end,
            unit_price: self.price,
            token,
            request_id: None,
        };
        self.leases.insert(lease_id, Lease { assignment: a.clone(), evictions: Vec::new() });
        Some(a)
    }

    fn enqueue(&mut self, req: LeaseRequest, remaining: u32, now: Instant) -> RequestId {
        let id = self.next_request;
        self.next_request += 1;
        self.queue.push_back(PendingRequest {
            id,
            request: req,
            remaining_slabs: remaining,
            enqueued_at: now,
            timeout: self.cfg.queue_timeout,
        });
        self.requests.insert(id, RequestRecord { state: RequestState::Pending, leases: Vec::new() });
        id
    }

    pub fn allocate(&mut self, req: LeaseRequest, now: Instant) -> Result<AllocationOutcome> {
        self.validate_request(&req)?;
        let want = req.terms.slabs;
        match self.place(&req, want, req.terms.min_slabs, now) {
            Some(a) => {
                let got = a.slab_count();
                let queued = (got < want).then(|| self.enqueue(req, want - got, now));
                if let Some(id) = queued {
                    self.requests.get_mut(&id).expect("just queued").leases.push(a.lease_id);
                }
                Ok(AllocationOutcome::Assigned(a, queued))
            }
            None => Ok(AllocationOutcome::Queued(self.enqueue(req, want, now))),
        }
    }

    /// Retries queued requests in order. A request that cannot be placed
    /// does not block the ones behind it. Expired requests are dropped.
    pub fn tick_queue(&mut self, now: Instant) -> (Vec<Assignment>, Vec<RequestId>) {
        let mut assigned = Vec::new();
        let mut dropped = Vec::new();
        let pending: Vec<PendingRequest> = self.queue.drain(..).collect();
        for mut p in pending {
            let rec = self.requests.get(&p.id).cloned();
            if now >= p.enqueued_at + p.timeout || !self.consumers.contains_key(&p.request.consumer_id) {
                if let Some(r) = self.requests.get_mut(&p.id) {
                    r.state = RequestState::Dropped;
                }
                dropped.push(p.id);
                continue;
            }
            // a remainder already has its minimum
            let fresh = rec.is_none_or(|r| r.leases.is_empty());
            let min = if fresh { p.request.terms.min_slabs.min(p.remaining_slabs) } else { 1 };
            if let Some(mut a) = self.place(&p.request, p.remaining_slabs, min, now) {
                a.request_id = Some(p.id);
                if let Some(l) = self.leases.get_mut(&a.lease_id) {
                    l.assignment.request_id = Some(p.id);
                }
                if let Some(r) = self.requests.get_mut(&p.id) {
                    r.leases.push(a.lease_id);
                }
                p.remaining_slabs -= a.slab_count();
                assigned.push(a);
            }
            if p.remaining_slabs == 0 {
                if let Some(r) = self.requests.get_mut(&p.id) {
                    r.state = RequestState::Done;
                }
            } else {
                self.queue.push_back(p);
            }
        }
        (assigned, dropped)
    }

    pub fn request(&self, id: RequestId) -> Option<&RequestRecord> {
        self.requests.get(&id)
    }

    pub fn record_eviction(&mut self, lease_id: LeaseId, producer_id: ProducerId, slabs: u32, at: Instant) -> Result<()> {
        let lease = self.leases.get_mut(&lease_id).ok_or_else(|| Error::NotFound(format!("lease {lease_id}")))?;
        let part = lease
            .assignment
            .parts
            .iter_mut()
            .find(|p| p.producer_id == producer_id)
            .ok_or_else(|| Error::NotFound(format!("producer {producer_id} in lease {lease_id}")))?;
        if slabs == 0 || slabs as usize > part.slab_indices.len() {
            return Err(Error::invalid(format!("cannot evict {slabs} of {} slabs", part.slab_indices.len())));
        }
        let at = at.max(lease.assignment.start).min(lease.assignment.end);
        let keep = part.slab_indices.len() - slabs as usize;
        let freed: Vec<u32> = part.slab_indices.split_off(keep);
        let empty = part.slab_indices.is_empty();
        lease.evictions.push(EvictionRecord { producer_id, slabs, at });
        let lost = slabs as u128 * lease.assignment.end.since(at).0 as u128;
        if let Some(p) = self.producers.get_mut(&producer_id) {
            p.honored_slab_ms -= lost.min(p.honored_slab_ms);
            for s in freed {
                p.slabs_in_use.remove(&s);
            }
            if empty {
                p.active_leases.remove(&lease_id);
            }
        }
        Ok(())
    }

    pub fn lease(&self, lease_id: LeaseId) -> Option<&Lease> {
        self.leases.get(&lease_id)
    }

    pub fn leases(&self) -> impl Iterator<Item = &Lease> {
        self.leases.values()
    }

    /// Ends a lease term: bills it and releases its slabs.
    fn close(&mut self, lease_id: LeaseId) -> Option<BillRecord> {
        let lease = self.leases.remove(&lease_id)?;
        let rec = self.bill_record(&lease);
        for part in &lease.assignment.parts {
            if let Some(p) = self.producers.get_mut(&part.producer_id) {
                for s in &part.slab_indices {
                    p.slabs_in_use.remove(s);
                }
                p.active_leases.remove(&lease_id);
            }
        }
        self.bills.push(rec.clone());
        Some(rec)
    }

    fn bill_record(&self, lease: &Lease) -> BillRecord {
        let a = &lease.assignment;
        let evicted: u32 = lease.evictions.iter().map(|e| e.slabs).sum();
        BillRecord {
            lease_id: a.lease_id,
            consumer_id: a.consumer_id,
            start: a.start,
            end: a.end,
            unit_price: a.unit_price,
            slabs: a.slab_count() + evicted,
            evicted_slabs: evicted,
            bill: bill_lease(lease, self.cfg.slab_size, self.cfg.rebate_rate_ppm),
        }
    }

    /// Ends leases more than the grace window past their end.
    pub fn expire_leases(&mut self, now: Instant) -> Vec<BillRecord> {
        let due: Vec<LeaseId> = self
            .leases
            .values()
            .filter(|l| l.assignment.end + self.cfg.renew_grace <= now)
            .map(|l| l.assignment.lease_id)
            .collect();
        due.into_iter().filter_map(|id| self.close(id)).collect()
    }

    /// Queue retries, then lease expiry.
    pub fn tick(&mut self, now: Instant) -> TickOutcome {
        let ended = self.expire_leases(now);
        let (assigned, dropped) = self.tick_queue(now);
        TickOutcome { assigned, dropped, ended }
    }

    /// Extends a lease by its original duration at the current price. The
    /// finished term is billed. Fails when a producer is gone or can no
    /// longer hold its slabs.
    pub fn renew(&mut self, lease_id: LeaseId, now: Instant) -> Result<RenewOutcome> {
        let lease = self.leases.get(&lease_id).ok_or_else(|| Error::NotFound(format!("lease {lease_id}")))?;
        let a = lease.assignment.clone();
        if now > a.end + self.cfg.renew_grace {
            self.close(lease_id);
            return Ok(RenewOutcome::Expired);
        }
        let dur = a.duration();
        let live: Vec<&AssignmentPart> = a.parts.iter().filter(|p| !p.slab_indices.is_empty()).collect();
        let mut ok = !live.is_empty();
        for part in &live {
            if !self.producers.contains_key(&part.producer_id) {
                ok = false;
                break;
            }
            // its own slabs are in use, so add them back for the check
            let free = self.available_slabs(part.producer_id, dur, now) + part.slab_indices.len() as u32;
            if free < part.slab_indices.len() as u32 {
                ok = false;
                break;
            }
        }
        if !ok {
            self.close(lease_id);
            return Ok(RenewOutcome::Expired);
        }
        let rec = self.bill_record(&self.leases[&lease_id]);
        self.bills.push(rec);
        let new_start = a.end.max(now);
        let mut next = a.clone();
        next.parts = live.into_iter().cloned().collect();
        next.start = new_start;
        next.end = new_start + dur;
        next.unit_price = self.price;
        for part in &next.parts {
            if let Some(p) = self.producers.get_mut(&part.producer_id) {
                let slab_ms = part.slab_indices.len() as u128 * dur.0 as u128;
                p.leased_slab_ms += slab_ms;
                p.honored_slab_ms += slab_ms;
            }
        }
        self.leases.insert(lease_id, Lease { assignment: next.clone(), evictions: Vec::new() });
        Ok(RenewOutcome::Renewed(next))
    }

    pub fn producer(&self, id: ProducerId) -> Option<&ProducerLedgerEntry> {
        self.producers.get(&id)
    }

    pub fn producers(&self) -> impl Iterator<Item = &ProducerLedgerEntry> {
        self.producers.values()
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.cfg
    }

    /// Consumer registrations so far, removed ones included.
    pub fn consumers_seen(&self) -> u64 {
        self.next_consumer - 1
    }

    pub fn consumer(&self, id: ConsumerId) -> Option<&ConsumerEntry> {
        self.consumers.get(&id)
    }

    pub fn queue(&self) -> impl Iterator<Item = &PendingRequest> {
        self.queue.iter()
    }

    pub fn bills(&self) -> &[BillRecord] {
        &self.bills
    }

    /// Active lease parts placed on a producer, for its report reply.
    pub fn leases_on(&self, producer_id: ProducerId) -> Vec<(&Assignment, &AssignmentPart)> {
        let Some(p) = self.producers.get(&producer_id) else {
            return Vec::new();
        };
        p.active_leases
            .iter()
            .filter_map(|id| self.leases.get(id))
            .filter_map(|l| l.assignment.parts.iter().find(|pt| pt.producer_id == producer_id).map(|pt| (&l.assignment, pt)))
            .collect()
    }

    pub fn leased_slabs(&self) -> u64 {
        self.leases.values().map(|l| l.assignment.slab_count() as u64).sum()
    }

    /// Checks that no slab is held by two leases.
    pub fn check_no_double_lease(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for l in self.leases.values() {
            for part in &l.assignment.parts {
                for s in &part.slab_indices {
                    if !seen.insert((part.producer_id, *s)) {
                        return Err(Error::state(format!("slab {s} on producer {} leased twice", part.producer_id)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn snapshot_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_snapshot_json(s: &str) -> Result<Self> {
        let b: Broker = serde_json::from_str(s)?;
        if b.version != SNAPSHOT_VERSION {
            return Err(Error::Parse(format!("snapshot version {} not supported", b.version)));
        }
        Ok(b)
    }

    /// Writes the snapshot next to `path` and renames it into place.
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(self.snapshot_json()?.as_bytes())?;
        f.sync_all()?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }
}
