use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::broker::{AllocationOutcome, Assignment, Broker, BrokerConfig, LeaseRequest, Party, RenewOutcome, RequestState, UsageSample};
use crate::clock::{Clock, SystemClock};
use crate::error::{Error, Result};
use crate::pricing::{ceiling, initial_price, ExplorationCycle, MarketObservation, PricingStrategy, SpotPricePoint, StrategyKind};
use crate::units::{Duration, Instant, LeaseTerms, Money, GB};
use crate::wire::{err_code, unknown_opcode, write_frame, Control, Frame, FrameReader, Grant, Reply, Role};

use super::Response;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BrokerServerConfig {
    pub listen: String,
    pub run_dir: PathBuf,
    /// Period of queue retries, expiry and snapshots.
    pub tick: Duration,
    pub broker: BrokerConfig,
    pub spot: SpotPricePoint,
    pub strategy: PricingStrategy,
    /// Length of one live pricing round.
    pub price_round: Duration,
    /// Load run_dir/snapshot.json when it exists.
    pub resume: bool,
}

impl Default for BrokerServerConfig {
    fn default() -> Self {
        BrokerServerConfig {
            listen: "127.0.0.1:7070".into(),
            run_dir: PathBuf::from("runs/broker"),
            tick: Duration::from_secs(1),
            broker: BrokerConfig::default(),
            spot: SpotPricePoint { at: Instant(0), price_per_instance_hour: Money(7_000_000), instance_mem_gb: 16.0 },
            strategy: PricingStrategy::new(StrategyKind::MaxRevenue),
            price_round: Duration::from_mins(5),
            resume: false,
        }
    }
}

struct Market {
    broker: Broker,
    bills_written: usize,
    billing: BufWriter<File>,
    explore: ExplorationCycle,
    round_start: Instant,
    matched_gb_hours: f64,
    last_tick: Instant,
}

struct Shared {
    cfg: BrokerServerConfig,
    market: Mutex<Market>,
    clock: Arc<dyn Clock>,
    stop: AtomicBool,
}

pub struct BrokerServer {
    shared: Arc<Shared>,
    listener: TcpListener,
}

impl BrokerServer {
    pub fn bind(cfg: BrokerServerConfig) -> Result<Self> {
        Self::bind_with_clock(cfg, Arc::new(SystemClock))
    }

    pub fn bind_with_clock(cfg: BrokerServerConfig, clock: Arc<dyn Clock>) -> Result<Self> {
        cfg.strategy.validate()?;
        if cfg.tick.0 == 0 || cfg.price_round.0 == 0 {
            return Err(Error::invalid("tick and price round must be positive"));
        }
        std::fs::create_dir_all(&cfg.run_dir)?;
        let snap = cfg.run_dir.join("snapshot.json");
        let mut broker = if cfg.resume && snap.exists() {
            info!("resuming from {}", snap.display());
            Broker::from_snapshot_json(&std::fs::read_to_string(&snap)?)?
        } else {
            let mut b = Broker::new(cfg.broker.clone());
            b.price = initial_price(&cfg.spot)?;
            b
        };
        if let StrategyKind::FixedFraction(f) = cfg.strategy.kind {
            broker.price = Money((ceiling(&cfg.spot)?.0 as f64 * f).floor() as u64);
        }
        let bills_written = broker.bills().len();
        let billing = BufWriter::new(OpenOptions::new().create(true).append(true).open(cfg.run_dir.join("billing.jsonl"))?);
        let now = clock.now();
        let market = Market {
            explore: ExplorationCycle::new(broker.price),
            broker,
            bills_written,
            billing,
            round_start: now,
            matched_gb_hours: 0.0,
            last_tick: now,
        };
        let listener = TcpListener::bind(&cfg.listen)?;
        Ok(BrokerServer {
            shared: Arc::new(Shared { cfg, market: Mutex::new(market), clock, stop: AtomicBool::new(false) }),
            listener,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Flag that makes `run` return after its next accept.
    pub fn stop_handle(&self) -> StopHandle {
        StopHandle { shared: self.shared.clone(), addr: self.listener.local_addr().ok() }
    }

    /// Serves until stopped.
    pub fn run(self) -> Result<()> {
        let ticker = {
            let s = self.shared.clone();
            thread::spawn(move || {
                while !s.stop.load(Ordering::SeqCst) {
                    thread::sleep(std::time::Duration::from_millis(s.cfg.tick.0));
                    if let Err(e) = s.tick() {
                        warn!("tick failed: {e}");
                    }
                }
            })
        };
        for conn in self.listener.incoming() {
            if self.shared.stop.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let s = self.shared.clone();
                    thread::spawn(move || {
                        if let Err(e) = s.serve(stream) {
                            debug!("connection closed: {e}");
                        }
                    });
                }
                Err(e) => warn!("accept failed: {e}"),
            }
        }
        let _ = ticker.join();
        self.shared.tick()
    }
}

#[derive(Clone)]
pub struct StopHandle {
    shared: Arc<Shared>,
    addr: Option<SocketAddr>,
}

impl StopHandle {
    pub fn stop(&self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(a) = self.addr {
            let _ = TcpStream::connect(a);
        }
    }
}

fn grants_of(broker: &Broker, a: &Assignment) -> Vec<Grant> {
    a.parts
        .iter()
        .filter(|p| !p.slab_indices.is_empty())
        .map(|p| Grant {
            lease_id: a.lease_id,
            consumer_id: a.consumer_id,
            producer_id: p.producer_id,
            endpoint: broker.producer(p.producer_id).map(|e| e.endpoint.clone()).unwrap_or_default(),
            slabs: p.slab_indices.clone(),
            start: a.start,
            end: a.end,
            unit_price: a.unit_price.0,
            token: a.token,
        })
        .collect()
}

fn party(role: Role) -> Party {
    match role {
        Role::Producer => Party::Producer,
        Role::Consumer => Party::Consumer,
    }
}

impl Shared {
    fn serve(&self, stream: TcpStream) -> Result<()> {
        stream.set_nodelay(true)?;
        let mut reader = FrameReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream);
        while let Some(f) = reader.read_frame()? {
            let out = self.dispatch(&f);
            write_frame(&mut writer, &out)?;
            writer.flush()?;
        }
        Ok(())
    }

    fn dispatch(&self, f: &Frame) -> Frame {
        let msg = match Control::decode(f) {
            Ok(m) => m,
            Err(e) => {
                return match f.op() {
                    None => unknown_opcode(f),
                    Some(_) => Reply::from_error(&e),
                }
                .encode()
            }
        };
        let now = self.clock.now();
        let mut m = self.market.lock().expect("market lock");
        let resp = m.handle(msg, now).unwrap_or_else(|e| Response::Reply(Reply::from_error(&e)));
        if let Err(e) = m.flush_bills() {
            warn!("billing log: {e}");
        }
        resp.encode().unwrap_or_else(|e| Reply::from_error(&e).encode())
    }

    fn tick(&self) -> Result<()> {
        let now = self.clock.now();
        let mut m = self.market.lock().expect("market lock");
        let out = m.broker.tick(now);
        for b in &out.ended {
            info!("lease {} ended: charge {} rebate {}", b.lease_id, b.bill.charge.0, b.bill.rebate.0);
        }
        m.account(now);
        if now.since(m.round_start) >= self.cfg.price_round {
            m.close_round(&self.cfg, now)?;
        }
        m.flush_bills()?;
        m.broker.write_snapshot(&self.cfg.run_dir.join("snapshot.json"))
    }
}

impl Market {
    fn handle(&mut self, msg: Control, now: Instant) -> Result<Response> {
        let ok = |v: u64| Ok(Response::Reply(Reply::ok_u64(v)));
        match msg {
            Control::Register { role, token, endpoint } => {
                // consumers have no listening endpoint; key them by a fresh name
                let endpoint = if role == Role::Consumer && endpoint.is_empty() {
                    format!("consumer-{}", self.broker.consumers_seen())
                } else {
                    endpoint
                };
                let id = self.broker.register(party(role), &endpoint, &token)?;
                info!("registered {role:?} {id} at {endpoint}");
                ok(id)
            }
            Control::Deregister { role, id } => {
                self.broker.deregister(party(role), id, now)?;
                ok(id)
            }
            Control::Report { producer_id, at, free_bytes, offered_slabs, bw, cpu } => {
                self.broker.report_usage(producer_id, UsageSample { free_bytes, offered_slabs, bw, cpu }, at)?;
                let grants = self
                    .broker
                    .leases_on(producer_id)
                    .into_iter()
                    .map(|(a, p)| Grant {
                        lease_id: a.lease_id,
                        consumer_id: a.consumer_id,
                        producer_id,
                        endpoint: String::new(),
                        slabs: p.slab_indices.clone(),
                        start: a.start,
                        end: a.end,
                        unit_price: a.unit_price.0,
                        token: a.token,
                    })
                    .collect();
                Ok(Response::Assign(grants))
            }
            Control::Request { consumer_id, slabs, min_slabs, duration_ms, max_unit_price, weights } => {
                let mut terms = LeaseTerms::new(slabs, Duration(duration_ms));
                terms.min_slabs = min_slabs;
                terms.max_unit_price = Money(max_unit_price);
                terms.weights = Some(weights);
                match self.broker.allocate(LeaseRequest { consumer_id, terms }, now)? {
                    AllocationOutcome::Assigned(a, _) => Ok(Response::Assign(grants_of(&self.broker, &a))),
                    AllocationOutcome::Queued(id) => ok(id),
                }
            }
            Control::Poll { request_id } => {
                let rec = self.broker.request(request_id).ok_or_else(|| Error::NotFound(format!("request {request_id}")))?;
                match rec.state {
                    RequestState::Pending => ok(request_id),
                    RequestState::Dropped => Err(Error::NoCapacity(format!("request {request_id} timed out"))),
                    RequestState::Done => {
                        let grants = rec
                            .leases
                            .iter()
                            .filter_map(|l| self.broker.lease(*l))
                            .flat_map(|l| grants_of(&self.broker, &l.assignment))
                            .collect();
                        Ok(Response::Assign(grants))
                    }
                }
            }
            Control::Renew { lease_id, token, .. } => {
                let Some(l) = self.broker.lease(lease_id) else {
                    return Ok(Response::Reply(Reply::LeaseExpired));
                };
                if l.assignment.token != token {
                    return Ok(Response::Reply(Reply::err(err_code::UNAUTHORIZED, "bad lease token")));
                }
                match self.broker.renew(lease_id, now)? {
                    RenewOutcome::Renewed(a) => Ok(Response::Assign(grants_of(&self.broker, &a))),
                    RenewOutcome::Expired => Ok(Response::Reply(Reply::LeaseExpired)),
                }
            }
            Control::EvictNotice { lease_id, producer_id, slabs, at } => {
                self.broker.record_eviction(lease_id, producer_id, slabs, at)?;
                info!("producer {producer_id} evicted {slabs} slabs of lease {lease_id}");
                ok(lease_id)
            }
            Control::PriceQuery => ok(self.broker.price.0),
            Control::Assign { .. } => Err(Error::Protocol("ASSIGN is broker to client only".into())),
        }
    }

    fn flush_bills(&mut self) -> Result<()> {
        let bills = self.broker.bills();
        for b in &bills[self.bills_written.min(bills.len())..] {
            serde_json::to_writer(&mut self.billing, b)?;
            self.billing.write_all(b"\n")?;
        }
        self.bills_written = bills.len();
        self.billing.flush()?;
        Ok(())
    }

    /// Adds the volume traded since the last tick to the current round.
    fn account(&mut self, now: Instant) {
        let dt_h = now.since(self.last_tick).0 as f64 / 3_600_000.0;
        let gb = self.broker.leased_slabs() as f64 * self.broker.config().slab_size.0 as f64 / GB as f64;
        self.matched_gb_hours += gb * dt_h;
        self.last_tick = now;
    }

    fn close_round(&mut self, cfg: &BrokerServerConfig, now: Instant) -> Result<()> {
        let cap = ceiling(&cfg.spot)?;
        if !matches!(cfg.strategy.kind, StrategyKind::FixedFraction(_)) {
            let obs = MarketObservation::new(self.broker.price, self.matched_gb_hours);
            self.explore.record(obs, cfg.strategy.kind);
            self.broker.price = self.explore.next_probe(cfg.strategy.step, cap);
            info!("price round closed: {:.3} GB·h, next price {}", obs.matched_gb_hours, self.broker.price.0);
        }
        self.round_start = now;
        self.matched_gb_hours = 0.0;
        Ok(())
    }
}
