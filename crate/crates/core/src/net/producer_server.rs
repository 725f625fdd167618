use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, SystemClock};
use crate::error::{Error, Result};
use crate::store::{serve_kv, StoreManager, TokenBucket};
use crate::units::{Duration, Instant, LeaseId, ProducerId, SLAB_SIZE};
use crate::wire::{err_code, write_frame, Control, Frame, FrameReader, Grant, KvRequest, Reply, Role};

use super::ControlClient;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProducerServerConfig {
    pub broker: String,
    /// KV listen address; also the endpoint registered with the broker.
    pub listen: String,
    pub token: String,
    /// Harvested slabs offered to the market.
    pub slabs: u32,
    pub report_interval: Duration,
    /// When this file appears, its content (a slab count, default 1) is
    /// reclaimed from the leased stores and the file is removed.
    pub reclaim_trigger: Option<PathBuf>,
    pub run_dir: PathBuf,
    /// Per-lease bandwidth limit in bytes/s; 0 means unlimited.
    pub kv_rate: f64,
    pub lru_sample_size: usize,
    pub seed: u64,
}

impl Default for ProducerServerConfig {
    fn default() -> Self {
        ProducerServerConfig {
            broker: "127.0.0.1:7070".into(),
            listen: "127.0.0.1:7071".into(),
            token: String::new(),
            slabs: 16,
            report_interval: Duration::from_secs(1),
            reclaim_trigger: None,
            run_dir: PathBuf::from("runs/producer"),
            kv_rate: 0.0,
            lru_sample_size: 5,
            seed: 0,
        }
    }
}

#[derive(Default)]
struct Leases {
    grants: BTreeMap<LeaseId, Grant>,
    ended: BTreeSet<LeaseId>,
    buckets: HashMap<LeaseId, TokenBucket>,
}

struct Shared {
    cfg: ProducerServerConfig,
    id: ProducerId,
    stores: Mutex<(StoreManager, Leases)>,
    broker: Mutex<ControlClient>,
    clock: Arc<dyn Clock>,
    stop: AtomicBool,
    stats: Mutex<Option<BufWriter<File>>>,
    last_report: Mutex<Instant>,
}

pub struct ProducerServer {
    shared: Arc<Shared>,
    listener: TcpListener,
}

impl ProducerServer {
    /// Binds the KV port and registers with the broker.
    pub fn bind(cfg: ProducerServerConfig) -> Result<Self> {
        Self::bind_with_clock(cfg, Arc::new(SystemClock))
    }

    pub fn bind_with_clock(cfg: ProducerServerConfig, clock: Arc<dyn Clock>) -> Result<Self> {
        if cfg.report_interval.0 == 0 {
            return Err(Error::invalid("report interval must be positive"));
        }
        std::fs::create_dir_all(&cfg.run_dir)?;
        let listener = TcpListener::bind(&cfg.listen)?;
        let endpoint = listener.local_addr()?.to_string();
        let mut broker = ControlClient::connect(&cfg.broker)?;
        let id = broker.register(Role::Producer, &cfg.token, &endpoint)?;
        info!("registered as producer {id} at {endpoint}");
        let manager = StoreManager::new(cfg.slabs, cfg.seed).with_sample_size(cfg.lru_sample_size);
        let stats = BufWriter::new(File::create(cfg.run_dir.join("stores.csv"))?);
        let shared = Shared {
            cfg,
            id,
            stores: Mutex::new((manager, Leases::default())),
            broker: Mutex::new(broker),
            clock,
            stop: AtomicBool::new(false),
            stats: Mutex::new(Some(stats)),
            last_report: Mutex::new(Instant(0)),
        };
        Ok(ProducerServer { shared: Arc::new(shared), listener })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn producer_id(&self) -> ProducerId {
        self.shared.id
    }

    pub fn stop_handle(&self) -> StopHandle {
        StopHandle { shared: self.shared.clone(), addr: self.listener.local_addr().ok() }
    }

    /// Serves KV sessions and reports to the broker until stopped.
    pub fn run(self) -> Result<()> {
        self.shared.report()?;
        let reporter = {
            let s = self.shared.clone();
            thread::spawn(move || {
                let mut first = true;
                while !s.stop.load(Ordering::SeqCst) {
                    thread::sleep(std::time::Duration::from_millis(s.cfg.report_interval.0));
                    if let Err(e) = s.check_reclaim() {
                        warn!("reclaim failed: {e}");
                    }
                    if let Err(e) = s.report() {
                        warn!("report failed: {e}");
                    }
                    if let Err(e) = s.write_stats(first) {
                        warn!("stats: {e}");
                    }
                    first = false;
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
                            debug!("kv session closed: {e}");
                        }
                    });
                }
                Err(e) => warn!("accept failed: {e}"),
            }
        }
        let _ = reporter.join();
        Ok(())
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

impl Shared {
    /// Reports usage and brings local stores in line with the broker's
    /// view of the leases placed here.
    fn report(&self) -> Result<()> {
        let (free_bytes, offered) = {
            let st = self.stores.lock().expect("stores lock");
            (st.0.pool_slabs() as u64 * SLAB_SIZE.0, st.0.pool_slabs())
        };
        // stamped under the lock: the broker wants strictly increasing report times
        let mut broker = self.broker.lock().expect("broker lock");
        let mut last = self.last_report.lock().expect("report lock");
        let now = self.clock.now().max(Instant(last.0 + 1));
        *last = now;
        let msg = Control::Report { producer_id: self.id, at: now, free_bytes, offered_slabs: offered, bw: 0, cpu: 0.0 };
        let grants = broker.call(&msg)?.grants()?;
        drop(last);
        drop(broker);
        self.sync(grants, now);
        Ok(())
    }

    fn sync(&self, grants: Vec<Grant>, now: Instant) {
        let mut st = self.stores.lock().expect("stores lock");
        let (manager, leases) = &mut *st;
        let live: BTreeMap<LeaseId, Grant> = grants.into_iter().map(|g| (g.lease_id, g)).collect();
        for g in live.values() {
            if manager.get(g.lease_id).is_some() {
                let _ = manager.extend(g.lease_id, g.end);
            } else if !leases.ended.contains(&g.lease_id) && !g.slabs.is_empty() {
                match manager.spawn_store(g.lease_id, g.slabs.len() as u32, g.end) {
                    Ok(()) => {
                        info!("store up for lease {} ({} slabs)", g.lease_id, g.slabs.len());
                        if self.cfg.kv_rate > 0.0 {
                            if let Ok(b) = TokenBucket::new(self.cfg.kv_rate, self.cfg.kv_rate, now) {
                                leases.buckets.insert(g.lease_id, b);
                            }
                        }
                    }
                    Err(e) => warn!("lease {}: {e}", g.lease_id),
                }
            }
        }
        for id in manager.lease_ids() {
            if !live.contains_key(&id) {
                let _ = manager.terminate_store(id);
                leases.buckets.remove(&id);
                leases.ended.insert(id);
                info!("store for lease {id} terminated");
            }
        }
        leases.grants = live;
    }

    fn check_reclaim(&self) -> Result<()> {
        let Some(path) = &self.cfg.reclaim_trigger else {
            return Ok(());
        };
        if !path.exists() {
            return Ok(());
        }
        let text = std::fs::read_to_string(path).unwrap_or_default();
        std::fs::remove_file(path)?;
        let want: u32 = text.trim().parse().unwrap_or(1);
        let now = self.clock.now();
        let reclaimed = {
            let mut st = self.stores.lock().expect("stores lock");
            let n = want.min(st.0.leased_slabs());
            st.0.reclaim_slabs(n)?
        };
        for r in reclaimed.iter().filter(|r| r.slabs > 0) {
            let msg = Control::EvictNotice { lease_id: r.lease_id, producer_id: self.id, slabs: r.slabs, at: now };
            self.broker.lock().expect("broker lock").call(&msg)?.ok_u64()?;
            println!("evicted lease={} slabs={} keys={}", r.lease_id, r.slabs, r.keys.len());
        }
        Ok(())
    }

    fn write_stats(&self, header: bool) -> Result<()> {
        let st = self.stores.lock().expect("stores lock");
        let mut out = self.stats.lock().expect("stats lock");
        if let Some(w) = out.as_mut() {
            st.0.write_stats_csv(w, header)?;
            w.flush()?;
        }
        Ok(())
    }

    fn authorize(&self, lease_id: LeaseId, token: u64) -> Reply {
        let st = self.stores.lock().expect("stores lock");
        if st.1.ended.contains(&lease_id) {
            return Reply::LeaseExpired;
        }
        match st.1.grants.get(&lease_id) {
            Some(g) if g.token == token && st.0.get(lease_id).is_some() => Reply::Ok(vec![]),
            Some(_) => Reply::err(err_code::UNAUTHORIZED, "bad lease token"),
            None => Reply::err(err_code::NOT_FOUND, format!("no lease {lease_id} here")),
        }
    }

    fn serve(&self, stream: TcpStream) -> Result<()> {
        stream.set_nodelay(true)?;
        let mut reader = FrameReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream);
        let send = |w: &mut BufWriter<TcpStream>, f: &Frame| -> Result<()> {
            write_frame(w, f)?;
            w.flush()?;
            Ok(())
        };
        let Some(hello) = reader.read_frame()? else {
            return Ok(());
        };
        let (lease_id, token, mode) = match Control::decode(&hello) {
            Ok(Control::Renew { lease_id, token, key_mode }) => (lease_id, token, key_mode),
            _ => {
                send(&mut writer, &Reply::err(err_code::UNAUTHORIZED, "session must open with RENEW").encode())?;
                return Ok(());
            }
        };
        let mut verdict = self.authorize(lease_id, token);
        if matches!(verdict, Reply::Err { code: err_code::NOT_FOUND, .. }) {
            // the lease may be newer than our last report
            if let Err(e) = self.report() {
                warn!("report during handshake: {e}");
            }
            verdict = self.authorize(lease_id, token);
        }
        let admitted = matches!(verdict, Reply::Ok(_));
        send(&mut writer, &verdict.encode())?;
        if !admitted {
            return Ok(());
        }
        while let Some(f) = reader.read_frame()? {
            let now = self.clock.now();
            let reply = {
                let mut st = self.stores.lock().expect("stores lock");
                let (manager, leases) = &mut *st;
                match manager.get_mut(lease_id) {
                    Some(s) if now < s.expires_at => match KvRequest::decode(&f, mode) {
                        Ok(req) => serve_kv(&mut s.store, leases.buckets.get_mut(&lease_id), &req, now),
                        Err(e) => Reply::from_error(&e),
                    },
                    _ => Reply::LeaseExpired,
                }
            };
            let done = reply == Reply::LeaseExpired;
            send(&mut writer, &reply.encode())?;
            if done {
                break;
            }
        }
        Ok(())
    }
}
