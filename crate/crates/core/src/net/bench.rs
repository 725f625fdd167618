use std::io::Write;
use std::time::{Duration as StdDuration, Instant as StdInstant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, SystemClock};
use crate::consumer::{KvTransport, SecretKey, SecureClient, SecurityMode, TcpTransport};
use crate::error::{Error, Result};
use crate::units::{Duration, LeaseId, PlacementWeights};
use crate::wire::{Control, Grant, Role};

use super::{ControlClient, Response};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub broker: String,
    pub token: String,
    pub slabs: u32,
    pub min_slabs: u32,
    pub lease: Duration,
    pub max_unit_price: u64,
    pub ops: usize,
    pub value_size: usize,
    pub mode: SecurityMode,
    pub seed: u64,
    /// Wait for the lease to end and check that the producer refuses it.
    pub check_expiry: bool,
    /// How long a queued request is polled before giving up.
    pub poll_timeout: Duration,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            broker: "127.0.0.1:7070".into(),
            token: String::new(),
            slabs: 2,
            min_slabs: 2,
            lease: Duration::from_mins(10),
            max_unit_price: u64::MAX,
            ops: 1000,
            value_size: 1024,
            mode: SecurityMode::Full,
            seed: 1,
            check_expiry: false,
            poll_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub consumer_id: u64,
    pub lease_id: LeaseId,
    pub slabs: u32,
    pub producers: usize,
    pub unit_price: u64,
    pub lease_end_ms: u64,
    pub puts: usize,
    pub gets: usize,
    pub verified: usize,
    pub put_ms: u64,
    pub get_ms: u64,
    /// Whether the producer answered LEASE_EXPIRED after the end; None when
    /// not checked.
    pub lease_expired: Option<bool>,
}

fn lease_grants(c: &mut ControlClient, cfg: &BenchConfig, consumer_id: u64) -> Result<Vec<Grant>> {
    let req = Control::Request {
        consumer_id,
        slabs: cfg.slabs,
        min_slabs: cfg.min_slabs,
        duration_ms: cfg.lease.0,
        max_unit_price: cfg.max_unit_price,
        weights: PlacementWeights::default(),
    };
    let request_id = match c.call(&req)? {
        Response::Assign(g) => return Ok(g),
        r => r.ok_u64()?,
    };
    let deadline = StdInstant::now() + StdDuration::from_millis(cfg.poll_timeout.0);
    while StdInstant::now() < deadline {
        std::thread::sleep(StdDuration::from_millis(100));
        match c.call(&Control::Poll { request_id })? {
            Response::Assign(g) => return Ok(g),
            r => {
                r.ok_u64()?;
            }
        }
    }
    Err(Error::NoCapacity(format!("request {request_id} still queued")))
}

fn key_of(i: usize) -> Vec<u8> {
    format!("key-{i:06}").into_bytes()
}

/// Leases slabs, fills them through the secure client, reads everything
/// back and optionally waits out the lease. Progress lines go to `out`.
pub fn run_bench(cfg: &BenchConfig, out: &mut dyn Write) -> Result<BenchSummary> {
    if cfg.slabs == 0 || cfg.ops == 0 {
        return Err(Error::invalid("bench needs slabs and ops"));
    }
    let mut broker = ControlClient::connect(&cfg.broker)?;
    let endpoint = format!("bench-{}-{}", std::process::id(), rand::thread_rng().gen::<u32>());
    let consumer_id = broker.register(Role::Consumer, &cfg.token, &endpoint)?;
    writeln!(out, "phase register consumer_id={consumer_id}")?;

    let grants = lease_grants(&mut broker, cfg, consumer_id)?;
    let first = grants.first().ok_or_else(|| Error::NoCapacity("empty assignment".into()))?.clone();
    let slabs: u32 = grants.iter().map(|g| g.slabs.len() as u32).sum();
    let endpoints: Vec<&str> = grants.iter().map(|g| g.endpoint.as_str()).collect();
    writeln!(
        out,
        "phase lease lease_id={} slabs={slabs} price={} end_ms={} producers={}",
        first.lease_id,
        first.unit_price,
        first.end.0,
        endpoints.join(",")
    )?;
    out.flush()?;

    let key_mode = SecureClient::new(SecretKey([0; 16]), cfg.mode, vec![]).key_mode();
    let mut transports: Vec<Box<dyn KvTransport>> = Vec::new();
    for g in &grants {
        transports.push(Box::new(TcpTransport::connect(g.endpoint.as_str(), g.lease_id, g.token, key_mode)?));
    }
    let client = SecureClient::new(SecretKey::random(), cfg.mode, transports);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let values: Vec<Vec<u8>> = (0..cfg.ops)
        .map(|_| {
            let mut v = vec![0u8; cfg.value_size];
            rng.fill(&mut v[..]);
            v
        })
        .collect();
    let t = StdInstant::now();
    for (i, v) in values.iter().enumerate() {
        client.put(&key_of(i), v)?;
    }
    let put_ms = t.elapsed().as_millis() as u64;
    writeln!(out, "phase put ops={} ms={put_ms}", cfg.ops)?;
    let t = StdInstant::now();
    let mut verified = 0;
    for (i, v) in values.iter().enumerate() {
        if client.get(&key_of(i))?.as_deref() == Some(&v[..]) {
            verified += 1;
        }
    }
    let get_ms = t.elapsed().as_millis() as u64;
    writeln!(out, "phase get ops={} verified={verified} ms={get_ms}", cfg.ops)?;
    writeln!(out, "phase kv-done lease_id={}", first.lease_id)?;
    out.flush()?;

    let lease_expired = if cfg.check_expiry {
        let now = SystemClock.now();
        let wait = first.end.0.saturating_sub(now.0) + 300;
        std::thread::sleep(StdDuration::from_millis(wait));
        let expired = matches!(client.get(&key_of(0)), Err(Error::LeaseExpired));
        writeln!(out, "phase expiry lease_expired={expired}")?;
        Some(expired)
    } else {
        None
    };

    let summary = BenchSummary {
        consumer_id,
        lease_id: first.lease_id,
        slabs,
        producers: grants.len(),
        unit_price: first.unit_price,
        lease_end_ms: first.end.0,
        puts: cfg.ops,
        gets: cfg.ops,
        verified,
        put_ms,
        get_ms,
        lease_expired,
    };
    writeln!(out, "{}", serde_json::to_string(&summary)?)?;
    out.flush()?;
    Ok(summary)
}
