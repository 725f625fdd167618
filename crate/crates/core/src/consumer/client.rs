//! KV client over leased producer stores.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::io::{BufWriter, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::secure::{digest, open, seal, Digest16, SecretKey, SecurityMode};
use crate::clock::Clock;
use crate::error::{Error, Result};
use crate::store::{serve_kv, ProducerStore, TokenBucket};
use crate::units::LeaseId;
use crate::wire::{Control, FrameReader, KeyMode, KvRequest, Reply};

/// One request, one reply. Implementations may pipeline.
pub trait KvTransport: Send {
    fn request(&mut self, req: &KvRequest) -> Result<Reply>;

    /// Sends all requests before reading any reply. Replies come back in
    /// request order.
    fn pipeline(&mut self, reqs: &[KvRequest]) -> Result<Vec<Reply>> {
        reqs.iter().map(|r| self.request(r)).collect()
    }
}

/// In-process transport straight onto a store. Used by tests and the
/// simulator; `unreachable` makes every request fail.
#[derive(Clone)]
pub struct LocalTransport {
    pub store: Arc<Mutex<ProducerStore>>,
    pub bucket: Option<Arc<Mutex<TokenBucket>>>,
    pub clock: Arc<dyn Clock>,
    pub unreachable: Arc<AtomicBool>,
}

impl LocalTransport {
    pub fn new(store: ProducerStore, clock: Arc<dyn Clock>) -> Self {
        LocalTransport {
            store: Arc::new(Mutex::new(store)),
            bucket: None,
            clock,
            unreachable: Arc::new(AtomicBool::new(false)),
        }
    }
}

impl KvTransport for LocalTransport {
    fn request(&mut self, req: &KvRequest) -> Result<Reply> {
        if self.unreachable.load(Ordering::SeqCst) {
            return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::ConnectionRefused, "producer unreachable")));
        }
        let now = self.clock.now();
        let mut store = self.store.lock().expect("store lock");
        let mut bucket = self.bucket.as_ref().map(|b| b.lock().expect("bucket lock"));
        Ok(serve_kv(&mut store, bucket.as_deref_mut(), req, now))
    }
}

/// A KV session with one producer over TCP.
pub struct TcpTransport {
    reader: FrameReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    mode: KeyMode,
}

impl TcpTransport {
    /// Connects and binds the session to a lease.
    pub fn connect(endpoint: impl ToSocketAddrs, lease_id: LeaseId, token: u64, mode: KeyMode) -> Result<Self> {
        let stream = TcpStream::connect(endpoint)?;
        stream.set_nodelay(true)?;
        let mut t = TcpTransport {
            reader: FrameReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            mode,
        };
        let hello = Control::Renew { lease_id, token, key_mode: mode }.encode()?;
        t.send(&hello)?;
        t.writer.flush()?;
        t.recv()?.into_result()?;
        Ok(t)
    }

    fn send(&mut self, f: &crate::wire::Frame) -> Result<()> {
        crate::wire::write_frame(&mut self.writer, f)
    }

    fn recv(&mut self) -> Result<Reply> {
        let f = self
            .reader
            .read_frame()?
            .ok_or_else(|| Error::Protocol("producer closed the connection".into()))?;
        Reply::decode(&f)
    }
}

impl KvTransport for TcpTransport {
    fn request(&mut self, req: &KvRequest) -> Result<Reply> {
        let f = req.encode(self.mode)?;
        self.send(&f)?;
        self.writer.flush()?;
        self.recv()
    }

    fn pipeline(&mut self, reqs: &[KvRequest]) -> Result<Vec<Reply>> {
        for r in reqs {
            let f = r.encode(self.mode)?;
            self.send(&f)?;
        }
        self.writer.flush()?;
        reqs.iter().map(|_| self.recv()).collect()
    }
}

/// What the client remembers about each stored key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetadataEntry {
    pub k_p: u64,
    pub h: Digest16,
    pub p_i: u16,
}

impl MetadataEntry {
    /// Stored form: counter key, hash, producer index.
    pub fn to_bytes(&self) -> [u8; 26] {
        let mut b = [0u8; 26];
        b[..8].copy_from_slice(&self.k_p.to_be_bytes());
        b[8..24].copy_from_slice(&self.h);
        b[24..].copy_from_slice(&self.p_i.to_be_bytes());
        b
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProducerTableEntry {
    pub p_i: u16,
    pub endpoint: String,
    pub lease_id: LeaseId,
}

pub fn save_producer_table(path: &Path, table: &[ProducerTableEntry]) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(table)?)?;
    Ok(())
}

pub fn load_producer_table(path: &Path) -> Result<Vec<ProducerTableEntry>> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

type Conn = Mutex<Box<dyn KvTransport>>;

/// Consumer KV client. Safe to share between threads.
pub struct SecureClient {
    key: SecretKey,
    mode: SecurityMode,
    counter: AtomicU64,
    index: RwLock<HashMap<Vec<u8>, MetadataEntry>>,
    producers: Vec<Conn>,
}

impl SecureClient {
    pub fn new(key: SecretKey, mode: SecurityMode, producers: Vec<Box<dyn KvTransport>>) -> Self {
        SecureClient {
            key,
            mode,
            counter: AtomicU64::new(1),
            index: RwLock::new(HashMap::new()),
            producers: producers.into_iter().map(Mutex::new).collect(),
        }
    }

    pub fn mode(&self) -> SecurityMode {
        self.mode
    }

    pub fn key_mode(&self) -> KeyMode {
        match self.mode {
            SecurityMode::Full => KeyMode::Counter,
            _ => KeyMode::Prefixed,
        }
    }

    pub fn producer_count(&self) -> usize {
        self.producers.len()
    }

    fn route(&self, key: &[u8]) -> u16 {
        let mut h = DefaultHasher::new();
        key.hash(&mut h);
        (h.finish() % self.producers.len() as u64) as u16
    }

    fn send(&self, p_i: u16, req: &KvRequest) -> Result<Reply> {
        let conn = self
            .producers
            .get(p_i as usize)
            .ok_or_else(|| Error::NotFound(format!("producer index {p_i}")))?;
        let mut c = conn.lock().map_err(|_| Error::state("producer connection poisoned"))?;
        c.request(req)?.into_result()
    }

    fn expect_ok(reply: Reply) -> Result<()> {
        match reply {
            Reply::Ok(_) => Ok(()),
            other => Err(Error::Protocol(format!("unexpected reply {other:?}"))),
        }
    }

    pub fn put(&self, key: &[u8], value: &[u8]) -> Result<()> {
        if self.producers.is_empty() {
            return Err(Error::NoCapacity("no leased producer stores".into()));
        }
        match self.mode {
            SecurityMode::Full => {
                let k_p = self.counter.fetch_add(1, Ordering::SeqCst);
                let v_p = seal(&self.key, value);
                let entry = MetadataEntry { k_p, h: digest(&v_p), p_i: (k_p % self.producers.len() as u64) as u16 };
                Self::expect_ok(self.send(entry.p_i, &KvRequest::Put { key: k_p.to_be_bytes().to_vec(), value: v_p })?)?;
                let old = self.index.write().expect("index lock").insert(key.to_vec(), entry);
                if let Some(old) = old {
                    self.remote_delete(old.p_i, old.k_p.to_be_bytes().to_vec());
                }
            }
            SecurityMode::IntegrityOnly => {
                let p_i = self.route(key);
                Self::expect_ok(self.send(p_i, &KvRequest::Put { key: key.to_vec(), value: value.to_vec() })?)?;
                let entry = MetadataEntry { k_p: 0, h: digest(value), p_i };
                self.index.write().expect("index lock").insert(key.to_vec(), entry);
            }
            SecurityMode::Plain => {
                Self::expect_ok(self.send(self.route(key), &KvRequest::Put { key: key.to_vec(), value: value.to_vec() })?)?;
            }
        }
        Ok(())
    }

    fn forget(&self, key: &[u8], seen: &MetadataEntry) {
        let mut idx = self.index.write().expect("index lock");
        if idx.get(key) == Some(seen) {
            idx.remove(key);
        }
    }

    /// The value, None when it is not cached, or an integrity error when the
    /// producer returned something other than what was stored.
    pub fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>> {
        if self.mode == SecurityMode::Plain {
            if self.producers.is_empty() {
                return Ok(None);
            }
            return match self.send(self.route(key), &KvRequest::Get { key: key.to_vec() })? {
                Reply::Value(v) => Ok(Some(v)),
                _ => Ok(None),
            };
        }
        let Some(entry) = self.index.read().expect("index lock").get(key).copied() else {
            return Ok(None);
        };
        let remote_key = match self.mode {
            SecurityMode::Full => entry.k_p.to_be_bytes().to_vec(),
            _ => key.to_vec(),
        };
        let v_p = match self.send(entry.p_i, &KvRequest::Get { key: remote_key })? {
            Reply::Value(v) => v,
            Reply::NotFound | Reply::Evicted => {
                self.forget(key, &entry);
                return Ok(None);
            }
            other => return Err(Error::Protocol(format!("unexpected reply {other:?}"))),
        };
        if digest(&v_p) != entry.h {
            self.forget(key, &entry);
            return Err(Error::IntegrityViolation(format!("hash mismatch for {} byte value", v_p.len())));
        }
        match self.mode {
            SecurityMode::Full => open(&self.key, &v_p).inspect_err(|_| self.forget(key, &entry)).map(Some),
            _ => Ok(Some(v_p)),
        }
    }

    fn remote_delete(&self, p_i: u16, remote_key: Vec<u8>) {
        if let Err(e) = self.send(p_i, &KvRequest::Delete { key: remote_key }) {
            log::warn!("remote delete on producer {p_i} failed: {e}");
        }
    }

    /// Drops the local entry, then asks the producer to drop its copy. The
    /// remote half is best effort.
    pub fn delete(&self, key: &[u8]) {
        if self.producers.is_empty() {
            return;
        }
        match self.mode {
            SecurityMode::Plain => self.remote_delete(self.route(key), key.to_vec()),
            mode => {
                let removed = self.index.write().expect("index lock").remove(key);
                if let Some(e) = removed {
                    let rk = if mode == SecurityMode::Full { e.k_p.to_be_bytes().to_vec() } else { key.to_vec() };
                    self.remote_delete(e.p_i, rk);
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("index lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, key: &[u8]) -> bool {
        self.index.read().expect("index lock").contains_key(key)
    }

    /// Locally known keys, sorted.
    pub fn keys(&self) -> Vec<Vec<u8>> {
        let mut k: Vec<_> = self.index.read().expect("index lock").keys().cloned().collect();
        k.sort();
        k
    }

    pub fn metadata(&self, key: &[u8]) -> Option<MetadataEntry> {
        self.index.read().expect("index lock").get(key).copied()
    }

    /// Counted local metadata bytes across all entries.
    pub fn metadata_bytes(&self) -> usize {
        self.len() * self.mode.metadata_overhead()
    }

    /// Sends a pipelined batch of raw requests to one producer.
    pub fn pipeline(&self, p_i: u16, reqs: &[KvRequest]) -> Result<Vec<Reply>> {
        let conn = self
            .producers
            .get(p_i as usize)
            .ok_or_else(|| Error::NotFound(format!("producer index {p_i}")))?;
        let mut c = conn.lock().map_err(|_| Error::state("producer connection poisoned"))?;
        c.pipeline(reqs)
    }
}
