//! C interface to slabmarket.
//!
//! Objects are opaque handles created by `*_new` and released by `*_free`.
//! Every call returns an `SmStatus`; on failure the message is available from
//! `sm_last_error` on the same thread. Byte outputs go into caller buffers: if
//! the buffer is too small the call returns `SM_BUFFER_TOO_SMALL` and writes
//! the needed length.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use slabmarket::broker::{AllocationOutcome, Broker, BrokerConfig, LeaseRequest, Party, UsageSample};
use slabmarket::clock::SystemClock;
use slabmarket::config::{from_table, SimSettings};
use slabmarket::consumer::{KvTransport, LocalTransport, SecretKey, SecureClient, SecurityMode, TcpTransport};
use slabmarket::sim::{self, ClusterTrace};
use slabmarket::store::{ProducerStore, StoreConfig};
use slabmarket::units::{ByteSize, Duration, Instant, LeaseTerms, Money};
use slabmarket::Error;

pub type SmStatus = i32;

pub const SM_OK: SmStatus = 0;
pub const SM_NULL_POINTER: SmStatus = 1;
pub const SM_INVALID_ARGUMENT: SmStatus = 2;
pub const SM_NOT_FOUND: SmStatus = 3;
pub const SM_NO_CAPACITY: SmStatus = 4;
pub const SM_INTEGRITY: SmStatus = 5;
pub const SM_PROTOCOL: SmStatus = 6;
pub const SM_IO: SmStatus = 7;
pub const SM_BUFFER_TOO_SMALL: SmStatus = 8;
pub const SM_LEASE_EXPIRED: SmStatus = 9;
pub const SM_INTERNAL: SmStatus = 10;
pub const SM_PANIC: SmStatus = 11;

pub const SM_MODE_FULL: u32 = 0;
pub const SM_MODE_INTEGRITY: u32 = 1;
pub const SM_MODE_PLAIN: u32 = 2;

/// Consumer KV client.
pub struct SmKvClient {
    inner: SecureClient,
}

/// Broker state machine driven by explicit timestamps.
pub struct SmBroker {
    inner: Broker,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SmStatus {
    match e {
        Error::InvalidArgument(_) | Error::Parse(_) | Error::Duplicate(_) => SM_INVALID_ARGUMENT,
        Error::NotFound(_) => SM_NOT_FOUND,
        Error::NoCapacity(_) => SM_NO_CAPACITY,
        Error::IntegrityViolation(_) => SM_INTEGRITY,
        Error::Protocol(_) | Error::Remote { .. } | Error::RateLimited { .. } => SM_PROTOCOL,
        Error::LeaseExpired => SM_LEASE_EXPIRED,
        Error::Io(_) | Error::Csv(_) => SM_IO,
        _ => SM_INTERNAL,
    }
}

struct Fail(SmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail(status: SmStatus, msg: impl Into<String>) -> Fail {
    Fail(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SmStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SM_OK,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            SM_PANIC
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| fail(SM_NULL_POINTER, "null handle"))
}

unsafe fn as_mut<'a, T>(p: *mut T) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| fail(SM_NULL_POINTER, "null handle"))
}

unsafe fn bytes<'a>(p: *const u8, len: usize) -> Result<&'a [u8], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(SM_NULL_POINTER, "null buffer"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn text<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(fail(SM_NULL_POINTER, "null string"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(SM_INVALID_ARGUMENT, "string is not UTF-8"))
}

unsafe fn out<T>(p: *mut T, v: T) -> Result<(), Fail> {
    if p.is_null() {
        return Err(fail(SM_NULL_POINTER, "null output pointer"));
    }
    p.write(v);
    Ok(())
}

unsafe fn write_buf(data: &[u8], buf: *mut u8, cap: usize, out_len: *mut usize) -> Result<(), Fail> {
    out(out_len, data.len())?;
    if data.len() > cap {
        return Err(fail(SM_BUFFER_TOO_SMALL, format!("need {} bytes, have {cap}", data.len())));
    }
    if !data.is_empty() {
        if buf.is_null() {
            return Err(fail(SM_NULL_POINTER, "null buffer"));
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
    }
    Ok(())
}

fn mode(m: u32) -> Result<SecurityMode, Fail> {
    match m {
        SM_MODE_FULL => Ok(SecurityMode::Full),
        SM_MODE_INTEGRITY => Ok(SecurityMode::IntegrityOnly),
        SM_MODE_PLAIN => Ok(SecurityMode::Plain),
        _ => Err(fail(SM_INVALID_ARGUMENT, format!("unknown security mode {m}"))),
    }
}

unsafe fn secret(key: *const u8) -> SecretKey {
    if key.is_null() {
        SecretKey::random()
    } else {
        let mut k = [0u8; 16];
        std::ptr::copy_nonoverlapping(key, k.as_mut_ptr(), 16);
        SecretKey(k)
    }
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn sm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Client over `producers` in-process stores of `capacity_bytes` each.
/// `key` points at 16 bytes, or is NULL for a random key.
///
/// # Safety
/// `key` must be NULL or readable for 16 bytes; `out_client` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_kv_client_new_local(
    security_mode: u32,
    producers: u32,
    capacity_bytes: u64,
    key: *const u8,
    out_client: *mut *mut SmKvClient,
) -> SmStatus {
    guard(|| {
        let m = mode(security_mode)?;
        if producers == 0 {
            return Err(fail(SM_INVALID_ARGUMENT, "at least one producer"));
        }
        let clock = Arc::new(SystemClock);
        let mut ts: Vec<Box<dyn KvTransport>> = Vec::new();
        for i in 0..producers {
            let cfg = StoreConfig { capacity: ByteSize(capacity_bytes), lru_sample_size: 5, value_overhead: 0 };
            ts.push(Box::new(LocalTransport::new(ProducerStore::new(cfg, u64::from(i))?, clock.clone())));
        }
        let c = Box::new(SmKvClient { inner: SecureClient::new(secret(key), m, ts) });
        out(out_client, Box::into_raw(c))
    })
}

/// Client over leased producers reached by TCP. Entry `i` of each array
/// describes one grant: endpoint `host:port`, lease id and token.
///
/// # Safety
/// The three arrays must hold `n` entries; endpoints must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sm_kv_client_connect(
    security_mode: u32,
    key: *const u8,
    endpoints: *const *const c_char,
    lease_ids: *const u64,
    tokens: *const u64,
    n: usize,
    out_client: *mut *mut SmKvClient,
) -> SmStatus {
    guard(|| {
        let m = mode(security_mode)?;
        if n == 0 {
            return Err(fail(SM_INVALID_ARGUMENT, "at least one producer"));
        }
        if endpoints.is_null() || lease_ids.is_null() || tokens.is_null() {
            return Err(fail(SM_NULL_POINTER, "null grant array"));
        }
        let key_mode = SecureClient::new(SecretKey([0; 16]), m, Vec::new()).key_mode();
        let mut ts: Vec<Box<dyn KvTransport>> = Vec::with_capacity(n);
        for i in 0..n {
            let ep = text(*endpoints.add(i))?;
            ts.push(Box::new(TcpTransport::connect(ep, *lease_ids.add(i), *tokens.add(i), key_mode)?));
        }
        let c = Box::new(SmKvClient { inner: SecureClient::new(secret(key), m, ts) });
        out(out_client, Box::into_raw(c))
    })
}

/// # Safety
/// `client` must come from a `sm_kv_client_new*` call and not be used again.
#[no_mangle]
pub unsafe extern "C" fn sm_kv_client_free(client: *mut SmKvClient) {
    if !client.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(client))));
    }
}

/// # Safety
/// `key` and `value` must be readable for their lengths.
#[no_mangle]
pub unsafe extern "C" fn sm_kv_put(
    client: *const SmKvClient,
    key: *const u8,
    key_len: usize,
    value: *const u8,
    value_len: usize,
) -> SmStatus {
    guard(|| {
        let c = as_ref(client)?;
        c.inner.put(bytes(key, key_len)?, bytes(value, value_len)?)?;
        Ok(())
    })
}

/// Reads a value. Returns `SM_NOT_FOUND` for a miss, which includes values
/// the producer evicted. `out_len` receives the value length either way.
///
/// # Safety
/// `buf` must be writable for `cap` bytes; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_kv_get(
    client: *const SmKvClient,
    key: *const u8,
    key_len: usize,
    buf: *mut u8,
    cap: usize,
    out_len: *mut usize,
) -> SmStatus {
    guard(|| {
        let c = as_ref(client)?;
        match c.inner.get(bytes(key, key_len)?)? {
            Some(v) => write_buf(&v, buf, cap, out_len),
            None => {
                out(out_len, 0)?;
                Err(fail(SM_NOT_FOUND, "no such key"))
            }
        }
    })
}

/// # Safety
/// `key` must be readable for `key_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sm_kv_delete(client: *const SmKvClient, key: *const u8, key_len: usize) -> SmStatus {
    guard(|| {
        let c = as_ref(client)?;
        c.inner.delete(bytes(key, key_len)?);
        Ok(())
    })
}

/// Number of keys in the local index. Plain mode keeps none.
///
/// # Safety
/// `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_kv_len(client: *const SmKvClient, out_len: *mut usize) -> SmStatus {
    guard(|| out(out_len, as_ref(client)?.inner.len()))
}

/// Broker with default settings except the minimum lease and the seed.
///
/// # Safety
/// `out_broker` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_broker_new(min_lease_ms: u64, seed: u64, out_broker: *mut *mut SmBroker) -> SmStatus {
    guard(|| {
        let cfg = BrokerConfig { min_lease: Duration(min_lease_ms), seed, ..Default::default() };
        out(out_broker, Box::into_raw(Box::new(SmBroker { inner: Broker::new(cfg) })))
    })
}

/// # Safety
/// `broker` must come from `sm_broker_new` and not be used again.
#[no_mangle]
pub unsafe extern "C" fn sm_broker_free(broker: *mut SmBroker) {
    if !broker.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(broker))));
    }
}

/// # Safety
/// `endpoint` must be NUL-terminated; `out_id` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_broker_register_producer(
    broker: *mut SmBroker,
    endpoint: *const c_char,
    out_id: *mut u64,
) -> SmStatus {
    guard(|| {
        let b = as_mut(broker)?;
        let id = b.inner.register(Party::Producer, text(endpoint)?, "")?;
        out(out_id, id)
    })
}

/// # Safety
/// `endpoint` must be NUL-terminated; `out_id` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_broker_register_consumer(
    broker: *mut SmBroker,
    endpoint: *const c_char,
    out_id: *mut u64,
) -> SmStatus {
    guard(|| {
        let b = as_mut(broker)?;
        let id = b.inner.register(Party::Consumer, text(endpoint)?, "")?;
        out(out_id, id)
    })
}

/// Records a producer usage report taken at `at_ms`.
///
/// # Safety
/// `broker` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sm_broker_report(
    broker: *mut SmBroker,
    producer_id: u64,
    free_bytes: u64,
    offered_slabs: u32,
    at_ms: u64,
) -> SmStatus {
    guard(|| {
        let b = as_mut(broker)?;
        let sample = UsageSample { free_bytes, offered_slabs, bw: u64::MAX, cpu: 1.0 };
        b.inner.report_usage(producer_id, sample, Instant(at_ms))?;
        Ok(())
    })
}

/// Sets the market price, micro-cents per GB·hour.
///
/// # Safety
/// `broker` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sm_broker_set_price(broker: *mut SmBroker, price: u64) -> SmStatus {
    guard(|| {
        as_mut(broker)?.inner.price = Money(price);
        Ok(())
    })
}

/// Places a request. `out_lease_id` is 0 and `out_slabs` 0 when nothing was
/// placed; `out_request_id` is nonzero when some or all slabs were queued.
///
/// # Safety
/// Output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_broker_allocate(
    broker: *mut SmBroker,
    consumer_id: u64,
    slabs: u32,
    duration_ms: u64,
    now_ms: u64,
    out_lease_id: *mut u64,
    out_slabs: *mut u32,
    out_request_id: *mut u64,
) -> SmStatus {
    guard(|| {
        let b = as_mut(broker)?;
        let req = LeaseRequest { consumer_id, terms: LeaseTerms::new(slabs, Duration(duration_ms)) };
        let (lease, got, queued) = match b.inner.allocate(req, Instant(now_ms))? {
            AllocationOutcome::Assigned(a, q) => (a.lease_id, a.slab_count(), q.unwrap_or(0)),
            AllocationOutcome::Queued(q) => (0, 0, q),
        };
        out(out_lease_id, lease)?;
        out(out_slabs, got)?;
        out(out_request_id, queued)
    })
}

/// Retries the queue and ends expired leases. Counts go to the (nullable)
/// output pointers.
///
/// # Safety
/// Output pointers must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn sm_broker_tick(
    broker: *mut SmBroker,
    now_ms: u64,
    out_assigned: *mut u32,
    out_ended: *mut u32,
) -> SmStatus {
    guard(|| {
        let t = as_mut(broker)?.inner.tick(Instant(now_ms));
        if !out_assigned.is_null() {
            out_assigned.write(t.assigned.len() as u32);
        }
        if !out_ended.is_null() {
            out_ended.write(t.ended.len() as u32);
        }
        Ok(())
    })
}

/// # Safety
/// `out_slabs` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_broker_leased_slabs(broker: *const SmBroker, out_slabs: *mut u64) -> SmStatus {
    guard(|| out(out_slabs, as_ref(broker)?.inner.leased_slabs()))
}

/// Broker state as JSON.
///
/// # Safety
/// `buf` must be writable for `cap` bytes; `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_broker_snapshot_json(
    broker: *const SmBroker,
    buf: *mut u8,
    cap: usize,
    out_len: *mut usize,
) -> SmStatus {
    guard(|| {
        let s = as_ref(broker)?.inner.snapshot_json()?;
        write_buf(s.as_bytes(), buf, cap, out_len)
    })
}

/// Runs the simulator with settings given as a TOML document (same keys as
/// the CLI config file) and writes the run summary as JSON. Nothing is
/// written to disk.
///
/// # Safety
/// `settings_toml` must be NUL-terminated; `buf` writable for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn sm_sim_run(
    settings_toml: *const c_char,
    buf: *mut u8,
    cap: usize,
    out_len: *mut usize,
) -> SmStatus {
    guard(|| {
        let table: toml::Table =
            text(settings_toml)?.parse().map_err(|e: toml::de::Error| fail(SM_INVALID_ARGUMENT, e.to_string()))?;
        let s: SimSettings = from_table(table)?;
        let cfg = s.sim_config()?;
        let trace = match &s.trace {
            Some(p) => ClusterTrace::from_csv_path(p, s.trace_unit_gb)?,
            None => s.synthetic().generate()?,
        };
        let r = sim::run(&trace, &cfg)?;
        let json = serde_json::to_vec(&r.summary).map_err(|e| fail(SM_INTERNAL, e.to_string()))?;
        write_buf(&json, buf, cap, out_len)
    })
}
