use std::io::{BufWriter, Write};
use std::net::{SocketAddr, TcpStream};
use std::thread::JoinHandle;
use std::time::{Duration as StdDuration, Instant as Wall};

use slabmarket::broker::BrokerConfig;
use slabmarket::consumer::{KvTransport, SecretKey, SecureClient, SecurityMode, TcpTransport};
use slabmarket::net::{BrokerServer, BrokerServerConfig, ControlClient, ProducerServer, ProducerServerConfig, Response};
use slabmarket::units::{Duration, PlacementWeights};
use slabmarket::wire::{err_code, write_frame, Control, Frame, FrameReader, Grant, KeyMode, KvRequest, Reply, Role};

struct Cluster {
    broker: SocketAddr,
    stops: Vec<Box<dyn Fn()>>,
    threads: Vec<JoinHandle<slabmarket::Result<()>>>,
    _dir: tempfile::TempDir,
}

impl Cluster {
    fn start(producers: usize, slabs: u32) -> Cluster {
        let dir = tempfile::tempdir().unwrap();
        let bcfg = BrokerServerConfig {
            listen: "127.0.0.1:0".into(),
            run_dir: dir.path().join("broker"),
            tick: Duration(100),
            broker: BrokerConfig {
                min_lease: Duration::from_secs(1),
                report_step: Duration(100),
                renew_grace: Duration::ZERO,
                ..Default::default()
            },
            ..Default::default()
        };
        let b = BrokerServer::bind(bcfg).unwrap();
        let broker = b.local_addr().unwrap();
        let bstop = b.stop_handle();
        let mut stops: Vec<Box<dyn Fn()>> = vec![Box::new(move || bstop.stop())];
        let mut threads = vec![std::thread::spawn(move || b.run())];
        for i in 0..producers {
            let pcfg = ProducerServerConfig {
                broker: broker.to_string(),
                listen: "127.0.0.1:0".into(),
                slabs,
                report_interval: Duration(100),
                run_dir: dir.path().join(format!("producer{i}")),
                ..Default::default()
            };
            let p = ProducerServer::bind(pcfg).unwrap();
            let pstop = p.stop_handle();
            stops.push(Box::new(move || pstop.stop()));
            threads.push(std::thread::spawn(move || p.run()));
        }
        Cluster { broker, stops, threads, _dir: dir }
    }

    fn lease(&self, slabs: u32, duration_ms: u64) -> Vec<Grant> {
        let mut c = ControlClient::connect(self.broker).unwrap();
        let cid = c.register(Role::Consumer, "", "").unwrap();
        let req = Control::Request {
            consumer_id: cid,
            slabs,
            min_slabs: slabs,
            duration_ms,
            max_unit_price: u64::MAX,
            weights: PlacementWeights::default(),
        };
        let deadline = Wall::now() + StdDuration::from_secs(15);
        let mut pending = None;
        while Wall::now() < deadline {
            let r = match pending {
                None => c.call(&req).unwrap(),
                Some(request_id) => c.call(&Control::Poll { request_id }).unwrap(),
            };
            match r {
                Response::Assign(g) => return g,
                r => pending = Some(r.ok_u64().unwrap()),
            }
            std::thread::sleep(StdDuration::from_millis(50));
        }
        panic!("no lease within 15 s");
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        for s in &self.stops {
            s();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

/// Sends `first` as the opening frame of a KV session and returns the reply.
fn open_with(endpoint: &str, first: &Frame) -> Reply {
    let s = TcpStream::connect(endpoint).unwrap();
    let mut r = FrameReader::new(s.try_clone().unwrap());
    let mut w = BufWriter::new(s);
    write_frame(&mut w, first).unwrap();
    w.flush().unwrap();
    Reply::decode(&r.read_frame().unwrap().unwrap()).unwrap()
}

#[test]
fn session_must_open_with_renew() {
    let c = Cluster::start(1, 2);
    let g = &c.lease(1, 60_000)[0];
    let ping = KvRequest::Ping.encode(KeyMode::Prefixed).unwrap();
    assert!(matches!(open_with(&g.endpoint, &ping), Reply::Err { code: err_code::UNAUTHORIZED, .. }));
    let bad = Control::Renew { lease_id: g.lease_id, token: g.token ^ 1, key_mode: KeyMode::Prefixed }.encode().unwrap();
    assert!(matches!(open_with(&g.endpoint, &bad), Reply::Err { code: err_code::UNAUTHORIZED, .. }));
    let unknown = Control::Renew { lease_id: 999, token: 0, key_mode: KeyMode::Prefixed }.encode().unwrap();
    assert!(matches!(open_with(&g.endpoint, &unknown), Reply::Err { code: err_code::NOT_FOUND, .. }));
    let good = Control::Renew { lease_id: g.lease_id, token: g.token, key_mode: KeyMode::Prefixed }.encode().unwrap();
    assert!(matches!(open_with(&g.endpoint, &good), Reply::Ok(_)));
}

#[test]
fn secure_client_over_tcp() {
    let c = Cluster::start(2, 2);
    let grants = c.lease(4, 60_000);
    assert_eq!(grants.iter().map(|g| g.slabs.len()).sum::<usize>(), 4);
    let ts: Vec<Box<dyn KvTransport>> = grants
        .iter()
        .map(|g| Box::new(TcpTransport::connect(g.endpoint.as_str(), g.lease_id, g.token, KeyMode::Counter).unwrap()) as Box<dyn KvTransport>)
        .collect();
    let client = SecureClient::new(SecretKey([3; 16]), SecurityMode::Full, ts);
    for i in 0..200u32 {
        client.put(format!("k{i}").as_bytes(), &i.to_le_bytes().repeat(10)).unwrap();
    }
    for i in 0..200u32 {
        assert_eq!(client.get(format!("k{i}").as_bytes()).unwrap(), Some(i.to_le_bytes().repeat(10)));
    }
    client.delete(b"k0");
    assert_eq!(client.get(b"k0").unwrap(), None);
}

#[test]
fn expired_lease_closes_the_session() {
    let c = Cluster::start(1, 2);
    let g = c.lease(1, 1_000).remove(0);
    let mut t = TcpTransport::connect(g.endpoint.as_str(), g.lease_id, g.token, KeyMode::Prefixed).unwrap();
    assert_eq!(t.request(&KvRequest::Ping).unwrap(), Reply::Ok(vec![]));
    std::thread::sleep(StdDuration::from_millis(1_500));
    assert_eq!(t.request(&KvRequest::Get { key: b"x".to_vec() }).unwrap(), Reply::LeaseExpired);
    let hello = Control::Renew { lease_id: g.lease_id, token: g.token, key_mode: KeyMode::Prefixed }.encode().unwrap();
    assert_eq!(open_with(&g.endpoint, &hello), Reply::LeaseExpired);
}

#[test]
fn broker_renewal_and_errors() {
    let c = Cluster::start(1, 2);
    let g = c.lease(1, 2_000).remove(0);
    let mut ctl = ControlClient::connect(c.broker).unwrap();
    let bad = ctl.call(&Control::Renew { lease_id: g.lease_id, token: g.token ^ 1, key_mode: KeyMode::Counter }).unwrap();
    assert!(matches!(bad, Response::Reply(Reply::Err { code: err_code::UNAUTHORIZED, .. })));
    let renewed = ctl.call(&Control::Renew { lease_id: g.lease_id, token: g.token, key_mode: KeyMode::Counter }).unwrap().grants().unwrap();
    assert_eq!(renewed[0].lease_id, g.lease_id);
    assert_eq!(renewed[0].end.since(renewed[0].start), Duration(2_000));
    assert!(renewed[0].end > g.end);
    let gone = ctl.call(&Control::Renew { lease_id: 12345, token: 0, key_mode: KeyMode::Counter }).unwrap();
    assert_eq!(gone, Response::Reply(Reply::LeaseExpired));
    let unknown = ctl.call_frame(&Frame { opcode: 0x42, payload: vec![] }).unwrap();
    assert!(matches!(unknown, Response::Reply(Reply::Err { code: err_code::UNKNOWN_OPCODE, .. })));
    let malformed = ctl.call_frame(&Frame { opcode: 0x12, payload: vec![1, 2] }).unwrap();
    assert!(matches!(malformed, Response::Reply(Reply::Err { code: err_code::MALFORMED, .. })));
    ctl.price().unwrap();
}

#[test]
fn requests_beyond_supply_queue_then_fill() {
    let c = Cluster::start(1, 2);
    let first = c.lease(2, 1_000);
    assert_eq!(first[0].slabs.len(), 2);
    // the second request waits until the first lease ends
    let started = Wall::now();
    let second = c.lease(2, 60_000);
    assert_eq!(second[0].slabs.len(), 2);
    assert!(started.elapsed() >= StdDuration::from_millis(500));
}
