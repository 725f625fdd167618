mod support;

use std::collections::BTreeMap;

use proptest::prelude::*;
use slabmarket::store::{largest_remainder, serve_kv, Admission, ProducerStore, StoreConfig, StoreManager, TokenBucket};
use slabmarket::units::{ByteSize, Instant, SLAB_SIZE};
use slabmarket::wire::{KvRequest, Reply};
use support::ExactLru;

#[derive(Debug, Clone)]
enum Op {
    Put(u8, usize),
    Get(u8),
    Delete(u8),
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    proptest::collection::vec(
        prop_oneof![
            (0u8..24, 1usize..200).prop_map(|(k, n)| Op::Put(k, n)),
            (0u8..24).prop_map(Op::Get),
            (0u8..24).prop_map(Op::Delete),
        ],
        0..300,
    )
}

fn store(capacity: u64, sample: usize, overhead: u64) -> ProducerStore {
    ProducerStore::new(StoreConfig { capacity: ByteSize(capacity), lru_sample_size: sample, value_overhead: overhead }, 7).unwrap()
}

proptest! {
    #[test]
    fn occupancy_is_bounded_and_exact(capacity in 300u64..3000, overhead in 0u64..32, sample in 1usize..8, ops in ops()) {
        let mut s = store(capacity, sample, overhead);
        let mut live: BTreeMap<u8, Vec<u8>> = BTreeMap::new();
        for (t, op) in ops.iter().enumerate() {
            let now = Instant(t as u64);
            match *op {
                Op::Put(k, n) => {
                    let v = vec![k; n];
                    let evicted = s.put(&[k], &v, now).unwrap();
                    live.insert(k, v);
                    for e in evicted {
                        live.remove(&e[0]);
                    }
                }
                Op::Get(k) => {
                    let got = s.get(&[k], now).map(|v| v.to_vec());
                    prop_assert_eq!(got.as_ref(), live.get(&k));
                }
                Op::Delete(k) => {
                    prop_assert_eq!(s.delete(&[k]), live.remove(&k).is_some());
                }
            }
            prop_assert!(s.occupancy() <= capacity);
            let charged: u64 = live.values().map(|v| 1 + v.len() as u64 + overhead).sum();
            prop_assert_eq!(s.occupancy(), charged);
            prop_assert_eq!(s.len(), live.len());
        }
    }

    #[test]
    fn full_sample_is_exact_lru(capacity in 300u64..2000, ops in ops()) {
        let mut s = store(capacity, 64, 0);
        let mut lru = ExactLru::new(capacity);
        for (t, op) in ops.iter().enumerate() {
            let now = Instant(t as u64);
            match *op {
                Op::Put(k, n) => {
                    let mut a = s.put(&[k], &vec![0; n], now).unwrap();
                    let mut b = lru.put(&[k], 1 + n as u64);
                    a.sort();
                    b.sort();
                    prop_assert_eq!(a, b);
                }
                Op::Get(k) => prop_assert_eq!(s.get(&[k], now).is_some(), lru.get(&[k])),
                Op::Delete(k) => prop_assert_eq!(s.delete(&[k]), lru.delete(&[k])),
            }
        }
    }

    #[test]
    fn defragment_leaves_at_most_one_page_of_slack(ops in ops()) {
        let mut s = store(4000, 5, 0);
        for (t, op) in ops.iter().enumerate() {
            if let Op::Put(k, n) = *op {
                s.put(&[k], &vec![1; n * 19], Instant(t as u64)).unwrap();
            } else if let Op::Delete(k) = *op {
                s.delete(&[k]);
            }
        }
        let before = s.resident();
        let released = s.defragment();
        prop_assert_eq!(before - released, s.resident());
        prop_assert!(s.fragmentation() < 4096);
    }

    #[test]
    fn largest_remainder_is_exact(total in 0u64..1_000_000, weights in proptest::collection::vec(0u64..10_000, 1..12)) {
        let parts = largest_remainder(total, &weights);
        let sum: u64 = weights.iter().sum();
        prop_assert_eq!(parts.len(), weights.len());
        if sum == 0 {
            return Ok(());
        }
        prop_assert_eq!(parts.iter().sum::<u64>(), total);
        for (p, w) in parts.iter().zip(&weights) {
            let exact = total as f64 * *w as f64 / sum as f64;
            prop_assert!((*p as f64 - exact).abs() < 1.0 + 1e-9, "{} vs {}", p, exact);
        }
    }

    #[test]
    fn token_bucket_never_exceeds_rate_plus_burst(
        rate in 1_000.0f64..1e6,
        burst in 1_000.0f64..1e5,
        ios in proptest::collection::vec((0u64..50, 1u64..2_000), 1..400),
    ) {
        let mut b = TokenBucket::new(rate, burst, Instant(0)).unwrap();
        let mut now = 0u64;
        let mut admitted = 0.0;
        for (dt, size) in ios {
            now += dt;
            if b.admit(size, Instant(now)) == Admission::Allow {
                admitted += size as f64;
            }
            prop_assert!(admitted <= burst + rate * now as f64 / 1000.0 + 1e-6);
        }
    }
}

#[test]
fn oversized_entry_is_rejected() {
    let mut s = store(100, 5, 0);
    assert!(s.put(b"k", &[0; 100], Instant(0)).is_err());
    assert!(s.is_empty());
}

#[test]
fn serve_kv_replies() {
    let mut s = store(1000, 5, 0);
    let now = Instant(0);
    assert_eq!(serve_kv(&mut s, None, &KvRequest::Ping, now), Reply::Ok(vec![]));
    assert_eq!(serve_kv(&mut s, None, &KvRequest::Get { key: b"a".to_vec() }, now), Reply::NotFound);
    assert_eq!(serve_kv(&mut s, None, &KvRequest::Put { key: b"a".to_vec(), value: b"x".to_vec() }, now), Reply::Ok(vec![]));
    assert_eq!(serve_kv(&mut s, None, &KvRequest::Get { key: b"a".to_vec() }, now), Reply::Value(b"x".to_vec()));
    assert_eq!(serve_kv(&mut s, None, &KvRequest::Delete { key: b"a".to_vec() }, now), Reply::Ok(vec![]));
    assert_eq!(serve_kv(&mut s, None, &KvRequest::Delete { key: b"a".to_vec() }, now), Reply::Ok(vec![]));
}

#[test]
fn evicted_keys_answer_evicted() {
    let mut s = store(100, 5, 0);
    s.put(b"a", &[0; 60], Instant(0)).unwrap();
    s.put(b"b", &[0; 60], Instant(1)).unwrap();
    assert_eq!(serve_kv(&mut s, None, &KvRequest::Get { key: b"a".to_vec() }, Instant(2)), Reply::Evicted);
}

#[test]
fn rate_limited_reply_carries_wait() {
    let mut s = store(10_000, 5, 0);
    let mut b = TokenBucket::new(1000.0, 1000.0, Instant(0)).unwrap();
    let put = KvRequest::Put { key: b"k".to_vec(), value: vec![0; 899] };
    assert_eq!(serve_kv(&mut s, Some(&mut b), &put, Instant(0)), Reply::Ok(vec![]));
    match serve_kv(&mut s, Some(&mut b), &put, Instant(0)) {
        Reply::RateLimited { retry_after_ms } => assert_eq!(retry_after_ms, 800),
        other => panic!("{other:?}"),
    }
    assert_eq!(serve_kv(&mut s, Some(&mut b), &put, Instant(800)), Reply::Ok(vec![]));
}

#[test]
fn manager_pool_accounting() {
    let mut m = StoreManager::new(6, 1);
    m.spawn_store(1, 2, Instant(100)).unwrap();
    m.spawn_store(2, 3, Instant(200)).unwrap();
    assert_eq!(m.free_slabs(), 1);
    assert!(m.spawn_store(3, 2, Instant(100)).is_err());
    assert!(m.spawn_store(1, 1, Instant(100)).is_err());
    assert_eq!(m.expire(Instant(100)), vec![1]);
    assert_eq!(m.free_slabs(), 3);
    m.extend(2, Instant(500)).unwrap();
    assert!(m.expire(Instant(200)).is_empty());
    let r = m.reclaim_slabs(2).unwrap();
    assert_eq!(r.iter().map(|x| x.slabs).sum::<u32>(), 2);
    assert_eq!(m.get(2).unwrap().slabs, 1);
    assert_eq!(m.get(2).unwrap().store.capacity(), SLAB_SIZE);
    assert_eq!(m.pool_slabs(), 4);
}

#[test]
fn reclaim_splits_by_occupancy() {
    let mut m = StoreManager::new(4, 3).with_sample_size(64);
    m.spawn_store(1, 2, Instant(1000)).unwrap();
    m.spawn_store(2, 2, Instant(1000)).unwrap();
    for i in 0u32..30 {
        m.get_mut(1).unwrap().store.put(&i.to_be_bytes(), &[0; 1000], Instant(i as u64)).unwrap();
    }
    for i in 0u32..10 {
        m.get_mut(2).unwrap().store.put(&i.to_be_bytes(), &[0; 1000], Instant(i as u64)).unwrap();
    }
    let r = m.reclaim(8016).unwrap();
    let by_lease: BTreeMap<_, _> = r.iter().map(|x| (x.lease_id, x)).collect();
    assert_eq!(by_lease[&1].target, 6012);
    assert_eq!(by_lease[&2].target, 2004);
    assert_eq!(by_lease[&1].keys.len(), 6);
    assert_eq!(by_lease[&2].keys.len(), 2);
    assert!(m.reclaim(u64::MAX).is_err());
}
