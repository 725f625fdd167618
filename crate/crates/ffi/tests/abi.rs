use std::ffi::{CStr, CString};
use std::ptr;

use slabmarket_ffi::*;

fn last_error() -> String {
    let p = sm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn local(mode: u32) -> *mut SmKvClient {
    let key = [9u8; 16];
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { sm_kv_client_new_local(mode, 3, 1 << 20, key.as_ptr(), &mut c) }, SM_OK);
    assert!(!c.is_null());
    c
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(sm_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn kv_round_trip_in_every_mode() {
    for mode in [SM_MODE_FULL, SM_MODE_INTEGRITY, SM_MODE_PLAIN] {
        let c = local(mode);
        unsafe {
            for i in 0..50u32 {
                let k = format!("key{i}");
                let v = i.to_be_bytes().repeat(i as usize + 1);
                assert_eq!(sm_kv_put(c, k.as_ptr(), k.len(), v.as_ptr(), v.len()), SM_OK);
            }
            let mut n = 0;
            assert_eq!(sm_kv_len(c, &mut n), SM_OK);
            // plain mode keeps no local index
            assert_eq!(n, if mode == SM_MODE_PLAIN { 0 } else { 50 });
            let mut buf = vec![0u8; 1024];
            let mut len = 0;
            assert_eq!(sm_kv_get(c, b"key7".as_ptr(), 4, buf.as_mut_ptr(), buf.len(), &mut len), SM_OK);
            assert_eq!(&buf[..len], &7u32.to_be_bytes().repeat(8)[..]);
            assert_eq!(sm_kv_delete(c, b"key7".as_ptr(), 4), SM_OK);
            assert_eq!(sm_kv_get(c, b"key7".as_ptr(), 4, buf.as_mut_ptr(), buf.len(), &mut len), SM_NOT_FOUND);
            assert_eq!(len, 0);
            sm_kv_client_free(c);
        }
    }
}

#[test]
fn small_buffer_reports_needed_length() {
    let c = local(SM_MODE_FULL);
    unsafe {
        let v = [5u8; 300];
        assert_eq!(sm_kv_put(c, b"k".as_ptr(), 1, v.as_ptr(), v.len()), SM_OK);
        let mut buf = [0u8; 10];
        let mut len = 0;
        assert_eq!(sm_kv_get(c, b"k".as_ptr(), 1, buf.as_mut_ptr(), buf.len(), &mut len), SM_BUFFER_TOO_SMALL);
        assert_eq!(len, 300);
        assert!(last_error().contains("300"));
        // a NULL buffer with zero capacity is the usual way to ask for the size
        assert_eq!(sm_kv_get(c, b"k".as_ptr(), 1, ptr::null_mut(), 0, &mut len), SM_BUFFER_TOO_SMALL);
        assert_eq!(len, 300);
        sm_kv_client_free(c);
    }
}

#[test]
fn null_and_bad_arguments() {
    unsafe {
        assert_eq!(sm_kv_put(ptr::null(), ptr::null(), 0, ptr::null(), 0), SM_NULL_POINTER);
        assert!(last_error().contains("null"));
        let mut c = ptr::null_mut();
        assert_eq!(sm_kv_client_new_local(7, 1, 1024, ptr::null(), &mut c), SM_INVALID_ARGUMENT);
        assert!(c.is_null());
        assert_eq!(sm_kv_client_new_local(SM_MODE_FULL, 0, 1024, ptr::null(), &mut c), SM_INVALID_ARGUMENT);
        assert_eq!(sm_kv_client_new_local(SM_MODE_FULL, 1, 1024, ptr::null(), ptr::null_mut()), SM_NULL_POINTER);
        let c = local(SM_MODE_PLAIN);
        assert_eq!(sm_kv_put(c, ptr::null(), 4, b"v".as_ptr(), 1), SM_NULL_POINTER);
        // success clears the message
        assert_eq!(sm_kv_put(c, b"k".as_ptr(), 1, b"v".as_ptr(), 1), SM_OK);
        assert!(sm_last_error().is_null());
        sm_kv_client_free(c);
        sm_kv_client_free(ptr::null_mut());
        sm_broker_free(ptr::null_mut());
    }
}

#[test]
fn unreachable_endpoint_is_an_io_error() {
    let ep = CString::new("127.0.0.1:1").unwrap();
    let eps = [ep.as_ptr()];
    let mut c = ptr::null_mut();
    let st = unsafe { sm_kv_client_connect(SM_MODE_FULL, ptr::null(), eps.as_ptr(), [1u64].as_ptr(), [2u64].as_ptr(), 1, &mut c) };
    assert_eq!(st, SM_IO, "{}", last_error());
}

#[test]
fn broker_places_reported_capacity() {
    unsafe {
        let mut b = ptr::null_mut();
        assert_eq!(sm_broker_new(1_000, 1, &mut b), SM_OK);
        let ep = CString::new("10.0.0.1:7000").unwrap();
        let mut p = 0;
        assert_eq!(sm_broker_register_producer(b, ep.as_ptr(), &mut p), SM_OK);
        assert_eq!(sm_broker_register_producer(b, ep.as_ptr(), &mut p), SM_INVALID_ARGUMENT);
        let cep = CString::new("consumer-a").unwrap();
        let mut cid = 0;
        assert_eq!(sm_broker_register_consumer(b, cep.as_ptr(), &mut cid), SM_OK);
        let free = 8 * (64 << 20);
        assert_eq!(sm_broker_report(b, p, free, 8, 0), SM_OK);
        assert_eq!(sm_broker_set_price(b, 1), SM_OK);

        let (mut lease, mut slabs, mut queued) = (0u64, 0u32, 0u64);
        assert_eq!(sm_broker_allocate(b, cid, 12, 60_000, 1, &mut lease, &mut slabs, &mut queued), SM_OK);
        assert!(lease != 0);
        assert!(slabs > 0 && slabs <= 8, "{slabs}");
        assert!(queued != 0);
        let mut leased = 0;
        assert_eq!(sm_broker_leased_slabs(b, &mut leased), SM_OK);
        assert_eq!(leased, u64::from(slabs));

        // below the minimum lease
        assert_eq!(sm_broker_allocate(b, cid, 1, 10, 1, &mut lease, &mut slabs, &mut queued), SM_INVALID_ARGUMENT);
        assert_eq!(sm_broker_report(b, 99, free, 8, 0), SM_NOT_FOUND);

        let (mut assigned, mut ended) = (0, 0);
        assert_eq!(sm_broker_tick(b, 60_002, &mut assigned, &mut ended), SM_OK);
        assert_eq!(ended, 0, "still renewable");
        assert_eq!(sm_broker_tick(b, 100_000, &mut assigned, &mut ended), SM_OK);
        assert_eq!(ended, 1);
        assert_eq!(sm_broker_tick(b, 100_001, ptr::null_mut(), ptr::null_mut()), SM_OK);

        let mut len = 0;
        assert_eq!(sm_broker_snapshot_json(b, ptr::null_mut(), 0, &mut len), SM_BUFFER_TOO_SMALL);
        let mut buf = vec![0u8; len];
        assert_eq!(sm_broker_snapshot_json(b, buf.as_mut_ptr(), buf.len(), &mut len), SM_OK);
        let v: serde_json::Value = serde_json::from_slice(&buf[..len]).unwrap();
        assert_eq!(v["price"], 1);
        sm_broker_free(b);
    }
}

#[test]
fn sim_run_returns_a_summary() {
    let settings = CString::new(
        "synthetic_producers = 3\nsynthetic_consumers = 2\nsynthetic_idle = 0\nsynthetic_hours = 2\nstrategy = \"fixed-0.25\"\n",
    )
    .unwrap();
    let mut len = 0;
    let mut buf = vec![0u8; 1 << 16];
    let st = unsafe { sm_sim_run(settings.as_ptr(), buf.as_mut_ptr(), buf.len(), &mut len) };
    assert_eq!(st, SM_OK, "{}", last_error());
    let v: serde_json::Value = serde_json::from_slice(&buf[..len]).unwrap();
    assert_eq!(v["strategy"], "fixed-0.25");
    assert_eq!(v["ticks"], 24);

    let bad = CString::new("tick_ms = \"soon\"").unwrap();
    assert_eq!(unsafe { sm_sim_run(bad.as_ptr(), buf.as_mut_ptr(), buf.len(), &mut len) }, SM_INVALID_ARGUMENT);
    let garbage = CString::new("= =").unwrap();
    assert_eq!(unsafe { sm_sim_run(garbage.as_ptr(), buf.as_mut_ptr(), buf.len(), &mut len) }, SM_INVALID_ARGUMENT);
}

#[test]
fn errors_are_per_thread() {
    unsafe {
        assert_eq!(sm_kv_len(ptr::null(), ptr::null_mut()), SM_NULL_POINTER);
    }
    let other = std::thread::spawn(|| sm_last_error().is_null()).join().unwrap();
    assert!(other);
    assert!(!sm_last_error().is_null());
}
