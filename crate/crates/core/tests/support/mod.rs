//! Independent oracles and process helpers shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{channel, Receiver};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Exact LRU over byte-charged entries: evicts the least recently touched
/// until the total fits.
#[derive(Default)]
pub struct ExactLru {
    pub capacity: u64,
    order: VecDeque<Vec<u8>>,
    sizes: BTreeMap<Vec<u8>, u64>,
    used: u64,
}

impl ExactLru {
    pub fn new(capacity: u64) -> Self {
        ExactLru { capacity, ..Default::default() }
    }

    fn touch(&mut self, key: &[u8]) {
        let pos = self.order.iter().position(|k| k == key).expect("present");
        let k = self.order.remove(pos).expect("present");
        self.order.push_back(k);
    }

    pub fn put(&mut self, key: &[u8], size: u64) -> Vec<Vec<u8>> {
        if let Some(old) = self.sizes.remove(key) {
            self.used -= old;
            let pos = self.order.iter().position(|k| k == key).expect("present");
            self.order.remove(pos);
        }
        self.sizes.insert(key.to_vec(), size);
        self.order.push_back(key.to_vec());
        self.used += size;
        let mut evicted = Vec::new();
        while self.used > self.capacity {
            let k = self.order.pop_front().expect("non-empty");
            self.used -= self.sizes.remove(&k).expect("sized");
            evicted.push(k);
        }
        evicted
    }

    pub fn get(&mut self, key: &[u8]) -> bool {
        if self.sizes.contains_key(key) {
            self.touch(key);
            true
        } else {
            false
        }
    }

    pub fn delete(&mut self, key: &[u8]) -> bool {
        match self.sizes.remove(key) {
            Some(s) => {
                self.used -= s;
                let pos = self.order.iter().position(|k| k == key).expect("present");
                self.order.remove(pos);
                true
            }
            None => false,
        }
    }

    pub fn keys(&self) -> Vec<Vec<u8>> {
        self.sizes.keys().cloned().collect()
    }
}

/// AR(1) sample path with Gaussian noise, after a burn-in.
pub fn ar1(phi: f64, n: usize, sigma: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut x = 0.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n + 200 {
        x = phi * x + noise.sample(&mut rng);
        if i >= 200 {
            out.push(x);
        }
    }
    out
}

/// p99 by sorting: the ceil(0.99 n)-th value from the good end.
pub fn sorted_p99(values: &[f64], lower_is_better: bool) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    if !lower_is_better {
        v.reverse();
    }
    let rank = (99 * v.len()).div_ceil(100);
    v[rank - 1]
}

/// Revenue-maximising price over 0, step, 2·step, ... up to `cap`, plus
/// `cap` itself. Revenue is floor(p · min(D(p), S)); lower price on ties.
pub fn brute_force_price(demand: impl Fn(u64) -> f64, supply: f64, step: u64, cap: u64) -> u64 {
    let mut grid: Vec<u64> = (0..=cap / step).map(|k| k * step).collect();
    if grid.last() != Some(&cap) {
        grid.push(cap);
    }
    let mut best = (0u64, 0u64);
    for p in grid {
        let r = (p as f64 * demand(p).min(supply)).floor() as u64;
        if r > best.0 {
            best = (r, p);
        }
    }
    best.1
}

/// A child process whose stdout lines arrive on a channel. Killed on drop.
pub struct Proc {
    pub name: String,
    child: Child,
    lines: Receiver<String>,
    pub seen: Vec<String>,
}

impl Proc {
    pub fn spawn(name: &str, args: &[&str], dir: &Path) -> Proc {
        let mut child = Command::new(env!("CARGO_BIN_EXE_slabmarket"))
            .args(args)
            .current_dir(dir)
            .env("RUST_LOG", "warn")
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .unwrap_or_else(|e| panic!("spawn {name}: {e}"));
        let out = child.stdout.take().expect("piped stdout");
        let (tx, rx) = channel();
        std::thread::spawn(move || {
            for line in BufReader::new(out).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Proc { name: name.to_string(), child, lines: rx, seen: Vec::new() }
    }

    /// Waits for a line containing `needle`.
    pub fn wait_for(&mut self, needle: &str, timeout: Duration) -> Result<String, String> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.lines.recv_timeout(left) {
                Ok(l) => {
                    self.seen.push(l.clone());
                    if l.contains(needle) {
                        return Ok(l);
                    }
                }
                Err(_) => return Err(format!("{}: no line with {needle:?}; saw {:?}", self.name, self.seen)),
            }
        }
    }

    /// The address in a `listening on ADDR ...` first line.
    pub fn listen_addr(&mut self) -> Result<String, String> {
        let l = self.wait_for("listening on", Duration::from_secs(20))?;
        Ok(l.split_whitespace().nth(2).ok_or("bad listen line")?.to_string())
    }

    pub fn wait_exit(&mut self, timeout: Duration) -> Result<bool, String> {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if let Some(st) = self.child.try_wait().map_err(|e| e.to_string())? {
                // drain what is left
                while let Ok(l) = self.lines.recv_timeout(Duration::from_millis(200)) {
                    self.seen.push(l);
                }
                return Ok(st.success());
            }
            std::thread::sleep(Duration::from_millis(50));
        }
        Err(format!("{} did not exit", self.name))
    }
}

impl Drop for Proc {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
