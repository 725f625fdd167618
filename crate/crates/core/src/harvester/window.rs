//! Expiring ordered multiset of performance samples.
//!
//! Samples live in an order-statistic AVL tree (each node caches its subtree
//! size) so insert, remove and k-th-smallest are all O(log n). A FIFO of
//! insertion order drives expiry, since samples arrive in time order.

use std::cmp::Ordering;
use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::units::{Duration, Instant};

/// Total order over (metric, sequence number). The sequence number makes
/// duplicate metric values distinct keys.
#[derive(Debug, Clone, Copy)]
struct Key {
    metric: f64,
    seq: u64,
}

impl Key {
    fn cmp(&self, other: &Key) -> Ordering {
        self.metric
            .total_cmp(&other.metric)
            .then(self.seq.cmp(&other.seq))
    }
}

type Link = Option<Box<Node>>;

#[derive(Debug)]
struct Node {
    key: Key,
    height: u8,
    size: usize,
    left: Link,
    right: Link,
}

fn height(n: &Link) -> u8 {
    n.as_ref().map_or(0, |n| n.height)
}

fn size(n: &Link) -> usize {
    n.as_ref().map_or(0, |n| n.size)
}

impl Node {
    fn leaf(key: Key) -> Box<Node> {
        Box::new(Node {
            key,
            height: 1,
            size: 1,
            left: None,
            right: None,
        })
    }

    fn update(&mut self) {
        self.height = 1 + height(&self.left).max(height(&self.right));
        self.size = 1 + size(&self.left) + size(&self.right);
    }

    fn balance_factor(&self) -> i16 {
        height(&self.left) as i16 - height(&self.right) as i16
    }
}

fn rotate_right(mut n: Box<Node>) -> Box<Node> {
    let mut l = n.left.take().expect("rotate_right without left child");
    n.left = l.right.take();
    n.update();
    l.right = Some(n);
    l.update();
    l
}

fn rotate_left(mut n: Box<Node>) -> Box<Node> {
    let mut r = n.right.take().expect("rotate_left without right child");
    n.right = r.left.take();
    n.update();
    r.left = Some(n);
    r.update();
    r
}

fn rebalance(mut n: Box<Node>) -> Box<Node> {
    n.update();
    let bf = n.balance_factor();
    if bf > 1 {
        if n.left.as_ref().is_some_and(|l| l.balance_factor() < 0) {
            n.left = n.left.take().map(rotate_left);
        }
        return rotate_right(n);
    }
    if bf < -1 {
        if n.right.as_ref().is_some_and(|r| r.balance_factor() > 0) {
            n.right = n.right.take().map(rotate_right);
        }
        return rotate_left(n);
    }
    n
}

fn insert(link: Link, key: Key) -> Box<Node> {
    match link {
        None => Node::leaf(key),
        Some(mut n) => {
            if key.cmp(&n.key) == Ordering::Less {
                n.left = Some(insert(n.left.take(), key));
            } else {
                n.right = Some(insert(n.right.take(), key));
            }
            rebalance(n)
        }
    }
}

fn take_min(mut n: Box<Node>) -> (Link, Key) {
    match n.left.take() {
        None => (n.right.take(), n.key),
        Some(l) => {
            let (rest, min) = take_min(l);
            n.left = rest;
            (Some(rebalance(n)), min)
        }
    }
}

fn remove(link: Link, key: &Key, removed: &mut bool) -> Link {
    let mut n = link?;
    match key.cmp(&n.key) {
        Ordering::Less => n.left = remove(n.left.take(), key, removed),
        Ordering::Greater => n.right = remove(n.right.take(), key, removed),
        Ordering::Equal => {
            *removed = true;
            return match (n.left.take(), n.right.take()) {
                (None, None) => None,
                (Some(l), None) => Some(l),
                (None, Some(r)) => Some(r),
                (Some(l), Some(r)) => {
                    let (rest, succ) = take_min(r);
                    n.key = succ;
                    n.left = Some(l);
                    n.right = rest;
                    Some(rebalance(n))
                }
            };
        }
    }
    Some(rebalance(n))
}

/// Order-statistic AVL tree over `f64` samples (duplicates allowed).
#[derive(Debug, Default)]
pub struct OrderStatTree {
    root: Link,
}

impl OrderStatTree {
    pub fn len(&self) -> usize {
        size(&self.root)
    }

    pub fn is_empty(&self) -> bool {
        self.root.is_none()
    }

    fn insert(&mut self, key: Key) {
        self.root = Some(insert(self.root.take(), key));
    }

    fn remove(&mut self, key: &Key) -> bool {
        let mut removed = false;
        self.root = remove(self.root.take(), key, &mut removed);
        removed
    }

    /// The k-th smallest metric, 0-indexed.
    pub fn select(&self, mut k: usize) -> Option<f64> {
        let mut cur = self.root.as_deref()?;
        loop {
            let ls = size(&cur.left);
            match k.cmp(&ls) {
                Ordering::Less => cur = cur.left.as_deref()?,
                Ordering::Equal => return Some(cur.key.metric),
                Ordering::Greater => {
                    k -= ls + 1;
                    cur = cur.right.as_deref()?;
                }
            }
        }
    }

    pub fn min(&self) -> Option<f64> {
        self.select(0)
    }

    pub fn max(&self) -> Option<f64> {
        self.len().checked_sub(1).and_then(|k| self.select(k))
    }

    #[cfg(test)]
    fn check_invariants(&self) {
        fn walk(n: &Link, lo: Option<Key>, hi: Option<Key>) -> (u8, usize) {
            match n {
                None => (0, 0),
                Some(n) => {
                    if let Some(lo) = lo {
                        assert_ne!(n.key.cmp(&lo), Ordering::Less);
                    }
                    if let Some(hi) = hi {
                        assert_ne!(n.key.cmp(&hi), Ordering::Greater);
                    }
                    let (hl, sl) = walk(&n.left, lo, Some(n.key));
                    let (hr, sr) = walk(&n.right, Some(n.key), hi);
                    assert!((hl as i16 - hr as i16).abs() <= 1, "unbalanced");
                    assert_eq!(n.height, 1 + hl.max(hr));
                    assert_eq!(n.size, 1 + sl + sr);
                    (n.height, n.size)
                }
            }
        }
        walk(&self.root, None, None);
    }
}

/// Whether larger metric values mean better or worse performance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Orientation {
    /// Throughput-like metrics.
    HigherIsBetter,
    /// Latency-like metrics.
    LowerIsBetter,
}

impl Orientation {
    /// True iff `a` is strictly worse than `b`.
    pub fn worse(self, a: f64, b: f64) -> bool {
        match self {
            Orientation::LowerIsBetter => a > b,
            Orientation::HigherIsBetter => a < b,
        }
    }
}

/// Samples from the last `window_size` of time, ordered by metric.
#[derive(Debug)]
pub struct PerfWindow {
    window_size: Duration,
    tree: OrderStatTree,
    fifo: VecDeque<(Instant, Key)>,
    next_seq: u64,
    latest: Option<Instant>,
}

impl PerfWindow {
    pub fn new(window_size: Duration) -> Self {
        PerfWindow {
            window_size,
            tree: OrderStatTree::default(),
            fifo: VecDeque::new(),
            next_seq: 0,
            latest: None,
        }
    }

    pub fn window_size(&self) -> Duration {
        self.window_size
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn latest(&self) -> Option<Instant> {
        self.latest
    }

    pub fn insert(&mut self, metric: f64, at: Instant) -> Result<()> {
        if !metric.is_finite() {
            return Err(Error::invalid("performance metric must be finite"));
        }
        if self.latest.is_some_and(|l| at < l) {
            return Err(Error::invalid(format!(
                "non-monotone sample time {} after {}",
                at.0,
                self.latest.unwrap().0
            )));
        }
        let key = Key {
            metric,
            seq: self.next_seq,
        };
        self.next_seq += 1;
        self.tree.insert(key);
        self.fifo.push_back((at, key));
        self.latest = Some(at);
        Ok(())
    }

    /// Drop every sample with `at <= now - window_size`, so the window holds
    /// exactly `window_size` worth of time.
    pub fn expire(&mut self, now: Instant) {
        let Some(cutoff) = now.0.checked_sub(self.window_size.0) else {
            return;
        };
        while let Some(&(at, key)) = self.fifo.front() {
            if at.0 > cutoff {
                break;
            }
            self.fifo.pop_front();
            let removed = self.tree.remove(&key);
            debug_assert!(removed);
        }
    }

    pub fn oldest(&self) -> Option<Instant> {
        self.fifo.front().map(|(at, _)| *at)
    }

    /// k-th smallest metric value, 0-indexed.
    pub fn select(&self, k: usize) -> Option<f64> {
        self.tree.select(k)
    }

    pub fn min(&self) -> Option<f64> {
        self.tree.min()
    }

    pub fn max(&self) -> Option<f64> {
        self.tree.max()
    }

    /// The worst value in the window under `orientation`.
    pub fn worst(&self, orientation: Orientation) -> Option<f64> {
        match orientation {
            Orientation::LowerIsBetter => self.max(),
            Orientation::HigherIsBetter => self.min(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.fifo.iter().map(|(_, k)| k.metric)
    }
}

/// 1-indexed rank ceil(0.99 · n).
pub fn p99_rank(n: usize) -> usize {
    (99 * n).div_ceil(100)
}

/// The tail value such that 99% of samples are no worse than it: for latency
/// the ceil(0.99·n)-th smallest, for throughput the ceil(0.99·n)-th largest.
pub fn p99(window: &PerfWindow, orientation: Orientation) -> Result<f64> {
    let n = window.len();
    if n == 0 {
        return Err(Error::NoData("empty performance window"));
    }
    let rank = p99_rank(n);
    let idx = match orientation {
        Orientation::LowerIsBetter => rank - 1,
        Orientation::HigherIsBetter => n - rank,
    };
    Ok(window.select(idx).expect("index within window"))
}
