//! In-memory victim cache for reclaimed pages.
//!
//! Pages swapped out by the harvester land here first. An access while the
//! page is still in memory maps it straight back at no cost; pages that stay
//! untouched for longer than the cooling period are written to a backing
//! store, and reading them back costs the store's read latency. A prefetch
//! pulls the most recently swapped-out pages back into memory.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::time::Duration as Latency;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::{ByteSize, Duration, Instant, PAGE_SIZE};

pub type PageId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackingKind {
    Ssd,
    Hdd,
    Zram,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Backing {
    pub kind: BackingKind,
    pub read_latency: Latency,
    pub write_latency: Latency,
    /// Fraction of a page's size a stored page still occupies in RAM. Only
    /// meaningful for compressed-RAM backing; zero for disks.
    pub capacity_factor: f64,
}

impl Backing {
    pub fn ssd() -> Self {
        Backing {
            kind: BackingKind::Ssd,
            read_latency: Latency::from_micros(100),
            write_latency: Latency::from_micros(100),
            capacity_factor: 0.0,
        }
    }

    pub fn hdd() -> Self {
        Backing {
            kind: BackingKind::Hdd,
            read_latency: Latency::from_millis(5),
            write_latency: Latency::from_millis(5),
            capacity_factor: 0.0,
        }
    }

    pub fn zram(capacity_factor: f64) -> Self {
        Backing {
            kind: BackingKind::Zram,
            read_latency: Latency::from_micros(3),
            write_latency: Latency::from_micros(3),
            capacity_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiloConfig {
    pub cooling_period: Duration,
    pub backing: Backing,
    pub page_size: ByteSize,
}

impl Default for SiloConfig {
    fn default() -> Self {
        SiloConfig {
            cooling_period: Duration::from_mins(5),
            backing: Backing::ssd(),
            page_size: PAGE_SIZE,
        }
    }
}

impl SiloConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backing.read_latency.is_zero() || self.backing.write_latency.is_zero() {
            return Err(Error::invalid("backing latencies must be positive"));
        }
        if self.page_size.0 == 0 {
            return Err(Error::invalid("page size must be positive"));
        }
        match self.backing.kind {
            BackingKind::Zram => {
                let f = self.backing.capacity_factor;
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::invalid("zram capacity factor must lie in (0, 1]"));
                }
            }
            _ => {
                if self.backing.capacity_factor != 0.0 {
                    return Err(Error::invalid("disk backing has no RAM footprint"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Location {
    InSilo,
    OnDisk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiloPage {
    pub page_id: PageId,
    pub swapped_out_at: Instant,
    /// Start of the current in-memory stay; differs from `swapped_out_at`
    /// only for pages brought back by a prefetch.
    pub cooling_from: Instant,
    pub location: Location,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Where {
    Silo,
    Disk,
    NotTracked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessOutcome {
    pub location: Where,
    pub latency: Latency,
}

/// Occupancy and I/O counters, cheap to copy out to other threads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiloSnapshot {
    pub silo_bytes: u64,
    pub disk_bytes: u64,
    pub disk_reads: u64,
    pub disk_writes: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SiloCounters {
    pub swap_outs: u64,
    pub mapped_back: u64,
    pub silo_hits: u64,
    pub disk_hits: u64,
    pub misses: u64,
    pub disk_reads: u64,
    pub disk_writes: u64,
    pub prefetched: u64,
    pub read_latency_total: Latency,
    pub write_latency_total: Latency,
}

#[derive(Debug)]
pub struct Silo {
    cfg: SiloConfig,
    pages: HashMap<PageId, SiloPage>,
    /// In-memory pages by (cooling start, id), oldest first.
    cooling: BTreeSet<(Instant, PageId)>,
    /// Backing-store pages by (swap-out time, id).
    disk: BTreeSet<(Instant, PageId)>,
    counters: SiloCounters,
    last_tick: Option<Instant>,
}

impl Silo {
    pub fn new(cfg: SiloConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Silo {
            cfg,
            pages: HashMap::new(),
            cooling: BTreeSet::new(),
            disk: BTreeSet::new(),
            counters: SiloCounters::default(),
            last_tick: None,
        })
    }

    pub fn config(&self) -> &SiloConfig {
        &self.cfg
    }

    pub fn swap_out(&mut self, page_id: PageId, now: Instant) -> Result<()> {
        if self.pages.contains_key(&page_id) {
            return Err(Error::state(format!("page {page_id} already swapped out")));
        }
        self.pages.insert(
            page_id,
            SiloPage {
                page_id,
                swapped_out_at: now,
                cooling_from: now,
                location: Location::InSilo,
            },
        );
        self.cooling.insert((now, page_id));
        self.counters.swap_outs += 1;
        Ok(())
    }

    pub fn locate(&self, page_id: PageId) -> Option<Location> {
        self.pages.get(&page_id).map(|p| p.location)
    }

    pub fn page(&self, page_id: PageId) -> Option<&SiloPage> {
        self.pages.get(&page_id)
    }

    /// The application touches `page_id`; a tracked page is mapped back.
    pub fn access(&mut self, page_id: PageId, _now: Instant) -> AccessOutcome {
        let Some(page) = self.pages.remove(&page_id) else {
            self.counters.misses += 1;
            return AccessOutcome {
                location: Where::NotTracked,
                latency: Latency::ZERO,
            };
        };
        self.counters.mapped_back += 1;
        match page.location {
            Location::InSilo => {
                self.cooling.remove(&(page.cooling_from, page_id));
                self.counters.silo_hits += 1;
                AccessOutcome {
                    location: Where::Silo,
                    latency: Latency::ZERO,
                }
            }
            Location::OnDisk => {
                self.disk.remove(&(page.swapped_out_at, page_id));
                self.counters.disk_hits += 1;
                self.counters.disk_reads += 1;
                let latency = self.cfg.backing.read_latency;
                self.counters.read_latency_total += latency;
                AccessOutcome {
                    location: Where::Disk,
                    latency,
                }
            }
        }
    }

    /// Moves every page that has sat in memory for strictly longer than the
    /// cooling period to the backing store. Returns how many moved.
    pub fn tick(&mut self, now: Instant) -> Result<usize> {
        if self.last_tick.is_some_and(|l| now < l) {
            return Err(Error::invalid(format!("non-monotone silo tick {}", now.0)));
        }
        self.last_tick = Some(now);
        let mut evicted = 0;
        while let Some(&(from, id)) = self.cooling.first() {
            if now.since(from) <= self.cfg.cooling_period {
                break;
            }
            self.cooling.pop_first();
            let page = self.pages.get_mut(&id).expect("cooling page is tracked");
            page.location = Location::OnDisk;
            self.disk.insert((page.swapped_out_at, id));
            self.counters.disk_writes += 1;
            self.counters.write_latency_total += self.cfg.backing.write_latency;
            evicted += 1;
        }
        Ok(evicted)
    }

    /// Restores up to `bytes / page_size` pages from the backing store into
    /// memory, most recently swapped-out first. Returns the ids restored.
    pub fn prefetch(&mut self, bytes: ByteSize, now: Instant) -> Vec<PageId> {
        let want = (bytes.0 / self.cfg.page_size.0) as usize;
        let mut restored = Vec::with_capacity(want.min(self.disk.len()));
        while restored.len() < want {
            let Some((swapped, id)) = self.disk.pop_last() else {
                break;
            };
            let page = self.pages.get_mut(&id).expect("disk page is tracked");
            debug_assert_eq!(page.swapped_out_at, swapped);
            page.location = Location::InSilo;
            page.cooling_from = now;
            self.cooling.insert((now, id));
            self.counters.disk_reads += 1;
            self.counters.read_latency_total += self.cfg.backing.read_latency;
            restored.push(id);
        }
        self.counters.prefetched += restored.len() as u64;
        restored
    }

    pub fn in_silo(&self) -> usize {
        self.cooling.len()
    }

    pub fn on_disk(&self) -> usize {
        self.disk.len()
    }

    pub fn counters(&self) -> SiloCounters {
        self.counters
    }

    pub fn silo_bytes(&self) -> ByteSize {
        ByteSize(self.cooling.len() as u64 * self.cfg.page_size.0)
    }

    pub fn disk_bytes(&self) -> ByteSize {
        ByteSize(self.disk.len() as u64 * self.cfg.page_size.0)
    }

    /// RAM still held on behalf of reclaimed pages: the silo itself plus the
    /// compressed footprint of a compressed-RAM backing store.
    pub fn ram_footprint(&self) -> ByteSize {
        let compressed = (self.disk_bytes().0 as f64 * self.cfg.backing.capacity_factor).ceil() as u64;
        self.silo_bytes() + ByteSize(compressed)
    }

    /// Memory that can actually be offered out of `harvested` bytes.
    pub fn net_harvestable(&self, harvested: ByteSize) -> ByteSize {
        harvested.saturating_sub(self.ram_footprint())
    }

    pub fn snapshot(&self) -> SiloSnapshot {
        SiloSnapshot {
            silo_bytes: self.silo_bytes().0,
            disk_bytes: self.disk_bytes().0,
            disk_reads: self.counters.disk_reads,
            disk_writes: self.counters.disk_writes,
        }
    }
}

/// Writes `silo_bytes,disk_bytes,disk_reads,disk_writes` rows.
pub fn write_ledger_csv<W: Write>(w: W, rows: &[SiloSnapshot]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn silo() -> Silo {
        Silo::new(SiloConfig::default()).unwrap()
    }

    const SEC: u64 = 1000;

    #[test]
    fn swap_out_and_locate() {
        let mut s = silo();
        s.swap_out(1, Instant(0)).unwrap();
        assert_eq!(s.locate(1), Some(Location::InSilo));
        assert!(matches!(s.swap_out(1, Instant(1)), Err(Error::InvalidState(_))));
    }

    #[test]
    fn occupancy_is_sum_of_pages() {
        let mut s = silo();
        for p in 0..1000 {
            s.swap_out(p, Instant(p)).unwrap();
        }
        assert_eq!(s.silo_bytes(), ByteSize(1000 * 4096));
    }

    #[test]
    fn access_paths() {
        let mut s = silo();
        s.swap_out(1, Instant(0)).unwrap();
        s.swap_out(2, Instant(0)).unwrap();
        let a = s.access(1, Instant(60 * SEC));
        assert_eq!(a, AccessOutcome { location: Where::Silo, latency: Latency::ZERO });
        s.tick(Instant(301 * SEC)).unwrap();
        let b = s.access(2, Instant(302 * SEC));
        assert_eq!(b.location, Where::Disk);
        assert_eq!(b.latency, Latency::from_micros(100));
        assert_eq!(s.access(3, Instant(0)).location, Where::NotTracked);
    }

    #[test]
    fn cooling_boundary() {
        let mut s = silo();
        s.swap_out(1, Instant(0)).unwrap();
        assert_eq!(s.tick(Instant(299 * SEC)).unwrap(), 0);
        assert_eq!(s.tick(Instant(300 * SEC)).unwrap(), 0);
        assert_eq!(s.tick(Instant(301 * SEC)).unwrap(), 1);
        assert_eq!(s.locate(1), Some(Location::OnDisk));
    }

    #[test]
    fn straddling_ages() {
        let mut s = silo();
        let now = 600 * SEC;
        let ages_s = [10u64, 100, 299, 300, 301, 302, 400, 500, 599, 600];
        for (i, age) in ages_s.iter().enumerate() {
            s.swap_out(i as u64, Instant(now - age * SEC)).unwrap();
        }
        let expected = ages_s.iter().filter(|a| **a > 300).count();
        assert_eq!(s.tick(Instant(now)).unwrap(), expected);
    }

    #[test]
    fn prefetch_most_recent_first() {
        let mut s = silo();
        for p in 0..20u64 {
            s.swap_out(p, Instant(p * SEC)).unwrap();
        }
        s.tick(Instant(1000 * SEC)).unwrap();
        let got = s.prefetch(ByteSize(5 * 4096), Instant(1000 * SEC));
        assert_eq!(got, vec![19, 18, 17, 16, 15]);
        assert_eq!(s.in_silo(), 5);
        assert_eq!(s.on_disk(), 15);
        // restored pages get a fresh cooling window
        assert_eq!(s.tick(Instant(1200 * SEC)).unwrap(), 0);
    }

    #[test]
    fn prefetch_all_or_nothing() {
        let mut s = silo();
        assert!(s.prefetch(ByteSize::mib(64), Instant(0)).is_empty());
        for p in 0..(16384u64) {
            s.swap_out(p, Instant(0)).unwrap();
        }
        s.tick(Instant(301 * SEC)).unwrap();
        assert_eq!(s.prefetch(ByteSize::mib(64), Instant(301 * SEC)).len(), 16384);
        assert_eq!(s.on_disk(), 0);
    }

    #[test]
    fn zram_footprint_shrinks_harvestable() {
        let harvested = ByteSize::mib(64);
        let mut last = u64::MAX;
        for f in [0.1, 0.25, 0.5, 0.75, 1.0] {
            let mut s = Silo::new(SiloConfig {
                backing: Backing::zram(f),
                ..SiloConfig::default()
            })
            .unwrap();
            for p in 0..1000 {
                s.swap_out(p, Instant(0)).unwrap();
            }
            s.tick(Instant(301 * SEC)).unwrap();
            let net = s.net_harvestable(harvested).0;
            assert!(net < last);
            last = net;
        }
        let mut disk = silo();
        for p in 0..1000 {
            disk.swap_out(p, Instant(0)).unwrap();
        }
        disk.tick(Instant(301 * SEC)).unwrap();
        assert_eq!(disk.net_harvestable(harvested), harvested);
    }

    #[test]
    fn config_validation() {
        let bad = SiloConfig {
            backing: Backing::zram(0.0),
            ..SiloConfig::default()
        };
        assert!(Silo::new(bad).is_err());
    }

    #[test]
    fn ledger_csv_header() {
        let mut buf = Vec::new();
        write_ledger_csv(&mut buf, &[SiloSnapshot { silo_bytes: 4096, disk_bytes: 0, disk_reads: 1, disk_writes: 2 }]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "silo_bytes,disk_bytes,disk_reads,disk_writes\n4096,0,1,2\n"
        );
    }
}
