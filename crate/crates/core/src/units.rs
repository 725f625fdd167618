//! Shared vocabulary: byte sizes, money, time, lease terms and slabs.
//!
//! Conventions used everywhere in the crate:
//!
//! * Prices are quoted per GB·hour where GB is [`GB`] = 10^9 bytes.
//! * Slab and page sizes are binary: the default slab is 64 MiB ([`MIB`] = 2^20).
//! * Money is an integer count of micro-cents (10^-6 cent). No floating point
//!   is ever used to hold a balance.
//! * Time is an integer count of milliseconds since the clock's epoch.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes per decimal gigabyte; the unit prices are quoted in.
pub const GB: u64 = 1_000_000_000;
/// Bytes per mebibyte; the unit slab and chunk sizes are given in.
pub const MIB: u64 = 1 << 20;
pub const KIB: u64 = 1 << 10;
pub const GIB: u64 = 1 << 30;

/// Default slab size: 64 MiB.
pub const SLAB_SIZE: ByteSize = ByteSize(64 * MIB);
/// Page granularity used by the silo and the store residency model.
pub const PAGE_SIZE: ByteSize = ByteSize(4 * KIB);

pub const MS_PER_SEC: u64 = 1_000;
pub const MS_PER_MIN: u64 = 60 * MS_PER_SEC;
pub const MS_PER_HOUR: u64 = 60 * MS_PER_MIN;
pub const MS_PER_DAY: u64 = 24 * MS_PER_HOUR;

/// Micro-cents per cent.
pub const MICRO_CENTS_PER_CENT: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ByteSize(pub u64);

impl ByteSize {
    pub const ZERO: ByteSize = ByteSize(0);

    pub const fn bytes(self) -> u64 {
        self.0
    }

    pub const fn mib(n: u64) -> Self {
        ByteSize(n * MIB)
    }

    pub const fn kib(n: u64) -> Self {
        ByteSize(n * KIB)
    }

    /// Size in decimal gigabytes.
    pub fn as_gb(self) -> f64 {
        self.0 as f64 / GB as f64
    }

    pub fn from_gb(gb: f64) -> Self {
        ByteSize((gb.max(0.0) * GB as f64).round() as u64)
    }

    pub fn saturating_sub(self, rhs: ByteSize) -> ByteSize {
        ByteSize(self.0.saturating_sub(rhs.0))
    }

    pub fn is_multiple_of(self, unit: ByteSize) -> bool {
        unit.0 != 0 && self.0 % unit.0 == 0
    }
}

impl Add for ByteSize {
    type Output = ByteSize;
    fn add(self, rhs: ByteSize) -> ByteSize {
        ByteSize(self.0 + rhs.0)
    }
}

impl AddAssign for ByteSize {
    fn add_assign(&mut self, rhs: ByteSize) {
        self.0 += rhs.0;
    }
}

impl Sub for ByteSize {
    type Output = ByteSize;
    fn sub(self, rhs: ByteSize) -> ByteSize {
        ByteSize(self.0 - rhs.0)
    }
}

impl fmt::Display for ByteSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 >= MIB && self.0 % MIB == 0 {
            write!(f, "{} MiB", self.0 / MIB)
        } else {
            write!(f, "{} B", self.0)
        }
    }
}

/// An amount of money in micro-cents. Also used for unit prices, in which
/// case the amount is per GB·hour (or per instance-hour for spot quotes).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Money(pub u64);

impl Money {
    pub const ZERO: Money = Money(0);

    pub const fn micro_cents(self) -> u64 {
        self.0
    }

    pub const fn from_cents(cents: u64) -> Self {
        Money(cents * MICRO_CENTS_PER_CENT)
    }

    pub fn saturating_sub(self, rhs: Money) -> Money {
        Money(self.0.saturating_sub(rhs.0))
    }

    /// Cost of holding `bytes` for `duration` at this per-GB·hour price,
    /// floored to a whole micro-cent. Exact integer arithmetic.
    pub fn cost_of(self, bytes: ByteSize, duration: Duration) -> Money {
        Money(floor_price_volume(self.0, byte_ms(bytes, duration)))
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        self.0 += rhs.0;
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} µ¢", self.0)
    }
}

/// Byte·milliseconds; the integer volume unit billing is computed in.
pub fn byte_ms(bytes: ByteSize, duration: Duration) -> u128 {
    bytes.0 as u128 * duration.0 as u128
}

/// floor(price_per_gb_hour · volume / (GB · ms-per-hour)).
pub fn floor_price_volume(price_per_gb_hour: u64, volume_byte_ms: u128) -> u64 {
    let denom = GB as u128 * MS_PER_HOUR as u128;
    let v = price_per_gb_hour as u128 * volume_byte_ms / denom;
    u64::try_from(v).unwrap_or(u64::MAX)
}

/// GB·hours represented by a byte·ms volume.
pub fn gb_hours(volume_byte_ms: u128) -> f64 {
    volume_byte_ms as f64 / (GB as f64 * MS_PER_HOUR as f64)
}

/// Milliseconds since the clock epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Instant(pub u64);

/// A span of milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Duration(pub u64);

impl Instant {
    pub const EPOCH: Instant = Instant(0);

    pub const fn ms(self) -> u64 {
        self.0
    }

    /// Elapsed time since `earlier`, zero if `earlier` is in the future.
    pub fn since(self, earlier: Instant) -> Duration {
        Duration(self.0.saturating_sub(earlier.0))
    }
}

impl Duration {
    pub const ZERO: Duration = Duration(0);

    pub const fn ms(self) -> u64 {
        self.0
    }

    pub const fn from_secs(s: u64) -> Self {
        Duration(s * MS_PER_SEC)
    }

    pub const fn from_mins(m: u64) -> Self {
        Duration(m * MS_PER_MIN)
    }

    pub const fn from_hours(h: u64) -> Self {
        Duration(h * MS_PER_HOUR)
    }

    pub fn as_hours(self) -> f64 {
        self.0 as f64 / MS_PER_HOUR as f64
    }
}

impl Add<Duration> for Instant {
    type Output = Instant;
    fn add(self, rhs: Duration) -> Instant {
        Instant(self.0 + rhs.0)
    }
}

impl Sub<Duration> for Instant {
    type Output = Instant;
    fn sub(self, rhs: Duration) -> Instant {
        Instant(self.0.saturating_sub(rhs.0))
    }
}

impl Add for Duration {
    type Output = Duration;
    fn add(self, rhs: Duration) -> Duration {
        Duration(self.0 + rhs.0)
    }
}

/// Desirability weights a consumer may attach to a request. Lower placement
/// cost is better; each weight scales one metric's contribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementWeights {
    pub w_slabs: f64,
    pub w_avail: f64,
    pub w_bw: f64,
    pub w_cpu: f64,
    pub w_lat: f64,
    pub w_rep: f64,
}

impl Default for PlacementWeights {
    fn default() -> Self {
        PlacementWeights {
            w_slabs: 1.0,
            w_avail: 1.0,
            w_bw: 1.0,
            w_cpu: 1.0,
            w_lat: 1.0,
            w_rep: 1.0,
        }
    }
}

impl PlacementWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [self.w_slabs, self.w_avail, self.w_bw, self.w_cpu, self.w_lat, self.w_rep]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        PlacementWeights { w_slabs: a[0], w_avail: a[1], w_bw: a[2], w_cpu: a[3], w_lat: a[4], w_rep: a[5] }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::invalid("placement weights must be finite and non-negative"));
        }
        if !w.iter().any(|x| *x > 0.0) {
            return Err(Error::invalid("at least one placement weight must be positive"));
        }
        Ok(())
    }
}

/// What a consumer asks the broker for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaseTerms {
    pub slabs: u32,
    pub duration: Duration,
    pub min_slabs: u32,
    /// Highest acceptable unit price, per GB·hour.
    pub max_unit_price: Money,
    pub weights: Option<PlacementWeights>,
    /// Bytes per second the consumer's store may serve.
    pub bandwidth_limit: u64,
    pub latency_bound: Duration,
}

impl LeaseTerms {
    pub fn new(slabs: u32, duration: Duration) -> Self {
        LeaseTerms {
            slabs,
            duration,
            min_slabs: 1.min(slabs),
            max_unit_price: Money(u64::MAX),
            weights: None,
            bandwidth_limit: u64::MAX,
            latency_bound: Duration(u64::MAX),
        }
    }

    pub fn validate(&self, min_lease: Duration) -> Result<()> {
        if self.slabs == 0 {
            return Err(Error::invalid("lease request for zero slabs"));
        }
        if self.min_slabs == 0 || self.min_slabs > self.slabs {
            return Err(Error::invalid(format!(
                "min_slabs {} outside [1, {}]",
                self.min_slabs, self.slabs
            )));
        }
        if self.duration < min_lease {
            return Err(Error::invalid(format!(
                "lease duration {} ms below minimum {} ms",
                self.duration.0, min_lease.0
            )));
        }
        if let Some(w) = &self.weights {
            w.validate()?;
        }
        Ok(())
    }
}

pub type ProducerId = u64;
pub type ConsumerId = u64;
pub type LeaseId = u64;

/// One fixed-size unit of leasable memory on a producer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Slab {
    pub producer_id: ProducerId,
    pub slab_index: u32,
    pub size: ByteSize,
    pub lease_id: Option<LeaseId>,
}

/// ceil(bytes / slab_size).
pub fn slabs_needed(bytes: ByteSize, slab_size: ByteSize) -> Result<u64> {
    if slab_size.0 == 0 {
        return Err(Error::invalid("slab size must be positive"));
    }
    Ok(bytes.0.div_ceil(slab_size.0))
}

/// True iff the half-open intervals `[a.0, a.1)` and `[b.0, b.1)` share a
/// nonzero-length stretch.
pub fn lease_overlaps(a: (Instant, Instant), b: (Instant, Instant)) -> bool {
    debug_assert!(a.0 <= a.1 && b.0 <= b.1);
    a.0.max(b.0) < a.1.min(b.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slabs_needed_examples() {
        assert_eq!(slabs_needed(ByteSize(0), SLAB_SIZE).unwrap(), 0);
        assert_eq!(slabs_needed(ByteSize::mib(64), SLAB_SIZE).unwrap(), 1);
        assert_eq!(slabs_needed(ByteSize::mib(65), SLAB_SIZE).unwrap(), 2);
        assert!(slabs_needed(ByteSize::mib(1), ByteSize(0)).is_err());
    }

    #[test]
    fn slabs_needed_matches_division() {
        for bytes in [1u64, 63, 64, 65, 127, 128, 129, 1000] {
            let by_loop = {
                let mut n = 0;
                while n * 64 < bytes {
                    n += 1;
                }
                n
            };
            assert_eq!(slabs_needed(ByteSize(bytes), ByteSize(64)).unwrap(), by_loop);
        }
    }

    #[test]
    fn overlap_examples() {
        let iv = |a, b| (Instant(a), Instant(b));
        assert!(!lease_overlaps(iv(0, 10), iv(10, 20)));
        assert!(lease_overlaps(iv(0, 10), iv(5, 6)));
        assert!(lease_overlaps(iv(0, 10), iv(9, 20)));
    }

    #[test]
    fn overlap_all_orderings() {
        // Every placement of b relative to a = [10, 20), checked against a
        // point-sampling oracle.
        let a = (Instant(10), Instant(20));
        for s in 0..30u64 {
            for e in s..30u64 {
                let b = (Instant(s), Instant(e));
                let oracle = (s..e).any(|t| (10..20).contains(&t));
                assert_eq!(lease_overlaps(a, b), oracle, "b = [{s},{e})");
                assert_eq!(lease_overlaps(b, a), oracle);
            }
        }
    }

    #[test]
    fn delta_p_is_exact() {
        // 0.002 cent in micro-cents.
        assert_eq!(Money::from_cents(2).0 / 1000, 2000);
    }

    #[test]
    fn slab_hour_cost() {
        let one_slab_hour = Money(1000).cost_of(SLAB_SIZE, Duration::from_hours(1));
        // 1000 · 67_108_864 / 10^9 = 67.1 -> 67
        assert_eq!(one_slab_hour, Money(67));
    }

    #[test]
    fn lease_terms_validation() {
        let mut t = LeaseTerms::new(4, Duration::from_mins(10));
        assert!(t.validate(Duration::from_mins(10)).is_ok());
        t.min_slabs = 5;
        assert!(t.validate(Duration::from_mins(10)).is_err());
        t.min_slabs = 1;
        assert!(t.validate(Duration::from_mins(11)).is_err());
        t.slabs = 0;
        assert!(t.validate(Duration::ZERO).is_err());
    }

    proptest::proptest! {
        #[test]
        fn money_decomposition_round_trips(price in 0u64..10_000_000, slabs in 0u64..1000, mins in 0u64..10_000) {
            let bytes = ByteSize(slabs * SLAB_SIZE.0);
            let d = Duration::from_mins(mins);
            // Splitting a lease into its per-slab parts never bills more
            // than the whole, and loses at most one micro-cent per part.
            let whole = price as u128 * byte_ms(bytes, d);
            let per_slab = price as u128 * byte_ms(SLAB_SIZE, d);
            proptest::prop_assert_eq!(whole, per_slab * slabs as u128);
            let total = Money(price).cost_of(bytes, d).0;
            let parts: u64 = (0..slabs).map(|_| Money(price).cost_of(SLAB_SIZE, d).0).sum();
            proptest::prop_assert!(parts <= total);
            proptest::prop_assert!(total - parts <= slabs);
        }
    }
}
