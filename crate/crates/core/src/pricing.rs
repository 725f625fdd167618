//! Market price for one GB·hour of remote memory.
//!
//! The price starts at a quarter of the spot-instance price per GB and then
//! moves by at most one step per round: the current price and its two
//! neighbours are scored by the strategy's objective and the best one wins,
//! the lower price on ties. The price never goes above the spot price per
//! GB, since renting a spot instance would then be cheaper.

use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::consumer::{purchase_decision, ConsumerProfile, MissRatioCurve};
use crate::error::{Error, Result};
use crate::units::{Instant, Money};

/// Default step: 0.002 cent per GB·hour.
pub const DEFAULT_STEP: Money = Money(2000);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpotPricePoint {
    pub at: Instant,
    pub price_per_instance_hour: Money,
    pub instance_mem_gb: f64,
}

/// Reads `timestamp_ms,price_micro_cents_per_hour,mem_gb` rows.
pub fn read_spot_csv<R: Read>(r: R) -> Result<Vec<SpotPricePoint>> {
    #[derive(Deserialize)]
    struct Row {
        timestamp_ms: u64,
        price_micro_cents_per_hour: u64,
        mem_gb: f64,
    }
    let mut rdr = csv::Reader::from_reader(r);
    let mut out: Vec<SpotPricePoint> = Vec::new();
    for row in rdr.deserialize::<Row>() {
        let row = row?;
        if !(row.mem_gb > 0.0) {
            return Err(Error::Parse(format!("spot row at {}: memory must be positive", row.timestamp_ms)));
        }
        if out.last().is_some_and(|p| p.at.0 > row.timestamp_ms) {
            return Err(Error::Parse("spot series timestamps must be non-decreasing".into()));
        }
        out.push(SpotPricePoint {
            at: Instant(row.timestamp_ms),
            price_per_instance_hour: Money(row.price_micro_cents_per_hour),
            instance_mem_gb: row.mem_gb,
        });
    }
    Ok(out)
}

pub fn read_spot_csv_path(path: &Path) -> Result<Vec<SpotPricePoint>> {
    read_spot_csv(std::fs::File::open(path)?)
}

pub fn write_spot_csv(points: &[SpotPricePoint]) -> String {
    let mut s = String::from("timestamp_ms,price_micro_cents_per_hour,mem_gb\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.at.0, p.price_per_instance_hour.0, p.instance_mem_gb));
    }
    s
}

/// The spot quote in force at `at`: the latest point not after it, or the
/// first point when `at` precedes the series.
pub fn spot_at(series: &[SpotPricePoint], at: Instant) -> Option<SpotPricePoint> {
    let i = series.partition_point(|p| p.at <= at);
    series.get(i.saturating_sub(1)).copied()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "fraction")]
pub enum StrategyKind {
    FixedFraction(f64),
    MaxRevenue,
    MaxVolume,
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    /// `max-revenue`, `max-volume`, or `fixed-<fraction>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max-revenue" => Ok(StrategyKind::MaxRevenue),
            "max-volume" => Ok(StrategyKind::MaxVolume),
            _ => s
                .strip_prefix("fixed-")
                .or_else(|| s.strip_prefix("fixed:"))
                .and_then(|f| f.parse().ok())
                .map(StrategyKind::FixedFraction)
                .ok_or_else(|| Error::invalid(format!("unknown strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PricingStrategy {
    pub kind: StrategyKind,
    pub step: Money,
}

impl PricingStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        PricingStrategy { kind, step: DEFAULT_STEP }
    }

    pub fn validate(&self) -> Result<()> {
        if self.step.0 == 0 {
            return Err(Error::invalid("price step must be positive"));
        }
        if let StrategyKind::FixedFraction(f) = self.kind {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::invalid("fixed fraction must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        match self.kind {
            StrategyKind::FixedFraction(f) => format!("fixed-{f}"),
            StrategyKind::MaxRevenue => "max-revenue".into(),
            StrategyKind::MaxVolume => "max-volume".into(),
        }
    }
}

/// Outcome of trading at one price for one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketObservation {
    pub price: Money,
    pub matched_gb_hours: f64,
    pub revenue: Money,
}

impl MarketObservation {
    pub fn new(price: Money, matched_gb_hours: f64) -> Self {
        MarketObservation {
            price,
            matched_gb_hours,
            revenue: Money((price.0 as f64 * matched_gb_hours).floor() as u64),
        }
    }
}

fn per_gb(spot: &SpotPricePoint, fraction: f64) -> Result<Money> {
    if !(spot.instance_mem_gb > 0.0) {
        return Err(Error::invalid("spot instance memory must be positive"));
    }
    Ok(Money((fraction * spot.price_per_instance_hour.0 as f64 / spot.instance_mem_gb).floor() as u64))
}

/// A quarter of the spot price, per GB·hour.
pub fn initial_price(spot: &SpotPricePoint) -> Result<Money> {
    per_gb(spot, 0.25)
}

/// The spot price per GB·hour: the market price never exceeds it.
pub fn ceiling(spot: &SpotPricePoint) -> Result<Money> {
    per_gb(spot, 1.0)
}

/// The three candidates around `current`, clamped to [0, ceiling] and
/// deduplicated, in ascending order.
pub fn candidates(current: Money, step: Money, ceiling: Money) -> Vec<Money> {
    let mut c = vec![
        Money(current.0.saturating_sub(step.0).min(ceiling.0)),
        Money(current.0.min(ceiling.0)),
        Money(current.0.saturating_add(step.0).min(ceiling.0)),
    ];
    c.sort();
    c.dedup();
    c
}

fn score(kind: StrategyKind, obs: &MarketObservation) -> f64 {
    match kind {
        StrategyKind::MaxVolume => obs.matched_gb_hours,
        _ => obs.revenue.0 as f64,
    }
}

/// One round of local search. Returns the next market price.
pub fn step_price<F>(current: Money, mut evaluate: F, strategy: &PricingStrategy, spot: &SpotPricePoint) -> Result<Money>
where
    F: FnMut(Money) -> MarketObservation,
{
    let cap = ceiling(spot)?;
    if let StrategyKind::FixedFraction(f) = strategy.kind {
        return Ok(per_gb(spot, f)?.min(cap));
    }
    let mut best: Option<(f64, Money)> = None;
    for p in candidates(current, strategy.step, cap) {
        let s = score(strategy.kind, &evaluate(p));
        // ascending candidates: strict improvement keeps the lower on ties
        if best.is_none_or(|(bs, _)| s > bs) {
            best = Some((s, p));
        }
    }
    Ok(best.map_or(Money::ZERO, |(_, p)| p))
}

/// One consumer in the demand model.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandProfile {
    pub mrc: Arc<MissRatioCurve>,
    pub profile: ConsumerProfile,
}

/// Total GB the population would lease at `price`.
pub fn consumer_demand(population: &[DemandProfile], price: Money) -> f64 {
    population
        .iter()
        .map(|c| purchase_decision(&c.mrc, price, &c.profile))
        .sum()
}

/// Owns the current price between rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceEngine {
    pub strategy: PricingStrategy,
    pub current: Option<Money>,
}

impl PriceEngine {
    pub fn new(strategy: PricingStrategy) -> Result<Self> {
        strategy.validate()?;
        Ok(PriceEngine { strategy, current: None })
    }

    /// The price quoted now, clamped under the current ceiling.
    pub fn quote(&self, spot: &SpotPricePoint) -> Result<Money> {
        let cap = ceiling(spot)?;
        match self.current {
            Some(p) => Ok(p.min(cap)),
            None => match self.strategy.kind {
                StrategyKind::FixedFraction(f) => Ok(per_gb(spot, f)?.min(cap)),
                _ => Ok(initial_price(spot)?.min(cap)),
            },
        }
    }

    /// Advances one round using `evaluate` to score candidate prices.
    pub fn advance<F>(&mut self, spot: &SpotPricePoint, evaluate: F) -> Result<Money>
    where
        F: FnMut(Money) -> MarketObservation,
    {
        let cur = self.quote(spot)?;
        let next = step_price(cur, evaluate, &self.strategy, spot)?;
        self.current = Some(next);
        Ok(next)
    }
}

/// Live-market search: without a demand model, each candidate is tried for
/// one round in turn (current, up, down) and the realised outcomes decide the
/// next base price.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationCycle {
    pub base: Money,
    observed: Vec<MarketObservation>,
}

impl ExplorationCycle {
    pub fn new(base: Money) -> Self {
        ExplorationCycle { base, observed: Vec::new() }
    }

    /// The price to post for the next round.
    pub fn next_probe(&self, step: Money, cap: Money) -> Money {
        let c = [
            self.base.min(cap),
            Money(self.base.0.saturating_add(step.0).min(cap.0)),
            Money(self.base.0.saturating_sub(step.0).min(cap.0)),
        ];
        c[self.observed.len() % 3]
    }

    /// Records what the probed price realised. After three probes the best
    /// becomes the new base and the cycle restarts.
    pub fn record(&mut self, obs: MarketObservation, kind: StrategyKind) -> Option<Money> {
        self.observed.push(obs);
        if self.observed.len() < 3 {
            return None;
        }
        let mut sorted = std::mem::take(&mut self.observed);
        sorted.sort_by_key(|o| o.price);
        let mut best: Option<(f64, Money)> = None;
        for o in &sorted {
            let s = score(kind, o);
            if best.is_none_or(|(bs, _)| s > bs) {
                best = Some((s, o.price));
            }
        }
        self.base = best.map_or(self.base, |(_, p)| p);
        Some(self.base)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spot(price: u64, mem: f64) -> SpotPricePoint {
        SpotPricePoint { at: Instant(0), price_per_instance_hour: Money(price), instance_mem_gb: mem }
    }

    fn revenue_of(demand: impl Fn(f64) -> f64) -> impl FnMut(Money) -> MarketObservation {
        move |p| MarketObservation::new(p, demand(p.0 as f64))
    }

    #[test]
    fn initial_price_examples() {
        assert_eq!(initial_price(&spot(8000, 8.0)).unwrap(), Money(250));
        assert_eq!(initial_price(&spot(0, 8.0)).unwrap(), Money(0));
        assert_eq!(initial_price(&spot(8000, 32.0)).unwrap(), Money(62));
        assert!(initial_price(&spot(8000, 0.0)).is_err());
    }

    #[test]
    fn ceiling_clamps() {
        let s = spot(100_000, 10.0);
        assert_eq!(ceiling(&s).unwrap(), Money(10_000));
        let strat = PricingStrategy::new(StrategyKind::MaxRevenue);
        // revenue keeps growing with price: would step above the ceiling
        let next = step_price(Money(9_000), revenue_of(|_| 10.0), &strat, &s).unwrap();
        assert_eq!(next, Money(10_000));
        // a current price already above the ceiling is pulled down to it
        let next = step_price(Money(50_000), revenue_of(|_| 10.0), &strat, &s).unwrap();
        assert_eq!(next, Money(10_000));
        let next = step_price(Money(10_000), revenue_of(|_| 10.0), &strat, &s).unwrap();
        assert_eq!(next, Money(10_000));
    }

    #[test]
    fn concave_revenue_moves_up() {
        let s = spot(10_000_000, 10.0);
        let strat = PricingStrategy::new(StrategyKind::MaxRevenue);
        // linear demand 100 - p/10_000: revenue peaks at p = 500_000
        let d = |p: f64| (100.0 - p / 10_000.0).max(0.0);
        let next = step_price(Money(300_000), revenue_of(d), &strat, &s).unwrap();
        assert_eq!(next, Money(302_000));
        let next = step_price(Money(700_000), revenue_of(d), &strat, &s).unwrap();
        assert_eq!(next, Money(698_000));
    }

    #[test]
    fn zero_demand_ties_go_lower() {
        let s = spot(10_000_000, 10.0);
        let strat = PricingStrategy::new(StrategyKind::MaxRevenue);
        assert_eq!(step_price(Money(10_000), revenue_of(|_| 0.0), &strat, &s).unwrap(), Money(8_000));
    }

    #[test]
    fn zero_price_has_two_candidates() {
        assert_eq!(candidates(Money(0), DEFAULT_STEP, Money(1_000_000)), vec![Money(0), Money(2000)]);
        let s = spot(10_000_000, 10.0);
        let strat = PricingStrategy::new(StrategyKind::MaxRevenue);
        assert_eq!(step_price(Money(0), revenue_of(|_| 0.0), &strat, &s).unwrap(), Money(0));
        assert_eq!(step_price(Money(1000), revenue_of(|_| 0.0), &strat, &s).unwrap(), Money(0));
    }

    #[test]
    fn fixed_fraction_tracks_spot() {
        let strat = PricingStrategy::new(StrategyKind::FixedFraction(0.25));
        let mut calls = 0;
        let p = step_price(Money(1), |p| { calls += 1; MarketObservation::new(p, 1.0) }, &strat, &spot(8000, 8.0)).unwrap();
        assert_eq!(p, Money(250));
        assert_eq!(calls, 0);
    }

    #[test]
    fn max_volume_prefers_lower_prices() {
        let s = spot(10_000_000, 10.0);
        let d = |p: f64| (100.0 - p / 10_000.0).max(0.0);
        let rev = PricingStrategy::new(StrategyKind::MaxRevenue);
        let vol = PricingStrategy::new(StrategyKind::MaxVolume);
        let mut pr = Money(500_000);
        let mut pv = Money(500_000);
        for _ in 0..400 {
            pr = step_price(pr, revenue_of(d), &rev, &s).unwrap();
            pv = step_price(pv, revenue_of(d), &vol, &s).unwrap();
        }
        assert!(pv <= pr);
        assert_eq!(pv, Money(0));
    }

    #[test]
    fn engine_starts_at_quarter_spot() {
        let mut e = PriceEngine::new(PricingStrategy::new(StrategyKind::MaxRevenue)).unwrap();
        let s = spot(8_000_000, 8.0);
        assert_eq!(e.quote(&s).unwrap(), Money(250_000));
        let p = e.advance(&s, revenue_of(|_| 5.0)).unwrap();
        assert_eq!(p, Money(252_000));
    }

    #[test]
    fn exploration_cycle_picks_best_probe() {
        let mut c = ExplorationCycle::new(Money(10_000));
        let cap = Money(1_000_000);
        let d = |p: f64| (100.0 - p / 1_000.0).max(0.0);
        let mut probes = vec![];
        for _ in 0..3 {
            let p = c.next_probe(DEFAULT_STEP, cap);
            probes.push(p);
            c.record(MarketObservation::new(p, d(p.0 as f64)), StrategyKind::MaxRevenue);
        }
        assert_eq!(probes, vec![Money(10_000), Money(12_000), Money(8_000)]);
        // revenue p·(100 - p/1000) peaks at 50_000: moving up wins
        assert_eq!(c.base, Money(12_000));
    }

    #[test]
    fn spot_csv_round_trip_and_lookup() {
        let pts = vec![
            SpotPricePoint { at: Instant(0), price_per_instance_hour: Money(3_000_000), instance_mem_gb: 15.25 },
            SpotPricePoint { at: Instant(3_600_000), price_per_instance_hour: Money(3_500_000), instance_mem_gb: 15.25 },
        ];
        let back = read_spot_csv(write_spot_csv(&pts).as_bytes()).unwrap();
        assert_eq!(back, pts);
        assert_eq!(spot_at(&pts, Instant(10)).unwrap().price_per_instance_hour, Money(3_000_000));
        assert_eq!(spot_at(&pts, Instant(4_000_000)).unwrap().price_per_instance_hour, Money(3_500_000));
        assert!(read_spot_csv("timestamp_ms,price_micro_cents_per_hour,mem_gb\n0,1,0\n".as_bytes()).is_err());
    }

    #[test]
    fn demand_is_monotone_and_zero_above_value() {
        let mrc = Arc::new(MissRatioCurve::new(vec![(0.0, 0.9), (4.0, 0.3), (8.0, 0.25)]).unwrap());
        let pop: Vec<DemandProfile> = (0..5)
            .map(|i| DemandProfile {
                mrc: mrc.clone(),
                profile: ConsumerProfile {
                    vm_cost_per_hour: Money(1_000_000 + i * 100_000),
                    request_rate: 100.0,
                    current_gb: 1.0,
                    remote_hit_discount: 0.5,
                    increment_gb: 1.0,
                    max_gb: None,
                },
            })
            .collect();
        assert_eq!(consumer_demand(&pop, Money(u64::MAX / 4)), 0.0);
        assert_eq!(consumer_demand(&pop, Money(0)), 5.0 * 7.0);
        let mut last = f64::INFINITY;
        for k in 0..60 {
            let d = consumer_demand(&pop, Money(k * 10_000));
            assert!(d <= last);
            last = d;
        }
    }
}
