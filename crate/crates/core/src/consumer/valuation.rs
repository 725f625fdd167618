//! What extra cache memory is worth to a consumer.
//!
//! The observed hit rate and the cost of running the consumer's VM give a
//! price per hit. The miss ratio curve says how many extra hits another
//! increment of memory buys, so that increment is worth the extra hits times
//! the per-hit price, discounted because a remote hit is slower than a local
//! one.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::Money;

/// Miss ratio as a piecewise-linear function of cache size in GB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissRatioCurve {
    knots: Vec<(f64, f64)>,
}

impl MissRatioCurve {
    /// Knots must have strictly increasing sizes and non-increasing miss
    /// ratios in [0, 1]. A curve not starting at 0 GB is extended flat to 0.
    pub fn new(mut knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::invalid("miss ratio curve needs at least one knot"));
        }
        for (i, &(gb, miss)) in knots.iter().enumerate() {
            if !gb.is_finite() || gb < 0.0 {
                return Err(Error::invalid(format!("knot {i}: size {gb} must be finite and non-negative")));
            }
            if !(0.0..=1.0).contains(&miss) {
                return Err(Error::invalid(format!("knot {i}: miss ratio {miss} outside [0, 1]")));
            }
            if i > 0 {
                let (pg, pm) = knots[i - 1];
                if gb <= pg {
                    return Err(Error::invalid(format!("knot {i}: sizes must strictly increase")));
                }
                if miss > pm {
                    return Err(Error::invalid(format!("knot {i}: miss ratio must not increase")));
                }
            }
        }
        if knots[0].0 > 0.0 {
            let m = knots[0].1;
            knots.insert(0, (0.0, m));
        }
        Ok(MissRatioCurve { knots })
    }

    /// Reads `cache_gb,miss_ratio` rows with a header.
    pub fn from_csv_reader<R: Read>(r: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            cache_gb: f64,
            miss_ratio: f64,
        }
        let mut rdr = csv::Reader::from_reader(r);
        let mut knots = Vec::new();
        for row in rdr.deserialize::<Row>() {
            let row = row?;
            knots.push((row.cache_gb, row.miss_ratio));
        }
        Self::new(knots)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("cache_gb,miss_ratio\n");
        for (g, m) in &self.knots {
            s.push_str(&format!("{g},{m}\n"));
        }
        s
    }

    pub fn max_gb(&self) -> f64 {
        self.knots.last().expect("non-empty").0
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    /// Miss ratio at `gb`; flat beyond the last knot.
    pub fn at(&self, gb: f64) -> f64 {
        let k = &self.knots;
        if gb <= k[0].0 {
            return k[0].1;
        }
        let last = k[k.len() - 1];
        if gb >= last.0 {
            return last.1;
        }
        let i = k.partition_point(|(g, _)| *g <= gb);
        let (g0, m0) = k[i - 1];
        let (g1, m1) = k[i];
        m0 + (m1 - m0) * (gb - g0) / (g1 - g0)
    }

    /// Smallest size at which the curve stops improving.
    pub fn saturation_gb(&self) -> f64 {
        let last = self.knots.last().expect("non-empty").1;
        self.knots
            .iter()
            .find(|(_, m)| *m <= last)
            .map_or(0.0, |(g, _)| *g)
    }
}

/// Hourly value of `extra_gb` on top of `current_gb`, floored to a
/// micro-cent.
pub fn value_of_memory(
    mrc: &MissRatioCurve,
    current_gb: f64,
    extra_gb: f64,
    vm_cost_per_hour: Money,
    request_rate: f64,
    remote_hit_discount: f64,
) -> Money {
    let requests_per_hour = request_rate * 3600.0;
    let hits_per_hour = requests_per_hour * (1.0 - mrc.at(current_gb));
    if hits_per_hour <= 0.0 || !hits_per_hour.is_finite() {
        return Money::ZERO;
    }
    let price_per_hit = vm_cost_per_hour.0 as f64 / hits_per_hour;
    let extra_hits = requests_per_hour * (mrc.at(current_gb) - mrc.at(current_gb + extra_gb));
    let v = remote_hit_discount * price_per_hit * extra_hits;
    Money(v.max(0.0).floor() as u64)
}

/// Everything a consumer knows when deciding how much to lease.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumerProfile {
    pub vm_cost_per_hour: Money,
    pub request_rate: f64,
    pub current_gb: f64,
    pub remote_hit_discount: f64,
    /// Purchase granularity, normally one slab.
    pub increment_gb: f64,
    /// Upper bound on what the consumer will take, if any.
    pub max_gb: Option<f64>,
}

/// Largest multiple of `increment_gb` such that every increment up to it is
/// worth at least its price and actually reduces misses.
pub fn purchase_decision(mrc: &MissRatioCurve, market_price: Money, params: &ConsumerProfile) -> f64 {
    let inc = params.increment_gb;
    if inc <= 0.0 {
        return 0.0;
    }
    let requests_per_hour = params.request_rate * 3600.0;
    let hits_per_hour = requests_per_hour * (1.0 - mrc.at(params.current_gb));
    if hits_per_hour <= 0.0 || !hits_per_hour.is_finite() {
        return 0.0;
    }
    let price_per_hit = params.vm_cost_per_hour.0 as f64 / hits_per_hour;
    let increment_cost = market_price.0 as f64 * inc;
    let cap = params
        .max_gb
        .unwrap_or(f64::INFINITY)
        .min(mrc.max_gb() - params.current_gb)
        .max(0.0);
    let mut bought = 0.0;
    loop {
        let next = bought + inc;
        if next > cap + 1e-9 {
            break;
        }
        let from = params.current_gb + bought;
        let gain = mrc.at(from) - mrc.at(from + inc);
        if gain <= 0.0 {
            break;
        }
        let marginal = (params.remote_hit_discount * price_per_hit * requests_per_hour * gain)
            .max(0.0)
            .floor();
        if marginal < increment_cost {
            break;
        }
        bought = next;
    }
    bought
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mrc() -> MissRatioCurve {
        MissRatioCurve::new(vec![(0.0, 0.9), (1.0, 0.5), (2.0, 0.3), (4.0, 0.2), (8.0, 0.2)]).unwrap()
    }

    fn profile(current_gb: f64) -> ConsumerProfile {
        ConsumerProfile {
            vm_cost_per_hour: Money(1_000_000),
            request_rate: 100.0,
            current_gb,
            remote_hit_discount: 0.5,
            increment_gb: 1.0,
            max_gb: None,
        }
    }

    #[test]
    fn interpolation() {
        let m = mrc();
        assert_eq!(m.at(0.5), 0.7);
        assert_eq!(m.at(3.0), 0.25);
        assert_eq!(m.at(100.0), 0.2);
        assert_eq!(m.saturation_gb(), 4.0);
    }

    #[test]
    fn rejects_bad_curves() {
        assert!(MissRatioCurve::new(vec![]).is_err());
        assert!(MissRatioCurve::new(vec![(0.0, 0.5), (1.0, 0.6)]).is_err());
        assert!(MissRatioCurve::new(vec![(1.0, 0.5), (1.0, 0.4)]).is_err());
        assert!(MissRatioCurve::new(vec![(0.0, 1.5)]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = mrc();
        let back = MissRatioCurve::from_csv_reader(m.to_csv().as_bytes()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn flat_curve_has_no_value() {
        let flat = MissRatioCurve::new(vec![(0.0, 0.4), (10.0, 0.4)]).unwrap();
        assert_eq!(value_of_memory(&flat, 1.0, 2.0, Money(1_000_000), 50.0, 1.0), Money::ZERO);
    }

    #[test]
    fn value_formula() {
        // miss 0.5 -> 0.3 over one extra GB at 1 GB
        let m = mrc();
        let rate = 100.0;
        let vm = Money(1_000_000);
        let pph = vm.0 as f64 / (rate * 3600.0 * 0.5);
        let expect = (0.5 * pph * (0.2 * rate * 3600.0)).floor() as u64;
        assert_eq!(value_of_memory(&m, 1.0, 1.0, vm, rate, 0.5), Money(expect));
        assert_eq!(expect, 200_000);
        assert_eq!(value_of_memory(&m, 1.0, 1.0, vm, rate, 0.0), Money::ZERO);
    }

    #[test]
    fn zero_hit_rate_is_worthless() {
        let all_miss = MissRatioCurve::new(vec![(0.0, 1.0), (2.0, 0.5)]).unwrap();
        assert_eq!(value_of_memory(&all_miss, 0.0, 1.0, Money(1000), 10.0, 1.0), Money::ZERO);
        assert_eq!(value_of_memory(&mrc(), 0.0, 1.0, Money(1000), 0.0, 1.0), Money::ZERO);
    }

    #[test]
    fn purchase_examples() {
        let m = mrc();
        let p = profile(1.0);
        // first increment 1 -> 2 GB is worth 200_000 µ¢/h
        assert_eq!(purchase_decision(&m, Money(200_001), &p), 0.0);
        assert_eq!(purchase_decision(&m, Money(200_000), &p), 1.0);
        // free memory saturates at the flat tail (4 GB total)
        assert_eq!(purchase_decision(&m, Money(0), &p), 3.0);
    }

    #[test]
    fn demand_non_increasing_in_price() {
        let m = mrc();
        let p = profile(0.5);
        let mut last = f64::INFINITY;
        for i in 0..50 {
            let g = purchase_decision(&m, Money(i * 20_000), &p);
            assert!(g <= last);
            last = g;
        }
    }

    #[test]
    fn demand_non_decreasing_in_discount() {
        let m = mrc();
        let mut last = 0.0;
        for i in 0..=10 {
            let mut p = profile(0.0);
            p.remote_hit_discount = i as f64 / 10.0;
            let g = purchase_decision(&m, Money(150_000), &p);
            assert!(g >= last);
            last = g;
        }
    }

    #[test]
    fn purchase_respects_cap() {
        let mut p = profile(0.0);
        p.max_gb = Some(2.0);
        assert_eq!(purchase_decision(&mrc(), Money(0), &p), 2.0);
    }
}
