use std::collections::{BTreeMap, HashMap};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::EndpointClass;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketSpec {
    pub capacity: u32,
    pub refill_per_second: f64,
}

/// Per-class bucket sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RateTable(pub BTreeMap<EndpointClass, BucketSpec>);

impl Default for RateTable {
    fn default() -> Self {
        let spec = |capacity, refill_per_second| BucketSpec { capacity, refill_per_second };
        RateTable(
            [
                (EndpointClass::Read, spec(100, 50.0)),
                (EndpointClass::Submit, spec(10, 1.0)),
                (EndpointClass::Admin, spec(20, 5.0)),
                (EndpointClass::StreamProvision, spec(10, 1.0)),
            ]
            .into_iter()
            .collect(),
        )
    }
}

impl RateTable {
    pub fn spec(&self, class: EndpointClass) -> BucketSpec {
        self.0.get(&class).copied().unwrap_or_else(|| RateTable::default().0[&class])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateBucket {
    pub capacity: u32,
    pub level: f64,
    pub refill_rate: f64,
    pub last_update: u64,
}

impl RateBucket {
    pub fn full(spec: BucketSpec, now_millis: u64) -> Self {
        RateBucket { capacity: spec.capacity, level: spec.capacity as f64, refill_rate: spec.refill_per_second, last_update: now_millis }
    }

    /// Refills for the time elapsed since the last update, then takes
    /// `cost` tokens if there are enough. A clock that moves backwards
    /// refills nothing.
    pub fn check(&mut self, cost: u32, now_millis: u64) -> bool {
        let dt = now_millis.saturating_sub(self.last_update) as f64 / 1000.0;
        self.level = (self.level + self.refill_rate * dt).min(self.capacity as f64);
        self.last_update = self.last_update.max(now_millis);
        let cost = cost.max(1) as f64;
        if self.level >= cost {
            self.level -= cost;
            true
        } else {
            false
        }
    }
}

pub type BucketKey = (String, EndpointClass);

/// Thread-safe store of buckets, created full on first use.
#[derive(Debug, Default)]
pub struct BucketStore {
    table: RateTable,
    buckets: Mutex<HashMap<BucketKey, RateBucket>>,
}

impl BucketStore {
    pub fn new(table: RateTable) -> Self {
        BucketStore { table, buckets: Mutex::new(HashMap::new()) }
    }

    pub fn table(&self) -> &RateTable {
        &self.table
    }

    pub fn rate_limit_check(&self, key: &BucketKey, cost: u32, now_millis: u64) -> bool {
        let mut buckets = self.buckets.lock();
        let bucket = buckets
            .entry(key.clone())
            .or_insert_with(|| RateBucket::full(self.table.spec(key.1), now_millis));
        bucket.check(cost, now_millis)
    }

    pub fn bucket(&self, key: &BucketKey) -> Option<RateBucket> {
        self.buckets.lock().get(key).cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store() -> (BucketStore, BucketKey) {
        let mut t = RateTable::default();
        t.0.insert(EndpointClass::Submit, BucketSpec { capacity: 10, refill_per_second: 1.0 });
        (BucketStore::new(t), ("alice".into(), EndpointClass::Submit))
    }

    #[test]
    fn examples() {
        let (s, k) = store();
        for _ in 0..10 {
            assert!(s.rate_limit_check(&k, 1, 5_000));
        }
        assert_eq!(s.bucket(&k).unwrap().level, 0.0);
        assert!(!s.rate_limit_check(&k, 1, 5_000));
        assert!(s.rate_limit_check(&k, 1, 6_000));
        assert!(!s.rate_limit_check(&k, 1, 6_000));
        // Keys are independent.
        assert!(s.rate_limit_check(&("bob".into(), EndpointClass::Submit), 1, 6_000));
    }

    proptest! {
        #[test]
        fn conservation(gaps in proptest::collection::vec(0u64..400, 1..300), cap in 1u32..20, rate in 0.5f64..20.0) {
            let mut b = RateBucket::full(BucketSpec { capacity: cap, refill_per_second: rate }, 0);
            let mut now = 0;
            let mut allowed: Vec<u64> = Vec::new();
            for g in gaps {
                now += g;
                if b.check(1, now) {
                    allowed.push(now);
                }
                prop_assert!(b.level >= 0.0 && b.level <= cap as f64);
            }
            // Over any window [t, t + w], allowed <= capacity + rate * w.
            for (i, &t0) in allowed.iter().enumerate() {
                for (j, &t1) in allowed.iter().enumerate().skip(i) {
                    let w = (t1 - t0) as f64 / 1000.0;
                    prop_assert!((j - i + 1) as f64 <= cap as f64 + rate * w + 1e-9);
                }
            }
        }
    }
}
