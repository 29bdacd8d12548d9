//! Injected time sources.
//!
//! Every operation that depends on time takes its clock from here rather than
//! reading the system time directly, so tests can drive time explicitly.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

/// A source of wall-clock time in unix milliseconds.
pub trait Clock: Send + Sync + std::fmt::Debug {
    fn now_millis(&self) -> u64;

    fn now_secs(&self) -> u64 {
        self.now_millis() / 1000
    }
}

pub type SharedClock = Arc<dyn Clock>;

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_millis(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Manually advanced clock. Cloning shares the underlying time.
#[derive(Debug, Clone, Default)]
pub struct SimClock {
    millis: Arc<AtomicU64>,
}

impl SimClock {
    pub fn at_secs(secs: u64) -> Self {
        let clock = Self::default();
        clock.set_millis(secs * 1000);
        clock
    }

    pub fn set_millis(&self, millis: u64) {
        self.millis.store(millis, Ordering::SeqCst);
    }

    pub fn set_secs(&self, secs: u64) {
        self.set_millis(secs * 1000);
    }

    pub fn advance_millis(&self, delta: u64) {
        self.millis.fetch_add(delta, Ordering::SeqCst);
    }

    pub fn advance_secs(&self, delta: u64) {
        self.advance_millis(delta * 1000);
    }
}

impl Clock for SimClock {
    fn now_millis(&self) -> u64 {
        self.millis.load(Ordering::SeqCst)
    }
}

/// Which clock a binary or scenario runs against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    Simulated,
    Real,
}

impl std::str::FromStr for ClockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simulated" => Ok(ClockMode::Simulated),
            "real" => Ok(ClockMode::Real),
            other => Err(format!("unknown clock mode {other:?} (expected simulated|real)")),
        }
    }
}

/// Waits for a point in time: sleeps against a real clock, jumps a
/// simulated one forward.
#[derive(Debug, Clone)]
pub enum Pacer {
    Real(SharedClock),
    Simulated(SimClock),
}

impl Pacer {
    pub fn for_mode(mode: ClockMode, sim: &SimClock) -> Self {
        match mode {
            ClockMode::Real => Pacer::Real(Arc::new(SystemClock)),
            ClockMode::Simulated => Pacer::Simulated(sim.clone()),
        }
    }

    pub fn clock(&self) -> SharedClock {
        match self {
            Pacer::Real(c) => Arc::clone(c),
            Pacer::Simulated(c) => Arc::new(c.clone()),
        }
    }

    pub fn now_millis(&self) -> u64 {
        match self {
            Pacer::Real(c) => c.now_millis(),
            Pacer::Simulated(c) => c.now_millis(),
        }
    }

    pub fn wait_until(&self, millis: u64) {
        match self {
            Pacer::Real(c) => loop {
                let now = c.now_millis();
                if now >= millis {
                    break;
                }
                std::thread::sleep(std::time::Duration::from_millis(millis - now));
            },
            Pacer::Simulated(c) => {
                if c.now_millis() < millis {
                    c.set_millis(millis);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sim_clock_clones_share_time() {
        let a = SimClock::at_secs(10);
        let b = a.clone();
        b.advance_millis(1500);
        assert_eq!(a.now_millis(), 11_500);
        assert_eq!(a.now_secs(), 11);
    }

    #[test]
    fn pacers_wait() {
        let sim = SimClock::at_secs(5);
        let p = Pacer::Simulated(sim.clone());
        p.wait_until(7_250);
        p.wait_until(6_000);
        assert_eq!(sim.now_millis(), 7_250);
        let real = Pacer::Real(Arc::new(SystemClock));
        let t = real.now_millis();
        real.wait_until(t + 20);
        assert!(real.now_millis() >= t + 20);
    }
}
