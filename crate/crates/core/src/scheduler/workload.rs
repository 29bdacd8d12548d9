//! Seeded synthetic workloads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::{JobSpec, Tier, TraceEntry};

/// Poisson arrivals with uniformly distributed walltime and node count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonWorkload {
    pub project: String,
    pub tier: Tier,
    pub mean_interarrival_seconds: f64,
    pub walltime_range: (u64, u64),
    pub nodes_range: (u32, u32),
    pub start: u64,
    pub end: u64,
    pub seed: u64,
}

impl PoissonWorkload {
    pub fn generate(&self) -> Vec<TraceEntry> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let exp = Exp::new(1.0 / self.mean_interarrival_seconds).expect("positive rate");
        let mut t = self.start as f64;
        let mut out = Vec::new();
        loop {
            t += exp.sample(&mut rng);
            let submit = t.floor() as u64;
            if submit >= self.end {
                break;
            }
            out.push(TraceEntry {
                submit_time: submit,
                job: JobSpec {
                    project: self.project.clone(),
                    subject: format!("{}-user", self.project),
                    nodes_requested: rng.gen_range(self.nodes_range.0..=self.nodes_range.1),
                    walltime_seconds: rng.gen_range(self.walltime_range.0..=self.walltime_range.1),
                    qos_requested: self.tier,
                    depends_on: Vec::new(),
                    name: None,
                },
            });
        }
        out
    }
}
