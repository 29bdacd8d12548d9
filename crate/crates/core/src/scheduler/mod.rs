//! QoS-tiered preemptive scheduling with reservation windows.
//!
//! Jobs request a tier (`batch`, `interactive`, `urgent`) that their project
//! must be entitled to. Higher tiers may preempt lower ones: victims get a
//! warning, are killed after their grace period, and requeue from scratch.
//! A reservation window raises one project's jobs to a higher tier for a
//! scheduled period, up to a node cap, instead of idling nodes for it.

mod service;
mod sim;
mod trace;
mod types;
#[cfg(test)]
mod tests;
pub mod victims;
pub mod workload;

pub use service::{SchedulerHandle, SchedulerService};
pub use sim::{effective_priority, elevated_tier, Scheduler, SchedulerConfig};
pub use trace::{read_action_log, read_trace, replay, write_action_log, write_trace, TraceEntry};
pub use types::*;
pub use victims::select_victims;
