//! JSONL workload traces and action logs.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{JobSpec, LoggedAction, ReservationWindow, SchedError, Scheduler, SchedulerConfig};

/// One line of a workload trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub submit_time: u64,
    #[serde(flatten)]
    pub job: JobSpec,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(reader: impl BufRead) -> std::io::Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", n + 1))
        })?;
        out.push(item);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(mut w: impl Write, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace(reader: impl BufRead) -> std::io::Result<Vec<TraceEntry>> {
    read_jsonl(reader)
}

pub fn write_trace(w: impl Write, entries: &[TraceEntry]) -> std::io::Result<()> {
    write_jsonl(w, entries)
}

pub fn read_action_log(reader: impl BufRead) -> std::io::Result<Vec<LoggedAction>> {
    read_jsonl(reader)
}

pub fn write_action_log(w: impl Write, log: &[LoggedAction]) -> std::io::Result<()> {
    write_jsonl(w, log)
}

/// Replays a trace on a fresh scheduler from `origin` through `until`,
/// submitting each entry just before the step at its submit time.
pub fn replay(
    config: SchedulerConfig,
    origin: u64,
    trace: &[TraceEntry],
    windows: &[ReservationWindow],
    until: u64,
) -> Result<Scheduler, SchedError> {
    let mut sched = Scheduler::new(config, origin)?;
    for w in windows {
        sched.add_window(w.clone())?;
    }
    let mut sorted: Vec<&TraceEntry> = trace.iter().collect();
    sorted.sort_by_key(|e| e.submit_time);
    let mut next = 0;
    for t in origin..=until {
        while next < sorted.len() && sorted[next].submit_time <= t {
            sched.submit(sorted[next].job.clone(), t)?;
            next += 1;
        }
        sched.schedule_step(t)?;
    }
    Ok(sched)
}
