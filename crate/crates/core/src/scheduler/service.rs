//! Runs a [`Scheduler`] on its own thread behind a message-passing handle.
//!
//! Each command first advances the scheduler to the clock's current second,
//! so a simulated clock drives it exactly and a real clock catches up
//! lazily (plus a once-per-second idle tick).

use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::auth::Claims;
use crate::clock::SharedClock;

use super::*;

type Command = Box<dyn FnOnce(&mut Scheduler) + Send>;

#[derive(Debug, Clone)]
pub struct SchedulerHandle {
    tx: mpsc::Sender<Command>,
}

/// Owns the scheduler thread. The thread exits once every handle is gone.
pub struct SchedulerService {
    handle: SchedulerHandle,
    _thread: JoinHandle<()>,
}

impl std::fmt::Debug for SchedulerService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SchedulerService").finish_non_exhaustive()
    }
}

fn catch_up(sched: &mut Scheduler, clock: &SharedClock) {
    let now = clock.now_secs();
    if sched.last_step().map_or(true, |last| now > last) {
        if let Err(e) = sched.run_until(now) {
            log::warn!("scheduler catch-up failed: {e}");
        }
    }
}

impl SchedulerService {
    pub fn spawn(config: SchedulerConfig, clock: SharedClock) -> Result<Self, SchedError> {
        let mut sched = Scheduler::new(config, clock.now_secs())?;
        let (tx, rx) = mpsc::channel::<Command>();
        let thread = thread::Builder::new()
            .name("scheduler".into())
            .spawn(move || loop {
                match rx.recv_timeout(Duration::from_secs(1)) {
                    Ok(cmd) => {
                        catch_up(&mut sched, &clock);
                        cmd(&mut sched);
                    }
                    Err(RecvTimeoutError::Timeout) => catch_up(&mut sched, &clock),
                    Err(RecvTimeoutError::Disconnected) => break,
                }
            })
            .map_err(|_| SchedError::Unavailable)?;
        Ok(SchedulerService { handle: SchedulerHandle { tx }, _thread: thread })
    }

    pub fn handle(&self) -> SchedulerHandle {
        self.handle.clone()
    }
}

fn owns_or_admin(job: &JobInfo, claims: &Claims) -> bool {
    claims.is_admin() || job.spec.project == claims.project
}

impl SchedulerHandle {
    /// Runs `f` on the scheduler thread and waits for its result.
    pub fn call<R: Send + 'static>(&self, f: impl FnOnce(&mut Scheduler) -> R + Send + 'static) -> Result<R, SchedError> {
        let (reply_tx, reply_rx) = mpsc::sync_channel(1);
        self.tx
            .send(Box::new(move |s: &mut Scheduler| {
                let _ = reply_tx.send(f(s));
            }))
            .map_err(|_| SchedError::Unavailable)?;
        reply_rx.recv().map_err(|_| SchedError::Unavailable)
    }

    /// Advances the scheduler to the current clock time.
    pub fn sync(&self) -> Result<u64, SchedError> {
        self.call(|s| s.now())
    }

    pub fn submit_job(&self, mut spec: JobSpec, claims: &Claims) -> Result<JobId, SchedError> {
        if spec.project.is_empty() {
            spec.project = claims.project.clone();
        }
        if spec.project != claims.project {
            return Err(SchedError::Forbidden(format!("token is for project {}", claims.project)));
        }
        spec.subject = claims.subject.clone();
        self.call(move |s| {
            let now = s.now();
            s.submit(spec, now)
        })?
    }

    pub fn submit_workflow(&self, mut jobs: Vec<WorkflowJob>, claims: &Claims) -> Result<Vec<JobId>, SchedError> {
        for j in &mut jobs {
            if j.spec.project.is_empty() {
                j.spec.project = claims.project.clone();
            }
            if j.spec.project != claims.project {
                return Err(SchedError::Forbidden(format!("token is for project {}", claims.project)));
            }
            j.spec.subject = claims.subject.clone();
        }
        self.call(move |s| {
            let now = s.now();
            s.submit_workflow(jobs, now)
        })?
    }

    pub fn job(&self, id: JobId, claims: &Claims) -> Result<JobInfo, SchedError> {
        let info = self.call(move |s| s.job(id))?.ok_or(SchedError::UnknownJob(id.0))?;
        if !owns_or_admin(&info, claims) {
            return Err(SchedError::Forbidden("job belongs to another project".into()));
        }
        Ok(info)
    }

    pub fn cancel_job(&self, id: JobId, claims: &Claims) -> Result<Vec<JobId>, SchedError> {
        self.job(id, claims)?;
        self.call(move |s| {
            let now = s.now();
            s.cancel(id, now)
        })?
    }

    pub fn add_reservation(&self, window: ReservationWindow, claims: &Claims) -> Result<ReservationWindow, SchedError> {
        if !claims.is_admin() {
            return Err(SchedError::Forbidden("reservations need admin scope".into()));
        }
        self.call(move |s| s.add_window(window))?
    }

    pub fn list_reservations(&self) -> Result<Vec<ReservationListing>, SchedError> {
        self.call(|s| {
            let now = s.now();
            s.list_reservations(now)
        })
    }

    pub fn metrics(&self) -> Result<Metrics, SchedError> {
        self.call(|s| s.metrics())
    }

    pub fn action_log(&self) -> Result<Vec<LoggedAction>, SchedError> {
        self.call(|s| s.action_log().to_vec())
    }

    pub fn node_count(&self) -> Result<u32, SchedError> {
        self.call(|s| s.config().node_count)
    }
}
