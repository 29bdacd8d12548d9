//! Discrete-time scheduler over a homogeneous, exclusively allocated cluster.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::victims::{select_victims, Candidate};
use super::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub node_count: u32,
    #[serde(default)]
    pub tiers: TierTable,
    #[serde(default)]
    pub entitlements: Entitlements,
}

impl SchedulerConfig {
    pub fn new(node_count: u32) -> Self {
        SchedulerConfig { node_count, tiers: TierTable::default(), entitlements: Entitlements::default() }
    }

    pub fn with_entitlements(mut self, entitlements: Entitlements) -> Self {
        self.entitlements = entitlements;
        self
    }

    pub fn validate(&self) -> Result<(), SchedError> {
        if self.node_count == 0 {
            return Err(SchedError::InvalidConfig("node_count must be positive".into()));
        }
        self.tiers.validate()
    }
}

#[derive(Debug, Clone)]
struct Job {
    id: JobId,
    spec: JobSpec,
    submit_time: u64,
    phase: Phase,
    nodes: Vec<u32>,
    started_at: Option<u64>,
    first_started_at: Option<u64>,
    ended_at: Option<u64>,
    preempt_count: u32,
    /// Running (or about to run) on a reservation-window elevation.
    elevated: bool,
    /// Victim of a pending preemption.
    warned: bool,
}

impl Job {
    fn info(&self, now: u64) -> JobInfo {
        let remaining = match (self.phase, self.started_at) {
            (Phase::Completed, _) => 0,
            (Phase::Running, Some(s)) => self.spec.walltime_seconds.saturating_sub(now.saturating_sub(s)),
            _ => self.spec.walltime_seconds,
        };
        JobInfo {
            job_id: self.id,
            spec: self.spec.clone(),
            submit_time: self.submit_time,
            first_started_at: self.first_started_at,
            state: JobState {
                phase: self.phase,
                assigned_nodes: self.nodes.clone(),
                started_at: self.started_at,
                ended_at: self.ended_at,
                remaining_seconds: remaining,
                preempt_count: self.preempt_count,
            },
        }
    }
}

#[derive(Debug, Clone)]
struct Preemption {
    requester: JobId,
    victims: Vec<JobId>,
    kill_at: u64,
}

/// The scheduler state machine. Drive it with [`Scheduler::schedule_step`]
/// once per second, or with [`Scheduler::run_until`].
#[derive(Debug, Clone)]
pub struct Scheduler {
    config: SchedulerConfig,
    nodes: Vec<Option<JobId>>,
    jobs: BTreeMap<JobId, Job>,
    next_job: u64,
    next_window: u64,
    preemptions: VecDeque<Preemption>,
    windows: Vec<ReservationWindow>,
    hard: Vec<HardReservation>,
    origin: u64,
    last_step: Option<u64>,
    busy_node_seconds: u64,
    lost_node_seconds: u64,
    preemption_count: u64,
    log: Vec<LoggedAction>,
}

impl Scheduler {
    /// A scheduler whose clock starts at `origin`; the first step may be
    /// taken at any time `>= origin`.
    pub fn new(config: SchedulerConfig, origin: u64) -> Result<Self, SchedError> {
        config.validate()?;
        Ok(Scheduler {
            nodes: vec![None; config.node_count as usize],
            config,
            jobs: BTreeMap::new(),
            next_job: 1,
            next_window: 1,
            preemptions: VecDeque::new(),
            windows: Vec::new(),
            hard: Vec::new(),
            origin,
            last_step: None,
            busy_node_seconds: 0,
            lost_node_seconds: 0,
            preemption_count: 0,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    /// Time of the last processed step (or the origin before any step).
    pub fn now(&self) -> u64 {
        self.last_step.unwrap_or(self.origin)
    }

    pub fn last_step(&self) -> Option<u64> {
        self.last_step
    }

    pub fn action_log(&self) -> &[LoggedAction] {
        &self.log
    }

    fn validate_spec(&self, spec: &JobSpec) -> Result<(), SchedError> {
        if spec.nodes_requested == 0 {
            return Err(SchedError::InvalidJob("nodes_requested must be positive".into()));
        }
        if spec.walltime_seconds == 0 {
            return Err(SchedError::InvalidJob("walltime_seconds must be positive".into()));
        }
        if spec.nodes_requested > self.config.node_count {
            return Err(SchedError::NodesExceedCluster {
                requested: spec.nodes_requested,
                available: self.config.node_count,
            });
        }
        if !self.config.entitlements.allows(&spec.project, spec.qos_requested) {
            return Err(SchedError::QosNotEntitled { project: spec.project.clone(), tier: spec.qos_requested });
        }
        for dep in &spec.depends_on {
            if !self.jobs.contains_key(dep) {
                return Err(SchedError::DependencyUnknown(format!("job {dep}")));
            }
        }
        Ok(())
    }

    fn insert(&mut self, spec: JobSpec, submit_time: u64) -> JobId {
        let id = JobId(self.next_job);
        self.next_job += 1;
        self.jobs.insert(
            id,
            Job {
                id,
                spec,
                submit_time,
                phase: Phase::Pending,
                nodes: Vec::new(),
                started_at: None,
                first_started_at: None,
                ended_at: None,
                preempt_count: 0,
                elevated: false,
                warned: false,
            },
        );
        id
    }

    /// Queues a job. It is considered from the first step at or after
    /// `submit_time` that has not yet run.
    pub fn submit(&mut self, spec: JobSpec, submit_time: u64) -> Result<JobId, SchedError> {
        self.validate_spec(&spec)?;
        Ok(self.insert(spec, submit_time))
    }

    /// Queues a set of jobs whose `after` edges refer to each other by key.
    /// Returns ids in input order.
    pub fn submit_workflow(&mut self, jobs: Vec<WorkflowJob>, submit_time: u64) -> Result<Vec<JobId>, SchedError> {
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for (i, j) in jobs.iter().enumerate() {
            if index.insert(j.key.clone(), i).is_some() {
                return Err(SchedError::InvalidJob(format!("duplicate workflow key {:?}", j.key)));
            }
        }
        for j in &jobs {
            self.validate_spec(&j.spec)?;
            for a in &j.after {
                if !index.contains_key(a.as_str()) {
                    return Err(SchedError::DependencyUnknown(format!("workflow key {a:?}")));
                }
            }
        }
        // Kahn's algorithm; anything left over sits on a cycle.
        let mut indegree: Vec<usize> = jobs.iter().map(|j| j.after.len()).collect();
        let mut ready: VecDeque<usize> = (0..jobs.len()).filter(|&i| indegree[i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = ready.pop_front() {
            seen += 1;
            for (k, j) in jobs.iter().enumerate() {
                if j.after.iter().any(|a| index[a.as_str()] == i) {
                    indegree[k] -= j.after.iter().filter(|a| index[a.as_str()] == i).count();
                    if indegree[k] == 0 {
                        ready.push_back(k);
                    }
                }
            }
        }
        if seen != jobs.len() {
            let stuck: Vec<&str> = (0..jobs.len()).filter(|&i| indegree[i] > 0).map(|i| jobs[i].key.as_str()).collect();
            return Err(SchedError::CycleDetected(stuck.join(",")));
        }

        let first = self.next_job;
        let ids: Vec<JobId> = (0..jobs.len() as u64).map(|i| JobId(first + i)).collect();
        for j in jobs {
            let mut spec = j.spec;
            spec.depends_on.extend(j.after.iter().map(|a| ids[index[a.as_str()]]));
            spec.depends_on.sort();
            spec.depends_on.dedup();
            self.insert(spec, submit_time);
        }
        Ok(ids)
    }

    pub fn job(&self, id: JobId) -> Option<JobInfo> {
        self.jobs.get(&id).map(|j| j.info(self.now()))
    }

    pub fn jobs(&self) -> impl Iterator<Item = JobInfo> + '_ {
        let now = self.now();
        self.jobs.values().map(move |j| j.info(now))
    }

    /// Cancels a job and, transitively, every job waiting on it.
    pub fn cancel(&mut self, id: JobId, now: u64) -> Result<Vec<JobId>, SchedError> {
        let job = self.jobs.get(&id).ok_or(SchedError::UnknownJob(id.0))?;
        if matches!(job.phase, Phase::Completed | Phase::Cancelled) {
            return Ok(Vec::new());
        }
        let mut cancelled = Vec::new();
        let mut stack = vec![id];
        while let Some(j) = stack.pop() {
            let job = self.jobs.get_mut(&j).expect("known job");
            if matches!(job.phase, Phase::Completed | Phase::Cancelled) {
                continue;
            }
            if job.phase == Phase::Running {
                for n in job.nodes.drain(..) {
                    self.nodes[n as usize] = None;
                }
            }
            job.phase = Phase::Cancelled;
            job.ended_at = Some(now);
            job.warned = false;
            cancelled.push(j);
            self.log.push(LoggedAction { t: now, action: Action::Cancel { job: j } });
            stack.extend(self.jobs.values().filter(|d| d.spec.depends_on.contains(&j)).map(|d| d.id));
        }
        // Drop preemptions whose requester went away; release their victims.
        let mut kept = VecDeque::new();
        while let Some(p) = self.preemptions.pop_front() {
            if cancelled.contains(&p.requester) {
                for v in &p.victims {
                    if let Some(vj) = self.jobs.get_mut(v) {
                        vj.warned = false;
                    }
                }
            } else {
                kept.push_back(p);
            }
        }
        self.preemptions = kept;
        Ok(cancelled)
    }

    pub fn add_window(&mut self, mut window: ReservationWindow) -> Result<ReservationWindow, SchedError> {
        if window.start >= window.end {
            return Err(SchedError::InvalidWindow("start must precede end".into()));
        }
        if window.node_cap == 0 || window.node_cap > self.config.node_count {
            return Err(SchedError::InvalidWindow(format!(
                "node_cap {} outside 1..={}",
                window.node_cap, self.config.node_count
            )));
        }
        window.window_id = self.next_window;
        self.next_window += 1;
        self.windows.push(window.clone());
        Ok(window)
    }

    pub fn add_hard_reservation(&mut self, r: HardReservation) -> Result<(), SchedError> {
        if r.start >= r.end || r.nodes == 0 || r.nodes > self.config.node_count {
            return Err(SchedError::InvalidWindow("bad hard reservation".into()));
        }
        self.hard.push(r);
        Ok(())
    }

    /// Windows that have not ended yet, in id order.
    pub fn list_reservations(&self, now: u64) -> Vec<ReservationListing> {
        self.windows
            .iter()
            .filter(|w| now < w.end)
            .map(|w| {
                let overlapping: u64 = self
                    .windows
                    .iter()
                    .filter(|o| o.project != w.project && o.start < w.end && w.start < o.end)
                    .map(|o| o.node_cap as u64)
                    .sum();
                ReservationListing {
                    window: w.clone(),
                    active: w.active_at(now),
                    overcommitted: overlapping > 0 && overlapping + w.node_cap as u64 > self.config.node_count as u64,
                }
            })
            .collect()
    }

    /// The window giving `project` its highest elevation at `now`.
    fn best_window(&self, project: &str, now: u64) -> Option<&ReservationWindow> {
        self.windows
            .iter()
            .filter(|w| w.project == project && w.active_at(now))
            .max_by_key(|w| (self.config.tiers.priority(w.elevated_tier), w.node_cap))
    }

    /// Nodes a project currently holds through elevation, counting jobs
    /// that are waiting for their preemption victims to drain.
    fn elevated_usage(&self, project: &str, now: u64) -> u32 {
        if self.best_window(project, now).is_none() {
            return 0;
        }
        let waiting: BTreeSet<JobId> = self.preemptions.iter().map(|p| p.requester).collect();
        self.jobs
            .values()
            .filter(|j| j.spec.project == project && j.elevated)
            .filter(|j| j.phase == Phase::Running || waiting.contains(&j.id))
            .map(|j| j.spec.nodes_requested)
            .sum()
    }

    /// Effective tier and priority of a job at `now`.
    pub fn effective_priority(&self, id: JobId, now: u64) -> Option<(Tier, u32)> {
        let job = self.jobs.get(&id)?;
        let tier = self.effective_tier(job, now);
        Some((tier, self.config.tiers.priority(tier)))
    }

    fn effective_tier(&self, job: &Job, now: u64) -> Tier {
        let requested = job.spec.qos_requested;
        let Some(w) = self.best_window(&job.spec.project, now) else {
            return requested;
        };
        let waiting = self.preemptions.iter().any(|p| p.requester == job.id);
        if job.phase == Phase::Running || waiting {
            return if job.elevated { requested.max(w.elevated_tier) } else { requested };
        }
        let usage = self.elevated_usage(&job.spec.project, now);
        elevated_tier(requested, job.spec.nodes_requested, usage, w, &self.config.tiers)
    }

    fn free_count(&self) -> u32 {
        self.nodes.iter().filter(|n| n.is_none()).count() as u32
    }

    /// Free nodes promised to jobs waiting on preemptions.
    fn held_count(&self) -> u32 {
        self.preemptions
            .iter()
            .map(|p| {
                let need = self.jobs[&p.requester].spec.nodes_requested;
                let supplied: u32 = p
                    .victims
                    .iter()
                    .filter_map(|v| self.jobs.get(v))
                    .filter(|v| v.phase == Phase::Running)
                    .map(|v| v.spec.nodes_requested)
                    .sum();
                need.saturating_sub(supplied)
            })
            .sum()
    }

    /// Hard reservations: may `job` start now without eating into nodes
    /// withheld for another project?
    fn hard_reservation_allows(&self, job: &Job, now: u64) -> bool {
        let end = now + job.spec.walltime_seconds;
        self.hard.iter().all(|r| {
            if r.project == job.spec.project || end <= r.start || r.end <= now {
                return true;
            }
            let others: u32 = self
                .jobs
                .values()
                .filter(|j| j.phase == Phase::Running && j.spec.project != r.project)
                .filter(|j| {
                    let s = j.started_at.unwrap_or(now);
                    s + j.spec.walltime_seconds > r.start && s < r.end
                })
                .map(|j| j.spec.nodes_requested)
                .sum();
            others + job.spec.nodes_requested <= self.config.node_count - r.nodes
        })
    }

    fn dependencies_done(&self, job: &Job) -> bool {
        job.spec.depends_on.iter().all(|d| self.jobs.get(d).is_some_and(|j| j.phase == Phase::Completed))
    }

    fn start(&mut self, id: JobId, now: u64, elevated: bool, out: &mut Vec<Action>) {
        let need = self.jobs[&id].spec.nodes_requested as usize;
        let assigned: Vec<u32> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.is_none())
            .take(need)
            .map(|(i, _)| i as u32)
            .collect();
        debug_assert_eq!(assigned.len(), need);
        for &n in &assigned {
            self.nodes[n as usize] = Some(id);
        }
        let job = self.jobs.get_mut(&id).expect("known job");
        job.phase = Phase::Running;
        job.started_at = Some(now);
        job.first_started_at.get_or_insert(now);
        job.nodes = assigned.clone();
        job.elevated = elevated;
        out.push(Action::Start { job: id, nodes: assigned });
    }

    fn kill(&mut self, id: JobId, now: u64, out: &mut Vec<Action>) {
        let job = self.jobs.get_mut(&id).expect("known job");
        let started = job.started_at.expect("running job has a start");
        self.lost_node_seconds += job.spec.nodes_requested as u64 * (now - started);
        for n in job.nodes.drain(..) {
            self.nodes[n as usize] = None;
        }
        // Restart from scratch: the job goes back to the queue with its
        // original submit time and full walltime.
        job.phase = Phase::Pending;
        job.started_at = None;
        job.preempt_count += 1;
        job.warned = false;
        job.elevated = false;
        self.preemption_count += 1;
        out.push(Action::Kill { job: id });
        out.push(Action::Requeue { job: id });
    }

    fn execute_preemption(&mut self, p: Preemption, now: u64, out: &mut Vec<Action>) {
        for v in &p.victims {
            if self.jobs[v].phase == Phase::Running {
                self.kill(*v, now, out);
            }
        }
        let requester = &self.jobs[&p.requester];
        // `p` is already off the queue, so this only subtracts other holds.
        let free = self.free_count().saturating_sub(self.held_count());
        if requester.phase == Phase::Pending && requester.spec.nodes_requested <= free {
            let elevated = requester.elevated;
            self.start(p.requester, now, elevated, out);
        } else if let Some(r) = self.jobs.get_mut(&p.requester) {
            r.elevated = false;
        }
    }

    /// Processes one tick. Order: completions, due kills (and the starts
    /// they make room for), then pending jobs by (priority desc, submit time
    /// asc, id asc), each started on free nodes or, if its tier allows,
    /// given a victim set to warn.
    pub fn schedule_step(&mut self, now: u64) -> Result<Vec<Action>, SchedError> {
        if now < self.origin {
            return Err(SchedError::ClockRegression { now, last: self.origin });
        }
        if let Some(last) = self.last_step {
            if now <= last {
                return Err(SchedError::ClockRegression { now, last });
            }
            self.busy_node_seconds += self.busy_nodes() as u64 * (now - last);
        } else {
            self.busy_node_seconds += self.busy_nodes() as u64 * (now - self.origin);
        }
        self.last_step = Some(now);
        let mut out = Vec::new();

        // (a) completions
        let done: Vec<JobId> = self
            .jobs
            .values()
            .filter(|j| j.phase == Phase::Running)
            .filter(|j| j.started_at.expect("running") + j.spec.walltime_seconds <= now)
            .map(|j| j.id)
            .collect();
        for id in done {
            let job = self.jobs.get_mut(&id).expect("known job");
            for n in job.nodes.drain(..) {
                self.nodes[n as usize] = None;
            }
            job.phase = Phase::Completed;
            job.ended_at = Some(now);
            job.warned = false;
            out.push(Action::Complete { job: id });
        }

        // (b) preemptions whose grace period has run out
        while self.preemptions.front().is_some_and(|p| p.kill_at <= now) {
            let p = self.preemptions.pop_front().expect("front exists");
            self.execute_preemption(p, now, &mut out);
        }

        // (c) pending jobs in priority order
        let waiting: BTreeSet<JobId> = self.preemptions.iter().map(|p| p.requester).collect();
        let mut queue: Vec<JobId> = self
            .jobs
            .values()
            .filter(|j| j.phase == Phase::Pending && j.submit_time <= now && !waiting.contains(&j.id))
            .filter(|j| self.dependencies_done(j))
            .map(|j| j.id)
            .collect();
        self.rank(&mut queue, now);
        queue.reverse();

        while let Some(id) = queue.pop() {
            let job = &self.jobs[&id];
            let tier = self.effective_tier(job, now);
            let elevated = tier > job.spec.qos_requested;
            let need = job.spec.nodes_requested;
            let free = self.free_count().saturating_sub(self.held_count());
            if need <= free {
                if self.hard_reservation_allows(job, now) {
                    self.start(id, now, elevated, &mut out);
                    if elevated {
                        self.rerank(&mut queue, now);
                    }
                }
                continue;
            }
            if self.config.tiers.get(tier).may_preempt.is_empty() {
                continue;
            }
            let candidates = self.victim_candidates(tier, now);
            let victims = select_victims(need, free, &candidates);
            if victims.is_empty() {
                continue;
            }
            let grace = victims
                .iter()
                .map(|v| self.config.tiers.get(self.effective_tier(&self.jobs[v], now)).grace_seconds)
                .max()
                .unwrap_or(0);
            for v in &victims {
                self.jobs.get_mut(v).expect("victim exists").warned = true;
                out.push(Action::PreemptWarn { job: *v, by: id });
            }
            self.jobs.get_mut(&id).expect("requester exists").elevated = elevated;
            let p = Preemption { requester: id, victims, kill_at: now + grace };
            if grace == 0 {
                self.execute_preemption(p, now, &mut out);
            } else {
                self.preemptions.push_back(p);
            }
            if elevated {
                self.rerank(&mut queue, now);
            }
        }

        self.log.extend(out.iter().cloned().map(|action| LoggedAction { t: now, action }));
        Ok(out)
    }

    /// Sorts pending jobs by effective priority, then submit time, then id.
    fn rank(&self, queue: &mut [JobId], now: u64) {
        queue.sort_by_cached_key(|id| {
            let j = &self.jobs[id];
            (std::cmp::Reverse(self.config.tiers.priority(self.effective_tier(j, now))), j.submit_time, j.id)
        });
    }

    /// Re-sorts a reversed work stack after elevated usage changed.
    fn rerank(&self, stack: &mut [JobId], now: u64) {
        self.rank(stack, now);
        stack.reverse();
    }

    fn victim_candidates(&self, requester: Tier, now: u64) -> Vec<Candidate> {
        self.jobs
            .values()
            .filter(|j| j.phase == Phase::Running && !j.warned)
            .filter_map(|j| {
                let tier = self.effective_tier(j, now);
                self.config.tiers.may_preempt(requester, tier).then(|| Candidate {
                    job: j.id,
                    nodes: j.spec.nodes_requested,
                    elapsed: now - j.started_at.expect("running"),
                    priority: self.config.tiers.priority(tier),
                })
            })
            .collect()
    }

    /// Steps every second from the last processed step up to `until`.
    pub fn run_until(&mut self, until: u64) -> Result<Vec<LoggedAction>, SchedError> {
        let from = self.last_step.map_or(self.origin, |l| l + 1);
        let mut out = Vec::new();
        for t in from..=until {
            out.extend(self.schedule_step(t)?.into_iter().map(|action| LoggedAction { t, action }));
        }
        Ok(out)
    }

    pub fn busy_nodes(&self) -> u32 {
        self.nodes.iter().filter(|n| n.is_some()).count() as u32
    }

    /// Cumulative statistics from the origin up to the last processed step.
    pub fn metrics(&self) -> Metrics {
        let now = self.now();
        let elapsed = now - self.origin;
        let capacity = self.config.node_count as u64 * elapsed;
        let useful = self.busy_node_seconds - self.lost_node_seconds;
        let ratio = |x: u64| if capacity == 0 { 0.0 } else { x as f64 / capacity as f64 };

        let mut waits: BTreeMap<Tier, (u64, u64)> = BTreeMap::new();
        for j in self.jobs.values() {
            if let Some(s) = j.first_started_at {
                let e = waits.entry(j.spec.qos_requested).or_default();
                e.0 += s - j.submit_time;
                e.1 += 1;
            }
        }
        Metrics {
            now,
            elapsed_seconds: elapsed,
            utilization_busy: ratio(self.busy_node_seconds),
            utilization_useful: ratio(useful),
            mean_wait_by_tier: waits.into_iter().map(|(t, (sum, n))| (t, sum as f64 / n as f64)).collect(),
            preemption_count: self.preemption_count,
            lost_node_seconds: self.lost_node_seconds,
            busy_node_seconds: self.busy_node_seconds,
            useful_node_seconds: useful,
        }
    }

    /// Checks exclusive allocation and the running-job/node bookkeeping.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut assigned = 0u32;
        for j in self.jobs.values() {
            match j.phase {
                Phase::Running => {
                    if j.nodes.len() as u32 != j.spec.nodes_requested {
                        return Err(format!("job {} holds {} of {} nodes", j.id, j.nodes.len(), j.spec.nodes_requested));
                    }
                    for n in &j.nodes {
                        if self.nodes[*n as usize] != Some(j.id) {
                            return Err(format!("node {n} not owned by job {}", j.id));
                        }
                    }
                    assigned += j.spec.nodes_requested;
                }
                _ => {
                    if !j.nodes.is_empty() {
                        return Err(format!("job {} is {:?} but holds nodes", j.id, j.phase));
                    }
                }
            }
        }
        if assigned != self.busy_nodes() {
            return Err(format!("{assigned} nodes assigned but {} busy", self.busy_nodes()));
        }
        Ok(())
    }
}

/// Tier a job runs at given a matching window and the project's current
/// elevated usage: the window's tier if this job still fits under its node
/// cap, otherwise the requested tier.
pub fn elevated_tier(requested: Tier, nodes: u32, usage: u32, window: &ReservationWindow, tiers: &TierTable) -> Tier {
    if usage + nodes <= window.node_cap && tiers.priority(window.elevated_tier) > tiers.priority(requested) {
        window.elevated_tier
    } else {
        requested
    }
}

/// Pure form of the elevation rule over a window list.
pub fn effective_priority(
    project: &str,
    requested: Tier,
    nodes: u32,
    elevated_usage: u32,
    now: u64,
    windows: &[ReservationWindow],
    tiers: &TierTable,
) -> (Tier, u32) {
    let best = windows
        .iter()
        .filter(|w| w.project == project && w.active_at(now))
        .max_by_key(|w| (tiers.priority(w.elevated_tier), w.node_cap));
    let tier = match best {
        Some(w) => elevated_tier(requested, nodes, elevated_usage, w, tiers),
        None => requested,
    };
    (tier, tiers.priority(tier))
}
