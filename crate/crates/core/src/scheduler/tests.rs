use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;

use super::victims::oracle::brute_force;
use super::victims::Candidate;
use super::*;
use crate::auth::{IssueRequest, TokenAuthority, TokenLimits};
use crate::clock::SimClock;
use crate::profiles::EnclaveLevel;

fn spec(project: &str, nodes: u32, walltime: u64, tier: Tier) -> JobSpec {
    JobSpec {
        project: project.into(),
        subject: "u".into(),
        nodes_requested: nodes,
        walltime_seconds: walltime,
        qos_requested: tier,
        depends_on: vec![],
        name: None,
    }
}

fn all_tiers() -> Entitlements {
    Entitlements { projects: BTreeMap::new(), default: Tier::ALL.into_iter().collect() }
}

fn sched(nodes: u32) -> Scheduler {
    Scheduler::new(SchedulerConfig::new(nodes).with_entitlements(all_tiers()), 0).unwrap()
}

#[test]
fn submit_errors() {
    let mut s = Scheduler::new(
        SchedulerConfig::new(8).with_entitlements(Entitlements::default().grant("p", &[Tier::Batch])),
        0,
    )
    .unwrap();
    assert_eq!(
        s.submit(spec("p", 1, 10, Tier::Interactive), 0),
        Err(SchedError::QosNotEntitled { project: "p".into(), tier: Tier::Interactive })
    );
    assert_eq!(
        s.submit(spec("p", 9, 10, Tier::Batch), 0),
        Err(SchedError::NodesExceedCluster { requested: 9, available: 8 })
    );
    let mut dep = spec("p", 1, 10, Tier::Batch);
    dep.depends_on = vec![JobId(42)];
    assert_eq!(s.submit(dep, 0).unwrap_err().code(), "DEPENDENCY_UNKNOWN");
    assert_eq!(s.submit(spec("p", 0, 10, Tier::Batch), 0).unwrap_err().code(), "INVALID_JOB");
}

#[test]
fn batch_job_starts_on_next_step() {
    let mut s = sched(8);
    let id = s.submit(spec("p", 4, 100, Tier::Batch), 0).unwrap();
    assert_eq!(s.job(id).unwrap().state.phase, Phase::Pending);
    let acts = s.schedule_step(0).unwrap();
    assert_eq!(acts, vec![Action::Start { job: id, nodes: vec![0, 1, 2, 3] }]);
    s.check_invariants().unwrap();
}

#[test]
fn clock_must_advance() {
    let mut s = sched(2);
    s.schedule_step(5).unwrap();
    assert_eq!(s.schedule_step(5).unwrap_err().code(), "CLOCK_REGRESSION");
}

fn wf(key: &str, after: &[&str], walltime: u64) -> WorkflowJob {
    WorkflowJob { key: key.into(), spec: spec("p", 1, walltime, Tier::Batch), after: after.iter().map(|s| s.to_string()).collect() }
}

#[test]
fn workflow_chain_waits() {
    let mut s = sched(8);
    let ids = s.submit_workflow(vec![wf("a", &[], 10), wf("b", &["a"], 5)], 0).unwrap();
    s.run_until(30).unwrap();
    let a = s.job(ids[0]).unwrap();
    let b = s.job(ids[1]).unwrap();
    assert_eq!(a.state.ended_at, Some(10));
    assert!(b.first_started_at.unwrap() >= a.state.ended_at.unwrap());
}

#[test]
fn workflow_cycle_detected() {
    let mut s = sched(8);
    let err = s.submit_workflow(vec![wf("a", &["b"], 10), wf("b", &["a"], 5)], 0).unwrap_err();
    assert_eq!(err.code(), "CYCLE_DETECTED");
    assert_eq!(s.jobs().count(), 0);
    let err = s.submit_workflow(vec![wf("a", &["zzz"], 10)], 0).unwrap_err();
    assert_eq!(err.code(), "DEPENDENCY_UNKNOWN");
}

#[test]
fn workflow_diamond() {
    let mut s = sched(8);
    let ids = s
        .submit_workflow(vec![wf("a", &[], 10), wf("b", &["a"], 5), wf("c", &["a"], 20), wf("d", &["b", "c"], 1)], 0)
        .unwrap();
    s.run_until(60).unwrap();
    let end = |i: usize| s.job(ids[i]).unwrap().state.ended_at.unwrap();
    let d_start = s.job(ids[3]).unwrap().first_started_at.unwrap();
    assert!(d_start >= end(1) && d_start >= end(2));
    assert_eq!(d_start, 30);
}

#[test]
fn effective_priority_examples() {
    let tiers = TierTable::default();
    assert_eq!(effective_priority("p", Tier::Batch, 2, 0, 50, &[], &tiers), (Tier::Batch, 100));
    let w = ReservationWindow { window_id: 1, project: "p".into(), start: 0, end: 100, elevated_tier: Tier::Urgent, node_cap: 4 };
    let ws = std::slice::from_ref(&w);
    assert_eq!(effective_priority("p", Tier::Batch, 2, 0, 50, ws, &tiers), (Tier::Urgent, 900));
    assert_eq!(effective_priority("p", Tier::Batch, 2, 0, 100, ws, &tiers), (Tier::Batch, 100));
    // node cap reached
    assert_eq!(effective_priority("p", Tier::Batch, 2, 3, 50, ws, &tiers), (Tier::Batch, 100));
    // other project unaffected
    assert_eq!(effective_priority("q", Tier::Batch, 2, 0, 50, ws, &tiers), (Tier::Batch, 100));
    // never lowers the requested tier
    let low = ReservationWindow { elevated_tier: Tier::Interactive, ..w.clone() };
    assert_eq!(
        effective_priority("p", Tier::Urgent, 2, 0, 50, std::slice::from_ref(&low), &tiers),
        (Tier::Urgent, 900)
    );
}

#[test]
fn overlapping_windows_highest_tier_wins() {
    let mut s = sched(8);
    for tier in [Tier::Interactive, Tier::Urgent] {
        s.add_window(ReservationWindow { window_id: 0, project: "p".into(), start: 0, end: 100, elevated_tier: tier, node_cap: 4 })
            .unwrap();
    }
    let id = s.submit(spec("p", 1, 10, Tier::Batch), 0).unwrap();
    assert_eq!(s.effective_priority(id, 10), Some((Tier::Urgent, 900)));
}

#[test]
fn single_victim_preemption() {
    let mut s = sched(8);
    let batch = s.submit(spec("bg", 8, 10_000, Tier::Batch), 0).unwrap();
    s.schedule_step(0).unwrap();
    let urgent = s.submit(spec("p", 2, 100, Tier::Urgent), 5).unwrap();
    let mut log = Vec::new();
    for t in 1..=40 {
        for a in s.schedule_step(t).unwrap() {
            log.push((t, a));
        }
        s.check_invariants().unwrap();
    }
    assert_eq!(
        log,
        vec![
            (5, Action::PreemptWarn { job: batch, by: urgent }),
            (35, Action::Kill { job: batch }),
            (35, Action::Requeue { job: batch }),
            (35, Action::Start { job: urgent, nodes: vec![0, 1] }),
        ]
    );
    let b = s.job(batch).unwrap();
    assert_eq!(b.state.phase, Phase::Pending);
    assert_eq!(b.state.remaining_seconds, 10_000);
    assert_eq!(b.state.preempt_count, 1);
    assert_eq!(s.metrics().lost_node_seconds, 8 * 35);
}

#[test]
fn three_batch_jobs_one_victim_matches_oracle() {
    let mut s = sched(8);
    let a = s.submit(spec("bg", 2, 1000, Tier::Batch), 0).unwrap();
    s.schedule_step(0).unwrap();
    let b = s.submit(spec("bg", 3, 1000, Tier::Batch), 10).unwrap();
    s.run_until(10).unwrap();
    let c = s.submit(spec("bg", 3, 1000, Tier::Batch), 20).unwrap();
    s.run_until(20).unwrap();
    let i = s.submit(spec("p", 3, 50, Tier::Interactive), 25).unwrap();
    let acts = s.run_until(25).unwrap();

    // Oracle: exhaustive search over the same candidates at t=25.
    let cands = [
        Candidate { job: a, nodes: 2, elapsed: 25, priority: 100 },
        Candidate { job: b, nodes: 3, elapsed: 15, priority: 100 },
        Candidate { job: c, nodes: 3, elapsed: 5, priority: 100 },
    ];
    let expected = brute_force(3, 0, &cands);
    assert_eq!(expected, vec![c]);
    let warned: Vec<JobId> = acts
        .iter()
        .filter_map(|la| match la.action {
            Action::PreemptWarn { job, by } if by == i => Some(job),
            _ => None,
        })
        .collect();
    assert_eq!(warned, expected);
}

#[test]
fn equal_priority_never_preempts() {
    let mut s = sched(4);
    s.submit(spec("a", 4, 1000, Tier::Interactive), 0).unwrap();
    s.schedule_step(0).unwrap();
    s.submit(spec("b", 2, 10, Tier::Interactive), 1).unwrap();
    s.run_until(100).unwrap();
    assert_eq!(s.metrics().preemption_count, 0);
    assert!(s.action_log().iter().all(|a| !matches!(a.action, Action::PreemptWarn { .. })));
}

#[test]
fn reservations_listing() {
    let mut s = sched(8);
    let w = s
        .add_window(ReservationWindow { window_id: 0, project: "p".into(), start: 10, end: 20, elevated_tier: Tier::Urgent, node_cap: 4 })
        .unwrap();
    assert_eq!(w.window_id, 1);
    let during = s.list_reservations(15);
    assert_eq!(during.len(), 1);
    assert!(during[0].active);
    assert!(s.list_reservations(20).is_empty());
    let bad = ReservationWindow { window_id: 0, project: "p".into(), start: 5, end: 5, elevated_tier: Tier::Urgent, node_cap: 4 };
    assert_eq!(s.add_window(bad).unwrap_err().code(), "INVALID_WINDOW");
    let too_big = ReservationWindow { window_id: 0, project: "p".into(), start: 5, end: 9, elevated_tier: Tier::Urgent, node_cap: 9 };
    assert_eq!(s.add_window(too_big).unwrap_err().code(), "INVALID_WINDOW");
}

#[test]
fn overcommitted_windows_flagged() {
    let mut s = sched(8);
    for p in ["a", "b"] {
        s.add_window(ReservationWindow { window_id: 0, project: p.into(), start: 0, end: 10, elevated_tier: Tier::Urgent, node_cap: 6 })
            .unwrap();
    }
    assert!(s.list_reservations(0).iter().all(|l| l.overcommitted));
}

#[test]
fn metrics_examples() {
    let s = sched(8);
    let m = s.metrics();
    assert_eq!((m.utilization_busy, m.utilization_useful, m.preemption_count, m.lost_node_seconds), (0.0, 0.0, 0, 0));
    assert!(m.mean_wait_by_tier.is_empty());

    let trace = [TraceEntry { submit_time: 0, job: spec("p", 4, 100, Tier::Batch) }];
    let s = replay(SchedulerConfig::new(8), 0, &trace, &[], 100).unwrap();
    assert_eq!(s.metrics().utilization_busy, 0.5);
    assert_eq!(s.metrics().utilization_useful, 0.5);

    // Preempted 10 s into its run on 2 nodes (zero grace to kill at once).
    let cfg = SchedulerConfig { node_count: 2, tiers: TierTable::with_grace(0), entitlements: all_tiers() };
    let trace = [
        TraceEntry { submit_time: 0, job: spec("bg", 2, 1000, Tier::Batch) },
        TraceEntry { submit_time: 10, job: spec("p", 2, 5, Tier::Urgent) },
    ];
    let s = replay(cfg, 0, &trace, &[], 20).unwrap();
    let m = s.metrics();
    assert_eq!(m.lost_node_seconds, 20);
    assert_eq!(m.preemption_count, 1);
    assert_eq!(m.busy_node_seconds, 40);
    assert_eq!(m.useful_node_seconds, 20);
    assert_eq!(m.mean_wait_by_tier[&Tier::Urgent], 0.0);
}

#[test]
fn cancel_cascades_to_dependents() {
    let mut s = sched(8);
    let ids = s.submit_workflow(vec![wf("a", &[], 10), wf("b", &["a"], 5)], 0).unwrap();
    s.schedule_step(0).unwrap();
    assert_eq!(s.cancel(ids[0], 3).unwrap(), vec![ids[0], ids[1]]);
    assert_eq!(s.busy_nodes(), 0);
    s.check_invariants().unwrap();
}

#[test]
fn hard_reservation_idles_nodes() {
    let mut s = sched(8);
    s.add_hard_reservation(HardReservation { project: "p".into(), start: 100, end: 200, nodes: 4 }).unwrap();
    // A 6-node job that would run into the window cannot start.
    let big = s.submit(spec("bg", 6, 150, Tier::Batch), 0).unwrap();
    // One that finishes before the window can.
    let short = s.submit(spec("bg", 6, 50, Tier::Batch), 0).unwrap();
    s.schedule_step(0).unwrap();
    assert_eq!(s.job(short).unwrap().state.phase, Phase::Running);
    assert_eq!(s.job(big).unwrap().state.phase, Phase::Pending);
    s.run_until(120).unwrap();
    // The big job now fits only after the window.
    assert_eq!(s.job(big).unwrap().state.phase, Phase::Pending);
    s.run_until(200).unwrap();
    assert_eq!(s.job(big).unwrap().first_started_at, Some(200));
}

#[test]
fn service_handle_round_trip() {
    let clock = SimClock::at_secs(100);
    let svc = SchedulerService::spawn(
        SchedulerConfig::new(8).with_entitlements(Entitlements::default().grant("lcls", &[Tier::Batch, Tier::Interactive])),
        Arc::new(clock.clone()),
    )
    .unwrap();
    let h = svc.handle();
    let auth = TokenAuthority::new(b"k", TokenLimits { max_ttl_seconds: 1000, max_delegation_depth: 2, mfa_required: false });
    let claims = |scopes: &[&str], project: &str| {
        let t = auth
            .issue_token(
                &IssueRequest {
                    subject: "alice".into(),
                    project: project.into(),
                    scopes: scopes.iter().map(|s| s.to_string()).collect(),
                    ttl_seconds: 500,
                    mfa: false,
                    max_enclave: EnclaveLevel::Development,
                },
                100,
            )
            .unwrap();
        auth.validate_token(&t, 100).unwrap()
    };
    let user = claims(&["jobs.submit"], "lcls");
    let id = h.submit_job(spec("", 2, 10, Tier::Batch), &user).unwrap();
    clock.advance_secs(1);
    let info = h.job(id, &user).unwrap();
    assert_eq!(info.state.phase, Phase::Running);
    assert_eq!(info.spec.subject, "alice");
    assert_eq!(info.spec.project, "lcls");

    let other = claims(&["jobs.read"], "other");
    assert_eq!(h.job(id, &other).unwrap_err().code(), "FORBIDDEN");
    assert_eq!(h.submit_job(spec("lcls", 1, 10, Tier::Batch), &other).unwrap_err().code(), "FORBIDDEN");

    let w = ReservationWindow { window_id: 0, project: "lcls".into(), start: 100, end: 200, elevated_tier: Tier::Urgent, node_cap: 4 };
    assert_eq!(h.add_reservation(w.clone(), &user).unwrap_err().code(), "FORBIDDEN");
    let admin = claims(&["admin.*"], "ops");
    h.add_reservation(w, &admin).unwrap();
    assert_eq!(h.list_reservations().unwrap().len(), 1);
    clock.set_secs(200);
    assert!(h.list_reservations().unwrap().is_empty());
    clock.set_secs(250);
    assert_eq!(h.job(id, &user).unwrap().state.phase, Phase::Completed);
}

fn arb_trace() -> impl Strategy<Value = Vec<TraceEntry>> {
    proptest::collection::vec(
        (0u64..200, 1u32..=8, 1u64..120, prop_oneof![Just(Tier::Batch), Just(Tier::Interactive), Just(Tier::Urgent)], 0usize..3),
        1..25,
    )
    .prop_map(|rows| {
        rows.into_iter()
            .map(|(t, nodes, wall, tier, p)| TraceEntry { submit_time: t, job: spec(["a", "b", "c"][p], nodes, wall, tier) })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn replay_is_deterministic_legal_and_exclusive(trace in arb_trace()) {
        let cfg = SchedulerConfig::new(8).with_entitlements(all_tiers());
        let window = ReservationWindow { window_id: 0, project: "c".into(), start: 50, end: 150, elevated_tier: Tier::Urgent, node_cap: 4 };
        let mut s = Scheduler::new(cfg.clone(), 0).unwrap();
        s.add_window(window.clone()).unwrap();
        let mut sorted = trace.clone();
        sorted.sort_by_key(|e| e.submit_time);
        let mut next = 0;
        for t in 0..=400u64 {
            while next < sorted.len() && sorted[next].submit_time <= t {
                s.submit(sorted[next].job.clone(), t).unwrap();
                next += 1;
            }
            // Record tiers before the step to check legality of warnings.
            let before: BTreeMap<JobId, Tier> = s.jobs().filter_map(|j| s.effective_priority(j.job_id, t).map(|p| (j.job_id, p.0))).collect();
            for a in s.schedule_step(t).unwrap() {
                if let Action::PreemptWarn { job, by } = a {
                    prop_assert!(cfg.tiers.may_preempt(before[&by].max(s.effective_priority(by, t).unwrap().0), before[&job]));
                }
            }
            prop_assert!(s.check_invariants().is_ok(), "{:?}", s.check_invariants());
        }
        let again = replay(cfg, 0, &trace, &[window], 400).unwrap();
        prop_assert_eq!(s.action_log(), again.action_log());
    }

    #[test]
    fn dependencies_respected(n in 2usize..6, walls in proptest::collection::vec(1u64..30, 6)) {
        let mut s = sched(2);
        let jobs: Vec<WorkflowJob> = (0..n)
            .map(|i| {
                let after = if i == 0 { vec![] } else { vec![format!("j{}", i - 1)] };
                WorkflowJob { key: format!("j{i}"), spec: spec("p", 1, walls[i], Tier::Batch), after }
            })
            .collect();
        let ids = s.submit_workflow(jobs, 0).unwrap();
        s.run_until(400).unwrap();
        for w in ids.windows(2) {
            let prev_end = s.job(w[0]).unwrap().state.ended_at.unwrap();
            prop_assert!(s.job(w[1]).unwrap().first_started_at.unwrap() >= prev_end);
        }
    }

    #[test]
    fn elevated_jobs_start_within_grace(seed in 0u64..1000) {
        let bg = workload::PoissonWorkload {
            project: "bg".into(),
            tier: Tier::Batch,
            mean_interarrival_seconds: 10.0,
            walltime_range: (60, 600),
            nodes_range: (1, 8),
            start: 0,
            end: 600,
            seed,
        };
        let mut trace = bg.generate();
        // Sequential elevated jobs, total demand within the cap.
        for (i, t) in [120u64, 200, 330].into_iter().enumerate() {
            trace.push(TraceEntry { submit_time: t, job: spec("p", 2 + i as u32 % 2, 40, Tier::Batch) });
        }
        let window = ReservationWindow { window_id: 0, project: "p".into(), start: 100, end: 500, elevated_tier: Tier::Urgent, node_cap: 4 };
        let s = replay(SchedulerConfig::new(16).with_entitlements(all_tiers()), 0, &trace, &[window], 700).unwrap();
        for j in s.jobs().filter(|j| j.spec.project == "p") {
            let wait = j.first_started_at.unwrap() - j.submit_time;
            prop_assert!(wait <= 31, "job {} waited {}", j.job_id, wait);
        }
    }
}

#[test]
fn elevation_cap_counts_jobs_started_in_the_same_step() {
    let cfg = SchedulerConfig::new(8).with_entitlements(all_tiers());
    let mut s = Scheduler::new(cfg, 0).unwrap();
    s.add_window(ReservationWindow { window_id: 0, project: "c".into(), start: 0, end: 100, elevated_tier: Tier::Urgent, node_cap: 4 })
        .unwrap();
    let a = s.submit(spec("c", 3, 50, Tier::Batch), 0).unwrap();
    let b = s.submit(spec("c", 2, 50, Tier::Batch), 0).unwrap();
    let i = s.submit(spec("a", 4, 50, Tier::Interactive), 0).unwrap();
    let acts = s.schedule_step(0).unwrap();
    assert!(acts.iter().all(|a| !matches!(a, Action::PreemptWarn { .. })), "{acts:?}");
    assert_eq!(s.job(a).unwrap().state.phase, Phase::Running);
    assert_eq!(s.job(i).unwrap().state.phase, Phase::Running);
    assert_eq!(s.job(b).unwrap().state.phase, Phase::Pending);
}
