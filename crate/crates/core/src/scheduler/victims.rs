//! Choosing which running jobs to preempt.

use super::JobId;

/// A running job that the requester is allowed to preempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub job: JobId,
    pub nodes: u32,
    /// Seconds the job has been running; its work is lost if killed.
    pub elapsed: u64,
    pub priority: u32,
}

impl Candidate {
    pub fn lost_node_seconds(&self) -> u64 {
        self.nodes as u64 * self.elapsed
    }
}

/// Lexicographic preemption cost: fewest victims, then least lost
/// node-seconds, then lowest summed priority, then smallest sorted ids.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct VictimCost {
    pub victims: usize,
    pub lost_node_seconds: u64,
    pub priority_sum: u64,
    pub ids: Vec<JobId>,
}

impl VictimCost {
    pub fn of(set: &[&Candidate]) -> Self {
        let mut ids: Vec<JobId> = set.iter().map(|c| c.job).collect();
        ids.sort();
        VictimCost {
            victims: set.len(),
            lost_node_seconds: set.iter().map(|c| c.lost_node_seconds()).sum(),
            priority_sum: set.iter().map(|c| c.priority as u64).sum(),
            ids,
        }
    }
}

/// Returns the cheapest set of candidates whose nodes, together with
/// `free_nodes`, cover `needed_nodes`. Empty when free nodes already
/// suffice or when no subset does.
///
/// The minimum victim count `k` is found from the largest jobs first; only
/// subsets of exactly that size are then searched, depth-first, pruning
/// branches that cannot reach the deficit or cannot beat the best lost work.
pub fn select_victims(needed_nodes: u32, free_nodes: u32, candidates: &[Candidate]) -> Vec<JobId> {
    if free_nodes >= needed_nodes {
        return Vec::new();
    }
    let deficit = (needed_nodes - free_nodes) as u64;

    let mut sorted: Vec<&Candidate> = candidates.iter().filter(|c| c.nodes > 0).collect();
    sorted.sort_by(|a, b| b.nodes.cmp(&a.nodes).then(a.job.cmp(&b.job)));

    let mut acc = 0u64;
    let mut k = 0usize;
    for c in &sorted {
        if acc >= deficit {
            break;
        }
        acc += c.nodes as u64;
        k += 1;
    }
    if acc < deficit {
        return Vec::new();
    }

    // suffix_top[i][j]: sum of the j largest node counts among sorted[i..];
    // sorted is descending, so that is just sorted[i..i + j].
    let n = sorted.len();
    let mut prefix = vec![0u64; n + 1];
    for (i, c) in sorted.iter().enumerate() {
        prefix[i + 1] = prefix[i] + c.nodes as u64;
    }
    let best_reach = |from: usize, take: usize| prefix[(from + take).min(n)] - prefix[from];

    struct Search<'a> {
        sorted: &'a [&'a Candidate],
        k: usize,
        deficit: u64,
        chosen: Vec<&'a Candidate>,
        best: Option<VictimCost>,
    }

    fn dfs(s: &mut Search<'_>, from: usize, nodes: u64, lost: u64, reach: &dyn Fn(usize, usize) -> u64) {
        if s.chosen.len() == s.k {
            if nodes >= s.deficit {
                let cost = VictimCost::of(&s.chosen);
                if s.best.as_ref().map_or(true, |b| cost < *b) {
                    s.best = Some(cost);
                }
            }
            return;
        }
        let remaining = s.k - s.chosen.len();
        for i in from..s.sorted.len() {
            if s.sorted.len() - i < remaining {
                break;
            }
            // Candidates are in descending node order, so if the best
            // completion from here cannot cover the deficit neither can
            // any later start.
            if nodes + reach(i, remaining) < s.deficit {
                break;
            }
            let c = s.sorted[i];
            let lost_here = lost + c.lost_node_seconds();
            if let Some(b) = &s.best {
                if lost_here > b.lost_node_seconds {
                    continue;
                }
            }
            s.chosen.push(c);
            dfs(s, i + 1, nodes + c.nodes as u64, lost_here, reach);
            s.chosen.pop();
        }
    }

    let mut search = Search { sorted: &sorted, k, deficit, chosen: Vec::with_capacity(k), best: None };
    dfs(&mut search, 0, 0, 0, &best_reach);
    search.best.map(|b| b.ids).unwrap_or_default()
}

#[cfg(test)]
pub(crate) mod oracle {
    use super::*;

    /// Exhaustive search over every subset.
    pub fn brute_force(needed_nodes: u32, free_nodes: u32, candidates: &[Candidate]) -> Vec<JobId> {
        if free_nodes >= needed_nodes {
            return Vec::new();
        }
        let n = candidates.len();
        let mut best: Option<VictimCost> = None;
        for mask in 1u32..(1u32 << n) {
            let set: Vec<&Candidate> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| &candidates[i]).collect();
            let nodes: u32 = set.iter().map(|c| c.nodes).sum();
            if nodes + free_nodes < needed_nodes {
                continue;
            }
            let cost = VictimCost::of(&set);
            if best.as_ref().map_or(true, |b| cost < *b) {
                best = Some(cost);
            }
        }
        best.map(|b| b.ids).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::brute_force;
    use super::*;
    use proptest::prelude::*;

    fn c(job: u64, nodes: u32, elapsed: u64) -> Candidate {
        Candidate { job: JobId(job), nodes, elapsed, priority: 100 }
    }

    #[test]
    fn free_nodes_suffice() {
        assert!(select_victims(2, 2, &[c(1, 4, 10)]).is_empty());
    }

    #[test]
    fn prefers_least_lost_work() {
        let cands = [c(1, 2, 100), c(2, 2, 10)];
        assert_eq!(select_victims(2, 0, &cands), vec![JobId(2)]);
    }

    #[test]
    fn six_needed_from_four_three_three() {
        // Every pair covers 6 except {3,3}... which also covers 6. The
        // 4-node job paired with the cheaper 3-node job loses 4*5+3*1=23;
        // the two 3-node jobs lose 3*20+3*1=63.
        let cands = [c(1, 4, 5), c(2, 3, 20), c(3, 3, 1)];
        let got = select_victims(6, 0, &cands);
        assert_eq!(got, brute_force(6, 0, &cands));
        assert_eq!(got, vec![JobId(1), JobId(3)]);
    }

    #[test]
    fn three_batch_jobs_single_victim() {
        // 2,3,3-node jobs; need 3 with nothing free: one 3-node job, the one
        // that ran less.
        let cands = [c(1, 2, 50), c(2, 3, 40), c(3, 3, 30)];
        assert_eq!(select_victims(3, 0, &cands), vec![JobId(3)]);
        assert_eq!(brute_force(3, 0, &cands), vec![JobId(3)]);
    }

    #[test]
    fn insufficient_returns_empty() {
        assert!(select_victims(10, 1, &[c(1, 4, 1), c(2, 4, 1)]).is_empty());
    }

    #[test]
    fn ties_break_on_priority_then_ids() {
        let mut a = c(5, 2, 10);
        let b = c(3, 2, 10);
        a.priority = 50;
        assert_eq!(select_victims(2, 0, &[a, b]), vec![JobId(5)]);
        let a = c(5, 2, 10);
        assert_eq!(select_victims(2, 0, &[a, b]), vec![JobId(3)]);
    }

    proptest! {
        #[test]
        fn matches_exhaustive_search(
            free in 0u32..8,
            needed in 1u32..=8,
            jobs in proptest::collection::vec((1u32..=8, 0u64..200, prop_oneof![Just(100u32), Just(500u32)]), 0..=6)
        ) {
            let cands: Vec<Candidate> = jobs
                .iter()
                .enumerate()
                .map(|(i, &(nodes, elapsed, priority))| Candidate { job: JobId(i as u64 + 1), nodes, elapsed, priority })
                .collect();
            prop_assert_eq!(select_victims(needed, free, &cands), brute_force(needed, free, &cands));
        }
    }
}
