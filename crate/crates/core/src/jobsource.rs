//! Synthetic job metadata: seeded arrivals, first-come first-served
//! exclusive node allocation, and a JSONL stream of start and end records
//! in the format the job aggregator ingests.

use std::collections::VecDeque;
use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::odav::jobs::{island_of, JobRecord};
use crate::plant::workload::{PhaseKind, Schedule};
use crate::reading::NS_PER_S;
use crate::topic::Topic;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JobScriptError {
    #[error("invalid job script: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Lowest-numbered free nodes first.
    Packed,
    /// Round robin over islands.
    Spread,
}

impl std::str::FromStr for Placement {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "packed" => Ok(Placement::Packed),
            "spread" => Ok(Placement::Spread),
            _ => Err(format!(
                "unknown placement {s:?} (expected packed or spread)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobScript {
    pub jobs: usize,
    /// (node count, weight)
    pub node_counts: Vec<(usize, f64)>,
    /// Run time range, whole seconds.
    pub duration_s: (u64, u64),
    /// Mean time between submissions, seconds.
    pub interarrival_s: f64,
    /// Allocatable nodes, in allocation order.
    pub nodes: Vec<Topic>,
    pub placement: Placement,
    pub users: usize,
    /// Time of the first submission, nanoseconds.
    pub start_ts: u64,
    pub seed: u64,
}

impl JobScript {
    /// `count` nodes named `<prefix>/sNN`.
    pub fn rack(prefix: &str, count: usize) -> Result<Vec<Topic>, JobScriptError> {
        (0..count)
            .map(|i| {
                Topic::parse(&format!("{prefix}/s{i:02}"))
                    .map_err(|e| JobScriptError::Invalid(e.to_string()))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), JobScriptError> {
        let bad = |m: String| Err(JobScriptError::Invalid(m));
        if self.nodes.is_empty() {
            return bad("no nodes to allocate".into());
        }
        if self.node_counts.is_empty()
            || self
                .node_counts
                .iter()
                .any(|&(n, w)| n == 0 || w.is_nan() || w < 0.0)
        {
            return bad("node counts must be at least 1 with non-negative weights".into());
        }
        if let Some(&(n, _)) = self
            .node_counts
            .iter()
            .find(|&&(n, w)| w > 0.0 && n > self.nodes.len())
        {
            return bad(format!(
                "jobs of {n} nodes can never run on {} nodes",
                self.nodes.len()
            ));
        }
        if self.duration_s.0 == 0 || self.duration_s.0 > self.duration_s.1 {
            return bad("durations must be positive with min <= max".into());
        }
        if !(self.interarrival_s > 0.0 && self.interarrival_s.is_finite()) {
            return bad("interarrival must be positive".into());
        }
        if self.users == 0 {
            return bad("need at least one user".into());
        }
        let mut sorted = self.nodes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.nodes.len() {
            return bad("duplicate node".into());
        }
        Ok(())
    }
}

struct Pending {
    id: usize,
    submit: u64,
    nodes: usize,
    duration: u64,
    user: usize,
}

fn pick(free: &[bool], nodes: &[Topic], want: usize, placement: Placement) -> Vec<usize> {
    let avail: Vec<usize> = (0..free.len()).filter(|&i| free[i]).collect();
    match placement {
        Placement::Packed => avail.into_iter().take(want).collect(),
        Placement::Spread => {
            // one queue per island in first-seen order, then round robin
            let mut islands: Vec<(&str, VecDeque<usize>)> = Vec::new();
            for i in avail {
                let isl = island_of(&nodes[i]);
                match islands.iter_mut().find(|(n, _)| *n == isl) {
                    Some((_, q)) => q.push_back(i),
                    None => islands.push((isl, VecDeque::from([i]))),
                }
            }
            let mut out = Vec::with_capacity(want);
            while out.len() < want {
                for (_, q) in islands.iter_mut() {
                    if out.len() < want {
                        if let Some(i) = q.pop_front() {
                            out.push(i);
                        }
                    }
                }
            }
            out.sort_unstable();
            out
        }
    }
}

/// Start records (`end_ts` 0) and end records in time order; at equal
/// times ends come first. Jobs start first come first served as soon as
/// enough nodes are free.
pub fn generate_jobs(script: &JobScript) -> Result<Vec<JobRecord>, JobScriptError> {
    script.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(script.seed ^ 0x10b5_0000);
    let counts = WeightedIndex::new(script.node_counts.iter().map(|c| c.1))
        .map_err(|e| JobScriptError::Invalid(format!("node count weights: {e}")))?;
    let mut submit = script.start_ts;
    let mut queue: VecDeque<Pending> = VecDeque::new();
    for id in 0..script.jobs {
        let gap = -script.interarrival_s * (1.0 - rng.gen::<f64>()).ln();
        submit += (gap * NS_PER_S as f64).round() as u64;
        queue.push_back(Pending {
            id,
            submit,
            nodes: script.node_counts[counts.sample(&mut rng)].0,
            duration: rng.gen_range(script.duration_s.0..=script.duration_s.1),
            user: rng.gen_range(0..script.users),
        });
    }
    let n = script.nodes.len();
    let mut free = vec![true; n];
    // (end time, job, node indices)
    let mut running: Vec<(u64, JobRecord, Vec<usize>)> = Vec::new();
    let mut out = Vec::with_capacity(2 * script.jobs);
    let mut now = script.start_ts;
    while !queue.is_empty() || !running.is_empty() {
        // finish everything due by `now`, earliest first
        running.sort_by(|a, b| (a.0, &a.1.jobid).cmp(&(b.0, &b.1.jobid)));
        while running.first().is_some_and(|r| r.0 <= now) {
            let (end, mut job, idx) = running.remove(0);
            for i in idx {
                free[i] = true;
            }
            job.end_ts = end;
            out.push(job);
        }
        // start the queue head while it fits and has been submitted
        while let Some(head) = queue.front() {
            let nfree = free.iter().filter(|f| **f).count();
            if head.submit > now || head.nodes > nfree {
                break;
            }
            let p = queue.pop_front().expect("non-empty");
            let idx = pick(&free, &script.nodes, p.nodes, script.placement);
            for &i in &idx {
                free[i] = false;
            }
            let job = JobRecord {
                jobid: format!("job{:06}", p.id),
                nodes: idx.iter().map(|&i| script.nodes[i].clone()).collect(),
                start_ts: now,
                end_ts: 0,
                user: format!("user{:02}", p.user),
            };
            out.push(job.clone());
            running.push((now + p.duration * NS_PER_S, job, idx));
        }
        let next_end = running.iter().map(|r| r.0).min();
        let next_submit = queue.front().map(|p| p.submit).filter(|&s| s > now);
        now = match (next_end, next_submit) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => break,
        };
    }
    Ok(out)
}

/// Jobs implied by a gang workload: every maximal run of non-idle phases
/// of a gang is one job on the gang's nodes. `nodes[i]` names plant node
/// `i`; runs cut by the horizon end at the horizon.
pub fn jobs_from_schedule(
    schedule: &Schedule,
    nodes: &[Topic],
    start_ts: u64,
    users: usize,
) -> Result<Vec<JobRecord>, JobScriptError> {
    if nodes.len() != schedule.nodes.len() {
        return Err(JobScriptError::Invalid(format!(
            "{} node names for a {}-node schedule",
            nodes.len(),
            schedule.nodes.len()
        )));
    }
    if users == 0 {
        return Err(JobScriptError::Invalid("need at least one user".into()));
    }
    let ts = |t_s: f64| start_ts + (t_s * NS_PER_S as f64).round() as u64;
    let mut done = Vec::new();
    for (g, &(first, count)) in schedule.gangs.iter().enumerate() {
        let names: Vec<Topic> = nodes[first..first + count].to_vec();
        let mut open: Option<f64> = None;
        let close = |from: f64, to: f64, done: &mut Vec<JobRecord>| {
            done.push(JobRecord {
                jobid: String::new(),
                nodes: names.clone(),
                start_ts: ts(from),
                end_ts: ts(to.min(schedule.horizon_s)),
                user: format!("user{:02}", g % users),
            })
        };
        for ph in &schedule.nodes[first] {
            match (ph.kind, open) {
                (PhaseKind::Idle, Some(from)) => {
                    close(from, ph.start_s, &mut done);
                    open = None;
                }
                (PhaseKind::Idle, None) => {}
                (_, None) => open = Some(ph.start_s),
                (_, Some(_)) => {}
            }
        }
        if let Some(from) = open {
            close(from, schedule.horizon_s, &mut done);
        }
    }
    done.sort_by(|a, b| (a.start_ts, &a.nodes).cmp(&(b.start_ts, &b.nodes)));
    let mut out = Vec::with_capacity(2 * done.len());
    for (k, mut j) in done.into_iter().enumerate() {
        j.jobid = format!("job{k:06}");
        out.push(JobRecord {
            end_ts: 0,
            ..j.clone()
        });
        out.push(j);
    }
    // ends before starts at equal times; stable keeps job order otherwise
    out.sort_by_key(|j| {
        if j.end_ts == 0 {
            (j.start_ts, 1)
        } else {
            (j.end_ts, 0)
        }
    });
    Ok(out)
}

/// One JSON object per line.
pub fn write_jsonl<W: Write>(records: &[JobRecord], mut w: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::odav::jobs::assign_job_owner;
    use proptest::prelude::*;

    fn script(nodes: usize, jobs: usize, counts: Vec<(usize, f64)>, seed: u64) -> JobScript {
        JobScript {
            jobs,
            node_counts: counts,
            duration_s: (600, 7200),
            interarrival_s: 300.0,
            nodes: JobScript::rack("/deepest/cm", nodes).unwrap(),
            placement: Placement::Packed,
            users: 4,
            start_ts: NS_PER_S,
            seed,
        }
    }

    #[test]
    fn single_job_has_start_and_end() {
        let mut s = script(16, 1, vec![(4, 1.0)], 1);
        s.duration_s = (3600, 3600);
        let r = generate_jobs(&s).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].end_ts, 0);
        assert_eq!(r[1].end_ts - r[1].start_ts, 3600 * NS_PER_S);
        assert_eq!(r[0].nodes.len(), 4);
        assert_eq!(r[0].nodes, r[1].nodes);
    }

    #[test]
    fn whole_rack_jobs_are_serialized() {
        let mut s = script(8, 2, vec![(8, 1.0)], 2);
        s.interarrival_s = 1e-3;
        let r = generate_jobs(&s).unwrap();
        let ends: Vec<&JobRecord> = r.iter().filter(|j| j.end_ts != 0).collect();
        let starts: Vec<&JobRecord> = r.iter().filter(|j| j.end_ts == 0).collect();
        assert_eq!(starts.len(), 2);
        assert!(starts[1].start_ts >= ends[0].end_ts);
    }

    #[test]
    fn oversized_jobs_are_rejected() {
        assert!(generate_jobs(&script(4, 1, vec![(5, 1.0)], 1)).is_err());
    }

    #[test]
    fn spread_placement_splits_over_islands() {
        let mut nodes = Vec::new();
        for isl in ["i0", "i1"] {
            for k in 0..4 {
                nodes.push(Topic::parse(&format!("/deepest/{isl}/n{k}")).unwrap());
            }
        }
        let free = vec![true, true, true, true, true, false, true, false];
        let got = pick(&free, &nodes, 8 - 3, Placement::Spread);
        // i0 has 4 free, i1 has 2: round robin takes 3 + 2
        let job = JobRecord {
            jobid: "j".into(),
            nodes: got.iter().map(|&i| nodes[i].clone()).collect(),
            start_ts: 1,
            end_ts: 0,
            user: "u".into(),
        };
        assert_eq!(got, vec![0, 1, 2, 4, 6]);
        assert_eq!(assign_job_owner(&job), "i0");
    }

    #[test]
    fn schedule_jobs_follow_gang_phases() {
        use crate::plant::workload::{generate_workload, WorkloadConfig};
        let cfg = WorkloadConfig {
            gang: (3, 5),
            ..Default::default()
        };
        let sched = generate_workload(&cfg, 12, 2, 9, 40_000.0).unwrap();
        let names = JobScript::rack("/deepest/cm", 12).unwrap();
        let r = jobs_from_schedule(&sched, &names, 0, 3).unwrap();
        assert!(!r.is_empty());
        for j in r.iter().filter(|j| j.end_ts != 0) {
            let node = names.iter().position(|n| *n == j.nodes[0]).unwrap();
            for t in [j.start_ts + 1, (j.start_ts + j.end_ts) / 2, j.end_ts - 1] {
                assert_ne!(
                    sched.phase(node, t as f64 / NS_PER_S as f64).kind,
                    PhaseKind::Idle
                );
            }
            assert!(!j.nodes.is_empty() && j.nodes.len() <= 5);
        }
        assert_eq!(r, jobs_from_schedule(&sched, &names, 0, 3).unwrap());
        assert!(jobs_from_schedule(&sched, &names[1..], 0, 3).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn allocations_never_overlap(seed in any::<u64>(), nodes in 4usize..24, jobs in 1usize..40) {
            let s = script(nodes, jobs, vec![(1, 3.0), (2, 2.0), (4, 1.0)], seed);
            let r = generate_jobs(&s).unwrap();
            prop_assert_eq!(r.len(), 2 * jobs);
            let done: Vec<&JobRecord> = r.iter().filter(|j| j.end_ts != 0).collect();
            for (i, a) in done.iter().enumerate() {
                for b in &done[i + 1..] {
                    if a.start_ts < b.end_ts && b.start_ts < a.end_ts {
                        prop_assert!(a.nodes.iter().all(|n| !b.nodes.contains(n)), "{} and {} share a node", a.jobid, b.jobid);
                    }
                }
            }
            let t = |j: &JobRecord| if j.end_ts == 0 { j.start_ts } else { j.end_ts };
            let ordered = r.windows(2).all(|w| t(&w[0]) <= t(&w[1]));
            prop_assert!(ordered);
            let mut a = Vec::new();
            write_jsonl(&r, &mut a).unwrap();
            let mut b = Vec::new();
            write_jsonl(&generate_jobs(&s).unwrap(), &mut b).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
