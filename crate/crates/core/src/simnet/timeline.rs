//! α–β replay of a trace onto per-rank compute, ring-stream and other-stream lanes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::trace::{LinkClass, OpKind, Stream, Trace, TraceEvent};
use crate::error::{Error, Result};

/// Version of the timeline JSON schema.
pub const TIMELINE_SCHEMA_VERSION: u32 = 1;

/// Latencies in seconds, bandwidths in bytes per second, compute in flop/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub alpha_intra: f64,
    pub beta_intra: f64,
    pub alpha_inter: f64,
    pub beta_inter: f64,
    pub compute_rate: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            alpha_intra: 1e-6,
            beta_intra: 7.5e11,
            alpha_inter: 1e-5,
            beta_inter: 5e10,
            compute_rate: 1e8,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("alpha_intra", self.alpha_intra),
            ("beta_intra", self.beta_intra),
            ("alpha_inter", self.alpha_inter),
            ("beta_inter", self.beta_inter),
            ("compute_rate", self.compute_rate),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Planning(format!(
                    "latency model parameter {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn transfer_time(&self, link: LinkClass, bytes: u64) -> f64 {
        match link {
            LinkClass::Loopback => 0.0,
            LinkClass::Intra => self.alpha_intra + bytes as f64 / self.beta_intra,
            LinkClass::Inter => self.alpha_inter + bytes as f64 / self.beta_inter,
        }
    }

    pub fn barrier_time(&self, link: LinkClass) -> f64 {
        match link {
            LinkClass::Loopback => 0.0,
            LinkClass::Intra => self.alpha_intra,
            LinkClass::Inter => self.alpha_inter,
        }
    }

    pub fn compute_time(&self, flops: u64) -> f64 {
        flops as f64 / self.compute_rate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
    /// Trace sequence number of the event.
    pub seq: u64,
    pub link: LinkClass,
}

impl Interval {
    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LaneBusy {
    pub compute: f64,
    pub ring: f64,
    pub other: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTimeline {
    pub rank: usize,
    pub compute: Vec<Interval>,
    pub ring: Vec<Interval>,
    pub other: Vec<Interval>,
    pub finish: f64,
    pub busy: LaneBusy,
    /// Communication time not covered by compute on this rank.
    pub non_overlapped_comm: f64,
    /// Inter-machine communication time not covered by compute on this rank.
    pub non_overlapped_inter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub schema_version: u32,
    pub model: LatencyModel,
    pub makespan: f64,
    pub ranks: Vec<RankTimeline>,
}

impl Timeline {
    pub fn max_non_overlapped_inter(&self) -> f64 {
        self.ranks
            .iter()
            .map(|r| r.non_overlapped_inter)
            .fold(0.0, f64::max)
    }

    pub fn max_non_overlapped_comm(&self) -> f64 {
        self.ranks
            .iter()
            .map(|r| r.non_overlapped_comm)
            .fold(0.0, f64::max)
    }

    pub fn max_compute_busy(&self) -> f64 {
        self.ranks.iter().map(|r| r.busy.compute).fold(0.0, f64::max)
    }
}

#[derive(Debug, Default)]
struct RankState {
    now: f64,
    ring_free: f64,
    other_free: f64,
    intra_free: f64,
    inter_free: f64,
    op_end: HashMap<u64, f64>,
    outstanding: Vec<u64>,
    compute: Vec<Interval>,
    ring: Vec<Interval>,
    other: Vec<Interval>,
}

impl RankState {
    fn transfer(&mut self, e: &TraceEvent, model: &LatencyModel) -> Result<()> {
        let op = e
            .op_id
            .ok_or_else(|| Error::Trace(format!("transfer {} has no op id", e.seq)))?;
        let lane_free = match e.stream {
            Stream::Ring => self.ring_free,
            _ => self.other_free,
        };
        let link_free = match e.link {
            LinkClass::Intra => self.intra_free,
            LinkClass::Inter => self.inter_free,
            LinkClass::Loopback => 0.0,
        };
        let start = self.now.max(lane_free).max(link_free);
        let end = start + model.transfer_time(e.link, e.bytes);
        match e.link {
            LinkClass::Intra => self.intra_free = end,
            LinkClass::Inter => self.inter_free = end,
            LinkClass::Loopback => {}
        }
        let iv = Interval {
            start,
            end,
            seq: e.seq,
            link: e.link,
        };
        match e.stream {
            Stream::Ring => {
                self.ring_free = end;
                self.ring.push(iv);
            }
            _ => {
                self.other_free = end;
                self.other.push(iv);
            }
        }
        self.op_end.insert(op, end);
        self.outstanding.push(op);
        Ok(())
    }

    fn drain_outstanding(&mut self) -> f64 {
        let mut t = self.now;
        for op in self.outstanding.drain(..) {
            t = t.max(self.op_end[&op]);
        }
        t
    }
}

/// Merges `ivs` into sorted disjoint intervals.
fn union(mut ivs: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    ivs.retain(|(s, e)| e > s);
    ivs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (s, e) in ivs {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// Length of `a` not covered by `b`; both must be unions of disjoint sorted intervals.
fn uncovered(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    for &(s, e) in a {
        let mut covered = 0.0;
        for &(bs, be) in b {
            let lo = s.max(bs);
            let hi = e.min(be);
            if hi > lo {
                covered += hi - lo;
            }
        }
        total += (e - s) - covered;
    }
    total.max(0.0)
}

fn comm_intervals(st: &RankState, inter_only: bool) -> Vec<(f64, f64)> {
    st.ring
        .iter()
        .chain(&st.other)
        .filter(|iv| !inter_only || iv.link == LinkClass::Inter)
        .map(|iv| (iv.start, iv.end))
        .collect()
}

/// Replays `trace` under `model`. Waits block until the awaited transfers end;
/// a barrier releases every member at the latest member arrival (each arrival
/// first drains that member's outstanding transfers on both streams) plus one
/// α of the widest link class spanned by the group.
pub fn replay_timeline(trace: &Trace, model: &LatencyModel) -> Result<Timeline> {
    model.validate()?;
    if let Some(e) = trace.incomplete().next() {
        return Err(Error::Trace(format!(
            "transfer {} issued by rank {} never completed",
            e.seq, e.rank
        )));
    }
    let p = trace.world_size();
    let mut programs: Vec<Vec<&TraceEvent>> = vec![Vec::new(); p];
    for e in &trace.events {
        if e.rank >= p {
            return Err(Error::Trace(format!("event {} names rank {}", e.seq, e.rank)));
        }
        programs[e.rank].push(e);
    }
    let mut states: Vec<RankState> = (0..p).map(|_| RankState::default()).collect();
    let mut pos = vec![0usize; p];
    let mut parked: Vec<Option<u64>> = vec![None; p];
    let mut arrivals: HashMap<u64, Vec<(usize, f64)>> = HashMap::new();

    loop {
        let mut progressed = false;
        for r in 0..p {
            if parked[r].is_some() {
                continue;
            }
            while let Some(&e) = programs[r].get(pos[r]) {
                let st = &mut states[r];
                match e.kind {
                    OpKind::Push | OpKind::Pull => st.transfer(e, model)?,
                    OpKind::Compute => {
                        let start = st.now;
                        st.now += model.compute_time(e.flops.unwrap_or(0));
                        st.compute.push(Interval {
                            start,
                            end: st.now,
                            seq: e.seq,
                            link: LinkClass::Loopback,
                        });
                    }
                    OpKind::Wait => {
                        for op in &e.waits {
                            let end = *st.op_end.get(op).ok_or_else(|| {
                                Error::Trace(format!("wait {} on unknown op {op}", e.seq))
                            })?;
                            st.now = st.now.max(end);
                            st.outstanding.retain(|o| o != op);
                        }
                    }
                    OpKind::Read | OpKind::Write => {}
                    OpKind::Barrier => {
                        let id = e.barrier_id.ok_or_else(|| {
                            Error::Trace(format!("barrier {} has no id", e.seq))
                        })?;
                        let arrive = st.drain_outstanding();
                        arrivals.entry(id).or_default().push((r, arrive));
                        parked[r] = Some(id);
                        progressed = true;
                        break;
                    }
                }
                pos[r] += 1;
                progressed = true;
            }
        }

        let ready: Vec<u64> = arrivals
            .iter()
            .filter(|(_, arr)| {
                let (r0, _) = arr[0];
                let ev = programs[r0][pos[r0]];
                arr.len() == ev.group.len()
            })
            .map(|(&id, _)| id)
            .collect();
        for id in ready {
            let arr = arrivals.remove(&id).expect("listed above");
            let (r0, _) = arr[0];
            let link = programs[r0][pos[r0]].link;
            let release = arr.iter().map(|&(_, t)| t).fold(0.0, f64::max) + model.barrier_time(link);
            for (r, _) in arr {
                states[r].now = release;
                parked[r] = None;
                pos[r] += 1;
            }
            progressed = true;
        }

        if (0..p).all(|r| pos[r] == programs[r].len() && parked[r].is_none()) {
            break;
        }
        if !progressed {
            let stuck: Vec<usize> = (0..p).filter(|&r| parked[r].is_some()).collect();
            return Err(Error::Trace(format!(
                "barriers never complete in replay; ranks {stuck:?} are parked"
            )));
        }
    }

    let mut ranks = Vec::with_capacity(p);
    let mut makespan: f64 = 0.0;
    for (rank, mut st) in states.into_iter().enumerate() {
        let finish = st.drain_outstanding();
        makespan = makespan.max(finish);
        let compute_union = union(st.compute.iter().map(|iv| (iv.start, iv.end)).collect());
        let comm = union(comm_intervals(&st, false));
        let inter = union(comm_intervals(&st, true));
        let lane = |ivs: &[Interval]| ivs.iter().map(Interval::len).sum::<f64>();
        ranks.push(RankTimeline {
            rank,
            busy: LaneBusy {
                compute: lane(&st.compute),
                ring: lane(&st.ring),
                other: lane(&st.other),
            },
            non_overlapped_comm: uncovered(&comm, &compute_union),
            non_overlapped_inter: uncovered(&inter, &compute_union),
            finish,
            compute: st.compute,
            ring: st.ring,
            other: st.other,
        });
    }
    Ok(Timeline {
        schema_version: TIMELINE_SCHEMA_VERSION,
        model: *model,
        makespan,
        ranks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::cluster::{Cluster, ExecMode, Region};
    use crate::simnet::mesh::Mesh;

    fn model() -> LatencyModel {
        LatencyModel {
            alpha_intra: 1e-6,
            beta_intra: 1e11,
            alpha_inter: 5e-6,
            beta_inter: 1e10,
            compute_rate: 1e9,
        }
    }

    fn two_machines() -> Cluster {
        let c = Cluster::with_mode(Mesh::new(2, 1, 2, 1, 1).unwrap(), ExecMode::RoundRobin);
        c.alloc_symmetric("a", 125_000).unwrap();
        c.alloc_symmetric("b", 125_000).unwrap();
        c
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1.0)
    }

    #[test]
    fn single_inter_transfer_duration() {
        let c = two_machines();
        c.run(|ctx| {
            if ctx.rank() == 0 {
                let e = ctx.push(Region::new("a", 0, 125_000), 1, Region::new("a", 0, 125_000), Stream::Other, None)?;
                ctx.wait(&e)?;
            }
            Ok(())
        })
        .unwrap();
        let tl = replay_timeline(&c.trace(), &model()).unwrap();
        assert!(close(tl.makespan, 1.05e-4), "{}", tl.makespan);
        assert!(close(tl.ranks[0].busy.other, 1.05e-4));
        assert!(close(tl.ranks[0].non_overlapped_inter, 1.05e-4));
    }

    #[test]
    fn same_stream_serializes() {
        let len = 12_500; // 1e5 bytes
        let c = Cluster::with_mode(Mesh::new(1, 2, 1, 2, 1).unwrap(), ExecMode::RoundRobin);
        c.alloc_symmetric("a", len).unwrap();
        c.alloc_symmetric("b", len).unwrap();
        c.run(|ctx| {
            if ctx.rank() == 0 {
                let e1 = ctx.push(Region::new("a", 0, len), 1, Region::new("a", 0, len), Stream::Ring, None)?;
                let e2 = ctx.pull(Region::new("b", 0, len), 1, Region::new("b", 0, len), Stream::Ring, None)?;
                ctx.wait(&e1)?;
                ctx.wait(&e2)?;
            }
            Ok(())
        })
        .unwrap();
        let tl = replay_timeline(&c.trace(), &LatencyModel { beta_intra: 1e10, ..model() }).unwrap();
        let one = 1e-6 + 1e5 / 1e10;
        assert!(close(tl.makespan, 2.0 * one));
        assert!(close(tl.ranks[0].busy.ring, 2.0 * one));
    }

    #[test]
    fn different_streams_on_different_links_overlap() {
        let len = 12_500;
        let c = Cluster::with_mode(Mesh::new(2, 2, 2, 1, 2).unwrap(), ExecMode::RoundRobin);
        c.alloc_symmetric("a", len).unwrap();
        c.alloc_symmetric("b", len).unwrap();
        c.run(|ctx| {
            if ctx.rank() == 0 {
                let e1 = ctx.push(Region::new("a", 0, len), 1, Region::new("a", 0, len), Stream::Ring, None)?;
                let e2 = ctx.push(Region::new("b", 0, len), 2, Region::new("b", 0, len), Stream::Other, None)?;
                ctx.wait(&e1)?;
                ctx.wait(&e2)?;
            }
            Ok(())
        })
        .unwrap();
        let m = LatencyModel { beta_intra: 1e10, ..model() };
        let tl = replay_timeline(&c.trace(), &m).unwrap();
        let intra: f64 = 1e-6 + 1e5 / 1e10;
        let inter = 5e-6 + 1e5 / 1e10;
        assert!(close(tl.makespan, intra.max(inter)));
    }

    #[test]
    fn compute_covering_transfer_hides_it() {
        let c = two_machines();
        c.run(|ctx| {
            if ctx.rank() == 0 {
                let e = ctx.push(Region::new("a", 0, 1000), 1, Region::new("a", 0, 1000), Stream::Other, None)?;
                ctx.compute("cover", 1_000_000, vec![])?;
                ctx.wait(&e)?;
            }
            Ok(())
        })
        .unwrap();
        let tl = replay_timeline(&c.trace(), &model()).unwrap();
        assert_eq!(tl.ranks[0].non_overlapped_comm, 0.0);
        assert!(close(tl.makespan, 1e-3));
    }

    #[test]
    fn single_rank_makespan_is_compute_time() {
        let c = Cluster::new(Mesh::new(1, 1, 1, 1, 1).unwrap());
        c.alloc_symmetric("a", 4).unwrap();
        c.run(|ctx| {
            let e = ctx.push(Region::new("a", 0, 2), 0, Region::new("a", 2, 2), Stream::Other, None)?;
            ctx.compute("x", 3_000, vec![])?;
            ctx.wait(&e)?;
            ctx.barrier_all()
        })
        .unwrap();
        let tl = replay_timeline(&c.trace(), &model()).unwrap();
        assert_eq!(tl.makespan, 3e-6);
    }

    #[test]
    fn barrier_waits_for_slowest_member() {
        let c = two_machines();
        c.run(|ctx| {
            if ctx.rank() == 1 {
                ctx.compute("slow", 2_000, vec![])?;
            }
            ctx.barrier_all()
        })
        .unwrap();
        let tl = replay_timeline(&c.trace(), &model()).unwrap();
        assert!(close(tl.ranks[0].finish, 2e-6 + 5e-6));
        assert!(close(tl.makespan, 7e-6));
    }

    #[test]
    fn incomplete_trace_rejected() {
        let c = two_machines();
        c.run(|ctx| {
            ctx.push(Region::new("a", 0, 1), 1 - ctx.rank(), Region::new("b", 0, 1), Stream::Other, None)?;
            Ok(())
        })
        .unwrap();
        assert!(matches!(replay_timeline(&c.trace(), &model()), Err(Error::Trace(_))));
    }

    #[test]
    fn bad_model_rejected() {
        let c = two_machines();
        let m = LatencyModel { beta_inter: 0.0, ..model() };
        assert!(replay_timeline(&c.trace(), &m).is_err());
    }
}
