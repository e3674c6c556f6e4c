//! Schedule dumps: the idealized torus stage plan and per-rank step lists
//! recovered from an execution trace.

use serde::{Deserialize, Serialize};

use crate::simnet::{ChunkRef, LinkClass, OpKind, TensorKind, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    PullQ,
    PullKv,
    PushO,
}

/// Chunk `X_{seq, head}` of tensor `X`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChunkId {
    pub tensor: TensorKind,
    pub seq: usize,
    pub head: usize,
}

impl ChunkId {
    fn new(tensor: TensorKind, seq: usize, head: usize) -> Self {
        Self { tensor, seq, head }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Move {
    pub chunk: ChunkId,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub kind: StageKind,
    /// Stage number within its kind, from 1; 0 for push-O.
    pub k: usize,
    /// Sequence indices of the query chunks attended in this stage.
    pub q_seq: Vec<usize>,
    /// Sequence indices of the key/value chunks attended in this stage.
    pub kv_seq: Vec<usize>,
    pub sends: Vec<Move>,
    pub receives: Vec<Move>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankStages {
    pub t: usize,
    pub stages: Vec<Stage>,
}

/// Stage plan of torus attention across `n` torus ranks. Rank `t` owns head
/// chunk `t`; every stage attends the listed query and key/value sequence
/// chunks of that head while the listed chunks travel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TorusSchedule {
    pub n: usize,
    pub ranks: Vec<RankStages>,
}

impl TorusSchedule {
    pub fn new(n: usize) -> Self {
        let mut ranks: Vec<RankStages> = (0..n)
            .map(|t| RankStages {
                t,
                stages: own_stages(n, t),
            })
            .collect();
        // Fill receives from the matching stage of every sender.
        for i in 0..n {
            for s in 0..ranks[i].stages.len() {
                let sends = ranks[i].stages[s].sends.clone();
                for mv in sends {
                    ranks[mv.to].stages[s].receives.push(mv);
                }
            }
        }
        for r in &mut ranks {
            for st in &mut r.stages {
                st.receives.sort_by_key(|m| (m.from, m.chunk));
            }
        }
        Self { n, ranks }
    }

    /// Every `(q_seq, kv_seq, head)` attended, in schedule order.
    pub fn computed_pairs(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for r in &self.ranks {
            for st in &r.stages {
                for &q in &st.q_seq {
                    for &kv in &st.kv_seq {
                        out.push((q, kv, r.t));
                    }
                }
            }
        }
        out
    }
}

fn own_stages(n: usize, t: usize) -> Vec<Stage> {
    let minus = |k: usize| (t + n - k % n) % n;
    let plus = |k: usize| (t + k) % n;
    let send = |tensor, to: usize| Move {
        chunk: ChunkId::new(tensor, t, to),
        from: t,
        to,
    };
    let mut stages = Vec::new();
    for k in 1..=n {
        let mut sends = Vec::new();
        if k < n {
            sends.push(send(TensorKind::Q, plus(k)));
        } else if plus(1) != t {
            sends.push(send(TensorKind::K, plus(1)));
            sends.push(send(TensorKind::V, plus(1)));
        }
        stages.push(Stage {
            kind: StageKind::PullQ,
            k,
            q_seq: vec![minus(k - 1)],
            kv_seq: vec![t],
            sends,
            receives: Vec::new(),
        });
    }
    let others: Vec<usize> = (1..n).map(minus).collect();
    for k in 1..n {
        let mut sends = Vec::new();
        if k + 1 < n {
            sends.push(send(TensorKind::K, plus(k + 1)));
            sends.push(send(TensorKind::V, plus(k + 1)));
        }
        stages.push(Stage {
            kind: StageKind::PullKv,
            k,
            q_seq: others.clone(),
            kv_seq: vec![minus(k)],
            sends,
            receives: Vec::new(),
        });
    }
    if n > 1 {
        stages.push(Stage {
            kind: StageKind::PushO,
            k: 0,
            q_seq: vec![t],
            kv_seq: others.clone(),
            sends: others
                .iter()
                .map(|&a| Move {
                    chunk: ChunkId::new(TensorKind::O, a, t),
                    from: t,
                    to: a,
                })
                .collect(),
            receives: Vec::new(),
        });
    }
    stages
}

/// One transfer as seen by its initiating rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceTransfer {
    pub kind: OpKind,
    pub peer: usize,
    pub buffer: String,
    pub elements: u64,
    pub link: LinkClass,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chunk: Option<ChunkRef>,
}

/// Work of one rank up to and including one compute step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub label: String,
    pub flops: u64,
    /// `(q_part, kv_part, head_part)` pairs attended.
    pub pairs: Vec<(usize, usize, usize)>,
    /// Transfers issued since the previous step.
    pub issued: Vec<TraceTransfer>,
    /// Barrier groups entered since the previous step.
    pub barriers: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSchedule {
    pub rank: usize,
    pub steps: Vec<TraceStep>,
}

/// Groups each rank's events into steps that end at compute events. Events
/// after the last compute form a final step labelled `finish`.
pub fn trace_schedule(trace: &Trace) -> Vec<TraceSchedule> {
    (0..trace.world_size())
        .map(|rank| {
            let mut steps = Vec::new();
            let mut issued = Vec::new();
            let mut barriers = Vec::new();
            for e in trace.rank_events(rank) {
                match e.kind {
                    OpKind::Push | OpKind::Pull => issued.push(TraceTransfer {
                        kind: e.kind,
                        peer: if e.kind == OpKind::Push { e.dst } else { e.src },
                        buffer: e.buffer.clone(),
                        elements: e.elements(),
                        link: e.link,
                        chunk: e.chunk,
                    }),
                    OpKind::Barrier => barriers.push(e.group.clone()),
                    OpKind::Compute => steps.push(TraceStep {
                        label: e.label.clone().unwrap_or_default(),
                        flops: e.flops.unwrap_or(0),
                        pairs: e.pairs.iter().map(|p| (p.q_part, p.kv_part, p.head_part)).collect(),
                        issued: std::mem::take(&mut issued),
                        barriers: std::mem::take(&mut barriers),
                    }),
                    _ => {}
                }
            }
            if !issued.is_empty() || !barriers.is_empty() {
                steps.push(TraceStep {
                    label: "finish".to_string(),
                    flops: 0,
                    pairs: Vec::new(),
                    issued,
                    barriers,
                });
            }
            TraceSchedule { rank, steps }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_machine_has_one_local_stage() {
        let s = TorusSchedule::new(1);
        assert_eq!(s.ranks.len(), 1);
        let st = &s.ranks[0].stages;
        assert_eq!(st.len(), 1);
        assert!(st[0].sends.is_empty() && st[0].receives.is_empty());
    }

    #[test]
    fn stage_counts() {
        for n in 2..6 {
            let s = TorusSchedule::new(n);
            for r in &s.ranks {
                let count = |k| r.stages.iter().filter(|s| s.kind == k).count();
                assert_eq!(count(StageKind::PullQ), n);
                assert_eq!(count(StageKind::PullKv), n - 1);
                assert_eq!(count(StageKind::PushO), 1);
            }
        }
    }

    #[test]
    fn every_pair_once() {
        for n in 1..7 {
            let mut pairs = TorusSchedule::new(n).computed_pairs();
            pairs.sort();
            let mut want = Vec::new();
            for q in 0..n {
                for kv in 0..n {
                    for h in 0..n {
                        want.push((q, kv, h));
                    }
                }
            }
            want.sort();
            assert_eq!(pairs, want, "n={n}");
        }
    }

    #[test]
    fn chunks_arrive_before_use_and_stationary_never_move() {
        for n in 2..7 {
            let s = TorusSchedule::new(n);
            for r in &s.ranks {
                let mut have_q = vec![r.t];
                let mut have_kv = vec![r.t];
                for st in &r.stages {
                    for q in &st.q_seq {
                        assert!(have_q.contains(q), "n={n} t={} {:?}", r.t, st);
                    }
                    for kv in &st.kv_seq {
                        assert!(have_kv.contains(kv), "n={n} t={} {:?}", r.t, st);
                    }
                    for mv in &st.sends {
                        assert_ne!(mv.chunk.seq, mv.chunk.head);
                    }
                    for mv in &st.receives {
                        match mv.chunk.tensor {
                            TensorKind::Q => have_q.push(mv.chunk.seq),
                            TensorKind::K => have_kv.push(mv.chunk.seq),
                            _ => {}
                        }
                    }
                }
            }
        }
    }
}
