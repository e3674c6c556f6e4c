use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::mesh::Mesh;
use crate::error::{Error, Result};

/// Version of the JSON-lines trace schema.
pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// Element width of every simulated buffer (f64).
pub const ELEMENT_BYTES: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Push,
    Pull,
    Barrier,
    Wait,
    Compute,
    /// Local program read of an own buffer.
    Read,
    /// Local program write of an own buffer.
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkClass {
    Intra,
    Inter,
    #[serde(rename = "self")]
    Loopback,
}

impl LinkClass {
    pub fn between(mesh: &Mesh, a: usize, b: usize) -> Self {
        if a == b {
            LinkClass::Loopback
        } else if mesh.same_machine(a, b) {
            LinkClass::Intra
        } else {
            LinkClass::Inter
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Ring,
    Other,
    Compute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TensorKind {
    Q,
    K,
    V,
    O,
}

/// Identifies which logical tensor chunk a transfer carries.
///
/// `seq_part` is the sequence partition the tokens belong to and `head_part`
/// the head partition; for the torus strategy these are torus indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChunkRef {
    pub tensor: TensorKind,
    pub seq_part: usize,
    pub head_part: usize,
}

/// One (query block, key/value block) attention product recorded by a compute op.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ComputePair {
    pub q_part: usize,
    pub kv_part: usize,
    pub head_part: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub kind: OpKind,
    /// Rank that issued the operation.
    pub rank: usize,
    pub src: usize,
    pub dst: usize,
    /// Buffer on the remote side (push destination, pull source) or the
    /// accessed buffer for local reads/writes.
    pub buffer: String,
    /// Byte offset into `buffer`.
    pub offset: u64,
    pub bytes: u64,
    pub link: LinkClass,
    pub issue_step: u64,
    pub completion_step: Option<u64>,
    pub stream: Stream,
    /// Buffer and byte offset on the issuing rank for push/pull.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_buffer: Option<String>,
    #[serde(default)]
    pub local_offset: u64,
    /// Issuer's vector clock when the operation was issued.
    pub vclock: Vec<u64>,
    /// Issuer's own clock component when the operation was observed complete.
    pub completion_clock: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comm_id: Option<u64>,
    /// Ops completed by a wait.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub waits: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub barrier_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub group: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk: Option<ChunkRef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pairs: Vec<ComputePair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl TraceEvent {
    pub fn is_transfer(&self) -> bool {
        matches!(self.kind, OpKind::Push | OpKind::Pull)
    }

    pub fn elements(&self) -> u64 {
        self.bytes / ELEMENT_BYTES
    }

    pub fn is_barrier_all(&self, world: usize) -> bool {
        self.kind == OpKind::Barrier && self.group.len() == world
    }
}

/// Transfer volume attributed to one rank, in elements.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkVolume {
    pub intra: u64,
    pub inter: u64,
}

impl LinkVolume {
    pub fn total(&self) -> u64 {
        self.intra + self.inter
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub mesh: Mesh,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn world_size(&self) -> usize {
        self.mesh.world_size()
    }

    pub fn rank_events(&self, rank: usize) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.rank == rank)
    }

    /// Elements moved by transfers that `rank` initiated; self copies excluded.
    pub fn volume(&self, rank: usize) -> LinkVolume {
        let mut v = LinkVolume::default();
        for e in self.rank_events(rank).filter(|e| e.is_transfer()) {
            match e.link {
                LinkClass::Intra => v.intra += e.elements(),
                LinkClass::Inter => v.inter += e.elements(),
                LinkClass::Loopback => {}
            }
        }
        v
    }

    pub fn volumes(&self) -> Vec<LinkVolume> {
        (0..self.world_size()).map(|r| self.volume(r)).collect()
    }

    /// Inter-machine elements initiated by all GPUs of `machine`.
    pub fn machine_inter_volume(&self, machine: usize) -> u64 {
        (0..self.world_size())
            .filter(|&r| self.mesh.machine_of(r) == machine)
            .map(|r| self.volume(r).inter)
            .sum()
    }

    /// `(barrier_all, group barriers)` issued by `rank`.
    pub fn barrier_counts(&self, rank: usize) -> (usize, usize) {
        let world = self.world_size();
        let mut all = 0;
        let mut group = 0;
        for e in self.rank_events(rank).filter(|e| e.kind == OpKind::Barrier) {
            if e.group.len() == world {
                all += 1;
            } else {
                group += 1;
            }
        }
        (all, group)
    }

    /// All compute pairs recorded cluster-wide.
    pub fn compute_pairs(&self) -> Vec<ComputePair> {
        self.events
            .iter()
            .filter(|e| e.kind == OpKind::Compute)
            .flat_map(|e| e.pairs.iter().copied())
            .collect()
    }

    pub fn total_flops(&self, rank: usize) -> u64 {
        self.rank_events(rank).filter_map(|e| e.flops).sum()
    }

    /// Transfers whose completion was never observed by a wait or barrier.
    pub fn incomplete(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events
            .iter()
            .filter(|e| e.is_transfer() && e.completion_step.is_none())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(mesh: Mesh, r: R) -> Result<Self> {
        let mut events = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: TraceEvent = serde_json::from_str(&line)
                .map_err(|err| Error::Format(format!("trace line {}: {err}", i + 1)))?;
            events.push(e);
        }
        Ok(Self { mesh, events })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn push(rank: usize, dst: usize, bytes: u64, link: LinkClass) -> TraceEvent {
        TraceEvent {
            seq: 0,
            kind: OpKind::Push,
            rank,
            src: rank,
            dst,
            buffer: "x".into(),
            offset: 0,
            bytes,
            link,
            issue_step: 1,
            completion_step: Some(2),
            stream: Stream::Other,
            local_buffer: Some("y".into()),
            local_offset: 0,
            vclock: vec![1, 0],
            completion_clock: Some(2),
            op_id: Some(0),
            comm_id: Some(0),
            waits: vec![],
            barrier_id: None,
            group: vec![],
            flops: None,
            chunk: None,
            pairs: vec![],
            label: None,
        }
    }

    #[test]
    fn link_classification() {
        let mesh = Mesh::new(2, 2, 2, 1, 2).unwrap();
        assert_eq!(LinkClass::between(&mesh, 1, 1), LinkClass::Loopback);
        assert_eq!(LinkClass::between(&mesh, 0, 1), LinkClass::Intra);
        assert_eq!(LinkClass::between(&mesh, 1, 2), LinkClass::Inter);
    }

    #[test]
    fn self_link_serializes_as_self() {
        let s = serde_json::to_string(&LinkClass::Loopback).unwrap();
        assert_eq!(s, "\"self\"");
    }

    #[test]
    fn volumes_skip_self_traffic() {
        let mesh = Mesh::new(2, 1, 2, 1, 1).unwrap();
        let trace = Trace {
            mesh,
            events: vec![
                push(0, 1, 4096, LinkClass::Inter),
                push(0, 0, 800, LinkClass::Loopback),
            ],
        };
        assert_eq!(trace.volume(0), LinkVolume { intra: 0, inter: 512 });
        assert_eq!(trace.machine_inter_volume(0), 512);
        assert_eq!(trace.volume(1).total(), 0);
    }

    #[test]
    fn jsonl_round_trip() {
        let mesh = Mesh::new(2, 1, 2, 1, 1).unwrap();
        let trace = Trace {
            mesh,
            events: vec![push(0, 1, 64, LinkClass::Inter), push(1, 0, 8, LinkClass::Inter)],
        };
        let text = trace.to_jsonl();
        assert_eq!(text.lines().count(), 2);
        let back = Trace::read_jsonl(mesh, text.as_bytes()).unwrap();
        assert_eq!(back, trace);
    }
}
