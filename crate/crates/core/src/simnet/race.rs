use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::trace::{OpKind, Trace, TraceEvent};

/// Two conflicting accesses with no happens-before order between them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hazard {
    /// Rank owning the memory.
    pub rank: usize,
    pub buffer: String,
    /// Trace sequence numbers of the two events.
    pub first: u64,
    pub second: u64,
    pub first_kind: OpKind,
    pub second_kind: OpKind,
}

#[derive(Debug)]
struct Access<'a> {
    begin: u64,
    end_byte: u64,
    write: bool,
    event: &'a TraceEvent,
}

impl Access<'_> {
    /// Issuer's clock after which the access is known finished.
    fn done_clock(&self) -> Option<u64> {
        self.event.completion_clock
    }

    fn happens_before(&self, other: &Access<'_>) -> bool {
        let issuer = self.event.rank;
        match self.done_clock() {
            Some(done) => done <= other.event.vclock[issuer],
            None => false,
        }
    }
}

fn accesses(e: &TraceEvent) -> Vec<(usize, &str, Access<'_>)> {
    let remote = |write| Access {
        begin: e.offset,
        end_byte: e.offset + e.bytes,
        write,
        event: e,
    };
    let local = |write| Access {
        begin: e.local_offset,
        end_byte: e.local_offset + e.bytes,
        write,
        event: e,
    };
    let local_name = e.local_buffer.as_deref().unwrap_or(&e.buffer);
    match e.kind {
        OpKind::Push => vec![
            (e.rank, local_name, local(false)),
            (e.dst, e.buffer.as_str(), remote(true)),
        ],
        OpKind::Pull => vec![
            (e.src, e.buffer.as_str(), remote(false)),
            (e.rank, local_name, local(true)),
        ],
        OpKind::Read => vec![(e.rank, e.buffer.as_str(), remote(false))],
        OpKind::Write => vec![(e.rank, e.buffer.as_str(), remote(true))],
        _ => Vec::new(),
    }
}

/// Reports every pair of overlapping accesses, at least one a write, that is
/// not ordered by waits, barriers or program order.
pub fn race_check(trace: &Trace) -> Vec<Hazard> {
    let mut by_buffer: BTreeMap<(usize, &str), Vec<Access<'_>>> = BTreeMap::new();
    for e in &trace.events {
        for (rank, name, acc) in accesses(e) {
            if acc.end_byte > acc.begin {
                by_buffer.entry((rank, name)).or_default().push(acc);
            }
        }
    }
    let mut hazards = Vec::new();
    for ((rank, name), mut accs) in by_buffer {
        accs.sort_by_key(|a| (a.begin, a.event.seq));
        for i in 0..accs.len() {
            let a = &accs[i];
            for b in accs[i + 1..].iter().take_while(|b| b.begin < a.end_byte) {
                if !(a.write || b.write) || std::ptr::eq(a.event, b.event) {
                    continue;
                }
                if a.happens_before(b) || b.happens_before(a) {
                    continue;
                }
                let (x, y) = if a.event.seq <= b.event.seq { (a, b) } else { (b, a) };
                hazards.push(Hazard {
                    rank,
                    buffer: name.to_string(),
                    first: x.event.seq,
                    second: y.event.seq,
                    first_kind: x.event.kind,
                    second_kind: y.event.kind,
                });
            }
        }
    }
    hazards.sort_by_key(|h| (h.first, h.second));
    hazards
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::cluster::{Cluster, ExecMode, Region};
    use crate::simnet::mesh::Mesh;
    use crate::simnet::trace::Stream;

    fn pair() -> Cluster {
        let c = Cluster::with_mode(Mesh::new(1, 2, 1, 2, 1).unwrap(), ExecMode::RoundRobin);
        c.alloc_symmetric("src", 8).unwrap();
        c.alloc_symmetric("dst", 8).unwrap();
        c
    }

    #[test]
    fn read_before_wait_is_flagged() {
        let c = pair();
        c.run(|ctx| {
            if ctx.rank() == 0 {
                let e = ctx.pull(Region::new("dst", 0, 4), 1, Region::new("src", 0, 4), Stream::Ring, None)?;
                ctx.read(&Region::new("dst", 0, 4))?;
                ctx.wait(&e)?;
            }
            Ok(())
        })
        .unwrap();
        let h = race_check(&c.trace());
        assert_eq!(h.len(), 1);
        assert_eq!((h[0].first_kind, h[0].second_kind), (OpKind::Pull, OpKind::Read));
    }

    #[test]
    fn read_after_wait_is_clean() {
        let c = pair();
        c.run(|ctx| {
            if ctx.rank() == 0 {
                let e = ctx.pull(Region::new("dst", 0, 4), 1, Region::new("src", 0, 4), Stream::Ring, None)?;
                ctx.wait(&e)?;
                ctx.read(&Region::new("dst", 0, 4))?;
            }
            Ok(())
        })
        .unwrap();
        assert!(race_check(&c.trace()).is_empty());
    }

    #[test]
    fn disjoint_unordered_pushes_are_clean() {
        let c = pair();
        c.run(|ctx| {
            if ctx.rank() == 0 {
                ctx.push(Region::new("src", 0, 4), 1, Region::new("dst", 0, 4), Stream::Other, None)?;
            } else {
                ctx.push(Region::new("src", 0, 4), 1, Region::new("dst", 4, 4), Stream::Other, None)?;
            }
            ctx.barrier_all()
        })
        .unwrap();
        assert!(race_check(&c.trace()).is_empty());
    }

    #[test]
    fn overlapping_unordered_pushes_conflict() {
        let c = pair();
        c.run(|ctx| {
            ctx.push(Region::new("src", 0, 4), 1, Region::new("dst", 2, 4), Stream::Other, None)?;
            ctx.barrier_all()
        })
        .unwrap();
        let h = race_check(&c.trace());
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].rank, 1);
    }

    #[test]
    fn barrier_orders_remote_write_and_later_read() {
        let c = pair();
        c.run(|ctx| {
            if ctx.rank() == 0 {
                ctx.push(Region::new("src", 0, 8), 1, Region::new("dst", 0, 8), Stream::Other, None)?;
            }
            ctx.barrier_all()?;
            if ctx.rank() == 1 {
                ctx.read(&Region::new("dst", 0, 8))?;
            }
            Ok(())
        })
        .unwrap();
        assert!(race_check(&c.trace()).is_empty());
    }

    #[test]
    fn missing_barrier_between_remote_write_and_read_is_flagged() {
        let c = pair();
        c.run(|ctx| {
            if ctx.rank() == 0 {
                let e = ctx.push(Region::new("src", 0, 8), 1, Region::new("dst", 0, 8), Stream::Other, None)?;
                ctx.wait(&e)?;
            } else {
                ctx.read(&Region::new("dst", 0, 8))?;
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(race_check(&c.trace()).len(), 1);
    }
}
