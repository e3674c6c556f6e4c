//! Simulated multi-GPU cluster with one-sided push/pull, waits and barriers.
//!
//! Every cross-rank effect happens under one global lock. Payloads are copied
//! when an op is issued; waits and barriers only mark completion and advance
//! the happens-before clocks recorded in the trace.

use std::collections::{BTreeMap, HashMap};
use std::panic::{self, AssertUnwindSafe};
use std::sync::{Condvar, Mutex, MutexGuard, PoisonError};

use super::mesh::{Coord, Mesh};
use super::trace::{
    ChunkRef, ComputePair, LinkClass, OpKind, Stream, Trace, TraceEvent, ELEMENT_BYTES,
};
use crate::error::{Error, Result};

/// Environment variable capping the number of concurrently running workers.
pub const THREADS_ENV: &str = "SEQPAR_SIM_THREADS";

/// Contiguous element range of a named buffer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Region {
    pub buffer: String,
    pub offset: usize,
    pub len: usize,
}

impl Region {
    pub fn new(buffer: impl Into<String>, offset: usize, len: usize) -> Self {
        Self {
            buffer: buffer.into(),
            offset,
            len,
        }
    }
}

/// One leg of a scatter-push or gather-pull.
#[derive(Debug, Clone, PartialEq)]
pub struct Transfer {
    /// Region on the issuing rank.
    pub local: Region,
    pub peer: usize,
    /// Region of a symmetric buffer on `peer`.
    pub remote: Region,
    pub chunk: Option<ChunkRef>,
}

/// Handle for issued one-sided operations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommEvent {
    ops: Vec<u64>,
}

impl CommEvent {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn join(&mut self, other: CommEvent) {
        self.ops.extend(other.ops);
    }

    pub fn ops(&self) -> &[u64] {
        &self.ops
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// One OS thread per rank, at most `max_active` running at once.
    Threaded { max_active: usize },
    /// Ranks take turns one op at a time in rank order.
    RoundRobin,
}

impl ExecMode {
    /// Threaded mode capped by `SEQPAR_SIM_THREADS` or the available parallelism.
    pub fn from_env() -> Self {
        let cap = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| {
                std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1)
            });
        ExecMode::Threaded { max_active: cap }
    }
}

#[derive(Debug)]
struct Buffer {
    data: Vec<f64>,
    symmetric: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Runnable,
    Blocked,
    Done,
}

#[derive(Debug)]
struct OpState {
    issuer: usize,
    event: usize,
    done: bool,
}

#[derive(Debug, Default)]
struct BarrierSlot {
    generation: u64,
    instance: u64,
    arrived: Vec<(usize, usize)>,
}

#[derive(Debug)]
struct State {
    mem: Vec<BTreeMap<String, Buffer>>,
    events: Vec<TraceEvent>,
    ops: Vec<OpState>,
    outstanding: Vec<Vec<u64>>,
    vc: Vec<Vec<u64>>,
    lamport: Vec<u64>,
    barriers: HashMap<Vec<usize>, BarrierSlot>,
    blocked_on: Vec<Option<Vec<usize>>>,
    status: Vec<Status>,
    holding: Vec<bool>,
    active: usize,
    turn: usize,
    failure: Option<Error>,
    next_comm: u64,
    next_barrier: u64,
}

impl State {
    fn new(p: usize) -> Self {
        Self {
            mem: (0..p).map(|_| BTreeMap::new()).collect(),
            events: Vec::new(),
            ops: Vec::new(),
            outstanding: vec![Vec::new(); p],
            vc: vec![vec![0; p]; p],
            lamport: vec![0; p],
            barriers: HashMap::new(),
            blocked_on: vec![None; p],
            status: vec![Status::Runnable; p],
            holding: vec![false; p],
            active: 0,
            turn: 0,
            failure: None,
            next_comm: 0,
            next_barrier: 0,
        }
    }

    fn tick(&mut self, rank: usize) {
        self.vc[rank][rank] += 1;
        self.lamport[rank] += 1;
    }

    fn buffer(&self, rank: usize, region: &Region) -> Result<&Buffer> {
        let buf = self.mem[rank].get(&region.buffer).ok_or_else(|| {
            Error::Buffer(format!("rank {rank} has no buffer '{}'", region.buffer))
        })?;
        if region.offset + region.len > buf.data.len() {
            return Err(Error::Buffer(format!(
                "region [{}, {}) exceeds buffer '{}' of {} elements on rank {rank}",
                region.offset,
                region.offset + region.len,
                region.buffer,
                buf.data.len()
            )));
        }
        Ok(buf)
    }

    fn remote_buffer(&self, rank: usize, region: &Region) -> Result<&Buffer> {
        let buf = self.buffer(rank, region)?;
        if !buf.symmetric {
            return Err(Error::Buffer(format!(
                "buffer '{}' on rank {rank} is not symmetric and cannot be accessed remotely",
                region.buffer
            )));
        }
        Ok(buf)
    }

    fn read(&self, rank: usize, region: &Region) -> Result<Vec<f64>> {
        let buf = self.buffer(rank, region)?;
        Ok(buf.data[region.offset..region.offset + region.len].to_vec())
    }

    fn write(&mut self, rank: usize, region: &Region, data: &[f64]) -> Result<()> {
        self.buffer(rank, region)?;
        if data.len() != region.len {
            return Err(Error::Buffer(format!(
                "writing {} elements into a region of {}",
                data.len(),
                region.len
            )));
        }
        let buf = self.mem[rank].get_mut(&region.buffer).expect("checked above");
        buf.data[region.offset..region.offset + region.len].copy_from_slice(data);
        Ok(())
    }

    fn base_event(&self, rank: usize, kind: OpKind, stream: Stream) -> TraceEvent {
        TraceEvent {
            seq: self.events.len() as u64,
            kind,
            rank,
            src: rank,
            dst: rank,
            buffer: String::new(),
            offset: 0,
            bytes: 0,
            link: LinkClass::Loopback,
            issue_step: self.lamport[rank],
            completion_step: None,
            stream,
            local_buffer: None,
            local_offset: 0,
            vclock: self.vc[rank].clone(),
            completion_clock: None,
            op_id: None,
            comm_id: None,
            waits: Vec::new(),
            barrier_id: None,
            group: Vec::new(),
            flops: None,
            chunk: None,
            pairs: Vec::new(),
            label: None,
        }
    }

    fn complete_op(&mut self, op: u64, rank: usize) {
        let clock = self.vc[rank][rank];
        let step = self.lamport[rank];
        let st = &mut self.ops[op as usize];
        if st.done {
            return;
        }
        st.done = true;
        let ev = &mut self.events[st.event];
        ev.completion_clock = Some(clock);
        ev.completion_step = Some(step);
    }

    fn next_runnable_after(&self, rank: usize) -> Option<usize> {
        let p = self.status.len();
        (1..=p)
            .map(|i| (rank + i) % p)
            .find(|&r| self.status[r] == Status::Runnable)
    }

    /// Flags a deadlock when every unfinished rank is parked in a barrier.
    fn check_deadlock(&mut self) {
        if self.failure.is_some() {
            return;
        }
        let any_runnable = self.status.contains(&Status::Runnable);
        if any_runnable {
            return;
        }
        let Some(stuck) = (0..self.status.len()).find(|&r| self.status[r] == Status::Blocked)
        else {
            return;
        };
        let group = self.blocked_on[stuck].clone().unwrap_or_default();
        let arrived: Vec<usize> = self
            .barriers
            .get(&group)
            .map(|s| s.arrived.iter().map(|&(r, _)| r).collect())
            .unwrap_or_default();
        let missing = group
            .iter()
            .copied()
            .filter(|r| !arrived.contains(r))
            .collect();
        self.failure = Some(Error::Deadlock { group, missing });
    }
}

fn lock(m: &Mutex<State>) -> MutexGuard<'_, State> {
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

/// A simulated cluster of `N * M` ranks.
#[derive(Debug)]
pub struct Cluster {
    mesh: Mesh,
    mode: ExecMode,
    state: Mutex<State>,
    cv: Condvar,
}

impl Cluster {
    pub fn new(mesh: Mesh) -> Self {
        Self::with_mode(mesh, ExecMode::from_env())
    }

    pub fn with_mode(mesh: Mesh, mode: ExecMode) -> Self {
        let mode = match mode {
            ExecMode::Threaded { max_active } => ExecMode::Threaded {
                max_active: max_active.max(1),
            },
            m => m,
        };
        Self {
            mesh,
            mode,
            state: Mutex::new(State::new(mesh.world_size())),
            cv: Condvar::new(),
        }
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    fn check_rank(&self, rank: usize) -> Result<()> {
        if rank >= self.mesh.world_size() {
            return Err(Error::Buffer(format!(
                "rank {rank} outside a world of {}",
                self.mesh.world_size()
            )));
        }
        Ok(())
    }

    fn alloc(&self, rank: usize, name: &str, len: usize, symmetric: bool) -> Result<()> {
        self.check_rank(rank)?;
        let mut st = lock(&self.state);
        if st.mem[rank].contains_key(name) {
            return Err(Error::Buffer(format!(
                "buffer '{name}' already allocated on rank {rank}"
            )));
        }
        st.mem[rank].insert(
            name.to_string(),
            Buffer {
                data: vec![0.0; len],
                symmetric,
            },
        );
        Ok(())
    }

    /// Allocates a zeroed, remotely addressable buffer of `len` elements on every rank.
    pub fn alloc_symmetric(&self, name: &str, len: usize) -> Result<()> {
        for rank in 0..self.mesh.world_size() {
            self.alloc(rank, name, len, true)?;
        }
        Ok(())
    }

    /// Allocates a buffer only the owning rank may touch.
    pub fn alloc_local(&self, rank: usize, name: &str, len: usize) -> Result<()> {
        self.alloc(rank, name, len, false)
    }

    /// Host-side initialization before any rank runs.
    pub fn load(&self, rank: usize, name: &str, offset: usize, data: &[f64]) -> Result<()> {
        self.check_rank(rank)?;
        lock(&self.state).write(rank, &Region::new(name, offset, data.len()), data)
    }

    pub fn buffer(&self, rank: usize, name: &str) -> Result<Vec<f64>> {
        self.check_rank(rank)?;
        let st = lock(&self.state);
        let buf = st.mem[rank]
            .get(name)
            .ok_or_else(|| Error::Buffer(format!("rank {rank} has no buffer '{name}'")))?;
        Ok(buf.data.clone())
    }

    pub fn buffer_names(&self, rank: usize) -> Vec<String> {
        lock(&self.state).mem[rank].keys().cloned().collect()
    }

    pub fn trace(&self) -> Trace {
        Trace {
            mesh: self.mesh,
            events: lock(&self.state).events.clone(),
        }
    }

    /// Runs `program` on every rank and returns the per-rank results in rank order.
    pub fn run<T, F>(&self, program: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&mut RankCtx<'_>) -> Result<T> + Sync,
    {
        let p = self.mesh.world_size();
        {
            let mut st = lock(&self.state);
            st.status = vec![Status::Runnable; p];
            st.blocked_on = vec![None; p];
            st.holding = vec![false; p];
            st.failure = None;
            st.active = 0;
            st.turn = 0;
        }
        let program = &program;
        let outcomes: Vec<std::thread::Result<Result<T>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..p)
                .map(|rank| {
                    s.spawn(move || {
                        let mut ctx = RankCtx {
                            cluster: self,
                            rank,
                        };
                        ctx.start();
                        let out = panic::catch_unwind(AssertUnwindSafe(|| program(&mut ctx)));
                        let err = match &out {
                            Ok(Ok(_)) => None,
                            Ok(Err(e)) => Some(e.clone()),
                            Err(_) => Some(Error::Trace(format!("rank {rank} panicked"))),
                        };
                        ctx.finish(err);
                        out
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("rank worker wrapper does not panic"))
                .collect()
        });
        let mut results = Vec::with_capacity(p);
        let mut first_err = None;
        for out in outcomes {
            match out {
                Ok(Ok(v)) => results.push(v),
                Ok(Err(e)) => {
                    first_err.get_or_insert(e);
                }
                Err(payload) => panic::resume_unwind(payload),
            }
        }
        let failure = lock(&self.state).failure.clone();
        match failure.or(first_err) {
            Some(e) => Err(e),
            None => Ok(results),
        }
    }
}

/// The per-rank program interface.
pub struct RankCtx<'a> {
    cluster: &'a Cluster,
    rank: usize,
}

impl<'a> RankCtx<'a> {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn mesh(&self) -> &Mesh {
        &self.cluster.mesh
    }

    pub fn coord(&self) -> Coord {
        self.cluster.mesh.coord(self.rank)
    }

    fn lock(&self) -> MutexGuard<'a, State> {
        lock(&self.cluster.state)
    }

    fn wait_cv<'g>(&self, g: MutexGuard<'g, State>) -> MutexGuard<'g, State> {
        self.cluster
            .cv
            .wait(g)
            .unwrap_or_else(PoisonError::into_inner)
    }

    fn acquire(&self, mut st: MutexGuard<'a, State>) -> MutexGuard<'a, State> {
        match self.cluster.mode {
            ExecMode::Threaded { max_active } => {
                if !st.holding[self.rank] {
                    while st.active >= max_active && st.failure.is_none() {
                        st = self.wait_cv(st);
                    }
                    st.active += 1;
                    st.holding[self.rank] = true;
                }
            }
            ExecMode::RoundRobin => {
                while st.turn != self.rank && st.failure.is_none() {
                    st = self.wait_cv(st);
                }
            }
        }
        st
    }

    /// Gives up the right to run; caller must have updated its status first.
    fn release(&self, st: &mut State) {
        match self.cluster.mode {
            ExecMode::Threaded { .. } => {
                if std::mem::take(&mut st.holding[self.rank]) {
                    st.active -= 1;
                }
            }
            ExecMode::RoundRobin => {
                if let Some(next) = st.next_runnable_after(self.rank) {
                    st.turn = next;
                }
            }
        }
    }

    fn start(&mut self) {
        let st = self.lock();
        drop(self.acquire(st));
    }

    fn finish(&mut self, err: Option<Error>) {
        let mut st = self.lock();
        st.status[self.rank] = Status::Done;
        if let Some(e) = err {
            st.failure.get_or_insert(e);
        }
        self.release(&mut st);
        st.check_deadlock();
        drop(st);
        self.cluster.cv.notify_all();
    }

    /// Runs one op under the global lock, then yields in round-robin mode.
    fn op<R>(&mut self, f: impl FnOnce(&mut State, usize) -> Result<R>) -> Result<R> {
        let mut st = self.lock();
        if let Some(e) = &st.failure {
            return Err(e.clone());
        }
        let out = f(&mut st, self.rank);
        if self.cluster.mode == ExecMode::RoundRobin {
            self.release(&mut st);
            self.cluster.cv.notify_all();
            st = self.acquire(st);
            if let Some(e) = &st.failure {
                return Err(e.clone());
            }
        }
        drop(st);
        out
    }

    fn issue(
        &mut self,
        kind: OpKind,
        legs: &[Transfer],
        stream: Stream,
    ) -> Result<CommEvent> {
        let mesh = self.cluster.mesh;
        for leg in legs {
            self.cluster.check_rank(leg.peer)?;
        }
        self.op(|st, me| {
            let comm = st.next_comm;
            st.next_comm += 1;
            let mut handle = CommEvent::empty();
            for leg in legs {
                if leg.local.len != leg.remote.len {
                    return Err(Error::Buffer(format!(
                        "transfer length mismatch: local {} vs remote {}",
                        leg.local.len, leg.remote.len
                    )));
                }
                st.remote_buffer(leg.peer, &leg.remote)?;
                st.buffer(me, &leg.local)?;
                let (src, dst) = match kind {
                    OpKind::Push => {
                        let data = st.read(me, &leg.local)?;
                        st.write(leg.peer, &leg.remote, &data)?;
                        (me, leg.peer)
                    }
                    _ => {
                        let data = st.read(leg.peer, &leg.remote)?;
                        st.write(me, &leg.local, &data)?;
                        (leg.peer, me)
                    }
                };
                st.tick(me);
                let op_id = st.ops.len() as u64;
                let mut ev = st.base_event(me, kind, stream);
                ev.src = src;
                ev.dst = dst;
                ev.buffer = leg.remote.buffer.clone();
                ev.offset = leg.remote.offset as u64 * ELEMENT_BYTES;
                ev.bytes = leg.remote.len as u64 * ELEMENT_BYTES;
                ev.link = LinkClass::between(&mesh, me, leg.peer);
                ev.local_buffer = Some(leg.local.buffer.clone());
                ev.local_offset = leg.local.offset as u64 * ELEMENT_BYTES;
                ev.op_id = Some(op_id);
                ev.comm_id = Some(comm);
                ev.chunk = leg.chunk;
                st.ops.push(OpState {
                    issuer: me,
                    event: st.events.len(),
                    done: false,
                });
                st.events.push(ev);
                st.outstanding[me].push(op_id);
                handle.ops.push(op_id);
            }
            Ok(handle)
        })
    }

    /// Copies `src` on this rank into `dst` of the symmetric buffer on `peer`.
    pub fn push(
        &mut self,
        src: Region,
        peer: usize,
        dst: Region,
        stream: Stream,
        chunk: Option<ChunkRef>,
    ) -> Result<CommEvent> {
        self.scatter_push(
            &[Transfer {
                local: src,
                peer,
                remote: dst,
                chunk,
            }],
            stream,
        )
    }

    /// Copies `src` of the symmetric buffer on `peer` into `dst` on this rank.
    pub fn pull(
        &mut self,
        dst: Region,
        peer: usize,
        src: Region,
        stream: Stream,
        chunk: Option<ChunkRef>,
    ) -> Result<CommEvent> {
        self.gather_pull(
            &[Transfer {
                local: dst,
                peer,
                remote: src,
                chunk,
            }],
            stream,
        )
    }

    pub fn scatter_push(&mut self, legs: &[Transfer], stream: Stream) -> Result<CommEvent> {
        self.issue(OpKind::Push, legs, stream)
    }

    pub fn gather_pull(&mut self, legs: &[Transfer], stream: Stream) -> Result<CommEvent> {
        self.issue(OpKind::Pull, legs, stream)
    }

    /// Marks the ops of `event` complete. Waiting twice is a no-op.
    pub fn wait(&mut self, event: &CommEvent) -> Result<()> {
        self.op(|st, me| {
            for &op in &event.ops {
                match st.ops.get(op as usize) {
                    Some(o) if o.issuer == me => {}
                    _ => {
                        return Err(Error::Trace(format!(
                            "rank {me} waited on op {op} it did not issue"
                        )))
                    }
                }
            }
            st.tick(me);
            for &op in &event.ops {
                st.complete_op(op, me);
            }
            st.outstanding[me].retain(|op| !event.ops.contains(op));
            let mut ev = st.base_event(me, OpKind::Wait, Stream::Compute);
            ev.completion_step = Some(ev.issue_step);
            ev.completion_clock = Some(st.vc[me][me]);
            ev.waits = event.ops.clone();
            st.events.push(ev);
            Ok(())
        })
    }

    pub fn barrier_all(&mut self) -> Result<()> {
        let all = self.cluster.mesh.all_ranks();
        self.barrier(&all)
    }

    /// Blocks until every rank of `group` arrives. All ops issued by members
    /// before arriving are complete afterwards and clocks are joined.
    pub fn barrier(&mut self, group: &[usize]) -> Result<()> {
        let mut key = group.to_vec();
        key.sort_unstable();
        key.dedup();
        if !key.contains(&self.rank) {
            return Err(Error::Trace(format!(
                "rank {} entered a barrier over {key:?} it is not part of",
                self.rank
            )));
        }
        for &r in &key {
            self.cluster.check_rank(r)?;
        }
        let link = if key.len() == 1 {
            LinkClass::Loopback
        } else if key
            .iter()
            .all(|&r| self.cluster.mesh.same_machine(r, key[0]))
        {
            LinkClass::Intra
        } else {
            LinkClass::Inter
        };

        let me = self.rank;
        let mut st = self.lock();
        if let Some(e) = &st.failure {
            return Err(e.clone());
        }
        st.tick(me);
        for op in std::mem::take(&mut st.outstanding[me]) {
            st.complete_op(op, me);
        }
        let next_barrier = st.next_barrier;
        let slot = st.barriers.entry(key.clone()).or_default();
        if slot.arrived.is_empty() {
            slot.instance = next_barrier;
        }
        let instance = slot.instance;
        let generation = slot.generation;
        if instance == next_barrier {
            st.next_barrier += 1;
        }
        let mut ev = st.base_event(me, OpKind::Barrier, Stream::Compute);
        ev.link = link;
        ev.barrier_id = Some(instance);
        ev.group = key.clone();
        let idx = st.events.len();
        st.events.push(ev);
        let slot = st.barriers.get_mut(&key).expect("inserted above");
        slot.arrived.push((me, idx));

        if slot.arrived.len() == key.len() {
            let arrived = std::mem::take(&mut slot.arrived);
            slot.generation += 1;
            let p = st.vc.len();
            let mut joined = vec![0u64; p];
            for &r in &key {
                for (j, v) in st.vc[r].iter().enumerate() {
                    joined[j] = joined[j].max(*v);
                }
            }
            let step = key.iter().map(|&r| st.lamport[r]).max().unwrap_or(0) + 1;
            for &r in &key {
                st.vc[r] = joined.clone();
                st.lamport[r] = step;
            }
            for (r, ev_idx) in arrived {
                let clock = st.vc[r][r];
                let ev = &mut st.events[ev_idx];
                ev.completion_step = Some(step);
                ev.completion_clock = Some(clock);
                if r != me {
                    st.status[r] = Status::Runnable;
                    st.blocked_on[r] = None;
                }
            }
            if self.cluster.mode == ExecMode::RoundRobin {
                self.release(&mut st);
                self.cluster.cv.notify_all();
                st = self.acquire(st);
            } else {
                self.cluster.cv.notify_all();
            }
            return match &st.failure {
                Some(e) => Err(e.clone()),
                None => Ok(()),
            };
        }

        st.status[me] = Status::Blocked;
        st.blocked_on[me] = Some(key.clone());
        self.release(&mut st);
        st.check_deadlock();
        self.cluster.cv.notify_all();
        while st.failure.is_none()
            && st.barriers.get(&key).map(|s| s.generation) == Some(generation)
        {
            st = self.wait_cv(st);
        }
        if let Some(e) = &st.failure {
            return Err(e.clone());
        }
        st = self.acquire(st);
        match &st.failure {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    /// Reads a region of one of this rank's buffers.
    pub fn read(&mut self, region: &Region) -> Result<Vec<f64>> {
        self.op(|st, me| {
            let data = st.read(me, region)?;
            st.tick(me);
            let ev = local_event(st, me, OpKind::Read, region);
            st.events.push(ev);
            Ok(data)
        })
    }

    /// Writes a region of one of this rank's buffers.
    pub fn write(&mut self, region: &Region, data: &[f64]) -> Result<()> {
        self.op(|st, me| {
            st.write(me, region, data)?;
            st.tick(me);
            let ev = local_event(st, me, OpKind::Write, region);
            st.events.push(ev);
            Ok(())
        })
    }

    /// Records an attention computation for tracing and timeline replay.
    pub fn compute(&mut self, label: &str, flops: u64, pairs: Vec<ComputePair>) -> Result<()> {
        self.op(|st, me| {
            st.tick(me);
            let mut ev = st.base_event(me, OpKind::Compute, Stream::Compute);
            ev.completion_step = Some(ev.issue_step);
            ev.completion_clock = Some(st.vc[me][me]);
            ev.flops = Some(flops);
            ev.pairs = pairs;
            ev.label = Some(label.to_string());
            st.events.push(ev);
            Ok(())
        })
    }
}

fn local_event(st: &State, me: usize, kind: OpKind, region: &Region) -> TraceEvent {
    let mut ev = st.base_event(me, kind, Stream::Compute);
    ev.buffer = region.buffer.clone();
    ev.offset = region.offset as u64 * ELEMENT_BYTES;
    ev.bytes = region.len as u64 * ELEMENT_BYTES;
    ev.completion_step = Some(ev.issue_step);
    ev.completion_clock = Some(st.vc[me][me]);
    ev
}

#[cfg(test)]
mod tests {
    use super::*;

    fn modes() -> [ExecMode; 3] {
        [
            ExecMode::RoundRobin,
            ExecMode::Threaded { max_active: 1 },
            ExecMode::Threaded { max_active: 8 },
        ]
    }

    #[test]
    fn build_small_cluster() {
        let c = Cluster::new(Mesh::new(1, 2, 1, 2, 1).unwrap());
        assert_eq!(c.mesh().world_size(), 2);
        let out = c.run(|ctx| Ok(ctx.mesh().machine_of(ctx.rank()))).unwrap();
        assert_eq!(out, vec![0, 0]);
    }

    #[test]
    fn push_then_barrier_makes_data_visible() {
        for mode in modes() {
            let c = Cluster::with_mode(Mesh::new(2, 1, 2, 1, 1).unwrap(), mode);
            c.alloc_symmetric("x", 4).unwrap();
            c.alloc_symmetric("y", 4).unwrap();
            c.load(0, "x", 0, &[1.0, 2.0, 3.0, 4.0]).unwrap();
            let got = c
                .run(|ctx| {
                    if ctx.rank() == 0 {
                        ctx.push(
                            Region::new("x", 0, 4),
                            1,
                            Region::new("y", 0, 4),
                            Stream::Other,
                            None,
                        )?;
                    }
                    ctx.barrier_all()?;
                    ctx.read(&Region::new("y", 0, 4))
                })
                .unwrap();
            assert_eq!(got[1], vec![1.0, 2.0, 3.0, 4.0]);
            let trace = c.trace();
            let push = trace.events.iter().find(|e| e.kind == OpKind::Push).unwrap();
            assert_eq!(push.bytes, 32);
            assert_eq!(push.link, LinkClass::Inter);
            assert!(push.completion_step.is_some());
            assert_eq!(trace.incomplete().count(), 0);
        }
    }

    #[test]
    fn inter_push_of_512_elements_is_4096_bytes() {
        let c = Cluster::new(Mesh::new(2, 1, 2, 1, 1).unwrap());
        c.alloc_symmetric("x", 512).unwrap();
        c.run(|ctx| {
            if ctx.rank() == 1 {
                let e = ctx.push(
                    Region::new("x", 0, 512),
                    0,
                    Region::new("x", 0, 512),
                    Stream::Other,
                    None,
                )?;
                ctx.wait(&e)?;
            }
            Ok(())
        })
        .unwrap();
        let t = c.trace();
        let pushes: Vec<_> = t.events.iter().filter(|e| e.is_transfer()).collect();
        assert_eq!(pushes.len(), 1);
        assert_eq!(pushes[0].bytes, 4096);
        assert_eq!(pushes[0].link, LinkClass::Inter);
        assert_eq!(t.volume(1).inter, 512);
    }

    #[test]
    fn self_pull_is_exact_and_free() {
        let c = Cluster::new(Mesh::new(1, 1, 1, 1, 1).unwrap());
        c.alloc_symmetric("a", 3).unwrap();
        c.alloc_local(0, "b", 3).unwrap();
        let v = [0.1, -2.5e-300, f64::MAX];
        c.load(0, "a", 0, &v).unwrap();
        c.run(|ctx| {
            let e = ctx.pull(Region::new("b", 0, 3), 0, Region::new("a", 0, 3), Stream::Ring, None)?;
            ctx.wait(&e)?;
            ctx.wait(&e)
        })
        .unwrap();
        assert_eq!(c.buffer(0, "b").unwrap(), v.to_vec());
        let t = c.trace();
        assert_eq!(t.events[0].link, LinkClass::Loopback);
        assert_eq!(t.volume(0).total(), 0);
    }

    #[test]
    fn remote_access_needs_symmetric_buffer() {
        let c = Cluster::new(Mesh::new(1, 2, 1, 2, 1).unwrap());
        c.alloc_local(1, "p", 2).unwrap();
        c.alloc_local(0, "p", 2).unwrap();
        let err = c
            .run(|ctx| {
                if ctx.rank() == 0 {
                    ctx.pull(Region::new("p", 0, 2), 1, Region::new("p", 0, 2), Stream::Other, None)?;
                }
                Ok(())
            })
            .unwrap_err();
        assert!(matches!(err, Error::Buffer(_)), "{err}");
    }

    #[test]
    fn overflow_and_unknown_buffer_rejected() {
        let c = Cluster::new(Mesh::new(1, 2, 1, 2, 1).unwrap());
        c.alloc_symmetric("x", 4).unwrap();
        let err = c
            .run(|ctx| {
                if ctx.rank() == 0 {
                    ctx.push(Region::new("x", 2, 4), 1, Region::new("x", 0, 4), Stream::Other, None)?;
                }
                Ok(())
            })
            .unwrap_err();
        assert!(matches!(err, Error::Buffer(_)));
        let err = c
            .run(|ctx| ctx.read(&Region::new("nope", 0, 1)).map(|_| ()))
            .unwrap_err();
        assert!(matches!(err, Error::Buffer(_)));
    }

    #[test]
    fn skipped_barrier_is_diagnosed() {
        for mode in modes() {
            let c = Cluster::with_mode(Mesh::new(1, 4, 1, 4, 1).unwrap(), mode);
            let err = c
                .run(|ctx| {
                    if ctx.rank() != 2 {
                        ctx.barrier(&[0, 1, 2, 3])?;
                    }
                    Ok(())
                })
                .unwrap_err();
            assert_eq!(
                err,
                Error::Deadlock {
                    group: vec![0, 1, 2, 3],
                    missing: vec![2]
                }
            );
        }
    }

    #[test]
    fn barrier_all_equalizes_clocks() {
        let c = Cluster::new(Mesh::new(2, 2, 2, 1, 2).unwrap());
        c.run(|ctx| {
            for _ in 0..ctx.rank() {
                ctx.compute("noop", 0, vec![])?;
            }
            ctx.barrier_all()
        })
        .unwrap();
        let t = c.trace();
        let steps: Vec<_> = t
            .events
            .iter()
            .filter(|e| e.kind == OpKind::Barrier)
            .map(|e| e.completion_step.unwrap())
            .collect();
        assert_eq!(steps.len(), 4);
        assert!(steps.iter().all(|&s| s == steps[0]));
        assert_eq!(t.barrier_counts(3), (1, 0));
    }

    #[test]
    fn subgroup_barriers_run_independently() {
        for mode in modes() {
            let c = Cluster::with_mode(Mesh::new(1, 4, 1, 2, 2).unwrap(), mode);
            c.run(|ctx| {
                let g = ctx.mesh().ring_group(ctx.rank());
                for _ in 0..3 {
                    ctx.barrier(&g)?;
                }
                Ok(())
            })
            .unwrap();
            let t = c.trace();
            assert_eq!(t.barrier_counts(0), (0, 3));
            let ids: std::collections::BTreeSet<_> =
                t.events.iter().filter_map(|e| e.barrier_id).collect();
            assert_eq!(ids.len(), 6);
        }
    }

    #[test]
    fn rank_error_propagates() {
        let c = Cluster::new(Mesh::new(1, 2, 1, 2, 1).unwrap());
        let err = c
            .run(|ctx| {
                if ctx.rank() == 0 {
                    return Err(Error::Planning("boom".into()));
                }
                ctx.barrier_all()
            })
            .unwrap_err();
        assert_eq!(err, Error::Planning("boom".into()));
    }

    #[test]
    fn waiting_on_foreign_op_is_an_error() {
        let c = Cluster::new(Mesh::new(1, 2, 1, 2, 1).unwrap());
        c.alloc_symmetric("x", 1).unwrap();
        let ev = c
            .run(|ctx| {
                ctx.push(Region::new("x", 0, 1), 1 - ctx.rank(), Region::new("x", 0, 1), Stream::Other, None)
            })
            .unwrap();
        let err = c.run(|ctx| ctx.wait(&ev[1 - ctx.rank()])).unwrap_err();
        assert!(matches!(err, Error::Trace(_)));
    }
}
