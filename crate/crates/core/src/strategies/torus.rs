//! Torus attention: the Ulysses all-to-all across machines split into staged
//! chunk transfers (pull Q, pull KV, push O) overlapped with ring attention
//! inside each machine.

use serde::{Deserialize, Serialize};

use super::blocks::{read_block, read_chunks, write_chunks};
use super::input::ShardedInput;
use super::ring::{alloc_ring_slots, ring_pass, KvHome, QueryBlocks, RingVariant};
use super::{check_world, load_qkv};
use crate::attention::{finalize, AttnPartial};
use crate::error::{Error, Result};
use crate::layout::{inverse_rearrange, rearrange_for_mesh, ChunkLayout, ChunkedTensor};
use crate::simnet::{
    ChunkRef, Cluster, CommEvent, Coord, Mesh, RankCtx, Region, Stream, TensorKind, Transfer,
};
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TorusOptions {
    /// Drop the ring barrier of every pull-KV stage. Produces a racy program;
    /// only useful to check that the race detector notices.
    pub skip_kv_barrier: bool,
}

/// Checks the mesh preconditions of the torus strategy.
pub fn check_torus_mesh(mesh: &Mesh, h: usize) -> Result<()> {
    if mesh.torus != mesh.n_machines {
        return Err(Error::Planning(format!(
            "torus degree T={} must equal the machine count N={} (N must divide P_u)",
            mesh.torus, mesh.n_machines
        )));
    }
    let groups = mesh.torus * mesh.ulysses;
    if h % groups != 0 {
        return Err(Error::Planning(format!(
            "H={h} not divisible by T*U={}*{}",
            mesh.torus, mesh.ulysses
        )));
    }
    Ok(())
}

const QKV: [(&str, &str, &str, TensorKind); 3] = [
    ("q", "q_buf", "q_work", TensorKind::Q),
    ("k", "k_buf", "k_work", TensorKind::K),
    ("v", "v_buf", "v_work", TensorKind::V),
];

struct Geometry {
    n: usize,
    u_count: usize,
    chunk: Shape4,
    head_part: usize,
}

impl Geometry {
    fn c(&self) -> usize {
        self.chunk.numel()
    }

    fn block(&self) -> usize {
        self.u_count * self.c()
    }

    fn slot(&self, a: usize, b: usize) -> usize {
        (a * self.u_count + b) * self.c()
    }

    /// Element offset of torus block `a` (U chunks).
    fn block_at(&self, a: usize) -> usize {
        a * self.block()
    }
}

fn tag(tensor: TensorKind, seq_part: usize, head_part: usize) -> Option<ChunkRef> {
    Some(ChunkRef {
        tensor,
        seq_part,
        head_part,
    })
}

fn torus_program(
    ctx: &mut RankCtx<'_>,
    shard: Shape4,
    opts: TorusOptions,
) -> Result<Tensor4> {
    let mesh = *ctx.mesh();
    let me = ctx.coord();
    let n = mesh.torus;
    let u_count = mesh.ulysses;
    let layout = ChunkLayout::new(shard, n, u_count)?;
    let geo = Geometry {
        n,
        u_count,
        chunk: layout.chunk_shape(),
        head_part: me.t * u_count + me.u,
    };
    let (t, u, r) = (me.t, me.u, me.r);
    let at = |t: usize, u: usize, r: usize| mesh.rank_of(Coord { t, u, r });
    let c = geo.c();
    let ring = mesh.ring_group(ctx.rank());

    // Rearrange, keep a copy of the non-stationary chunks for remote pulls,
    // and do the intra-machine part of the all-to-all.
    for (src, buf, work, kind) in QKV {
        let x = read_block(ctx, src, 0, shard, 1)?;
        let chunks = rearrange_for_mesh(&x, n, u_count)?;
        write_chunks(ctx, work, 0, chunks.chunks())?;
        for a in (0..n).filter(|&a| a != t) {
            write_chunks(ctx, buf, geo.block_at(a), &chunks.chunks()[a * u_count..(a + 1) * u_count])?;
        }
        let legs: Vec<Transfer> = (0..u_count)
            .map(|j| Transfer {
                local: Region::new(work, geo.slot(t, j), c),
                peer: at(t, j, r),
                remote: Region::new(buf, geo.slot(t, u), c),
                chunk: tag(kind, t, t),
            })
            .collect();
        ctx.scatter_push(&legs, Stream::Other)?;
    }
    ctx.barrier_all()?;

    // Issue every inter-machine pull up front.
    let pull = |ctx: &mut RankCtx<'_>, k: usize, pairs: &[(&str, &str, TensorKind)]| {
        let src_t = (t + n - k) % n;
        let mut legs = Vec::new();
        for &(buf, work, kind) in pairs {
            for j in 0..u_count {
                legs.push(Transfer {
                    local: Region::new(work, geo.slot(src_t, j), c),
                    peer: at(src_t, j, r),
                    remote: Region::new(buf, geo.slot(t, u), c),
                    chunk: tag(kind, src_t, t),
                });
            }
        }
        ctx.gather_pull(&legs, Stream::Other)
    };
    let mut q_events: Vec<CommEvent> = Vec::with_capacity(n);
    let mut kv_events: Vec<CommEvent> = Vec::with_capacity(n);
    for k in 1..n {
        q_events.push(pull(ctx, k, &[("q_buf", "q_work", TensorKind::Q)])?);
        kv_events.push(pull(
            ctx,
            k,
            &[("k_buf", "k_work", TensorKind::K), ("v_buf", "v_work", TensorKind::V)],
        )?);
    }

    let block_origins = |a: usize, r: usize| -> Vec<usize> { (0..u_count).map(|j| at(a, j, r)).collect() };
    let holder_r = |holder: usize| mesh.coord(holder).r;

    let others: Vec<usize> = (1..n).map(|k| (t + n - k) % n).collect();
    let mut own_state = AttnPartial::identity(geo.chunk.with_l(u_count * geo.chunk.l));
    let mut other_states = vec![own_state.clone(); others.len()];
    let mut other_qs: Vec<Tensor4> = Vec::with_capacity(others.len());

    // Pull-Q stages: every query block against the stationary KV block.
    let stationary_origins = |holder: usize, _: usize| block_origins(t, holder_r(holder));
    let stationary = KvHome {
        k_buf: "k_buf",
        v_buf: "v_buf",
        offsets: vec![geo.block_at(t)],
        chunk: geo.chunk,
        parts: u_count,
        origins: &stationary_origins,
        tags: vec![Some((t, t))],
    };
    for k in 1..=n {
        let a = (t + n - (k - 1)) % n;
        if k > 1 {
            ctx.wait(&q_events[k - 2])?;
        }
        // The stationary query block arrived through the intra-machine push.
        let q_src = if a == t { "q_buf" } else { "q_work" };
        let q = read_block(ctx, q_src, geo.block_at(a), geo.chunk, u_count)?;
        let origins = [block_origins(a, r)];
        let queries = QueryBlocks {
            qs: std::slice::from_ref(&q),
            origins: &origins,
            head_part: geo.head_part,
        };
        let state = if k == 1 { &mut own_state } else { &mut other_states[k - 2] };
        ring_pass(
            ctx,
            &ring,
            &stationary,
            &queries,
            std::slice::from_mut(state),
            RingVariant::Pull,
            &format!("pull_q:{k}"),
        )?;
        if k > 1 {
            other_qs.push(q);
        }
    }

    // Pull-KV stages: the other query blocks against each arriving KV block.
    let other_origins: Vec<Vec<usize>> = others.iter().map(|&a| block_origins(a, r)).collect();
    for k in 1..n {
        let a = (t + n - k) % n;
        ctx.wait(&kv_events[k - 1])?;
        if !opts.skip_kv_barrier {
            ctx.barrier(&ring)?;
        }
        let origins = move |holder: usize, _: usize| block_origins(a, holder_r(holder));
        let home = KvHome {
            k_buf: "k_work",
            v_buf: "v_work",
            offsets: vec![geo.block_at(a)],
            chunk: geo.chunk,
            parts: u_count,
            origins: &origins,
            tags: vec![Some((a, t))],
        };
        let queries = QueryBlocks {
            qs: &other_qs,
            origins: &other_origins,
            head_part: geo.head_part,
        };
        ring_pass(
            ctx,
            &ring,
            &home,
            &queries,
            &mut other_states,
            RingVariant::Pull,
            &format!("pull_kv:{k}"),
        )?;
    }

    // Push-O: send finished remote outputs home while the local queries
    // attend over the remote KV blocks.
    for (i, &a) in others.iter().enumerate() {
        let o = finalize(&other_states[i])?;
        let pieces = o.shard_seq(u_count)?;
        write_chunks(ctx, "o_stage", geo.block_at(a), &pieces)?;
        let legs: Vec<Transfer> = (0..u_count)
            .map(|j| Transfer {
                local: Region::new("o_stage", geo.slot(a, j), c),
                peer: at(a, j, r),
                remote: Region::new("o_buf", geo.slot(t, u), c),
                chunk: tag(TensorKind::O, a, t),
            })
            .collect();
        ctx.scatter_push(&legs, Stream::Other)?;
    }
    let remote_origins = |holder: usize, i: usize| block_origins(others[i], holder_r(holder));
    let remote_kv = KvHome {
        k_buf: "k_work",
        v_buf: "v_work",
        offsets: others.iter().map(|&a| geo.block_at(a)).collect(),
        chunk: geo.chunk,
        parts: u_count,
        origins: &remote_origins,
        tags: others.iter().map(|&a| Some((a, t))).collect(),
    };
    let q_own = read_block(ctx, "q_buf", geo.block_at(t), geo.chunk, u_count)?;
    let own_origins = [block_origins(t, r)];
    let queries = QueryBlocks {
        qs: std::slice::from_ref(&q_own),
        origins: &own_origins,
        head_part: geo.head_part,
    };
    ring_pass(
        ctx,
        &ring,
        &remote_kv,
        &queries,
        std::slice::from_mut(&mut own_state),
        RingVariant::Pull,
        "push_o",
    )?;
    let o_own = finalize(&own_state)?;
    let pieces = o_own.shard_seq(u_count)?;
    write_chunks(ctx, "o_stage", geo.block_at(t), &pieces)?;
    let legs: Vec<Transfer> = (0..u_count)
        .map(|j| Transfer {
            local: Region::new("o_stage", geo.slot(t, j), c),
            peer: at(t, j, r),
            remote: Region::new("o_buf", geo.slot(t, u), c),
            chunk: tag(TensorKind::O, t, t),
        })
        .collect();
    ctx.scatter_push(&legs, Stream::Other)?;
    ctx.barrier_all()?;

    let chunks = read_chunks(ctx, "o_buf", 0, geo.chunk, geo.n * geo.u_count)?;
    inverse_rearrange(&ChunkedTensor::from_chunks(layout, chunks)?)
}

/// Torus attention on a mesh with `T = N`.
pub fn streamfusion_torus(
    cluster: &Cluster,
    input: &ShardedInput,
    opts: TorusOptions,
) -> Result<Vec<Tensor4>> {
    let mesh = *cluster.mesh();
    check_world(&mesh, input)?;
    let shard = input.shard_shape();
    check_torus_mesh(&mesh, shard.h)?;
    let len = shard.numel();
    load_qkv(cluster, input)?;
    for name in ["q_buf", "k_buf", "v_buf", "k_work", "v_work", "o_buf"] {
        cluster.alloc_symmetric(name, len)?;
    }
    alloc_ring_slots(cluster, len)?;
    for rank in 0..mesh.world_size() {
        cluster.alloc_local(rank, "q_work", len)?;
        cluster.alloc_local(rank, "o_stage", len)?;
    }
    cluster.run(|ctx| torus_program(ctx, shard, opts))
}
