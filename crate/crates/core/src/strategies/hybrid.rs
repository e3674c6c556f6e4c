//! Ulysses-style head all-to-all around a (possibly trivial) ring pass.
//! Ulysses, USP and TAS differ only in how ranks are grouped.

use super::blocks::{read_block, read_chunks, write_chunks};
use super::input::ShardedInput;
use super::ring::{alloc_ring_slots, ring_pass, KvHome, QueryBlocks, RingVariant};
use super::{check_world, load_qkv};
use crate::attention::{finalize, AttnPartial};
use crate::error::{Error, Result};
use crate::layout::rearrange_for_mesh;
use crate::simnet::{ChunkRef, Cluster, CommEvent, RankCtx, Region, Stream, TensorKind, Transfer};
use crate::tensor::{Shape4, Tensor4};

/// Groups of one rank: the all-to-all group and the ring group.
type Grouping = dyn Fn(usize) -> (Vec<usize>, Vec<usize>) + Sync;

const QKV_A2A: [(&str, &str, &str, TensorKind); 3] = [
    ("q", "q_stage", "q_a2a", TensorKind::Q),
    ("k", "k_stage", "k_a2a", TensorKind::K),
    ("v", "v_stage", "v_a2a", TensorKind::V),
];

fn alloc_hybrid(cluster: &Cluster, input: &ShardedInput) -> Result<()> {
    let len = input.shard_shape().numel();
    load_qkv(cluster, input)?;
    for name in ["q_a2a", "k_a2a", "v_a2a", "o_a2a"] {
        cluster.alloc_symmetric(name, len)?;
    }
    alloc_ring_slots(cluster, len)?;
    for rank in 0..input.parts() {
        for name in ["q_stage", "k_stage", "v_stage", "o_stage"] {
            cluster.alloc_local(rank, name, len)?;
        }
    }
    Ok(())
}

/// Stages `chunks` locally and pushes chunk `j` into slot `idx` of `dst` on `group[j]`.
fn scatter_slots(
    ctx: &mut RankCtx<'_>,
    stage: &str,
    dst: &str,
    chunks: &[Tensor4],
    group: &[usize],
    idx: usize,
    tag: impl Fn(usize) -> ChunkRef,
) -> Result<CommEvent> {
    write_chunks(ctx, stage, 0, chunks)?;
    let c = chunks[0].shape().numel();
    let legs: Vec<Transfer> = group
        .iter()
        .enumerate()
        .map(|(j, &peer)| Transfer {
            local: Region::new(stage, j * c, c),
            peer,
            remote: Region::new(dst, idx * c, c),
            chunk: Some(tag(j)),
        })
        .collect();
    ctx.scatter_push(&legs, Stream::Other)
}

fn hybrid_program(
    ctx: &mut RankCtx<'_>,
    shard: Shape4,
    grouping: &Grouping,
    variant: RingVariant,
) -> Result<Tensor4> {
    let me = ctx.rank();
    let (group, ring) = grouping(me);
    let g = group.len();
    let idx = group
        .iter()
        .position(|&x| x == me)
        .ok_or_else(|| Error::Planning(format!("rank {me} is not in its all-to-all group")))?;
    let slice = shard.with_h(shard.h / g);

    for (src, stage, dst, kind) in QKV_A2A {
        let x = read_block(ctx, src, 0, shard, 1)?;
        let chunks = rearrange_for_mesh(&x, 1, g)?;
        scatter_slots(ctx, stage, dst, chunks.chunks(), &group, idx, |j| ChunkRef {
            tensor: kind,
            seq_part: me,
            head_part: j,
        })?;
    }
    ctx.barrier(&group)?;

    let q_full = read_block(ctx, "q_a2a", 0, slice, g)?;
    let origins = |holder: usize, _: usize| grouping(holder).0;
    let home = KvHome {
        k_buf: "k_a2a",
        v_buf: "v_a2a",
        offsets: vec![0],
        chunk: slice,
        parts: g,
        origins: &origins,
        tags: vec![None],
    };
    let mut states = vec![AttnPartial::identity(q_full.shape())];
    let queries = QueryBlocks {
        qs: std::slice::from_ref(&q_full),
        origins: std::slice::from_ref(&group),
        head_part: idx,
    };
    if variant == RingVariant::Pull && ring.len() > 1 {
        ctx.barrier(&ring)?;
    }
    ring_pass(ctx, &ring, &home, &queries, &mut states, variant, "attention")?;

    let o_full = finalize(&states[0])?;
    let pieces = o_full.shard_seq(g)?;
    scatter_slots(ctx, "o_stage", "o_a2a", &pieces, &group, idx, |j| ChunkRef {
        tensor: TensorKind::O,
        seq_part: group[j],
        head_part: idx,
    })?;
    ctx.barrier(&group)?;

    let mut out = Tensor4::zeros(shard);
    for (j, piece) in read_chunks(ctx, "o_a2a", 0, slice, g)?.iter().enumerate() {
        out.set_heads(j * slice.h, piece)?;
    }
    Ok(out)
}

fn run_hybrid(
    cluster: &Cluster,
    input: &ShardedInput,
    grouping: &Grouping,
    variant: RingVariant,
) -> Result<Vec<Tensor4>> {
    alloc_hybrid(cluster, input)?;
    let shard = input.shard_shape();
    cluster.run(|ctx| hybrid_program(ctx, shard, grouping, variant))
}

fn require_heads(h: usize, degree: usize, what: &str) -> Result<()> {
    if degree == 0 || h % degree != 0 {
        return Err(Error::Planning(format!(
            "H={h} not divisible by {what} degree {degree}"
        )));
    }
    Ok(())
}

/// Ulysses attention with every rank in one all-to-all group.
pub fn ulysses_attention(cluster: &Cluster, input: &ShardedInput) -> Result<Vec<Tensor4>> {
    let mesh = *cluster.mesh();
    check_world(&mesh, input)?;
    require_heads(input.global_shape().h, mesh.world_size(), "Ulysses")?;
    let all = mesh.all_ranks();
    run_hybrid(cluster, input, &move |me| (all.clone(), vec![me]), RingVariant::Pull)
}

/// Ulysses over blocks of `p_u` consecutive ranks, ring across blocks.
/// With `p_u = M` the all-to-alls stay inside machines.
pub fn usp(cluster: &Cluster, input: &ShardedInput, p_u: usize) -> Result<Vec<Tensor4>> {
    let mesh = *cluster.mesh();
    check_world(&mesh, input)?;
    let p = mesh.world_size();
    if p_u == 0 || p % p_u != 0 {
        return Err(Error::Planning(format!(
            "USP Ulysses degree {p_u} does not divide P={p}"
        )));
    }
    require_heads(input.global_shape().h, p_u, "Ulysses")?;
    let grouping = move |me: usize| {
        let base = me - me % p_u;
        let group = (base..base + p_u).collect();
        let ring = (0..p).filter(|g| g % p_u == me % p_u).collect();
        (group, ring)
    };
    run_hybrid(cluster, input, &grouping, RingVariant::SendRecv)
}

/// Topology-aware assignment without overlap: Ulysses across the torus and
/// Ulysses axes of the mesh, ring inside each machine.
pub fn tas(cluster: &Cluster, input: &ShardedInput) -> Result<Vec<Tensor4>> {
    let mesh = *cluster.mesh();
    check_world(&mesh, input)?;
    require_heads(input.global_shape().h, mesh.torus * mesh.ulysses, "T*U")?;
    let grouping = move |me: usize| (mesh.torus_ulysses_group(me), mesh.ring_group(me));
    run_hybrid(cluster, input, &grouping, RingVariant::SendRecv)
}
