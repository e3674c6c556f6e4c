use serde::{Deserialize, Serialize};

use super::blocks::{cross_pairs, read_block, record_compute};
use super::input::ShardedInput;
use super::{check_world, load_qkv};
use crate::attention::{finalize, multi_qkv_attention, AttnPartial};
use crate::error::{Error, Result};
use crate::simnet::{ChunkRef, Cluster, RankCtx, Region, Stream, TensorKind, Transfer};
use crate::tensor::{Shape4, Tensor4};

pub(crate) const RING_K: &str = "ring_k";
pub(crate) const RING_V: &str = "ring_v";

/// How key/value blocks travel around the ring.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RingVariant {
    /// Step `i` pulls the block of member `(r + i) % R` directly; no per-step barrier.
    #[default]
    Pull,
    /// Each step pushes the current block to the next member and synchronizes
    /// with both neighbours.
    SendRecv,
}

/// Key/value blocks that every ring member exposes at the same buffer offsets.
pub(crate) struct KvHome<'a> {
    pub k_buf: &'a str,
    pub v_buf: &'a str,
    /// Element offset of each block; a block is `parts` chunks of shape `chunk`.
    pub offsets: Vec<usize>,
    pub chunk: Shape4,
    pub parts: usize,
    /// Sequence origins of block `i` as held by ring member `rank`: `origins(rank, i)`.
    pub origins: &'a dyn Fn(usize, usize) -> Vec<usize>,
    /// `(seq_part, head_part)` of block `i`, attached to traced transfers.
    pub tags: Vec<Option<(usize, usize)>>,
}

impl KvHome<'_> {
    fn block_len(&self) -> usize {
        self.parts * self.chunk.numel()
    }

    fn slot_len(&self) -> usize {
        self.offsets.len() * self.block_len()
    }

    fn chunk_ref(&self, i: usize, tensor: TensorKind) -> Option<ChunkRef> {
        self.tags[i].map(|(seq_part, head_part)| ChunkRef {
            tensor,
            seq_part,
            head_part,
        })
    }
}

pub(crate) struct QueryBlocks<'a> {
    pub qs: &'a [Tensor4],
    pub origins: &'a [Vec<usize>],
    pub head_part: usize,
}

/// Symmetric landing slots for ring transfers: two slots of `slot_len` elements.
pub(crate) fn alloc_ring_slots(cluster: &Cluster, slot_len: usize) -> Result<()> {
    cluster.alloc_symmetric(RING_K, 2 * slot_len)?;
    cluster.alloc_symmetric(RING_V, 2 * slot_len)
}

fn read_home(ctx: &mut RankCtx<'_>, home: &KvHome<'_>) -> Result<Vec<(Tensor4, Tensor4)>> {
    home.offsets
        .iter()
        .map(|&off| {
            Ok((
                read_block(ctx, home.k_buf, off, home.chunk, home.parts)?,
                read_block(ctx, home.v_buf, off, home.chunk, home.parts)?,
            ))
        })
        .collect()
}

fn read_slot(ctx: &mut RankCtx<'_>, home: &KvHome<'_>, slot: usize) -> Result<Vec<(Tensor4, Tensor4)>> {
    let base = slot * home.slot_len();
    (0..home.offsets.len())
        .map(|i| {
            let off = base + i * home.block_len();
            Ok((
                read_block(ctx, RING_K, off, home.chunk, home.parts)?,
                read_block(ctx, RING_V, off, home.chunk, home.parts)?,
            ))
        })
        .collect()
}

fn attend(
    ctx: &mut RankCtx<'_>,
    label: &str,
    queries: &QueryBlocks<'_>,
    kvs: &[(Tensor4, Tensor4)],
    holder: usize,
    home: &KvHome<'_>,
    states: &mut [AttnPartial],
) -> Result<()> {
    multi_qkv_attention(queries.qs, kvs, states, false)?;
    let mut pairs = Vec::new();
    for (i, _) in kvs.iter().enumerate() {
        let kv_origins = (home.origins)(holder, i);
        for q in queries.origins {
            pairs.extend(cross_pairs(q, &kv_origins, queries.head_part));
        }
    }
    let kv_len = kvs.iter().map(|(k, _)| k.shape().l).sum();
    record_compute(ctx, label, queries.qs, kv_len, pairs)
}

/// Attends `queries` over the key/value blocks of every member of `group`,
/// folding the results into `states`. Must be called by all members.
pub(crate) fn ring_pass(
    ctx: &mut RankCtx<'_>,
    group: &[usize],
    home: &KvHome<'_>,
    queries: &QueryBlocks<'_>,
    states: &mut [AttnPartial],
    variant: RingVariant,
    label: &str,
) -> Result<()> {
    let me = ctx.rank();
    let size = group.len();
    let idx = group
        .iter()
        .position(|&g| g == me)
        .ok_or_else(|| Error::Planning(format!("rank {me} is not in ring group {group:?}")))?;
    if home.offsets.is_empty() {
        return Ok(());
    }
    let block = home.block_len();
    let slot_len = home.slot_len();
    let mut kvs = read_home(ctx, home)?;
    match variant {
        RingVariant::Pull => {
            let mut holder = me;
            for step in 1..=size {
                let pending = if step < size {
                    let peer = group[(idx + step) % size];
                    let mut legs = Vec::with_capacity(2 * home.offsets.len());
                    for (i, &off) in home.offsets.iter().enumerate() {
                        for (slot_buf, src_buf, kind) in [
                            (RING_K, home.k_buf, TensorKind::K),
                            (RING_V, home.v_buf, TensorKind::V),
                        ] {
                            legs.push(Transfer {
                                local: Region::new(slot_buf, i * block, block),
                                peer,
                                remote: Region::new(src_buf, off, block),
                                chunk: home.chunk_ref(i, kind),
                            });
                        }
                    }
                    Some((peer, ctx.gather_pull(&legs, Stream::Ring)?))
                } else {
                    None
                };
                attend(ctx, label, queries, &kvs, holder, home, states)?;
                if let Some((peer, ev)) = pending {
                    ctx.wait(&ev)?;
                    kvs = read_slot(ctx, home, 0)?;
                    holder = peer;
                }
            }
        }
        RingVariant::SendRecv => {
            let next = group[(idx + 1) % size];
            let prev = group[(idx + size - 1) % size];
            for step in 0..size {
                let holder = group[(idx + size - step % size) % size];
                let more = step + 1 < size;
                if more {
                    let dst_base = ((step + 1) % 2) * slot_len;
                    let mut legs = Vec::with_capacity(2 * home.offsets.len());
                    for (i, &off) in home.offsets.iter().enumerate() {
                        for (slot_buf, home_buf, kind) in [
                            (RING_K, home.k_buf, TensorKind::K),
                            (RING_V, home.v_buf, TensorKind::V),
                        ] {
                            let local = if step == 0 {
                                Region::new(home_buf, off, block)
                            } else {
                                Region::new(slot_buf, (step % 2) * slot_len + i * block, block)
                            };
                            legs.push(Transfer {
                                local,
                                peer: next,
                                remote: Region::new(slot_buf, dst_base + i * block, block),
                                chunk: home.chunk_ref(i, kind),
                            });
                        }
                    }
                    ctx.scatter_push(&legs, Stream::Ring)?;
                }
                attend(ctx, label, queries, &kvs, holder, home, states)?;
                if more {
                    neighbour_barriers(ctx, idx, size, me, next, prev)?;
                    kvs = read_slot(ctx, home, (step + 1) % 2)?;
                }
            }
        }
    }
    Ok(())
}

/// Pairwise synchronization with both ring neighbours. Even positions pair
/// with the successor first, odd positions with the predecessor first, so
/// matching pairs meet in the same order on both sides.
fn neighbour_barriers(
    ctx: &mut RankCtx<'_>,
    idx: usize,
    size: usize,
    me: usize,
    next: usize,
    prev: usize,
) -> Result<()> {
    if size == 2 {
        return ctx.barrier(&[me, next]);
    }
    if idx % 2 == 0 {
        ctx.barrier(&[me, next])?;
        ctx.barrier(&[prev, me])
    } else {
        ctx.barrier(&[prev, me])?;
        ctx.barrier(&[me, next])
    }
}

/// Ring attention over every rank of the cluster, which must form one ring.
pub fn ring_attention(
    cluster: &Cluster,
    input: &ShardedInput,
    variant: RingVariant,
) -> Result<Vec<Tensor4>> {
    let mesh = *cluster.mesh();
    check_world(&mesh, input)?;
    if mesh.ring != mesh.world_size() {
        return Err(Error::Planning(format!(
            "ring attention needs one ring over all {} ranks, mesh has R={}",
            mesh.world_size(),
            mesh.ring
        )));
    }
    let shard = input.shard_shape();
    load_qkv(cluster, input)?;
    alloc_ring_slots(cluster, shard.numel())?;
    cluster.run(|ctx| {
        let me = ctx.rank();
        let group = ctx.mesh().ring_group(me);
        let q = read_block(ctx, "q", 0, shard, 1)?;
        let origins = |holder: usize, _: usize| vec![holder];
        let home = KvHome {
            k_buf: "k",
            v_buf: "v",
            offsets: vec![0],
            chunk: shard,
            parts: 1,
            origins: &origins,
            tags: vec![None],
        };
        let mut states = vec![AttnPartial::identity(shard)];
        let queries = QueryBlocks {
            qs: std::slice::from_ref(&q),
            origins: &[vec![me]],
            head_part: 0,
        };
        ring_pass(ctx, &group, &home, &queries, &mut states, variant, "ring")?;
        finalize(&states[0])
    })
}
