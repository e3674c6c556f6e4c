//! Moving tensors between rank-local values and simulated buffers.

use crate::attention::attention_flops;
use crate::error::Result;
use crate::simnet::{ComputePair, RankCtx, Region};
use crate::tensor::{Shape4, Tensor4};

/// Reads `parts` consecutive chunks of shape `chunk` starting at `offset`.
pub(crate) fn read_chunks(
    ctx: &mut RankCtx<'_>,
    buffer: &str,
    offset: usize,
    chunk: Shape4,
    parts: usize,
) -> Result<Vec<Tensor4>> {
    let c = chunk.numel();
    let data = ctx.read(&Region::new(buffer, offset, parts * c))?;
    data.chunks_exact(c)
        .map(|d| Tensor4::from_vec(chunk, d.to_vec()))
        .collect()
}

/// Reads `parts` chunks and joins them along the sequence axis.
pub(crate) fn read_block(
    ctx: &mut RankCtx<'_>,
    buffer: &str,
    offset: usize,
    chunk: Shape4,
    parts: usize,
) -> Result<Tensor4> {
    Tensor4::concat_seq(&read_chunks(ctx, buffer, offset, chunk, parts)?)
}

/// Writes chunks back to back starting at `offset`.
pub(crate) fn write_chunks(
    ctx: &mut RankCtx<'_>,
    buffer: &str,
    offset: usize,
    chunks: &[Tensor4],
) -> Result<()> {
    let mut data = Vec::with_capacity(chunks.iter().map(|c| c.data().len()).sum());
    for c in chunks {
        data.extend_from_slice(c.data());
    }
    ctx.write(&Region::new(buffer, offset, data.len()), &data)
}

/// Records the cost and coverage of attending `qs` over key blocks of total length `kv_len`.
pub(crate) fn record_compute(
    ctx: &mut RankCtx<'_>,
    label: &str,
    qs: &[Tensor4],
    kv_len: usize,
    pairs: Vec<ComputePair>,
) -> Result<()> {
    let flops = qs.iter().map(|q| attention_flops(q.shape(), kv_len)).sum();
    ctx.compute(label, flops, pairs)
}

pub(crate) fn cross_pairs(q_origins: &[usize], kv_origins: &[usize], head_part: usize) -> Vec<ComputePair> {
    let mut out = Vec::with_capacity(q_origins.len() * kv_origins.len());
    for &q in q_origins {
        for &kv in kv_origins {
            out.push(ComputePair {
                q_part: q,
                kv_part: kv,
                head_part,
            });
        }
    }
    out
}
