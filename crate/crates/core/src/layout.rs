//! Head-axis rearrangement of a local shard into `T x U` chunks.
//!
//! Chunk `(a, b)` holds heads `[(a*U + b) * H/(T*U), (a*U + b + 1) * H/(T*U))`.
//! On a rank whose tokens belong to torus sequence partition `l`, chunk
//! `(a, b)` is the piece `X_{l, a}` of the torus all-to-all (with Ulysses
//! sub-index `b`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkLayout {
    pub t_count: usize,
    pub u_count: usize,
    /// Shape of the tensor before rearrangement.
    pub source: Shape4,
}

impl ChunkLayout {
    pub fn new(source: Shape4, t_count: usize, u_count: usize) -> Result<Self> {
        let groups = t_count * u_count;
        if groups == 0 || source.h % groups != 0 {
            return Err(Error::Planning(format!(
                "H={} not divisible by T*U={}*{}",
                source.h, t_count, u_count
            )));
        }
        Ok(Self {
            t_count,
            u_count,
            source,
        })
    }

    pub fn heads_per_chunk(&self) -> usize {
        self.source.h / (self.t_count * self.u_count)
    }

    pub fn chunk_shape(&self) -> Shape4 {
        self.source.with_h(self.heads_per_chunk())
    }

    pub fn chunk_len(&self) -> usize {
        self.chunk_shape().numel()
    }

    /// Flat chunk index of `(a, b)`.
    pub fn index(&self, a: usize, b: usize) -> usize {
        a * self.u_count + b
    }

    pub fn first_head(&self, a: usize, b: usize) -> usize {
        self.index(a, b) * self.heads_per_chunk()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkedTensor {
    layout: ChunkLayout,
    chunks: Vec<Tensor4>,
}

impl ChunkedTensor {
    pub fn layout(&self) -> ChunkLayout {
        self.layout
    }

    pub fn chunk(&self, a: usize, b: usize) -> &Tensor4 {
        &self.chunks[self.layout.index(a, b)]
    }

    pub fn chunks(&self) -> &[Tensor4] {
        &self.chunks
    }

    /// The chunk that is the torus piece `X_{l, h}` of a tensor whose tokens
    /// sit in sequence partition `seq_partition`.
    pub fn torus_piece(&self, seq_partition: usize, l: usize, h: usize, b: usize) -> Option<&Tensor4> {
        (l == seq_partition && h < self.layout.t_count && b < self.layout.u_count)
            .then(|| self.chunk(h, b))
    }

    pub fn from_chunks(layout: ChunkLayout, chunks: Vec<Tensor4>) -> Result<Self> {
        if chunks.len() != layout.t_count * layout.u_count {
            return Err(Error::Dimension(format!(
                "expected {} chunks, got {}",
                layout.t_count * layout.u_count,
                chunks.len()
            )));
        }
        if let Some(c) = chunks.iter().find(|c| c.shape() != layout.chunk_shape()) {
            return Err(Error::Dimension(format!(
                "chunk {} does not match layout chunk shape {}",
                c.shape(),
                layout.chunk_shape()
            )));
        }
        Ok(Self { layout, chunks })
    }
}

pub fn rearrange_for_mesh(x: &Tensor4, t_count: usize, u_count: usize) -> Result<ChunkedTensor> {
    let layout = ChunkLayout::new(x.shape(), t_count, u_count)?;
    let hpc = layout.heads_per_chunk();
    let chunks = (0..t_count * u_count)
        .map(|i| x.slice_heads(i * hpc, hpc))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChunkedTensor { layout, chunks })
}

pub fn inverse_rearrange(c: &ChunkedTensor) -> Result<Tensor4> {
    let hpc = c.layout.heads_per_chunk();
    let mut out = Tensor4::zeros(c.layout.source);
    for (i, chunk) in c.chunks.iter().enumerate() {
        out.set_heads(i * hpc, chunk)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_layout_is_identity() {
        let x = Tensor4::random_normal(Shape4::new(2, 5, 3, 4).unwrap(), 1, 1.0);
        let c = rearrange_for_mesh(&x, 1, 1).unwrap();
        assert_eq!(c.chunks().len(), 1);
        assert_eq!(c.chunk(0, 0), &x);
    }

    #[test]
    fn four_gpu_example_has_one_head_per_chunk() {
        // L = 16, H = 4 over T = U = 2: head h lands in chunk (h / 2, h % 2).
        let x = Tensor4::from_fn(Shape4::new(1, 16, 4, 1).unwrap(), |_, l, h, _| {
            (100 * h + l) as f64
        });
        let c = rearrange_for_mesh(&x, 2, 2).unwrap();
        assert_eq!(c.layout().heads_per_chunk(), 1);
        for h in 0..4 {
            let chunk = c.chunk(h / 2, h % 2);
            assert_eq!(chunk.shape(), Shape4::new(1, 16, 1, 1).unwrap());
            assert_eq!(chunk.get(0, 7, 0, 0), (100 * h + 7) as f64);
        }
        assert_eq!(c.torus_piece(1, 1, 1, 0), Some(c.chunk(1, 0)));
        assert_eq!(c.torus_piece(1, 0, 1, 0), None);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let x = Tensor4::zeros(Shape4::new(1, 4, 6, 2).unwrap());
        assert!(matches!(rearrange_for_mesh(&x, 2, 2), Err(Error::Planning(_))));
    }

    #[test]
    fn from_chunks_validates() {
        let x = Tensor4::zeros(Shape4::new(1, 4, 4, 2).unwrap());
        let c = rearrange_for_mesh(&x, 2, 1).unwrap();
        assert!(ChunkedTensor::from_chunks(c.layout(), c.chunks()[..1].to_vec()).is_err());
        assert_eq!(ChunkedTensor::from_chunks(c.layout(), c.chunks().to_vec()).unwrap(), c);
    }
}
