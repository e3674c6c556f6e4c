use crate::attention::oracle_attention;
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Per-rank Q, K, V shards of a global `[B, L, H, D]` problem, split along the
/// sequence axis in rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedInput {
    global: Shape4,
    q: Vec<Tensor4>,
    k: Vec<Tensor4>,
    v: Vec<Tensor4>,
}

impl ShardedInput {
    pub fn new(q: &Tensor4, k: &Tensor4, v: &Tensor4, parts: usize) -> Result<Self> {
        if q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(Error::Dimension(format!(
                "Q {}, K {}, V {} must share one shape",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        Ok(Self {
            global: q.shape(),
            q: q.shard_seq(parts)?,
            k: k.shard_seq(parts)?,
            v: v.shard_seq(parts)?,
        })
    }

    /// Seeded standard-normal Q, K, V scaled by `1/sqrt(D)`.
    pub fn random(global: Shape4, parts: usize, seed: u64) -> Result<Self> {
        let scale = 1.0 / (global.d as f64).sqrt();
        let base = seed.wrapping_mul(3);
        let q = Tensor4::random_normal(global, base, scale);
        let k = Tensor4::random_normal(global, base.wrapping_add(1), scale);
        let v = Tensor4::random_normal(global, base.wrapping_add(2), scale);
        Self::new(&q, &k, &v, parts)
    }

    pub fn global_shape(&self) -> Shape4 {
        self.global
    }

    pub fn shard_shape(&self) -> Shape4 {
        self.q[0].shape()
    }

    pub fn parts(&self) -> usize {
        self.q.len()
    }

    pub fn q(&self, rank: usize) -> &Tensor4 {
        &self.q[rank]
    }

    pub fn k(&self, rank: usize) -> &Tensor4 {
        &self.k[rank]
    }

    pub fn v(&self, rank: usize) -> &Tensor4 {
        &self.v[rank]
    }

    pub fn global_q(&self) -> Result<Tensor4> {
        Tensor4::concat_seq(&self.q)
    }

    pub fn global_k(&self) -> Result<Tensor4> {
        Tensor4::concat_seq(&self.k)
    }

    pub fn global_v(&self) -> Result<Tensor4> {
        Tensor4::concat_seq(&self.v)
    }

    /// Single-device reference output over the full sequence.
    pub fn oracle(&self) -> Result<Tensor4> {
        oracle_attention(&self.global_q()?, &self.global_k()?, &self.global_v()?)
    }
}

/// Concatenates per-rank outputs back into the global sequence.
pub fn gather_outputs(outputs: &[Tensor4]) -> Result<Tensor4> {
    Tensor4::concat_seq(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shards_reassemble_bit_exactly() {
        let s = Shape4::new(2, 12, 3, 4).unwrap();
        let input = ShardedInput::random(s, 4, 9).unwrap();
        assert_eq!(input.parts(), 4);
        assert_eq!(input.shard_shape(), Shape4::new(2, 3, 3, 4).unwrap());
        let q = Tensor4::random_normal(s, 27, 0.5);
        assert_eq!(input.global_q().unwrap(), q);
        assert_eq!(gather_outputs(&input.q).unwrap(), q);
    }

    #[test]
    fn indivisible_sequence_rejected() {
        let s = Shape4::new(1, 10, 1, 4).unwrap();
        assert!(matches!(ShardedInput::random(s, 4, 0), Err(Error::Planning(_))));
    }
}
