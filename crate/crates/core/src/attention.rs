//! Exact attention, blocked partial attention and partial-state merging.
//!
//! Scores are always scaled by `1/sqrt(D)`. A partial result over a block of
//! keys is kept as `(O', l, m)` with `O' = O * l`, so merging never divides
//! and a single division happens in [`finalize`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Un-normalized blocked attention state for one query tensor.
///
/// `l` and `m` are laid out `[B, H, Lq]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnPartial {
    o_prime: Tensor4,
    l: Vec<f64>,
    m: Vec<f64>,
}

impl AttnPartial {
    /// The merge identity: `O' = 0`, `l = 0`, `m = -inf`.
    pub fn identity(q_shape: Shape4) -> Self {
        let n = q_shape.b * q_shape.h * q_shape.l;
        Self {
            o_prime: Tensor4::zeros(q_shape),
            l: vec![0.0; n],
            m: vec![f64::NEG_INFINITY; n],
        }
    }

    pub fn from_parts(o_prime: Tensor4, l: Vec<f64>, m: Vec<f64>) -> Result<Self> {
        let s = o_prime.shape();
        let n = s.b * s.h * s.l;
        if l.len() != n || m.len() != n {
            return Err(Error::Dimension(format!(
                "state for {s} needs {n} l/m entries, got {} and {}",
                l.len(),
                m.len()
            )));
        }
        Ok(Self { o_prime, l, m })
    }

    pub fn shape(&self) -> Shape4 {
        self.o_prime.shape()
    }

    pub fn o_prime(&self) -> &Tensor4 {
        &self.o_prime
    }

    pub fn l(&self) -> &[f64] {
        &self.l
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    #[inline]
    fn stat_index(&self, b: usize, h: usize, q: usize) -> usize {
        let s = self.o_prime.shape();
        (b * s.h + h) * s.l + q
    }

    /// Merges a block result `(o_blk, l_blk, m_blk)` into row `(b, q, h)`.
    fn merge_row(&mut self, b: usize, q: usize, h: usize, o_blk: &[f64], l_blk: f64, m_blk: f64) {
        if m_blk == f64::NEG_INFINITY {
            return;
        }
        let i = self.stat_index(b, h, q);
        let m_old = self.m[i];
        let row = self.o_prime.row_mut(b, q, h);
        if m_old == f64::NEG_INFINITY {
            row.copy_from_slice(o_blk);
            self.l[i] = l_blk;
            self.m[i] = m_blk;
            return;
        }
        let m_new = m_old.max(m_blk);
        let s_old = (m_old - m_new).exp();
        let s_blk = (m_blk - m_new).exp();
        for (o, x) in row.iter_mut().zip(o_blk) {
            *o = *o * s_old + x * s_blk;
        }
        self.l[i] = self.l[i] * s_old + l_blk * s_blk;
        self.m[i] = m_new;
    }
}

fn check_qkv(q: &Tensor4, k: &Tensor4, v: &Tensor4) -> Result<()> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if ks != vs {
        return Err(Error::Dimension(format!("K {ks} and V {vs} differ")));
    }
    if qs.b != ks.b || qs.h != ks.h || qs.d != ks.d {
        return Err(Error::Dimension(format!(
            "Q {qs} incompatible with K/V {ks} (B, H, D must agree)"
        )));
    }
    Ok(())
}

/// Floating-point operations charged for attending `q` over `k`/`v`
/// (two matrix products, two flops per multiply-add).
pub fn attention_flops(q: Shape4, lkv: usize) -> u64 {
    4 * (q.b * q.l * q.h * q.d) as u64 * lkv as u64
}

/// Reference `softmax(Q K^T / sqrt(D)) V` with row-max stabilization.
pub fn oracle_attention(q: &Tensor4, k: &Tensor4, v: &Tensor4) -> Result<Tensor4> {
    check_qkv(q, k, v)?;
    let qs = q.shape();
    let lkv = k.shape().l;
    let scale = 1.0 / (qs.d as f64).sqrt();
    let mut out = Tensor4::zeros(qs);
    let mut scores = vec![0.0; lkv];
    for b in 0..qs.b {
        for h in 0..qs.h {
            for i in 0..qs.l {
                let qr = q.row(b, i, h);
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(qr, k.row(b, j, h)) * scale;
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let o = out.row_mut(b, i, h);
                for (j, p) in scores.iter().enumerate() {
                    axpy(o, p / sum, v.row(b, j, h));
                }
            }
        }
    }
    Ok(out)
}

/// Attention of `q` over one key/value block, left un-normalized.
pub fn partial_attention(q: &Tensor4, k: &Tensor4, v: &Tensor4) -> Result<AttnPartial> {
    check_qkv(q, k, v)?;
    let mut state = AttnPartial::identity(q.shape());
    accumulate(q, k, v, &mut state);
    Ok(state)
}

/// Online-softmax update of `state` with the block `(k, v)`.
///
/// Row for row this is `merge(state, partial_attention(q, k, v))`.
fn accumulate(q: &Tensor4, k: &Tensor4, v: &Tensor4, state: &mut AttnPartial) {
    let qs = q.shape();
    let lkv = k.shape().l;
    let scale = 1.0 / (qs.d as f64).sqrt();
    let mut scores = vec![0.0; lkv];
    let mut o_blk = vec![0.0; qs.d];
    for b in 0..qs.b {
        for h in 0..qs.h {
            for i in 0..qs.l {
                let qr = q.row(b, i, h);
                let mut m_blk = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(qr, k.row(b, j, h)) * scale;
                    m_blk = m_blk.max(*s);
                }
                o_blk.iter_mut().for_each(|x| *x = 0.0);
                let mut l_blk = 0.0;
                for (j, s) in scores.iter().enumerate() {
                    let p = (s - m_blk).exp();
                    l_blk += p;
                    axpy(&mut o_blk, p, v.row(b, j, h));
                }
                state.merge_row(b, i, h, &o_blk, l_blk, m_blk);
            }
        }
    }
}

/// Combines two partial states computed over disjoint key blocks.
pub fn merge(a: &AttnPartial, b: &AttnPartial) -> Result<AttnPartial> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "cannot merge states of shape {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let s = a.shape();
    let mut out = a.clone();
    for bi in 0..s.b {
        for h in 0..s.h {
            for q in 0..s.l {
                let i = b.stat_index(bi, h, q);
                out.merge_row(bi, q, h, b.o_prime.row(bi, q, h), b.l[i], b.m[i]);
            }
        }
    }
    Ok(out)
}

/// `O = O' / l`, broadcast over `D`.
pub fn finalize(a: &AttnPartial) -> Result<Tensor4> {
    let s = a.shape();
    let mut out = a.o_prime.clone();
    for b in 0..s.b {
        for h in 0..s.h {
            for q in 0..s.l {
                let l = a.l[a.stat_index(b, h, q)];
                if l <= 0.0 {
                    return Err(Error::EmptyAttention {
                        batch: b,
                        head: h,
                        row: q,
                    });
                }
                out.row_mut(b, q, h).iter_mut().for_each(|x| *x /= l);
            }
        }
    }
    Ok(out)
}

/// Attention of several query tensors over several key/value tensors.
///
/// Each `states[i]` is folded with every `(K_j, V_j)` in order. With
/// `finalize_outputs` the normalized outputs are returned as well; the
/// states keep their un-normalized values either way.
pub fn multi_qkv_attention(
    qs: &[Tensor4],
    kvs: &[(Tensor4, Tensor4)],
    states: &mut [AttnPartial],
    finalize_outputs: bool,
) -> Result<Option<Vec<Tensor4>>> {
    if qs.len() != states.len() {
        return Err(Error::Dimension(format!(
            "{} query tensors but {} states",
            qs.len(),
            states.len()
        )));
    }
    for (q, st) in qs.iter().zip(states.iter()) {
        if q.shape() != st.shape() {
            return Err(Error::Dimension(format!(
                "query {} does not match state {}",
                q.shape(),
                st.shape()
            )));
        }
    }
    if let Some(first) = qs.first() {
        for (k, v) in kvs {
            check_qkv(first, k, v)?;
        }
        for q in qs {
            let (a, b) = (q.shape(), first.shape());
            if (a.b, a.h, a.d) != (b.b, b.h, b.d) {
                return Err(Error::Dimension(format!("query {a} incompatible with {b}")));
            }
        }
    }
    for (q, st) in qs.iter().zip(states.iter_mut()) {
        for (k, v) in kvs {
            accumulate(q, k, v, st);
        }
    }
    if finalize_outputs {
        Ok(Some(states.iter().map(finalize).collect::<Result<_>>()?))
    } else {
        Ok(None)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
