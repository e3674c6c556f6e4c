//! Dense `[B, L, H, D]` tensors in row-major f64 storage.
//!
//! Binary layout (all integers little-endian):
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 4     | magic `b"SQT4"`                         |
//! | 4     | format version (`u32`, currently 1)     |
//! | 32    | `B, L, H, D` as four `u64`              |
//! | 8·n   | payload, `n = B·L·H·D` `f64` values     |

use std::fmt;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SQT4";
const FORMAT_VERSION: u32 = 1;

/// Shape of a [`Tensor4`]: batch, sequence length, heads, per-head dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub b: usize,
    pub l: usize,
    pub h: usize,
    pub d: usize,
}

impl Shape4 {
    pub fn new(b: usize, l: usize, h: usize, d: usize) -> Result<Self> {
        if b == 0 || l == 0 || h == 0 || d == 0 {
            return Err(Error::Dimension(format!(
                "all dimensions must be >= 1, got [{b}, {l}, {h}, {d}]"
            )));
        }
        Ok(Self { b, l, h, d })
    }

    pub fn numel(&self) -> usize {
        self.b * self.l * self.h * self.d
    }

    pub fn with_l(self, l: usize) -> Self {
        Self { l, ..self }
    }

    pub fn with_h(self, h: usize) -> Self {
        Self { h, ..self }
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.b, self.l, self.h, self.d)
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorJson", into = "TensorJson")]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorJson {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl TryFrom<TensorJson> for Tensor4 {
    type Error = Error;

    fn try_from(j: TensorJson) -> Result<Self> {
        let [b, l, h, d] = j.shape;
        Tensor4::from_vec(Shape4::new(b, l, h, d)?, j.data)
    }
}

impl From<Tensor4> for TensorJson {
    fn from(t: Tensor4) -> Self {
        let s = t.shape;
        TensorJson {
            shape: [s.b, s.l, s.h, s.d],
            data: t.data,
        }
    }
}

impl fmt::Debug for Tensor4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor4")
            .field("shape", &self.shape)
            .field("numel", &self.data.len())
            .finish()
    }
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Dimension(format!(
                "shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..shape.b {
            for l in 0..shape.l {
                for h in 0..shape.h {
                    for d in 0..shape.d {
                        data.push(f(b, l, h, d));
                    }
                }
            }
        }
        Self { shape, data }
    }

    /// Standard-normal entries scaled by `scale`, reproducible from `seed`.
    pub fn random_normal(shape: Shape4, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.numel())
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x * scale
            })
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, l: usize, h: usize) -> usize {
        ((b * self.shape.l + l) * self.shape.h + h) * self.shape.d
    }

    /// The `D`-long row at `(b, l, h)`.
    #[inline]
    pub fn row(&self, b: usize, l: usize, h: usize) -> &[f64] {
        let o = self.offset(b, l, h);
        &self.data[o..o + self.shape.d]
    }

    #[inline]
    pub fn row_mut(&mut self, b: usize, l: usize, h: usize) -> &mut [f64] {
        let o = self.offset(b, l, h);
        let d = self.shape.d;
        &mut self.data[o..o + d]
    }

    pub fn get(&self, b: usize, l: usize, h: usize, d: usize) -> f64 {
        self.data[self.offset(b, l, h) + d]
    }

    /// Tokens `[start, start + len)` along the sequence axis.
    pub fn slice_seq(&self, start: usize, len: usize) -> Result<Tensor4> {
        let s = self.shape;
        if len == 0 || start + len > s.l {
            return Err(Error::Dimension(format!(
                "sequence slice {start}..{} out of range for L={}",
                start + len,
                s.l
            )));
        }
        let row = s.h * s.d;
        let mut data = Vec::with_capacity(s.b * len * row);
        for b in 0..s.b {
            let base = (b * s.l + start) * row;
            data.extend_from_slice(&self.data[base..base + len * row]);
        }
        Ok(Tensor4 {
            shape: s.with_l(len),
            data,
        })
    }

    /// Heads `[start, start + len)` along the head axis.
    pub fn slice_heads(&self, start: usize, len: usize) -> Result<Tensor4> {
        let s = self.shape;
        if len == 0 || start + len > s.h {
            return Err(Error::Dimension(format!(
                "head slice {start}..{} out of range for H={}",
                start + len,
                s.h
            )));
        }
        let mut data = Vec::with_capacity(s.b * s.l * len * s.d);
        for b in 0..s.b {
            for l in 0..s.l {
                let o = self.offset(b, l, start);
                data.extend_from_slice(&self.data[o..o + len * s.d]);
            }
        }
        Ok(Tensor4 {
            shape: s.with_h(len),
            data,
        })
    }

    /// Writes `src` into heads `[start, start + src.h)`.
    pub fn set_heads(&mut self, start: usize, src: &Tensor4) -> Result<()> {
        let s = self.shape;
        let t = src.shape;
        if t.b != s.b || t.l != s.l || t.d != s.d || start + t.h > s.h {
            return Err(Error::Dimension(format!(
                "cannot place {t} at head {start} of {s}"
            )));
        }
        for b in 0..s.b {
            for l in 0..s.l {
                let o = self.offset(b, l, start);
                let so = src.offset(b, l, 0);
                self.data[o..o + t.h * s.d].copy_from_slice(&src.data[so..so + t.h * s.d]);
            }
        }
        Ok(())
    }

    /// Concatenates along the sequence axis.
    pub fn concat_seq(parts: &[Tensor4]) -> Result<Tensor4> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("cannot concatenate zero tensors".into()))?
            .shape;
        let mut total = 0;
        for p in parts {
            let s = p.shape;
            if s.b != first.b || s.h != first.h || s.d != first.d {
                return Err(Error::Dimension(format!(
                    "concat_seq: {s} incompatible with {first}"
                )));
            }
            total += s.l;
        }
        let row = first.h * first.d;
        let mut data = Vec::with_capacity(first.b * total * row);
        for b in 0..first.b {
            for p in parts {
                let n = p.shape.l * row;
                data.extend_from_slice(&p.data[b * n..(b + 1) * n]);
            }
        }
        Ok(Tensor4 {
            shape: first.with_l(total),
            data,
        })
    }

    /// Splits the sequence axis into `parts` equal contiguous shards.
    pub fn shard_seq(&self, parts: usize) -> Result<Vec<Tensor4>> {
        if parts == 0 || self.shape.l % parts != 0 {
            return Err(Error::Planning(format!(
                "sequence length L={} not divisible by {parts}",
                self.shape.l
            )));
        }
        let len = self.shape.l / parts;
        (0..parts).map(|i| self.slice_seq(i * len, len)).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
    }

    /// `max |self - reference| / max |reference|` (norm-wise relative error).
    pub fn max_rel_error(&self, reference: &Tensor4) -> Result<f64> {
        if self.shape != reference.shape {
            return Err(Error::Dimension(format!(
                "cannot compare {} with {}",
                self.shape, reference.shape
            )));
        }
        let diff = self
            .data
            .iter()
            .zip(&reference.data)
            .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
        let scale = reference.max_abs();
        Ok(if scale > 0.0 { diff / scale } else { diff })
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for dim in [self.shape.b, self.shape.l, self.shape.h, self.shape.d] {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Tensor4> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad tensor magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported tensor format version {version}")));
        }
        let mut dims = [0usize; 4];
        let mut qword = [0u8; 8];
        for dim in &mut dims {
            r.read_exact(&mut qword)?;
            *dim = usize::try_from(u64::from_le_bytes(qword))
                .map_err(|_| Error::Format("dimension does not fit in usize".into()))?;
        }
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3])?;
        let mut data = Vec::with_capacity(shape.numel());
        for _ in 0..shape.numel() {
            r.read_exact(&mut qword)?;
            data.push(f64::from_le_bytes(qword));
        }
        Tensor4::from_vec(shape, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + 8 * self.data.len());
        self.write_binary(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}
