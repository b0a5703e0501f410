//! Binary network checkpoints.
//!
//! Layout, all integers `u32` little-endian and all reals `f64` little-endian:
//!
//! ```text
//! magic     8 bytes  "HOSMMLP\0"
//! version   u32      1
//! n_layers  u32
//! shapes    n_layers x (out u32, in u32)
//! values    for each layer: weight (out*in, row-major), then bias (out)
//! ```
//!
//! Hidden layers use tanh and the last layer is affine; this is implied by
//! the format and not stored.

use crate::autodiff::mlp::{Layer, MlpParams};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 8] = b"HOSMMLP\0";
pub const VERSION: u32 = 1;

pub fn encode(net: &MlpParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * net.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for l in net.layers() {
        out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
    }
    for l in net.layers() {
        for v in l.weight.as_slice().iter().chain(l.bias.as_slice()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(buf: &[u8]) -> Result<MlpParams> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let shapes = (0..n)
        .map(|_| Ok((r.u32()? as usize, r.u32()? as usize)))
        .collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(n);
    for (out, inp) in shapes {
        let weight = Matrix::from_vec(out, inp, r.f64s(out * inp)?)?;
        let bias = Matrix::from_vec(1, out, r.f64s(out)?)?;
        layers.push(Layer { weight, bias });
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    MlpParams::from_layers(layers)
}
