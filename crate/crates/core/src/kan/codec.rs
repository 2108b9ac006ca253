//! `KAN1` binary blob.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! "KAN1"                      4 bytes magic
//! layer_count                 u32
//! order, intervals            u32, u32
//! grid_min, grid_max          f64, f64
//! per layer:
//!   n_in, n_out               u32, u32
//!   per edge (p outer, q inner):
//!     base_weight, spline_weight   f64, f64
//!     coefs[0 .. G+k]              f64 each
//! ```
//!
//! Round trips are bit-exact.

use alloc::format;
use alloc::vec::Vec;

use super::layer::KanLayer;
use super::network::{KanNetwork, SplineConfig};
use crate::numerics::Matrix;
use crate::{Error, Result};

pub const KAN_MAGIC: &[u8; 4] = b"KAN1";

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Decode(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Decode(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

impl KanNetwork {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_bytes(&mut out);
        out
    }

    pub(crate) fn write_bytes(&self, out: &mut Vec<u8>) {
        let basis = self.layers()[0].basis();
        out.extend_from_slice(KAN_MAGIC);
        put_u32(out, self.layers().len() as u32);
        put_u32(out, basis.order() as u32);
        put_u32(out, basis.intervals() as u32);
        put_f64(out, basis.grid_min());
        put_f64(out, basis.grid_max());
        for layer in self.layers() {
            put_u32(out, layer.n_in() as u32);
            put_u32(out, layer.n_out() as u32);
            for p in 0..layer.n_in() {
                for q in 0..layer.n_out() {
                    put_f64(out, layer.base_weight.get(p, q));
                    put_f64(out, layer.spline_weight.get(p, q));
                    for &c in layer.coefs.row(p * layer.n_out() + q) {
                        put_f64(out, c);
                    }
                }
            }
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let net = Self::read_bytes(&mut r)?;
        r.finish()?;
        Ok(net)
    }

    pub(crate) fn read_bytes(r: &mut Reader<'_>) -> Result<Self> {
        if r.take(4)? != KAN_MAGIC {
            return Err(Error::Decode("missing KAN1 magic".into()));
        }
        let layer_count = r.u32()? as usize;
        let spline = SplineConfig {
            order: r.u32()? as usize,
            intervals: r.u32()? as usize,
            grid_min: r.f64()?,
            grid_max: r.f64()?,
        };
        let basis = spline
            .basis()
            .map_err(|e| Error::Decode(format!("bad spline header: {e}")))?;
        let nb = basis.len();
        let mut layers = Vec::with_capacity(layer_count.min(64));
        for _ in 0..layer_count {
            let n_in = r.u32()? as usize;
            let n_out = r.u32()? as usize;
            // guard allocation against garbage dims before reading edges
            let needed = n_in
                .checked_mul(n_out)
                .and_then(|e| e.checked_mul((nb + 2) * 8))
                .ok_or_else(|| Error::Decode("layer dims overflow".into()))?;
            if needed > bytes_left(r) {
                return Err(Error::Decode("layer larger than remaining blob".into()));
            }
            let mut coefs = Matrix::zeros(n_in * n_out, nb);
            let mut bw = Matrix::zeros(n_in, n_out);
            let mut sw = Matrix::zeros(n_in, n_out);
            for p in 0..n_in {
                for q in 0..n_out {
                    bw.set(p, q, r.f64()?);
                    sw.set(p, q, r.f64()?);
                    for c in coefs.row_mut(p * n_out + q) {
                        *c = r.f64()?;
                    }
                }
            }
            layers.push(KanLayer::from_parts(basis.clone(), coefs, bw, sw));
        }
        KanNetwork::from_layers(layers).map_err(|e| Error::Decode(format!("{e}")))
    }
}

fn bytes_left(r: &Reader<'_>) -> usize {
    r.buf.len() - r.position()
}
