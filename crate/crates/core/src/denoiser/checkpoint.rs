use std::path::Path;

use super::{Adam, Denoiser, DenoiserDims};
use crate::error::{Error, Result};
use crate::io::{atomic_write, Decoder, Encoder};
use crate::scalar::Real;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"RDNW1";

/// Network weights plus optional optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub denoiser: Denoiser<T>,
    pub adam: Option<Adam<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.denoiser.dims();
        let mut e = Encoder::new();
        e.bytes(CHECKPOINT_MAGIC);
        for v in [d.n, d.dim_c, d.hidden, d.width, d.time_dim, self.denoiser.param_count()] {
            e.usize(v);
        }
        for &p in self.denoiser.params() {
            e.f64(p.as_f64());
        }
        match &self.adam {
            None => e.u64(0),
            Some(a) => {
                e.u64(1);
                e.u64(a.step);
                e.f64s(&[a.beta1, a.beta2, a.eps]);
                for &x in a.m.iter().chain(&a.v) {
                    e.f64(x.as_f64());
                }
            }
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes);
        d.expect_magic(CHECKPOINT_MAGIC)?;
        let dims = DenoiserDims {
            n: d.usize()?,
            dim_c: d.usize()?,
            hidden: d.usize()?,
            width: d.usize()?,
            time_dim: d.usize()?,
        };
        dims.validate().map_err(|e| Error::Format(format!("bad layer dims: {e}")))?;
        let count = d.usize()?;
        let to_t = |v: Vec<f64>| v.into_iter().map(T::lit).collect::<Vec<T>>();
        let params = to_t(d.f64s(count)?);
        let denoiser = Denoiser::from_params(dims, params).map_err(|e| Error::Format(e.to_string()))?;
        let adam = match d.u64()? {
            0 => None,
            1 => {
                let step = d.u64()?;
                let (beta1, beta2, eps) = (d.f64()?, d.f64()?, d.f64()?);
                let m = to_t(d.f64s(count)?);
                let v = to_t(d.f64s(count)?);
                Some(Adam { beta1, beta2, eps, step, m, v })
            }
            f => return Err(Error::Format(format!("unknown optimizer flag {f}"))),
        };
        d.finish()?;
        Ok(Self { denoiser, adam })
    }
}

pub fn save_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    atomic_write(path, &ckpt.to_bytes())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
