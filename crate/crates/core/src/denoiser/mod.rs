//! Noise-prediction network for the phase diffusion model.
//!
//! A compact 1-D UNet over the length-`N` phase signal:
//! stride-2 convolutional encoder, one pre-norm self-attention layer over the
//! `N/2` down-sampled positions, nearest up-sampling with a convolutional
//! decoder, and a zero-initialized output convolution. Channel condition and
//! timestep embed into one vector that is added to every encoder position.
//! Forward and backward passes are written out by hand.

mod adam;
mod checkpoint;
mod net;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use net::{time_embedding, Denoiser, DenoiserDims, Layout, Sample};

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::Result;
use crate::scalar::Real;

/// Anything that predicts the injected noise from `(θ_t, c, t)`.
pub trait NoisePredictor<T: Real>: Sync {
    fn n(&self) -> usize;
    fn predict(&self, theta_t: &[T], condition: &[T], t: usize) -> Result<Vec<T>>;
}

impl<T: Real> NoisePredictor<T> for Denoiser<T> {
    fn n(&self) -> usize {
        self.dims().n
    }

    fn predict(&self, theta_t: &[T], condition: &[T], t: usize) -> Result<Vec<T>> {
        self.forward(theta_t, condition, t)
    }
}

/// Always predicts zero noise.
#[derive(Clone, Copy, Debug)]
pub struct ZeroPredictor {
    pub n: usize,
}

impl<T: Real> NoisePredictor<T> for ZeroPredictor {
    fn n(&self) -> usize {
        self.n
    }

    fn predict(&self, theta_t: &[T], _: &[T], _: usize) -> Result<Vec<T>> {
        Ok(vec![T::zero(); theta_t.len()])
    }
}

/// Predicts the exact noise for a known clean signal `x0` under `alpha`
/// (cumulative products indexed from `t = 1`).
#[derive(Clone, Debug)]
pub struct OraclePredictor<T> {
    pub x0: Vec<T>,
    pub alpha: Vec<T>,
}

impl<T: Real> NoisePredictor<T> for OraclePredictor<T> {
    fn n(&self) -> usize {
        self.x0.len()
    }

    fn predict(&self, theta_t: &[T], _: &[T], t: usize) -> Result<Vec<T>> {
        let a = self.alpha[t - 1];
        let (sa, sb) = (a.sqrt(), (T::one() - a).sqrt());
        Ok(theta_t.iter().zip(&self.x0).map(|(&x, &x0)| (x - sa * x0) / sb).collect())
    }
}

/// Wraps a predictor and counts evaluations.
pub struct CountingPredictor<'a, P: ?Sized> {
    inner: &'a P,
    calls: AtomicUsize,
}

impl<'a, P: ?Sized> CountingPredictor<'a, P> {
    pub fn new(inner: &'a P) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<T: Real, P: NoisePredictor<T> + ?Sized> NoisePredictor<T> for CountingPredictor<'_, P> {
    fn n(&self) -> usize {
        self.inner.n()
    }

    fn predict(&self, theta_t: &[T], condition: &[T], t: usize) -> Result<Vec<T>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict(theta_t, condition, t)
    }
}
