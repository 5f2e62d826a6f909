use std::path::Path;

use rayon::prelude::*;

use super::{canonicalize_global_phase, ga_optimize, GaConfig, Objective};
use crate::channel::{db_to_linear, draw_drop, normalize_phase, ChannelState, SystemConfig};
use crate::error::{invalid, Error, Result};
use crate::io::{atomic_write, Decoder, Encoder};
use crate::rng::substream;

pub const DATASET_MAGIC: &[u8; 5] = b"RDOP1";

const DROP_PURPOSE: u64 = 0x4452_4F50;

/// One expert label: a normalized channel condition and the GA phases for it.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertRecord {
    pub condition: Vec<f64>,
    /// Phases in `[0, 2π)`.
    pub theta0: Vec<f64>,
    pub rho_d_db: f64,
    pub achieved_se: f64,
}

impl ExpertRecord {
    /// Phases mapped to the `[-1, 1)` training domain.
    pub fn theta0_normalized(&self) -> Vec<f64> {
        self.theta0.iter().map(|&t| normalize_phase(t)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetOptions {
    /// Append the normalized downlink power (dB) as the last condition entry.
    pub include_rho: bool,
    /// Rotate each expert solution to zero circular mean in the normalized domain.
    pub canonicalize: bool,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self { include_rho: false, canonicalize: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertDataset {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub records: Vec<ExpertRecord>,
}

fn raw_condition<T: crate::scalar::Real>(state: &ChannelState<T>, rho_d_db: Option<f64>) -> Vec<f64> {
    let mut c = state.condition_db();
    c.extend(rho_d_db);
    c
}

impl ExpertDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn condition_len(&self) -> usize {
        self.norm_mean.len()
    }

    /// Whether the condition carries a trailing ρ_d entry.
    pub fn includes_rho(&self) -> bool {
        self.condition_len() == self.m + self.k + self.m * self.k + 1
    }

    /// Standardizes a raw dB condition with the dataset statistics.
    pub fn normalize(&self, raw_db: &[f64]) -> Result<Vec<f64>> {
        if raw_db.len() != self.condition_len() {
            return Err(Error::Dimension(format!(
                "condition has {} entries, dataset expects {}",
                raw_db.len(),
                self.condition_len()
            )));
        }
        Ok(raw_db.iter().zip(&self.norm_mean).zip(&self.norm_std).map(|((x, m), s)| (x - m) / s).collect())
    }

    /// Normalized model condition for a (possibly held-out) channel state.
    pub fn condition_for<T: crate::scalar::Real>(&self, state: &ChannelState<T>, rho_d_db: f64) -> Result<Vec<f64>> {
        if (state.m(), state.k(), state.n()) != (self.m, self.k, self.n) {
            return Err(Error::Dimension(format!(
                "state is (M,K,N)=({},{},{}), dataset ({},{},{})",
                state.m(),
                state.k(),
                state.n(),
                self.m,
                self.k,
                self.n
            )));
        }
        self.normalize(&raw_condition(state, self.includes_rho().then_some(rho_d_db)))
    }

    /// Builds a dataset from raw dB conditions, computing per-dimension
    /// mean and population standard deviation. Constant dimensions get unit
    /// scale.
    pub fn from_raw(m: usize, k: usize, n: usize, raw: Vec<(Vec<f64>, Vec<f64>, f64, f64)>) -> Result<Self> {
        if raw.is_empty() {
            return Err(invalid("dataset needs at least one record"));
        }
        let len = raw[0].0.len();
        let base = m + k + m * k;
        if len != base && len != base + 1 {
            return Err(Error::Dimension(format!("condition length {len} does not match M={m}, K={k}")));
        }
        if raw.iter().any(|r| r.0.len() != len || r.1.len() != n) {
            return Err(Error::Dimension("ragged records".into()));
        }
        let count = raw.len() as f64;
        let mut mean = vec![0.0; len];
        for r in &raw {
            for (a, x) in mean.iter_mut().zip(&r.0) {
                *a += x;
            }
        }
        mean.iter_mut().for_each(|a| *a /= count);
        let mut var = vec![0.0; len];
        for r in &raw {
            for ((a, x), mu) in var.iter_mut().zip(&r.0).zip(&mean) {
                *a += (x - mu) * (x - mu);
            }
        }
        let std: Vec<f64> = var
            .iter()
            .zip(&mean)
            .map(|(v, mu)| {
                let s = (v / count).sqrt();
                // relative floor: spread below rounding noise counts as constant
                if s > 1e-12 * mu.abs().max(1.0) {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        let records = raw
            .into_iter()
            .map(|(c, theta0, rho_d_db, achieved_se)| ExpertRecord {
                condition: c.iter().zip(&mean).zip(&std).map(|((x, m), s)| (x - m) / s).collect(),
                theta0,
                rho_d_db,
                achieved_se,
            })
            .collect();
        Ok(Self { m, k, n, norm_mean: mean, norm_std: std, records })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.bytes(DATASET_MAGIC);
        for v in [self.m, self.k, self.n, self.records.len(), self.condition_len()] {
            e.usize(v);
        }
        e.f64s(&self.norm_mean);
        e.f64s(&self.norm_std);
        for r in &self.records {
            e.f64s(&r.condition);
            e.f64s(&r.theta0);
            e.f64(r.rho_d_db);
            e.f64(r.achieved_se);
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes);
        d.expect_magic(DATASET_MAGIC)?;
        let (m, k, n, count, len) = (d.usize()?, d.usize()?, d.usize()?, d.usize()?, d.usize()?);
        let base = m * k + m + k;
        if len != base && len != base + 1 {
            return Err(Error::Format(format!("condition length {len} inconsistent with M={m}, K={k}")));
        }
        let norm_mean = d.f64s(len)?;
        let norm_std = d.f64s(len)?;
        let record_bytes = (len + n + 2) * 8;
        if count.checked_mul(record_bytes) != Some(d.remaining()) {
            return Err(Error::Format(format!(
                "{} payload bytes for {count} records of {record_bytes} bytes",
                d.remaining()
            )));
        }
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            records.push(ExpertRecord {
                condition: d.f64s(len)?,
                theta0: d.f64s(n)?,
                rho_d_db: d.f64()?,
                achieved_se: d.f64()?,
            });
        }
        d.finish()?;
        Ok(Self { m, k, n, norm_mean, norm_std, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// CSV mirror: `index, rho_d_dB, achieved_se, c0.., theta0..`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["index".to_string(), "rho_d_dB".into(), "achieved_se".into()];
        header.extend((0..self.condition_len()).map(|i| format!("c{i}")));
        header.extend((0..self.n).map(|i| format!("theta{i}")));
        w.write_record(&header)?;
        for (i, r) in self.records.iter().enumerate() {
            let mut row = vec![i.to_string(), r.rho_d_db.to_string(), r.achieved_se.to_string()];
            row.extend(r.condition.iter().chain(&r.theta0).map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_csv()?)
    }
}

/// Labels `samples` fresh drops with GA solutions. Sample `i` uses its own
/// random stream and the power level `rho_grid_db[i % len]`, so the result
/// does not depend on the thread count.
pub fn generate_dataset(
    cfg: &SystemConfig,
    rho_grid_db: &[f64],
    samples: usize,
    ga: &GaConfig,
    opts: DatasetOptions,
    seed: u64,
) -> Result<ExpertDataset> {
    if samples == 0 {
        return Err(invalid("dataset needs at least one sample"));
    }
    if rho_grid_db.is_empty() || rho_grid_db.iter().any(|r| !r.is_finite()) {
        return Err(invalid("power grid must be non-empty and finite"));
    }
    cfg.validate()?;
    ga.validate()?;
    let raw: Vec<_> = (0..samples)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let mut rng = substream(seed, i as u64, DROP_PURPOSE);
            let state: ChannelState<f64> = draw_drop(cfg, &mut rng)?;
            let rho_db = rho_grid_db[i % rho_grid_db.len()];
            let rho = db_to_linear(rho_db);
            let res = ga_optimize(cfg, &state, rho, ga, &mut rng)?;
            let (theta, se) = if opts.canonicalize {
                let th = canonicalize_global_phase(&res.theta);
                let se = Objective::new(cfg, &state, rho)?.eval(&th);
                (th, se)
            } else {
                (res.theta, res.fitness)
            };
            Ok((raw_condition(&state, opts.include_rho.then_some(rho_db)), theta, rho_db, se))
        })
        .collect::<Result<_>>()?;
    ExpertDataset::from_raw(cfg.m_aps, cfg.k_users, cfg.n_elements, raw)
}

/// Redraws the channel state of sample `i` of a dataset generated with `seed`.
pub fn regenerate_state(cfg: &SystemConfig, seed: u64, i: usize) -> Result<ChannelState<f64>> {
    draw_drop(cfg, &mut substream(seed, i as u64, DROP_PURPOSE))
}
