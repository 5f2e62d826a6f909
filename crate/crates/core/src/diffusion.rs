//! Noise schedule, forward noising, training loop and the two samplers
//! (ancestral and implicit) for the phase diffusion model.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::PhaseVector;
pub use crate::channel::{denormalize_phase, normalize_phase};
use crate::denoiser::{Adam, Denoiser, NoisePredictor, Sample};
use crate::error::{invalid, Error, Result};
use crate::expert::ExpertDataset;
use crate::rng::{gaussian_vec, substream};
use crate::scalar::Real;

/// Variance schedule. Vectors are indexed by `t - 1` for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<T> {
    pub v: Vec<T>,
    pub m: Vec<T>,
    pub alpha: Vec<T>,
    pub sigma: Vec<T>,
}

impl<T: Real> NoiseSchedule<T> {
    pub fn steps(&self) -> usize {
        self.v.len()
    }

    /// `α_t` with `α_0 = 1`.
    pub fn alpha_at(&self, t: usize) -> T {
        if t == 0 {
            T::one()
        } else {
            self.alpha[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// Linear `v_t` from `v_first` (t = 1) to `v_last` (t = T).
pub fn build_schedule<T: Real>(steps: usize, v_first: f64, v_last: f64) -> Result<NoiseSchedule<T>> {
    if steps == 0 {
        return Err(invalid("schedule needs at least one step"));
    }
    if !(v_first > 0.0 && v_first <= v_last && v_last < 1.0) {
        return Err(invalid(format!("need 0 < v_first <= v_last < 1, got {v_first}, {v_last}")));
    }
    let v: Vec<T> = (0..steps)
        .map(|i| {
            let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            T::lit(v_first + (v_last - v_first) * f)
        })
        .collect();
    let m: Vec<T> = v.iter().map(|&x| T::one() - x).collect();
    let mut alpha = Vec::with_capacity(steps);
    let mut acc = T::one();
    for &mt in &m {
        acc *= mt;
        alpha.push(acc);
    }
    let sigma = (0..steps)
        .map(|i| {
            let prev = if i == 0 { T::one() } else { alpha[i - 1] };
            ((T::one() - prev) / (T::one() - alpha[i]) * v[i]).sqrt()
        })
        .collect();
    Ok(NoiseSchedule { v, m, alpha, sigma })
}

/// `θ_t = √α_t θ_0 + √(1 − α_t) ε`.
pub fn forward_noise<T: Real>(theta0: &[T], t: usize, eps: &[T], schedule: &NoiseSchedule<T>) -> Result<Vec<T>> {
    schedule.check_t(t)?;
    if theta0.len() != eps.len() {
        return Err(Error::Dimension(format!("signal {} vs noise {}", theta0.len(), eps.len())));
    }
    let a = schedule.alpha[t - 1];
    let (sa, sb) = (a.sqrt(), (T::one() - a).sqrt());
    Ok(theta0.iter().zip(eps).map(|(&x, &e)| sa * x + sb * e).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the initial rate down to `lr_min` at the last epoch.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 500, batch_size: 8, lr: 5e-4, lr_min: 1e-5, lr_schedule: LrSchedule::Cosine, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch size must be at least 1"));
        }
        if !(self.lr > 0.0) || !(self.lr_min >= 0.0) || !self.lr.is_finite() {
            return Err(invalid("learning rates must be positive and finite"));
        }
        Ok(())
    }

    /// Learning rate used during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = if self.epochs <= 1 { 0.0 } else { epoch as f64 / (self.epochs - 1) as f64 };
                self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Clean normalized phases paired with model conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet<T> {
    pub theta0: Vec<Vec<T>>,
    pub condition: Vec<Vec<T>>,
}

impl<T: Real> TrainingSet<T> {
    pub fn from_dataset(ds: &ExpertDataset) -> Self {
        Self {
            theta0: ds.records.iter().map(|r| r.theta0_normalized().into_iter().map(T::lit).collect()).collect(),
            condition: ds.records.iter().map(|r| r.condition.iter().map(|&c| T::lit(c)).collect()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.theta0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta0.is_empty()
    }
}

const TRAIN_PURPOSE: u64 = 0x5452_4149;

/// Runs the training loop and returns the per-epoch loss (sample-weighted
/// mean of the batch losses). Each epoch reshuffles and draws fresh `t` and
/// `ε` per sample from its own stream of `cfg.seed`.
pub fn train<T: Real>(
    data: &TrainingSet<T>,
    model: &mut Denoiser<T>,
    adam: &mut Adam<T>,
    schedule: &NoiseSchedule<T>,
    cfg: &TrainConfig,
) -> Result<Vec<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let dims = model.dims();
    if data.theta0.iter().any(|x| x.len() != dims.n) || data.condition.iter().any(|c| c.len() != dims.dim_c) {
        return Err(Error::Dimension(format!(
            "training data does not match denoiser (N={}, condition {})",
            dims.n, dims.dim_c
        )));
    }
    if adam.m.len() != model.param_count() {
        return Err(Error::Dimension("optimizer state does not match the model".into()));
    }
    let steps = schedule.steps();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = substream(cfg.seed, epoch as u64, TRAIN_PURPOSE);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let lr = T::lit(cfg.lr_at(epoch));
        let mut weighted = T::zero();
        for chunk in order.chunks(cfg.batch_size) {
            let mut ts = Vec::with_capacity(chunk.len());
            let mut eps = Vec::with_capacity(chunk.len());
            let mut xt = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let t = rng.random_range(1..=steps);
                let e = gaussian_vec::<T, _>(&mut rng, dims.n);
                xt.push(forward_noise(&data.theta0[i], t, &e, schedule)?);
                ts.push(t);
                eps.push(e);
            }
            let batch: Vec<Sample<'_, T>> = chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| Sample { theta_t: &xt[j], condition: &data.condition[i], t: ts[j], eps: &eps[j] })
                .collect();
            let (loss, grad) = model.loss_and_grad(&batch)?;
            adam.update(model.params_mut(), &grad, lr)?;
            weighted += loss * T::from_usize_lossy(chunk.len());
        }
        trace.push(weighted / T::from_usize_lossy(data.len()));
    }
    Ok(trace)
}

/// Ancestral sampling chain from an explicit `θ_T` (normalized domain). With
/// `add_noise` false every step uses the posterior mean only; the final step
/// `t = 1` never adds noise.
pub fn ddpm_chain<T: Real, P: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
    model: &P,
    condition: &[T],
    schedule: &NoiseSchedule<T>,
    theta_t: Vec<T>,
    add_noise: bool,
    rng: &mut R,
) -> Result<Vec<T>> {
    let mut x = theta_t;
    for t in (1..=schedule.steps()).rev() {
        let eps = model.predict(&x, condition, t)?;
        let (v, m, a) = (schedule.v[t - 1], schedule.m[t - 1], schedule.alpha[t - 1]);
        let coef = v / (T::one() - a).sqrt();
        let inv = T::one() / m.sqrt();
        for (xi, &e) in x.iter_mut().zip(&eps) {
            *xi = (*xi - coef * e) * inv;
        }
        if add_noise && t > 1 {
            let s = schedule.sigma[t - 1];
            for xi in x.iter_mut() {
                *xi += s * crate::rng::gaussian::<T, R>(rng);
            }
        }
    }
    Ok(x)
}

/// Draws `θ_T ~ N(0, I)` and runs the stochastic ancestral chain.
pub fn ddpm_sample<T: Real, P: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
    model: &P,
    condition: &[T],
    schedule: &NoiseSchedule<T>,
    rng: &mut R,
) -> Result<PhaseVector<T>> {
    let x = gaussian_vec(rng, model.n());
    Ok(PhaseVector::from_normalized(&ddpm_chain(model, condition, schedule, x, true, rng)?))
}

/// Update rule of the implicit sampler.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImplicitRule {
    /// Deterministic jump between consecutive sub-steps:
    /// `θ ← √α_prev x̂_0 + √(1 − α_prev) ε̂` with
    /// `x̂_0 = (θ − √(1 − α_t) ε̂)/√α_t` and `α_prev = 1` after the last sub-step.
    #[default]
    Exact,
    /// Single-factor update `θ ← (θ − √(1 − α_t)(1 − √m_t) ε̂)/√m_t` at each
    /// sub-step `t`.
    AsPrinted,
}

/// Uniform sub-steps `τ_i = round(i·T/S)`, `i = 1..=S`.
pub fn substeps(steps: usize, s: usize) -> Result<Vec<usize>> {
    if s == 0 || s > steps {
        return Err(invalid(format!("sub-step count {s} outside 1..={steps}")));
    }
    Ok((1..=s).map(|i| ((i * steps) as f64 / s as f64).round() as usize).collect())
}

/// Implicit sampling chain from an explicit `θ_T`; exactly `S` predictor
/// evaluations and no randomness.
pub fn ddim_chain<T: Real, P: NoisePredictor<T> + ?Sized>(
    model: &P,
    condition: &[T],
    schedule: &NoiseSchedule<T>,
    s: usize,
    theta_t: Vec<T>,
    rule: ImplicitRule,
) -> Result<Vec<T>> {
    let tau = substeps(schedule.steps(), s)?;
    let mut x = theta_t;
    for i in (0..tau.len()).rev() {
        let t = tau[i];
        let eps = model.predict(&x, condition, t)?;
        let a = schedule.alpha[t - 1];
        match rule {
            ImplicitRule::Exact => {
                let a_prev = if i == 0 { T::one() } else { schedule.alpha[tau[i - 1] - 1] };
                let (sa, sb) = (a.sqrt(), (T::one() - a).sqrt());
                let (pa, pb) = (a_prev.sqrt(), (T::one() - a_prev).sqrt());
                for (xi, &e) in x.iter_mut().zip(&eps) {
                    let x0 = (*xi - sb * e) / sa;
                    *xi = pa * x0 + pb * e;
                }
            }
            ImplicitRule::AsPrinted => {
                let sm = schedule.m[t - 1].sqrt();
                let coef = (T::one() - a).sqrt() * (T::one() - sm);
                for (xi, &e) in x.iter_mut().zip(&eps) {
                    *xi = (*xi - coef * e) / sm;
                }
            }
        }
    }
    Ok(x)
}

/// Draws `θ_T ~ N(0, I)` and runs the implicit chain with `S` sub-steps.
pub fn ddim_sample<T: Real, P: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
    model: &P,
    condition: &[T],
    schedule: &NoiseSchedule<T>,
    s: usize,
    rule: ImplicitRule,
    rng: &mut R,
) -> Result<PhaseVector<T>> {
    let x = gaussian_vec(rng, model.n());
    Ok(PhaseVector::from_normalized(&ddim_chain(model, condition, schedule, s, x, rule)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{CountingPredictor, DenoiserDims, OraclePredictor, ZeroPredictor};
    use crate::rng::seeded;

    #[test]
    fn schedule_reference_values() {
        let s = build_schedule::<f64>(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha[0] - 0.9999).abs() < 1e-15);
        assert!(s.m.iter().zip(&s.v).all(|(m, v)| (m + v - 1.0).abs() < 1e-15));
        assert!(s.alpha.windows(2).all(|w| w[1] < w[0]));
        for t in 2..=1000 {
            let r = s.alpha_at(t) / s.alpha_at(t - 1);
            assert!((r - s.m[t - 1]).abs() <= 1e-12 * s.m[t - 1]);
        }
        assert!(s.alpha[999].sqrt() < 0.01);
        assert_eq!(s.sigma[0], 0.0);
        assert!(s.sigma.iter().all(|&x| x >= 0.0));
        assert!((s.v[999] - 0.02).abs() < 1e-15);
        assert!(build_schedule::<f64>(0, 1e-4, 0.02).is_err());
        assert!(build_schedule::<f64>(10, 0.03, 0.02).is_err());
        assert!(build_schedule::<f64>(10, 1e-4, 1.0).is_err());
        assert_eq!(build_schedule::<f64>(1, 0.01, 0.02).unwrap().v, vec![0.01]);
    }

    #[test]
    fn forward_noise_limits() {
        let s = build_schedule::<f64>(100, 1e-4, 0.02).unwrap();
        let x0 = vec![0.5, -0.25, 0.9];
        let out = forward_noise(&x0, 40, &[0.0; 3], &s).unwrap();
        for (o, x) in out.iter().zip(&x0) {
            assert!((o - s.alpha[39].sqrt() * x).abs() < 1e-15);
        }
        assert!(forward_noise(&x0, 0, &[0.0; 3], &s).is_err());
        assert!(forward_noise(&x0, 101, &[0.0; 3], &s).is_err());
        assert!(forward_noise(&x0, 1, &[0.0; 2], &s).is_err());
    }

    #[test]
    fn forward_noise_variance() {
        let s = build_schedule::<f64>(1000, 1e-4, 0.02).unwrap();
        let mut rng = seeded(1);
        let t = 300;
        let x0 = [0.3];
        let n = 100_000;
        let sa = s.alpha[t - 1].sqrt();
        let r: Vec<f64> = (0..n)
            .map(|_| forward_noise(&x0, t, &gaussian_vec(&mut rng, 1), &s).unwrap()[0] - sa * x0[0])
            .collect();
        let mean = r.iter().sum::<f64>() / n as f64;
        let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var / (1.0 - s.alpha[t - 1]) - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn cosine_learning_rate() {
        let c = TrainConfig { epochs: 11, ..TrainConfig::default() };
        assert_eq!(c.lr_at(0), 5e-4);
        assert!((c.lr_at(10) - 1e-5).abs() < 1e-18);
        assert!((c.lr_at(5) - (1e-5 + 0.5 * (5e-4 - 1e-5))).abs() < 1e-15);
    }

    #[test]
    fn ddpm_zero_predictor_telescopes() {
        let s = build_schedule::<f64>(50, 1e-4, 0.02).unwrap();
        let z = ZeroPredictor { n: 4 };
        let c = CountingPredictor::new(&z);
        let x_t = vec![0.1, -0.2, 0.3, 0.05];
        let out = ddpm_chain(&c, &[], &s, x_t.clone(), false, &mut seeded(0)).unwrap();
        assert_eq!(c.calls(), 50);
        let scale = 1.0 / s.alpha[49].sqrt();
        for (o, x) in out.iter().zip(&x_t) {
            assert!((o - x * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn ddpm_is_seed_deterministic_and_wrapped() {
        let s = build_schedule::<f64>(30, 1e-4, 0.02).unwrap();
        let d = Denoiser::<f64>::new(DenoiserDims::new(8, 2), &mut seeded(1)).unwrap();
        let a = ddpm_sample(&d, &[0.1, 0.2], &s, &mut seeded(5)).unwrap();
        let b = ddpm_sample(&d, &[0.1, 0.2], &s, &mut seeded(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.theta.iter().all(|t| (0.0..std::f64::consts::TAU).contains(t)));
    }

    #[test]
    fn ddpm_oracle_recovers_signal() {
        let s = build_schedule::<f64>(200, 1e-4, 0.02).unwrap();
        let x0 = vec![0.4, -0.7, 0.1, 0.9];
        let o = OraclePredictor { x0: x0.clone(), alpha: s.alpha.clone() };
        let mut rng = seeded(3);
        let out = ddpm_chain(&o, &[], &s, gaussian_vec(&mut rng, 4), true, &mut rng).unwrap();
        for (a, b) in out.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn substep_grid() {
        assert_eq!(substeps(200, 10).unwrap(), (1..=10).map(|i| 20 * i).collect::<Vec<_>>());
        assert_eq!(substeps(10, 3).unwrap(), vec![3, 7, 10]);
        assert_eq!(substeps(5, 5).unwrap(), vec![1, 2, 3, 4, 5]);
        assert!(substeps(5, 6).is_err());
        assert!(substeps(5, 0).is_err());
        let t = substeps(1000, 20).unwrap();
        assert!(t.windows(2).all(|w| w[1] > w[0]) && t[0] >= 1 && *t.last().unwrap() == 1000);
    }

    #[test]
    fn ddim_counts_and_zero_predictor() {
        let s = build_schedule::<f64>(200, 1e-4, 0.02).unwrap();
        let z = ZeroPredictor { n: 3 };
        let x_t = vec![0.2, -0.4, 0.6];
        for rule in [ImplicitRule::Exact, ImplicitRule::AsPrinted] {
            let c = CountingPredictor::new(&z);
            let out = ddim_chain(&c, &[], &s, 10, x_t.clone(), rule).unwrap();
            assert_eq!(c.calls(), 10);
            let scale = match rule {
                ImplicitRule::AsPrinted => substeps(200, 10).unwrap().iter().map(|&t| 1.0 / s.m[t - 1].sqrt()).product::<f64>(),
                ImplicitRule::Exact => 1.0 / s.alpha[199].sqrt(),
            };
            for (o, x) in out.iter().zip(&x_t) {
                assert!((o - x * scale).abs() < 1e-12 * scale, "{rule:?}");
            }
        }
    }

    #[test]
    fn ddim_exact_rule_inverts_oracle() {
        let s = build_schedule::<f64>(200, 1e-4, 0.02).unwrap();
        let x0 = vec![0.4, -0.7, 0.1, 0.9];
        let o = OraclePredictor { x0: x0.clone(), alpha: s.alpha.clone() };
        for sub in [1, 10, 20, 200] {
            let out = ddim_chain(&o, &[], &s, sub, gaussian_vec(&mut seeded(sub as u64), 4), ImplicitRule::Exact).unwrap();
            for (a, b) in out.iter().zip(&x0) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ddim_deterministic_given_start() {
        let s = build_schedule::<f64>(100, 1e-4, 0.02).unwrap();
        let mut rng = seeded(2);
        let mut d = Denoiser::<f64>::new(DenoiserDims::new(8, 2), &mut rng).unwrap();
        d.params_mut().iter_mut().for_each(|p| *p += 0.01);
        let x = gaussian_vec(&mut rng, 8);
        for rule in [ImplicitRule::Exact, ImplicitRule::AsPrinted] {
            let a = ddim_chain(&d, &[0.5, -0.5], &s, 20, x.clone(), rule).unwrap();
            let b = ddim_chain(&d, &[0.5, -0.5], &s, 20, x.clone(), rule).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn training_trace_is_finite() {
        let s = build_schedule::<f64>(50, 1e-4, 0.02).unwrap();
        let mut rng = seeded(4);
        let data = TrainingSet {
            theta0: (0..5).map(|_| gaussian_vec(&mut rng, 8)).collect(),
            condition: (0..5).map(|_| gaussian_vec(&mut rng, 3)).collect(),
        };
        let mut d = Denoiser::<f64>::new(DenoiserDims::new(8, 3), &mut rng).unwrap();
        let mut adam = Adam::new(d.param_count());
        let cfg = TrainConfig { epochs: 4, batch_size: 2, seed: 1, ..TrainConfig::default() };
        let trace = train(&data, &mut d, &mut adam, &s, &cfg).unwrap();
        assert_eq!(trace.len(), 4);
        assert!(trace.iter().all(|l| l.is_finite() && *l >= 0.0));
        let bad = TrainingSet { theta0: vec![vec![0.0; 6]], condition: vec![vec![0.0; 3]] };
        assert!(train(&bad, &mut d, &mut adam, &s, &cfg).is_err());
    }
}
