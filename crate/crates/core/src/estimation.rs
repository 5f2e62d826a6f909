//! LMMSE estimation statistics, power control, the closed-form SINR of
//! statistical-CSI conjugate beamforming, and a Monte-Carlo estimator of the
//! same SINR built directly from channel draws.

use num_complex::Complex;
use rand::Rng;
use rayon::prelude::*;

use crate::channel::{aggregate_channel, correlation_trace, draw_small_scale, ChannelRealization, ChannelState};
use crate::error::{dims, invalid, Error, Result};
use crate::linalg::Matrix;
use crate::rng::{complex_gaussian, substream};
use crate::scalar::Real;

/// Per-link channel statistics under LMMSE estimation.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimationStats<T> {
    /// Aggregated-channel variance `δ_mk`.
    pub delta: Matrix<T>,
    /// LMMSE scaling `c_mk`.
    pub c_coef: Matrix<T>,
    /// Estimate variance `γ_mk = E|û_mk|²`.
    pub gamma: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerControl<T> {
    pub eta: Matrix<T>,
}

/// Statistics from already-computed variances `δ_mk`.
pub fn estimation_stats_from_delta<T: Real>(delta: Matrix<T>, tau_p: usize, p_p: T) -> EstimationStats<T> {
    let tp = T::from_usize_lossy(tau_p) * p_p;
    let root = tp.sqrt();
    let c_coef = delta.map(|&d| root * d / (tp * d + T::one()));
    let gamma = Matrix::from_fn(delta.rows(), delta.cols(), |m, k| root * delta[(m, k)] * c_coef[(m, k)]);
    EstimationStats { delta, c_coef, gamma }
}

/// `δ_mk = β_mk + Tr(Θ R_mr Θᴴ R_rk)` and the derived LMMSE quantities.
pub fn estimation_stats<T: Real>(
    state: &ChannelState<T>,
    theta: &[T],
    tau_p: usize,
    p_p: T,
) -> Result<EstimationStats<T>> {
    if theta.len() != state.n() {
        return Err(dims(format!("theta has {} entries, RIS has {}", theta.len(), state.n())));
    }
    if tau_p < state.k() {
        return Err(invalid(format!("tau_p={tau_p} < K={}", state.k())));
    }
    if !(p_p >= T::zero()) {
        return Err(invalid("pilot power must be non-negative"));
    }
    let cascade = correlation_trace(state.correlation(), theta);
    let delta = Matrix::from_fn(state.m(), state.k(), |m, k| {
        state.beta_mk[(m, k)] + state.beta_mr[m] * state.beta_rk[k] * cascade
    });
    Ok(estimation_stats_from_delta(delta, tau_p, p_p))
}

/// Full-power control: every AP spends its whole budget,
/// `η_mk = 1 / Σ_k' γ_mk'`.
pub fn power_control_full<T: Real>(gamma: &Matrix<T>) -> Result<PowerControl<T>> {
    let mut eta = Matrix::zeros(gamma.rows(), gamma.cols());
    for m in 0..gamma.rows() {
        let total: T = gamma.row(m).iter().copied().sum();
        if !(total > T::zero()) || !total.is_finite() {
            return Err(Error::Degenerate(format!("AP {m} has zero total estimate variance")));
        }
        let e = total.recip();
        eta.row_mut(m).iter_mut().for_each(|x| *x = e);
    }
    Ok(PowerControl { eta })
}

/// Closed-form effective SINR of every user.
pub fn sinr_closed_form<T: Real>(stats: &EstimationStats<T>, eta: &Matrix<T>, rho_d: T, sigma_n2: T) -> Result<Vec<T>> {
    let (m_aps, k_users) = stats.gamma.shape();
    if eta.shape() != (m_aps, k_users) || stats.delta.shape() != (m_aps, k_users) {
        return Err(dims("eta, delta and gamma must share an M x K shape"));
    }
    let g = &stats.gamma;
    let d = &stats.delta;
    // Σ_k' η_mk' γ_mk' per AP
    let load: Vec<T> = (0..m_aps).map(|m| (0..k_users).map(|k| eta[(m, k)] * g[(m, k)]).sum()).collect();
    Ok((0..k_users)
        .map(|k| {
            let amp: T = (0..m_aps).map(|m| (eta[(m, k)] * rho_d).sqrt() * g[(m, k)]).sum();
            let own: T = (0..m_aps).map(|m| eta[(m, k)] * d[(m, k)] * g[(m, k)]).sum();
            let total: T = (0..m_aps).map(|m| d[(m, k)] * load[m]).sum();
            let others = total - own;
            let den = rho_d * own + rho_d * others.max(T::zero()) + sigma_n2;
            if den > T::zero() {
                amp * amp / den
            } else {
                T::zero()
            }
        })
        .collect())
}

/// `(τ_d/τ_c) Σ_k log2(1 + Δ_k)`.
pub fn sum_se<T: Real>(sinr: &[T], tau_d: usize, tau_c: usize) -> T {
    let pre = T::from_usize_lossy(tau_d) / T::from_usize_lossy(tau_c);
    pre * sinr.iter().map(|&x| (T::one() + x).log2()).sum::<T>()
}

/// Pilot-based estimate `û_mk = c_mk (√(τ_p p_p) u_mk + n_mk)`, `n ~ CN(0, σ²)`.
pub fn simulate_pilot_estimate<T: Real, R: Rng + ?Sized>(
    stats: &EstimationStats<T>,
    u: &Matrix<Complex<T>>,
    tau_p: usize,
    p_p: T,
    sigma_n2: T,
    rng: &mut R,
) -> Result<Matrix<Complex<T>>> {
    if u.shape() != stats.c_coef.shape() {
        return Err(dims("channel and statistics shapes differ"));
    }
    let root = (T::from_usize_lossy(tau_p) * p_p).sqrt();
    let sn = sigma_n2.sqrt();
    Ok(Matrix::from_fn(u.rows(), u.cols(), |m, k| {
        let n = complex_gaussian::<T, R>(rng) * sn;
        (u[(m, k)] * root + n) * stats.c_coef[(m, k)]
    }))
}

/// How the Monte-Carlo estimator treats the uplink pilot noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PilotNoise {
    /// Draw a fresh pilot-noise sample per trial.
    Sampled,
    /// Average over the Gaussian pilot noise in closed form given each
    /// channel draw (conditional expectation); only the channels are sampled.
    #[default]
    Integrated,
}

#[derive(Clone, Debug)]
pub struct MonteCarloSinr<T> {
    /// Empirical `D_k`.
    pub desired: Vec<Complex<T>>,
    /// Beamforming-uncertainty power `E|BU_k|²`.
    pub bu_power: Vec<T>,
    /// Multi-user interference power `Σ_k'≠k E|MUI_kk'|²`.
    pub mui_power: Vec<T>,
    pub sinr: Vec<T>,
    pub trials: usize,
}

/// Shared inputs for [`monte_carlo_sinr`].
#[derive(Clone, Copy, Debug)]
pub struct MonteCarloSetup<'a, T> {
    pub state: &'a ChannelState<T>,
    pub theta: &'a [T],
    pub stats: &'a EstimationStats<T>,
    pub eta: &'a Matrix<T>,
    pub rho_d: T,
    pub tau_p: usize,
    pub p_p: T,
    pub sigma_n2: T,
}

/// Running sums for one user pair `(k, k')` of `X = Σ_m a_mk' u_mk û*_mk'`.
#[derive(Clone)]
struct Moments<T> {
    sum: Vec<Complex<T>>,
    sum_sq: Vec<T>,
}

impl<T: Real> Moments<T> {
    fn new(k: usize) -> Self {
        Self { sum: vec![Complex::new(T::zero(), T::zero()); k * k], sum_sq: vec![T::zero(); k * k] }
    }

    fn merge(mut self, other: &Self) -> Self {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += *b;
        }
        self
    }
}

const MC_CHUNK: usize = 4096;

/// Empirical UatF SINR: `|D̂_k|² / (var BU_k + Σ var MUI_kk' + σ²)`.
///
/// Trials are split into fixed-size chunks with their own random streams and
/// reduced in chunk order, so the result depends only on `seed`.
pub fn monte_carlo_sinr<T: Real>(
    setup: &MonteCarloSetup<'_, T>,
    trials: usize,
    seed: u64,
    noise: PilotNoise,
) -> Result<MonteCarloSinr<T>> {
    if trials == 0 {
        return Err(invalid("need at least one Monte-Carlo trial"));
    }
    let k_users = setup.state.k();
    let m_aps = setup.state.m();
    if setup.eta.shape() != (m_aps, k_users) || setup.stats.c_coef.shape() != (m_aps, k_users) {
        return Err(dims("eta/statistics shape does not match the state"));
    }
    if setup.theta.len() != setup.state.n() {
        return Err(dims("theta length does not match the RIS"));
    }
    let amp = setup.eta.map(|&e| (e * setup.rho_d).sqrt());
    let chunks = trials.div_ceil(MC_CHUNK);
    let partials: Vec<Moments<T>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = substream(seed, c as u64, 0x4D43);
            let n_here = MC_CHUNK.min(trials - c * MC_CHUNK);
            let mut mom = Moments::new(k_users);
            for _ in 0..n_here {
                let real = draw_small_scale(setup.state, &mut rng);
                accumulate_trial(setup, &amp, &real, noise, &mut rng, &mut mom);
            }
            mom
        })
        .collect();
    let total = partials.iter().skip(1).fold(partials[0].clone(), |acc, p| acc.merge(p));

    let n = T::from_usize_lossy(trials);
    let mut desired = Vec::with_capacity(k_users);
    let mut bu_power = Vec::with_capacity(k_users);
    let mut mui_power = Vec::with_capacity(k_users);
    let mut sinr = Vec::with_capacity(k_users);
    for k in 0..k_users {
        let mut bu = T::zero();
        let mut mui = T::zero();
        for kp in 0..k_users {
            let idx = k * k_users + kp;
            let mean = total.sum[idx] / n;
            let var = if trials > 1 {
                // unbiased: (Σ|x|² − n|x̄|²) / (n − 1)
                ((total.sum_sq[idx] - n * mean.norm_sqr()) / (n - T::one())).max(T::zero())
            } else {
                T::zero()
            };
            if kp == k {
                desired.push(mean);
                bu = var;
            } else {
                mui += var;
            }
        }
        let d = desired[k].norm_sqr();
        bu_power.push(bu);
        mui_power.push(mui);
        let den = bu + mui + setup.sigma_n2;
        sinr.push(if den > T::zero() { d / den } else { T::zero() });
    }
    Ok(MonteCarloSinr { desired, bu_power, mui_power, sinr, trials })
}

fn accumulate_trial<T: Real, R: Rng + ?Sized>(
    setup: &MonteCarloSetup<'_, T>,
    amp: &Matrix<T>,
    real: &ChannelRealization<T>,
    noise: PilotNoise,
    rng: &mut R,
    mom: &mut Moments<T>,
) {
    let u = aggregate_channel(real, setup.theta).expect("shapes checked by caller");
    let (m_aps, k_users) = u.shape();
    match noise {
        PilotNoise::Sampled => {
            let u_hat = simulate_pilot_estimate(setup.stats, &u, setup.tau_p, setup.p_p, setup.sigma_n2, rng)
                .expect("shapes checked by caller");
            for k in 0..k_users {
                for kp in 0..k_users {
                    let x: Complex<T> = (0..m_aps).map(|m| u[(m, k)] * u_hat[(m, kp)].conj() * amp[(m, kp)]).sum();
                    let idx = k * k_users + kp;
                    mom.sum[idx] += x;
                    mom.sum_sq[idx] += x.norm_sqr();
                }
            }
        }
        PilotNoise::Integrated => {
            // E_n[X] = Σ a c √(τp pp) u_mk u*_mk'
            // E_n|X|² = |E_n X|² + σ² Σ a² c² |u_mk|²
            let root = (T::from_usize_lossy(setup.tau_p) * setup.p_p).sqrt();
            let c = &setup.stats.c_coef;
            for k in 0..k_users {
                for kp in 0..k_users {
                    let mut x = Complex::new(T::zero(), T::zero());
                    let mut extra = T::zero();
                    for m in 0..m_aps {
                        let w = amp[(m, kp)] * c[(m, kp)];
                        x += u[(m, k)] * u[(m, kp)].conj() * (w * root);
                        extra += w * w * u[(m, k)].norm_sqr();
                    }
                    let idx = k * k_users + kp;
                    mom.sum[idx] += x;
                    mom.sum_sq[idx] += x.norm_sqr() + setup.sigma_n2 * extra;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{draw_drop, SystemConfig};
    use crate::rng::seeded;

    fn stats_1x1(delta: f64, tau_p: usize, p_p: f64) -> EstimationStats<f64> {
        estimation_stats_from_delta(Matrix::filled(1, 1, delta), tau_p, p_p)
    }

    #[test]
    fn lmmse_hand_values() {
        let s = stats_1x1(1.0, 1, 1.0);
        assert!((s.c_coef[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((s.gamma[(0, 0)] - 0.5).abs() < 1e-15);
        let s = stats_1x1(2.0, 3, 0.0);
        assert_eq!(s.c_coef[(0, 0)], 0.0);
        assert_eq!(s.gamma[(0, 0)], 0.0);
        let s = stats_1x1(0.7, 10, 1e12);
        assert!((s.gamma[(0, 0)] - 0.7).abs() < 1e-9);
    }

    #[test]
    fn gamma_never_exceeds_delta() {
        for &d in &[1e-9, 1e-3, 0.5, 1.0, 10.0, 1e6] {
            for &p in &[0.0, 1e-3, 1.0, 100.0, 1e9] {
                let s = stats_1x1(d, 4, p);
                let g = s.gamma[(0, 0)];
                assert!(g >= 0.0 && g <= d * (1.0 + 1e-12), "d={d} p={p} g={g}");
                let alt = 4.0 * p * d * d / (4.0 * p * d + 1.0);
                assert!((g - alt).abs() <= 1e-12 * alt.max(1e-300));
            }
        }
    }

    #[test]
    fn full_power_control() {
        let pc = power_control_full(&Matrix::filled(1, 1, 0.5)).unwrap();
        assert_eq!(pc.eta[(0, 0)], 2.0);
        let g = Matrix::from_vec(2, 2, vec![0.5, 0.5, 0.1, 0.3]).unwrap();
        let pc = power_control_full(&g).unwrap();
        assert_eq!(pc.eta.row(0), &[1.0, 1.0]);
        for m in 0..2 {
            let s: f64 = (0..2).map(|k| pc.eta[(m, k)] * g[(m, k)]).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
        assert!(matches!(
            power_control_full(&Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn sinr_hand_value() {
        let stats = EstimationStats {
            delta: Matrix::filled(1, 1, 1.0),
            c_coef: Matrix::filled(1, 1, 0.5),
            gamma: Matrix::filled(1, 1, 0.5),
        };
        let eta = Matrix::filled(1, 1, 1.0);
        let s: Vec<f64> = sinr_closed_form(&stats, &eta, 1.0, 1.0).unwrap();
        assert!((s[0] - 1.0 / 6.0).abs() < 1e-15);
        let s = sinr_closed_form(&stats, &eta, 0.0, 1.0).unwrap();
        assert_eq!(s[0], 0.0);
    }

    #[test]
    fn sinr_matches_direct_formula() {
        let cfg = SystemConfig::with_dims(4, 3, 4);
        let state: ChannelState<f64> = draw_drop(&cfg, &mut seeded(9)).unwrap();
        let th = [0.2, 1.4, 3.0, 5.5];
        let st = estimation_stats(&state, &th, cfg.tau_p, cfg.p_p).unwrap();
        let eta = power_control_full(&st.gamma).unwrap().eta;
        let fast = sinr_closed_form(&st, &eta, 100.0, 1.0).unwrap();
        for k in 0..3 {
            let num: f64 = (0..4).map(|m| (eta[(m, k)] * 100.0).sqrt() * st.gamma[(m, k)]).sum();
            let mut den = 1.0;
            for m in 0..4 {
                den += 100.0 * eta[(m, k)] * st.delta[(m, k)] * st.gamma[(m, k)];
            }
            for kp in (0..3).filter(|&x| x != k) {
                for m in 0..4 {
                    den += 100.0 * eta[(m, kp)] * st.delta[(m, k)] * st.gamma[(m, kp)];
                }
            }
            let slow = num * num / den;
            assert!((fast[k] - slow).abs() < 1e-12 * slow);
        }
    }

    #[test]
    fn sum_se_values() {
        assert_eq!(sum_se(&[0.0_f64, 0.0], 188, 200), 0.0);
        assert!((sum_se(&[1.0_f64], 188, 200) - 0.94).abs() < 1e-15);
        let a = sum_se(&[1.0_f64, 3.0], 188, 200);
        let b = sum_se(&[1.0_f64], 188, 200) + sum_se(&[3.0_f64], 188, 200);
        assert!((a - b).abs() < 1e-14);
        assert_eq!(sum_se(&[3.0_f64, 1.0], 188, 200), a);
    }

    #[test]
    fn stats_reject_bad_inputs() {
        let cfg = SystemConfig::with_dims(2, 2, 4);
        let state: ChannelState<f64> = draw_drop(&cfg, &mut seeded(1)).unwrap();
        assert!(estimation_stats(&state, &[0.0; 3], 2, 1.0).is_err());
        assert!(estimation_stats(&state, &[0.0; 4], 1, 1.0).is_err());
    }
}
