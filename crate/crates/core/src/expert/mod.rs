//! Genetic-algorithm expert for the sum-SE phase design problem, an
//! exhaustive grid search for tiny surfaces, and expert-dataset generation.

mod dataset;

pub use dataset::{generate_dataset, regenerate_state, DatasetOptions, ExpertDataset, ExpertRecord, DATASET_MAGIC};

use num_complex::Complex;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelState, SystemConfig};
use crate::error::{invalid, Error, Result};
use crate::estimation::{estimation_stats, power_control_full, sinr_closed_form, sum_se};
use crate::rng::{gaussian, uniform_phase};
use crate::scalar::{wrap_phase, wrap_to_pi, Real};

/// Closed-form sum SE of one channel state as a function of the RIS phases.
#[derive(Clone, Debug)]
pub struct Objective<'a, T> {
    state: &'a ChannelState<T>,
    tau_p: usize,
    tau_c: usize,
    p_p: T,
    sigma_n2: T,
    rho_d: T,
}

impl<'a, T: Real> Objective<'a, T> {
    pub fn new(cfg: &SystemConfig, state: &'a ChannelState<T>, rho_d: T) -> Result<Self> {
        cfg.validate()?;
        if state.m() != cfg.m_aps || state.k() != cfg.k_users {
            return Err(Error::Dimension(format!(
                "state is {}x{}, config {}x{}",
                state.m(),
                state.k(),
                cfg.m_aps,
                cfg.k_users
            )));
        }
        if !(cfg.p_p > 0.0) {
            return Err(invalid("pilot power must be positive for a well-defined power control"));
        }
        if !(rho_d >= T::zero()) {
            return Err(invalid("downlink power must be non-negative"));
        }
        Ok(Self {
            state,
            tau_p: cfg.tau_p,
            tau_c: cfg.tau_c,
            p_p: T::lit(cfg.p_p),
            sigma_n2: T::lit(cfg.sigma_n2),
            rho_d,
        })
    }

    pub fn n(&self) -> usize {
        self.state.n()
    }

    pub fn state(&self) -> &ChannelState<T> {
        self.state
    }

    pub fn eval(&self, theta: &[T]) -> T {
        let stats = estimation_stats(self.state, theta, self.tau_p, self.p_p).expect("objective inputs validated");
        let eta = power_control_full(&stats.gamma).expect("positive pilot power gives positive gamma").eta;
        let sinr = sinr_closed_form(&stats, &eta, self.rho_d, self.sigma_n2).expect("shapes from stats");
        sum_se(&sinr, self.tau_c - self.tau_p, self.tau_c)
    }
}

/// Sum SE achieved by `theta` on `state` at downlink power `rho_d` (linear).
pub fn fitness<T: Real>(cfg: &SystemConfig, state: &ChannelState<T>, theta: &[T], rho_d: T) -> Result<T> {
    if theta.len() != state.n() {
        return Err(Error::Dimension(format!("theta has {} entries, RIS has {}", theta.len(), state.n())));
    }
    Ok(Objective::new(cfg, state, rho_d)?.eval(theta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub elite: usize,
    pub tournament_size: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub mutation_sigma_rad: f64,
    /// BLX-α extension factor.
    pub blend_alpha: f64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 50,
            generations: 150,
            elite: 2,
            tournament_size: 3,
            crossover_rate: 0.9,
            mutation_rate: 0.1,
            mutation_sigma_rad: 0.3,
            blend_alpha: 0.5,
        }
    }
}

impl GaConfig {
    pub fn desk() -> Self {
        Self { population: 40, generations: 100, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(invalid("GA population must be at least 2"));
        }
        if self.elite >= self.population {
            return Err(invalid("elite count must be smaller than the population"));
        }
        if self.tournament_size == 0 {
            return Err(invalid("tournament size must be positive"));
        }
        for (name, p) in [("crossover_rate", self.crossover_rate), ("mutation_rate", self.mutation_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.mutation_sigma_rad >= 0.0) || !(self.blend_alpha >= 0.0) {
            return Err(invalid("mutation sigma and blend alpha must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GaResult<T> {
    /// Best individual ever evaluated.
    pub theta: Vec<T>,
    pub fitness: T,
    /// Best-so-far fitness after each generation.
    pub trace: Vec<T>,
    /// Best fitness in the initial population.
    pub initial_best: T,
    pub evaluations: usize,
}

fn tournament<T: Real, R: Rng + ?Sized>(fit: &[T], size: usize, rng: &mut R) -> usize {
    let mut best = rng.random_range(0..fit.len());
    for _ in 1..size {
        let c = rng.random_range(0..fit.len());
        if fit[c] > fit[best] {
            best = c;
        }
    }
    best
}

/// Blend crossover on the circle: the second parent is first moved to the
/// representative closest to the first, so wrap-around neighbours blend
/// locally.
fn blend<T: Real, R: Rng + ?Sized>(a: &[T], b: &[T], alpha: f64, rng: &mut R) -> Vec<T> {
    let alpha = T::lit(alpha);
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let y = x + wrap_to_pi(y - x);
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            let span = hi - lo;
            let u = T::lit(rng.random::<f64>());
            wrap_phase(lo - alpha * span + u * (T::one() + T::lit(2.0) * alpha) * span)
        })
        .collect()
}

/// Elitist real-coded GA maximizing `objective` over `[0, 2π)^n`.
pub fn ga_maximize<T: Real, R: Rng + ?Sized>(
    n: usize,
    mut objective: impl FnMut(&[T]) -> T,
    cfg: &GaConfig,
    rng: &mut R,
) -> Result<GaResult<T>> {
    cfg.validate()?;
    if n == 0 {
        return Err(invalid("cannot optimize an empty phase vector"));
    }
    let sigma = T::lit(cfg.mutation_sigma_rad);
    let mut pop: Vec<Vec<T>> = (0..cfg.population).map(|_| (0..n).map(|_| uniform_phase(rng)).collect()).collect();
    let mut fit: Vec<T> = pop.iter().map(|p| objective(p)).collect();
    let mut evaluations = pop.len();

    let argmax = |fit: &[T]| (0..fit.len()).fold(0, |b, i| if fit[i] > fit[b] { i } else { b });
    let i0 = argmax(&fit);
    let initial_best = fit[i0];
    let mut best = (pop[i0].clone(), fit[i0]);
    let mut trace = Vec::with_capacity(cfg.generations);

    for _ in 0..cfg.generations {
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| fit[b].partial_cmp(&fit[a]).unwrap_or(std::cmp::Ordering::Equal));

        let mut next: Vec<Vec<T>> = Vec::with_capacity(cfg.population);
        let mut next_fit: Vec<T> = Vec::with_capacity(cfg.population);
        for &i in order.iter().take(cfg.elite) {
            next.push(pop[i].clone());
            next_fit.push(fit[i]);
        }
        while next.len() < cfg.population {
            let a = tournament(&fit, cfg.tournament_size, rng);
            let b = tournament(&fit, cfg.tournament_size, rng);
            let mut child = if rng.random::<f64>() < cfg.crossover_rate {
                blend(&pop[a], &pop[b], cfg.blend_alpha, rng)
            } else {
                pop[a].clone()
            };
            for g in child.iter_mut() {
                if rng.random::<f64>() < cfg.mutation_rate {
                    *g = wrap_phase(*g + sigma * gaussian::<T, R>(rng));
                }
            }
            next_fit.push(objective(&child));
            evaluations += 1;
            next.push(child);
        }
        pop = next;
        fit = next_fit;
        let i = argmax(&fit);
        if fit[i] > best.1 {
            best = (pop[i].clone(), fit[i]);
        }
        trace.push(best.1);
    }
    Ok(GaResult { theta: best.0, fitness: best.1, trace, initial_best, evaluations })
}

/// GA expert on the closed-form sum SE of `state`.
pub fn ga_optimize<T: Real, R: Rng + ?Sized>(
    cfg: &SystemConfig,
    state: &ChannelState<T>,
    rho_d: T,
    ga: &GaConfig,
    rng: &mut R,
) -> Result<GaResult<T>> {
    let obj = Objective::new(cfg, state, rho_d)?;
    ga_maximize(state.n(), |th| obj.eval(th), ga, rng)
}

pub const BRUTE_FORCE_MAX_N: usize = 3;

#[derive(Clone, Debug)]
pub struct GridSearch<T> {
    pub theta: Vec<T>,
    pub fitness: T,
    pub evaluations: usize,
}

/// Exhaustive search over the uniform grid `θ_n ∈ {2πi/G}`; first maximum in
/// lexicographic order wins.
pub fn grid_maximize<T: Real>(
    n: usize,
    grid_points: usize,
    mut objective: impl FnMut(&[T]) -> T,
) -> Result<GridSearch<T>> {
    if n > BRUTE_FORCE_MAX_N {
        return Err(Error::Refused(format!(
            "exhaustive search over N={n} elements is infeasible (limit {BRUTE_FORCE_MAX_N})"
        )));
    }
    if n == 0 || grid_points < 2 {
        return Err(invalid("grid search needs N >= 1 and at least 2 points per dimension"));
    }
    let step = T::TAU() / T::from_usize_lossy(grid_points);
    let mut idx = vec![0usize; n];
    let mut theta = vec![T::zero(); n];
    let mut best: Option<(Vec<T>, T)> = None;
    let mut evaluations = 0;
    loop {
        for (t, &i) in theta.iter_mut().zip(&idx) {
            *t = step * T::from_usize_lossy(i);
        }
        let f = objective(&theta);
        evaluations += 1;
        if best.as_ref().is_none_or(|(_, b)| f > *b) {
            best = Some((theta.clone(), f));
        }
        // odometer increment
        let mut d = 0;
        loop {
            if d == n {
                let (theta, fitness) = best.expect("at least one point evaluated");
                return Ok(GridSearch { theta, fitness, evaluations });
            }
            idx[d] += 1;
            if idx[d] < grid_points {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

pub fn brute_force_phase<T: Real>(
    cfg: &SystemConfig,
    state: &ChannelState<T>,
    rho_d: T,
    grid_points: usize,
) -> Result<GridSearch<T>> {
    if state.n() > BRUTE_FORCE_MAX_N {
        return Err(Error::Refused(format!("brute force limited to N <= {BRUTE_FORCE_MAX_N}, got {}", state.n())));
    }
    let obj = Objective::new(cfg, state, rho_d)?;
    grid_maximize(state.n(), grid_points, |th| obj.eval(th))
}

/// Rotates all phases by a common offset so their circular mean is `π`
/// (zero in the normalized domain). The sum SE is unchanged by a common
/// rotation.
pub fn canonicalize_global_phase<T: Real>(theta: &[T]) -> Vec<T> {
    let resultant: Complex<T> = theta.iter().map(|&t| Complex::new(t.cos(), t.sin())).sum();
    if resultant.norm() <= T::lit(1e-9) * T::from_usize_lossy(theta.len().max(1)) {
        return theta.to_vec();
    }
    let shift = T::PI() - resultant.arg();
    theta.iter().map(|&t| wrap_phase(t + shift)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::draw_drop;
    use crate::rng::seeded;

    fn desk_state(seed: u64, n: usize) -> (SystemConfig, ChannelState<f64>) {
        let cfg = SystemConfig::with_dims(4, 2, n);
        let s = draw_drop(&cfg, &mut seeded(seed)).unwrap();
        (cfg, s)
    }

    #[test]
    fn fitness_basic_properties() {
        let (cfg, s) = desk_state(3, 16);
        let mut rng = seeded(4);
        for _ in 0..20 {
            let th: Vec<f64> = (0..16).map(|_| uniform_phase(&mut rng)).collect();
            let f = fitness(&cfg, &s, &th, 100.0).unwrap();
            assert!(f >= 0.0);
            let shifted: Vec<f64> = th.iter().map(|t| t + std::f64::consts::TAU).collect();
            let g = fitness(&cfg, &s, &shifted, 100.0).unwrap();
            assert!((f - g).abs() <= 1e-12 * f.max(1e-300));
            let rotated: Vec<f64> = th.iter().map(|t| t + 1.234).collect();
            let h = fitness(&cfg, &s, &rotated, 100.0).unwrap();
            assert!((f - h).abs() <= 1e-12 * f.max(1e-300));
        }
    }

    #[test]
    fn ga_trace_monotone_and_wrapped() {
        let (cfg, s) = desk_state(5, 9);
        let ga = GaConfig { population: 20, generations: 30, ..GaConfig::default() };
        let res = ga_optimize(&cfg, &s, 100.0, &ga, &mut seeded(1)).unwrap();
        assert_eq!(res.trace.len(), 30);
        assert!(res.trace.windows(2).all(|w| w[1] >= w[0]));
        assert!(res.fitness >= res.initial_best);
        assert_eq!(*res.trace.last().unwrap(), res.fitness);
        assert!(res.theta.iter().all(|t| (0.0..std::f64::consts::TAU).contains(t)));
        assert_eq!(fitness(&cfg, &s, &res.theta, 100.0).unwrap(), res.fitness);
    }

    #[test]
    fn ga_config_validation() {
        assert!(GaConfig { elite: 50, ..GaConfig::default() }.validate().is_err());
        assert!(GaConfig { population: 1, elite: 0, ..GaConfig::default() }.validate().is_err());
        assert!(GaConfig { crossover_rate: 1.5, ..GaConfig::default() }.validate().is_err());
        assert!(GaConfig::desk().validate().is_ok());
    }

    #[test]
    fn grid_counts_and_refusal() {
        let mut calls = 0;
        let r = grid_maximize::<f64>(3, 2, |_| {
            calls += 1;
            0.0
        })
        .unwrap();
        assert_eq!(r.evaluations, 8);
        assert_eq!(calls, 8);
        assert!(matches!(grid_maximize::<f64>(4, 2, |_| 0.0), Err(Error::Refused(_))));
        let (cfg, s) = desk_state(1, 16);
        assert!(matches!(brute_force_phase(&cfg, &s, 1.0, 4), Err(Error::Refused(_))));
    }

    #[test]
    fn grid_finds_known_maximum() {
        // peak at (π/2, π)
        let r = grid_maximize::<f64>(2, 8, |t| (t[0] - std::f64::consts::FRAC_PI_2).cos() + (t[1] - std::f64::consts::PI).cos())
            .unwrap();
        assert!((r.theta[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!((r.theta[1] - std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn brute_force_single_element_matches_fine_grid() {
        let (cfg, s) = desk_state(2, 4);
        let r1: crate::linalg::Matrix<f64> = crate::linalg::Matrix::identity(1);
        let mut s1 = s.with_correlation(r1).unwrap();
        s1.beta_mk = crate::linalg::Matrix::filled(4, 2, 1e-30);
        let coarse = brute_force_phase(&cfg, &s1, 100.0, 16).unwrap();
        let fine = brute_force_phase(&cfg, &s1, 100.0, 160).unwrap();
        assert!((coarse.fitness - fine.fitness).abs() <= 1e-9 * fine.fitness);
        let again = brute_force_phase(&cfg, &s1, 100.0, 16).unwrap();
        assert_eq!(again.theta, coarse.theta);
    }

    #[test]
    fn canonical_rotation_preserves_fitness() {
        let (cfg, s) = desk_state(8, 16);
        let mut rng = seeded(2);
        let th: Vec<f64> = (0..16).map(|i| 0.1 * i as f64 + uniform_phase::<f64, _>(&mut rng) * 0.05).collect();
        let c = canonicalize_global_phase(&th);
        let mean: Complex<f64> = c.iter().map(|&t| Complex::new(t.cos(), t.sin())).sum();
        assert!((mean.arg().abs() - std::f64::consts::PI).abs() < 1e-9);
        let a = fitness(&cfg, &s, &th, 100.0).unwrap();
        let b = fitness(&cfg, &s, &c, 100.0).unwrap();
        assert!((a - b).abs() < 1e-12 * a);
    }
}
