//! Numerical self-checks: Monte-Carlo against the closed-form SINR, the
//! cascaded second-moment identity, schedule telescoping and the denoiser
//! gradient against finite differences.

use std::fmt;

use num_complex::Complex;
use rand::Rng;
use rayon::prelude::*;

use crate::channel::{cascaded_second_moment, draw_drop, psd_correlation, to_complex, PhaseVector, SystemConfig};
use crate::denoiser::{Denoiser, DenoiserDims, Sample};
use crate::diffusion::build_schedule;
use crate::error::Result;
use crate::estimation::{
    estimation_stats, monte_carlo_sinr, power_control_full, sinr_closed_form, MonteCarloSetup, PilotNoise,
};
use crate::linalg::{psd_sqrt, Matrix};
use crate::rng::{complex_gaussian, gaussian_vec, seeded, substream};

/// Monte-Carlo SINR relative-error budget.
pub const SINR_TOLERANCE: f64 = 0.02;
pub const MOMENT_TOLERANCE: f64 = 0.02;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const TELESCOPE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    /// Worst observed error.
    pub measured: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.measured.is_finite() && self.measured <= self.tolerance
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} max_error={:.3e} tolerance={:.1e} cases={} {}",
            self.name,
            self.measured,
            self.tolerance,
            self.cases,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidateOptions {
    pub trials: usize,
    pub sinr_cases: (usize, usize),
    pub moment_cases: usize,
    pub gradient_coords: usize,
    /// Test hook: multiplies `δ` before it reaches the closed form.
    pub corrupt_delta: Option<f64>,
    pub seed: u64,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self { trials: 100_000, sinr_cases: (3, 2), moment_cases: 5, gradient_coords: 60, corrupt_delta: None, seed: 0 }
    }
}

/// Per-user relative errors `|Δ_mc − Δ_cf| / Δ_cf` for one `(state, θ)`.
pub fn sinr_relative_errors(
    cfg: &SystemConfig,
    state: &crate::channel::ChannelState<f64>,
    theta: &[f64],
    trials: usize,
    seed: u64,
    corrupt_delta: Option<f64>,
) -> Result<Vec<f64>> {
    let stats = estimation_stats(state, theta, cfg.tau_p, cfg.p_p)?;
    let eta = power_control_full(&stats.gamma)?.eta;
    let mut cf_stats = stats.clone();
    if let Some(f) = corrupt_delta {
        cf_stats.delta = cf_stats.delta.map(|d| d * f);
    }
    let closed = sinr_closed_form(&cf_stats, &eta, cfg.rho_d, cfg.sigma_n2)?;
    let setup = MonteCarloSetup {
        state,
        theta,
        stats: &stats,
        eta: &eta,
        rho_d: cfg.rho_d,
        tau_p: cfg.tau_p,
        p_p: cfg.p_p,
        sigma_n2: cfg.sigma_n2,
    };
    let mc = monte_carlo_sinr(&setup, trials, seed, PilotNoise::Integrated)?;
    Ok(mc.sinr.iter().zip(&closed).map(|(m, c)| (m - c).abs() / c).collect())
}

/// Monte-Carlo `E|hᴴ Θ g|²` with `g ~ CN(0, A)`, `h ~ CN(0, B)` independent.
pub fn cascaded_moment_mc(a: &Matrix<f64>, b: &Matrix<f64>, theta: &[f64], draws: usize, seed: u64) -> Result<f64> {
    let (sa, sb) = (psd_sqrt(a)?, psd_sqrt(b)?);
    let n = theta.len();
    let rot: Vec<Complex<f64>> = theta.iter().map(|&t| Complex::from_polar(1.0, t)).collect();
    const CHUNK: usize = 8192;
    let chunks = draws.div_ceil(CHUNK);
    let sums: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = substream(seed, c as u64, 0x4341);
            let mut acc = 0.0;
            let mut z = vec![Complex::new(0.0, 0.0); n];
            let mut w = vec![Complex::new(0.0, 0.0); n];
            for _ in 0..CHUNK.min(draws - c * CHUNK) {
                z.iter_mut().for_each(|v| *v = complex_gaussian(&mut rng));
                w.iter_mut().for_each(|v| *v = complex_gaussian(&mut rng));
                let mut s = Complex::new(0.0, 0.0);
                for i in 0..n {
                    let g: Complex<f64> = (0..n).map(|j| z[j] * sa[(i, j)]).sum();
                    let h: Complex<f64> = (0..n).map(|j| w[j] * sb[(i, j)]).sum();
                    s += h.conj() * rot[i] * g;
                }
                acc += s.norm_sqr();
            }
            acc
        })
        .collect();
    Ok(sums.iter().sum::<f64>() / draws as f64)
}

/// Central-difference gradient check on randomly perturbed weights. Samples
/// coordinates round-robin over every parameter tensor; returns the worst
/// relative error.
pub fn gradient_check(n: usize, dim_c: usize, coords: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut net = Denoiser::<f64>::new(DenoiserDims::new(n, dim_c), &mut rng)?;
    for p in net.params_mut() {
        *p += 0.3 * rng.random_range(-1.0..1.0);
    }
    let xs: Vec<Vec<f64>> = (0..3).map(|_| gaussian_vec(&mut rng, n)).collect();
    let cs: Vec<Vec<f64>> = (0..3).map(|_| gaussian_vec(&mut rng, dim_c)).collect();
    let es: Vec<Vec<f64>> = (0..3).map(|_| gaussian_vec(&mut rng, n)).collect();
    let ts = [1usize, 17, 150];
    let batch: Vec<Sample<'_, f64>> =
        (0..3).map(|i| Sample { theta_t: &xs[i], condition: &cs[i], t: ts[i], eps: &es[i] }).collect();
    let (_, grad) = net.loss_and_grad(&batch)?;
    let tensors = net.layout().tensors();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for c in 0..coords {
        let range = tensors[c % tensors.len()].1.clone();
        let i = rng.random_range(range);
        let orig = net.params()[i];
        net.params_mut()[i] = orig + h;
        let lp = net.loss(&batch)?;
        net.params_mut()[i] = orig - h;
        let lm = net.loss(&batch)?;
        net.params_mut()[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
    }
    Ok(worst)
}

/// Runs every check on a small geometry built from `base`'s propagation
/// parameters.
pub fn run_validation(base: &SystemConfig, opts: &ValidateOptions) -> Result<ValidationReport> {
    let mut report = ValidationReport::default();

    let mut cfg = base.clone();
    cfg.m_aps = 4;
    cfg.k_users = 2;
    cfg.n_elements = 8;
    cfg.tau_p = cfg.tau_p.max(2);
    let (drops, thetas) = opts.sinr_cases;
    let mut worst: f64 = 0.0;
    for d in 0..drops {
        let state = draw_drop::<f64, _>(&cfg, &mut substream(opts.seed, d as u64, 1))?;
        let mut rng = substream(opts.seed, d as u64, 2);
        for j in 0..thetas {
            let theta = PhaseVector::<f64>::random(cfg.n_elements, &mut rng).theta;
            let errs =
                sinr_relative_errors(&cfg, &state, &theta, opts.trials, opts.seed ^ (d * 131 + j) as u64, opts.corrupt_delta)?;
            worst = errs.into_iter().fold(worst, |w, e| if e.is_nan() { f64::INFINITY } else { w.max(e) });
        }
    }
    report.checks.push(Check {
        name: "sinr_closed_form_vs_mc".into(),
        measured: worst,
        tolerance: SINR_TOLERANCE,
        cases: drops * thetas,
    });

    let mut worst: f64 = 0.0;
    let mut rng = substream(opts.seed, 0, 3);
    for c in 0..opts.moment_cases {
        let n = 8;
        let a = psd_correlation(n, &mut rng);
        let b = psd_correlation(n, &mut rng);
        let theta = PhaseVector::<f64>::random(n, &mut rng).theta;
        let exact = cascaded_second_moment(&to_complex(&a), &to_complex(&b), &theta)?;
        let mc = cascaded_moment_mc(&a, &b, &theta, opts.trials, opts.seed ^ (0xC0 + c as u64))?;
        worst = worst.max((mc - exact).abs() / exact);
    }
    report.checks.push(Check {
        name: "cascaded_moment_identity".into(),
        measured: worst,
        tolerance: MOMENT_TOLERANCE,
        cases: opts.moment_cases,
    });

    let sched = build_schedule::<f64>(1000, 1e-4, 0.02)?;
    let worst = (2..=1000)
        .map(|t| ((sched.alpha_at(t) / sched.alpha_at(t - 1)) - sched.m[t - 1]).abs() / sched.m[t - 1])
        .fold(0.0, f64::max);
    report.checks.push(Check {
        name: "schedule_telescoping".into(),
        measured: worst,
        tolerance: TELESCOPE_TOLERANCE,
        cases: 999,
    });

    report.checks.push(Check {
        name: "denoiser_gradient".into(),
        measured: gradient_check(8, 4, opts.gradient_coords, opts.seed ^ 0x6752)?,
        tolerance: GRADIENT_TOLERANCE,
        cases: opts.gradient_coords,
    });
    Ok(report)
}
