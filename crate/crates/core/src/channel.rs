//! Deployment geometry, large-scale fading, RIS spatial correlation and
//! small-scale channel draws.
//!
//! Large-scale coefficients are stored as linear gains already divided by the
//! receiver noise power, so downstream SINR formulas use `σ² = 1` and the
//! transmit powers `p_p`, `ρ_d` are plain linear values (mW against a noise
//! floor expressed in dBm). The RIS element area `A` is folded into `β_mr` and
//! `β_rk`, so the covariance of `g_mr` is exactly `β_mr · R`.

use num_complex::Complex;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dims, invalid, Result};
use crate::linalg::{psd_sqrt, Matrix};
use crate::rng::{complex_gaussian, gaussian, uniform_phase};
use crate::scalar::{wrap_phase, Real};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const DEFAULT_CARRIER_HZ: f64 = 1.9e9;

/// Three-slope distance-dependent path loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThreeSlope {
    /// Constant offset `L` in dB.
    pub loss_db: f64,
    /// First breakpoint in km; the loss is flat below it.
    pub d0_km: f64,
    /// Second breakpoint in km; 20 dB/decade between the breakpoints,
    /// 35 dB/decade beyond.
    pub d1_km: f64,
}

impl Default for ThreeSlope {
    fn default() -> Self {
        Self { loss_db: 140.7, d0_km: 0.01, d1_km: 0.05 }
    }
}

impl ThreeSlope {
    /// Path loss in dB (a negative number) at distance `d_km`.
    pub fn pathloss_db(&self, d_km: f64) -> Result<f64> {
        if !(d_km > 0.0) || !d_km.is_finite() {
            return Err(invalid(format!("path-loss distance must be positive, got {d_km} km")));
        }
        let pl = if d_km > self.d1_km {
            -self.loss_db - 35.0 * d_km.log10()
        } else if d_km > self.d0_km {
            -self.loss_db - 15.0 * self.d1_km.log10() - 20.0 * d_km.log10()
        } else {
            -self.loss_db - 15.0 * self.d1_km.log10() - 20.0 * self.d0_km.log10()
        };
        Ok(pl)
    }
}

/// Path loss with the default three-slope constants.
pub fn pathloss_three_slope(d_km: f64) -> Result<f64> {
    ThreeSlope::default().pathloss_db(d_km)
}

/// System dimensions, frame structure, powers and propagation constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub m_aps: usize,
    pub k_users: usize,
    pub n_elements: usize,
    pub tau_c: usize,
    pub tau_p: usize,
    /// Pilot power, linear (mW relative to the noise-normalized gains).
    pub p_p: f64,
    /// Maximum downlink power per AP, linear.
    pub rho_d: f64,
    pub sigma_n2: f64,
    pub area_side_m: f64,
    pub carrier_wavelength_m: f64,
    pub ris_element_spacing_m: f64,
    pub element_area_m2: f64,
    pub ap_height_m: f64,
    pub user_height_m: f64,
    pub ris_height_m: f64,
    pub min_ap_user_distance_m: f64,
    /// Receiver noise power in dBm; every β is divided by it.
    pub noise_power_dbm: f64,
    /// Extra gain in dB on each RIS hop (AP→RIS and RIS→user).
    pub ris_link_gain_db: f64,
    /// Log-normal shadowing standard deviation in dB; `None` disables it.
    pub shadow_fading_db: Option<f64>,
    pub pathloss: ThreeSlope,
}

impl SystemConfig {
    /// Reduced-size profile used for CI and desk experiments.
    pub fn desk() -> Self {
        Self::with_dims(8, 3, 16)
    }

    pub fn paper() -> Self {
        Self::with_dims(64, 12, 64)
    }

    /// Default propagation setup with the given dimensions and `τ_p = K`.
    pub fn with_dims(m_aps: usize, k_users: usize, n_elements: usize) -> Self {
        let wavelength = SPEED_OF_LIGHT / DEFAULT_CARRIER_HZ;
        let spacing = wavelength / 4.0;
        Self {
            m_aps,
            k_users,
            n_elements,
            tau_c: 200,
            tau_p: k_users,
            p_p: db_to_linear(20.0),
            rho_d: db_to_linear(20.0),
            sigma_n2: 1.0,
            area_side_m: 1000.0,
            carrier_wavelength_m: wavelength,
            ris_element_spacing_m: spacing,
            element_area_m2: spacing * spacing,
            ap_height_m: 15.0,
            user_height_m: 1.65,
            ris_height_m: 15.0,
            min_ap_user_distance_m: 10.0,
            noise_power_dbm: -92.0,
            ris_link_gain_db: 80.0,
            shadow_fading_db: None,
            pathloss: ThreeSlope::default(),
        }
    }

    pub fn tau_d(&self) -> usize {
        self.tau_c.saturating_sub(self.tau_p)
    }

    /// `τ_d / τ_c`.
    pub fn prelog(&self) -> f64 {
        self.tau_d() as f64 / self.tau_c as f64
    }

    pub fn condition_len(&self) -> usize {
        self.m_aps + self.k_users + self.m_aps * self.k_users
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_aps == 0 || self.k_users == 0 || self.n_elements == 0 {
            return Err(invalid("M, K and N must all be at least 1"));
        }
        if self.tau_p < self.k_users {
            return Err(invalid(format!(
                "orthogonal pilots need tau_p >= K ({} < {})",
                self.tau_p, self.k_users
            )));
        }
        if self.tau_c <= self.tau_p {
            return Err(invalid(format!(
                "tau_d = tau_c - tau_p must be positive (tau_c={}, tau_p={})",
                self.tau_c, self.tau_p
            )));
        }
        for (name, v) in [("p_p", self.p_p), ("rho_d", self.rho_d), ("sigma_n2", self.sigma_n2)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        for (name, v) in [
            ("area_side_m", self.area_side_m),
            ("carrier_wavelength_m", self.carrier_wavelength_m),
            ("ris_element_spacing_m", self.ris_element_spacing_m),
            ("element_area_m2", self.element_area_m2),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.min_ap_user_distance_m * std::f64::consts::SQRT_2 >= self.area_side_m {
            return Err(invalid("minimum AP-user distance does not fit in the deployment area"));
        }
        Ok(())
    }

    /// Planar layout of the RIS: square when `N` is a perfect square,
    /// otherwise the most square `rows x cols` factorization.
    pub fn ris_grid(&self) -> (usize, usize) {
        near_square_grid(self.n_elements)
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn near_square_grid(n: usize) -> (usize, usize) {
    let mut rows = 1;
    let mut d = 1;
    while d * d <= n {
        if n.is_multiple_of(d) {
            rows = d;
        }
        d += 1;
    }
    (rows, n / rows.max(1))
}

fn perfect_square_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

/// `sin(πx)/(πx)` with the removable singularity at zero.
pub fn sinc<T: Real>(x: T) -> T {
    if x.abs() < T::lit(1e-12) {
        T::one()
    } else {
        let px = T::PI() * x;
        px.sin() / px
    }
}

/// Spatial correlation of a `rows x cols` planar array:
/// `R[n, n'] = sinc(2 d(n, n') / λ)`.
pub fn ris_correlation_grid<T: Real>(
    rows: usize,
    cols: usize,
    spacing_m: f64,
    wavelength_m: f64,
) -> Result<Matrix<T>> {
    if rows == 0 || cols == 0 {
        return Err(invalid("RIS grid needs at least one element"));
    }
    if !(spacing_m > 0.0) || !(wavelength_m > 0.0) {
        return Err(invalid("element spacing and wavelength must be positive"));
    }
    let n = rows * cols;
    let pos: Vec<(f64, f64)> =
        (0..n).map(|i| ((i / cols) as f64 * spacing_m, (i % cols) as f64 * spacing_m)).collect();
    Ok(Matrix::from_fn(n, n, |a, b| {
        if a == b {
            return T::one();
        }
        let d = ((pos[a].0 - pos[b].0).powi(2) + (pos[a].1 - pos[b].1).powi(2)).sqrt();
        sinc(T::lit(2.0 * d / wavelength_m))
    }))
}

/// Correlation matrix of a square `√N x √N` RIS.
pub fn build_ris_correlation<T: Real>(n: usize, spacing_m: f64, wavelength_m: f64) -> Result<Matrix<T>> {
    let side = perfect_square_side(n)
        .filter(|_| n > 0)
        .ok_or_else(|| invalid(format!("N={n} is not a perfect square")))?;
    ris_correlation_grid(side, side, spacing_m, wavelength_m)
}

/// Node coordinates in meters, `[x, y, height]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Positions {
    pub aps: Vec<[f64; 3]>,
    pub users: Vec<[f64; 3]>,
    /// One entry per RIS; currently always a single surface.
    pub ris: Vec<[f64; 3]>,
}

/// Large-scale channel state: the diffusion model's condition plus the shared
/// RIS correlation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelState<T> {
    pub beta_mr: Vec<T>,
    pub beta_rk: Vec<T>,
    /// `M x K` direct-link gains.
    pub beta_mk: Matrix<T>,
    correlation: Matrix<T>,
    correlation_sqrt: Matrix<T>,
    pub positions: Positions,
}

impl<T: Real> ChannelState<T> {
    pub fn new(
        beta_mr: Vec<T>,
        beta_rk: Vec<T>,
        beta_mk: Matrix<T>,
        correlation: Matrix<T>,
        positions: Positions,
    ) -> Result<Self> {
        let (m, k) = beta_mk.shape();
        if beta_mr.len() != m || beta_rk.len() != k {
            return Err(dims(format!(
                "beta_mr {} / beta_rk {} vs beta_mk {m}x{k}",
                beta_mr.len(),
                beta_rk.len()
            )));
        }
        let all_positive = beta_mr
            .iter()
            .chain(&beta_rk)
            .chain(beta_mk.iter())
            .all(|&b| b > T::zero() && b.is_finite());
        if !all_positive {
            return Err(invalid("large-scale coefficients must be finite and positive"));
        }
        let correlation_sqrt = Self::check_correlation(&correlation)?;
        Ok(Self { beta_mr, beta_rk, beta_mk, correlation, correlation_sqrt, positions })
    }

    fn check_correlation(r: &Matrix<T>) -> Result<Matrix<T>> {
        if r.rows() != r.cols() || r.rows() == 0 {
            return Err(dims(format!("correlation must be square, got {:?}", r.shape())));
        }
        if !r.is_symmetric(T::lit(1e-9)) {
            return Err(invalid("correlation matrix is not symmetric"));
        }
        if (0..r.rows()).any(|i| (r[(i, i)] - T::one()).abs() > T::lit(1e-9)) {
            return Err(invalid("correlation matrix must have a unit diagonal"));
        }
        psd_sqrt(r)
    }

    /// Same large-scale gains with a different RIS correlation (and hence `N`).
    pub fn with_correlation(&self, correlation: Matrix<T>) -> Result<Self> {
        let correlation_sqrt = Self::check_correlation(&correlation)?;
        Ok(Self { correlation, correlation_sqrt, ..self.clone() })
    }

    pub fn m(&self) -> usize {
        self.beta_mk.rows()
    }

    pub fn k(&self) -> usize {
        self.beta_mk.cols()
    }

    pub fn n(&self) -> usize {
        self.correlation.rows()
    }

    pub fn correlation(&self) -> &Matrix<T> {
        &self.correlation
    }

    /// `R^{1/2}`, negative eigenvalues clamped.
    pub fn correlation_sqrt(&self) -> &Matrix<T> {
        &self.correlation_sqrt
    }

    /// AP→RIS covariance `R_mr = β_mr R`.
    pub fn covariance_mr(&self, m: usize) -> Matrix<T> {
        self.correlation.scaled(self.beta_mr[m])
    }

    /// RIS→user covariance `R_rk = β_rk R`.
    pub fn covariance_rk(&self, k: usize) -> Matrix<T> {
        self.correlation.scaled(self.beta_rk[k])
    }

    /// Condition vector in dB: `[β_mr (M), β_rk (K), β_mk (M·K row-major)]`.
    pub fn condition_db(&self) -> Vec<f64> {
        self.beta_mr
            .iter()
            .chain(&self.beta_rk)
            .chain(self.beta_mk.iter())
            .map(|b| linear_to_db(b.as_f64()))
            .collect()
    }
}

fn horizontal_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn distance_3d_km(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    d / 1000.0
}

/// Draws a random deployment and its large-scale fading.
///
/// APs and users are uniform over the square; users closer than
/// `min_ap_user_distance_m` (horizontally) to any AP are redrawn. The RIS sits
/// at the midpoint of the `y = 0` edge.
pub fn draw_drop<T: Real, R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> Result<ChannelState<T>> {
    cfg.validate()?;
    let side = cfg.area_side_m;
    let aps: Vec<[f64; 3]> = (0..cfg.m_aps)
        .map(|_| [rng.random::<f64>() * side, rng.random::<f64>() * side, cfg.ap_height_m])
        .collect();
    let mut users = Vec::with_capacity(cfg.k_users);
    for _ in 0..cfg.k_users {
        loop {
            let u = [rng.random::<f64>() * side, rng.random::<f64>() * side, cfg.user_height_m];
            if aps.iter().all(|ap| horizontal_distance(ap, &u) >= cfg.min_ap_user_distance_m) {
                users.push(u);
                break;
            }
        }
    }
    let ris = [side / 2.0, 0.0, cfg.ris_height_m];

    let mut shadow = |rng: &mut R| -> f64 {
        match cfg.shadow_fading_db {
            Some(sigma) => sigma * gaussian::<f64, R>(rng),
            None => 0.0,
        }
    };
    // flat below d0, so clamping there never changes the value
    let gain_db = |a: &[f64; 3], b: &[f64; 3]| cfg.pathloss.pathloss_db(distance_3d_km(a, b).max(cfg.pathloss.d0_km));

    let noise_db = cfg.noise_power_dbm;
    let mut beta_mk = Matrix::<T>::zeros(cfg.m_aps, cfg.k_users);
    for (m, ap) in aps.iter().enumerate() {
        for (k, u) in users.iter().enumerate() {
            let db = gain_db(ap, u)? + shadow(rng) - noise_db;
            beta_mk[(m, k)] = T::lit(db_to_linear(db));
        }
    }
    // each hop carries half of the noise normalization so the cascaded
    // product β_mr β_rk is divided by σ² exactly once
    let hop = |node: &[f64; 3], rng: &mut R, shadow: &mut dyn FnMut(&mut R) -> f64| -> Result<T> {
        let db = gain_db(node, &ris)? + shadow(rng) + cfg.ris_link_gain_db - noise_db / 2.0;
        Ok(T::lit(cfg.element_area_m2 * db_to_linear(db)))
    };
    let beta_mr = aps.iter().map(|ap| hop(ap, rng, &mut shadow)).collect::<Result<Vec<_>>>()?;
    let beta_rk = users.iter().map(|u| hop(u, rng, &mut shadow)).collect::<Result<Vec<_>>>()?;

    let (rows, cols) = cfg.ris_grid();
    let correlation = ris_correlation_grid(rows, cols, cfg.ris_element_spacing_m, cfg.carrier_wavelength_m)?;
    ChannelState::new(beta_mr, beta_rk, beta_mk, correlation, Positions { aps, users, ris: vec![ris] })
}

/// One small-scale fading draw.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization<T> {
    /// `M x N`, row `m` is `g_mr`.
    pub g: Matrix<Complex<T>>,
    /// `K x N`, row `k` is `h_rk`.
    pub h: Matrix<Complex<T>>,
    /// `M x K` direct channels.
    pub l: Matrix<Complex<T>>,
}

/// `R^{1/2} z` scaled by `√β`, written into `out`.
fn correlated_into<T: Real, R: Rng + ?Sized>(
    sqrt_r: &Matrix<T>,
    beta: T,
    z: &mut [Complex<T>],
    out: &mut [Complex<T>],
    rng: &mut R,
) {
    for zi in z.iter_mut() {
        *zi = complex_gaussian(rng);
    }
    let s = beta.sqrt();
    for (n, o) in out.iter_mut().enumerate() {
        let row = sqrt_r.row(n);
        let mut acc = Complex::new(T::zero(), T::zero());
        for (&w, zj) in row.iter().zip(z.iter()) {
            acc += zj * w;
        }
        *o = acc * s;
    }
}

/// Draws `g_mr`, `h_rk` and `l_mk` for a fixed large-scale state.
pub fn draw_small_scale<T: Real, R: Rng + ?Sized>(state: &ChannelState<T>, rng: &mut R) -> ChannelRealization<T> {
    let (m, k, n) = (state.m(), state.k(), state.n());
    let zero = Complex::new(T::zero(), T::zero());
    let sqrt_r = state.correlation_sqrt();
    let mut z = vec![zero; n];
    let mut g = Matrix::filled(m, n, zero);
    for a in 0..m {
        correlated_into(sqrt_r, state.beta_mr[a], &mut z, g.row_mut(a), rng);
    }
    let mut h = Matrix::filled(k, n, zero);
    for u in 0..k {
        correlated_into(sqrt_r, state.beta_rk[u], &mut z, h.row_mut(u), rng);
    }
    let l = Matrix::from_fn(m, k, |a, u| complex_gaussian::<T, R>(rng) * state.beta_mk[(a, u)].sqrt());
    ChannelRealization { g, h, l }
}

/// `e^{jθ_n}` for every element.
pub fn phase_rotors<T: Real>(theta: &[T]) -> Vec<Complex<T>> {
    theta.iter().map(|&t| Complex::new(t.cos(), t.sin())).collect()
}

/// Aggregated channel `u_mk = l_mk + h_rkᴴ Θ g_mr`.
pub fn aggregate_channel<T: Real>(real: &ChannelRealization<T>, theta: &[T]) -> Result<Matrix<Complex<T>>> {
    let n = real.g.cols();
    if real.h.cols() != n || theta.len() != n {
        return Err(dims(format!("g has {n} columns, h {}, theta {}", real.h.cols(), theta.len())));
    }
    if real.l.shape() != (real.g.rows(), real.h.rows()) {
        return Err(dims("direct-link matrix must be M x K"));
    }
    let rot = phase_rotors(theta);
    // hθ_k[n] = conj(h_k[n]) e^{jθ_n}
    let h_rot: Vec<Vec<Complex<T>>> = (0..real.h.rows())
        .map(|k| real.h.row(k).iter().zip(&rot).map(|(h, r)| h.conj() * r).collect())
        .collect();
    Ok(Matrix::from_fn(real.g.rows(), real.h.rows(), |m, k| {
        let cascade: Complex<T> = h_rot[k].iter().zip(real.g.row(m)).map(|(a, b)| a * b).sum();
        real.l[(m, k)] + cascade
    }))
}

/// `Tr(Θ A Θᴴ B)` for `N x N` matrices, returned as a complex number.
pub fn cascaded_second_moment_complex<T: Real>(
    a: &Matrix<Complex<T>>,
    b: &Matrix<Complex<T>>,
    theta: &[T],
) -> Result<Complex<T>> {
    let n = theta.len();
    if a.shape() != (n, n) || b.shape() != (n, n) {
        return Err(dims(format!("expected {n}x{n}, got {:?} and {:?}", a.shape(), b.shape())));
    }
    let rot = phase_rotors(theta);
    let mut acc = Complex::new(T::zero(), T::zero());
    for i in 0..n {
        for j in 0..n {
            acc += rot[i] * a[(i, j)] * rot[j].conj() * b[(j, i)];
        }
    }
    Ok(acc)
}

/// `Tr(Θ A Θᴴ B)` for Hermitian PSD `A`, `B`; the value is real.
pub fn cascaded_second_moment<T: Real>(a: &Matrix<Complex<T>>, b: &Matrix<Complex<T>>, theta: &[T]) -> Result<T> {
    Ok(cascaded_second_moment_complex(a, b, theta)?.re)
}

/// `Tr(Θ R Θᴴ R)` for a real symmetric `R`, i.e. `Σ R²_{nn'} cos(θ_n − θ_n')`.
///
/// Every `(m, k)` cascade shares `R`, so `Tr(Θ R_mr Θᴴ R_rk) = β_mr β_rk`
/// times this value.
pub fn correlation_trace<T: Real>(r: &Matrix<T>, theta: &[T]) -> T {
    let n = theta.len();
    debug_assert_eq!(r.shape(), (n, n));
    let (s, c): (Vec<T>, Vec<T>) = theta.iter().map(|t| t.sin_cos()).unzip();
    let mut acc = T::zero();
    for i in 0..n {
        let row = r.row(i);
        let mut inner = T::zero();
        for j in 0..n {
            let w = row[j] * row[j];
            inner += w * (c[i] * c[j] + s[i] * s[j]);
        }
        acc += inner;
    }
    acc
}

/// Random real correlation matrix (unit diagonal) `D^{-1/2} X Xᵀ D^{-1/2}`
/// with Gaussian `X`.
pub fn psd_correlation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix<f64> {
    let x = Matrix::from_fn(n, n, |_, _| gaussian::<f64, R>(rng));
    let a = x.matmul(&x.transpose()).expect("square");
    Matrix::from_fn(n, n, |i, j| a[(i, j)] / (a[(i, i)] * a[(j, j)]).sqrt())
}

pub fn to_complex<T: Real>(m: &Matrix<T>) -> Matrix<Complex<T>> {
    m.map(|&x| Complex::new(x, T::zero()))
}

/// RIS phase configuration in both the physical and the diffusion domain.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseVector<T> {
    /// Phases in `[0, 2π)`.
    pub theta: Vec<T>,
    /// `(θ − π)/π`, in `[−1, 1)`.
    pub normalized: Vec<T>,
}

impl<T: Real> PhaseVector<T> {
    pub fn from_theta(theta: &[T]) -> Self {
        let theta: Vec<T> = theta.iter().map(|&t| wrap_phase(t)).collect();
        let normalized = theta.iter().map(|&t| normalize_phase(t)).collect();
        Self { theta, normalized }
    }

    /// Accepts any real vector; values outside `[−1, 1)` wrap around.
    pub fn from_normalized(x: &[T]) -> Self {
        let theta: Vec<T> = x.iter().map(|&v| denormalize_phase(v)).collect();
        Self::from_theta(&theta)
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let theta: Vec<T> = (0..n).map(|_| uniform_phase(rng)).collect();
        Self::from_theta(&theta)
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

/// Maps `θ ∈ [0, 2π)` to `(θ − π)/π ∈ [−1, 1)`.
pub fn normalize_phase<T: Real>(theta: T) -> T {
    (theta - T::PI()) / T::PI()
}

/// Inverse of [`normalize_phase`] for any real input: `((x + 1)π) mod 2π`.
pub fn denormalize_phase<T: Real>(x: T) -> T {
    wrap_phase((x + T::one()) * T::PI())
}
