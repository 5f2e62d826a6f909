//! Experiment configuration: a flat TOML document layered over a profile.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::channel::{db_to_linear, SystemConfig};
use crate::diffusion::{build_schedule, ImplicitRule, LrSchedule, NoiseSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::expert::{DatasetOptions, GaConfig};
use crate::rng::derive_seed;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?} (expected desk or paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub m_aps: usize,
    pub k_users: usize,
    pub n_elements: usize,
    pub tau_c: usize,
    pub tau_p: usize,
    pub pilot_power_db: f64,
    pub sigma_n2: f64,
    pub area_side_m: f64,
    pub min_ap_user_distance_m: f64,
    pub noise_power_dbm: f64,
    pub ris_link_gain_db: f64,
    /// Log-normal shadowing std in dB; `0` disables it.
    pub shadow_fading_db: f64,

    pub ga_population: usize,
    pub ga_generations: usize,
    pub ga_elite: usize,
    pub ga_tournament_size: usize,
    pub ga_crossover_rate: f64,
    pub ga_mutation_rate: f64,
    pub ga_mutation_sigma_rad: f64,
    pub ga_blend_alpha: f64,

    pub diffusion_steps: usize,
    pub implicit_steps: usize,
    pub v_first: f64,
    pub v_last: f64,
    pub implicit_rule: ImplicitRule,

    pub dataset_samples: usize,
    pub dataset_rho_db: Vec<f64>,
    pub include_rho: bool,
    pub canonicalize_phases: bool,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub lr_schedule: LrSchedule,

    pub sweep_rho_db: Vec<f64>,
    pub sweep_drops: usize,
    pub random_draws: usize,
    pub mc_trials: usize,
    pub bench_repetitions: usize,

    pub seed: u64,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        let sys = SystemConfig::desk();
        let ga = GaConfig::desk();
        Self {
            m_aps: sys.m_aps,
            k_users: sys.k_users,
            n_elements: sys.n_elements,
            tau_c: sys.tau_c,
            tau_p: sys.tau_p,
            pilot_power_db: 20.0,
            sigma_n2: sys.sigma_n2,
            area_side_m: sys.area_side_m,
            min_ap_user_distance_m: sys.min_ap_user_distance_m,
            noise_power_dbm: sys.noise_power_dbm,
            ris_link_gain_db: sys.ris_link_gain_db,
            shadow_fading_db: 0.0,
            ga_population: ga.population,
            ga_generations: ga.generations,
            ga_elite: ga.elite,
            ga_tournament_size: ga.tournament_size,
            ga_crossover_rate: ga.crossover_rate,
            ga_mutation_rate: ga.mutation_rate,
            ga_mutation_sigma_rad: ga.mutation_sigma_rad,
            ga_blend_alpha: ga.blend_alpha,
            diffusion_steps: 200,
            implicit_steps: 10,
            v_first: 1e-4,
            v_last: 0.02,
            implicit_rule: ImplicitRule::Exact,
            dataset_samples: 200,
            dataset_rho_db: vec![-10.0, 0.0, 10.0, 20.0, 30.0, 40.0],
            include_rho: false,
            canonicalize_phases: true,
            epochs: 500,
            batch_size: 8,
            lr: 5e-4,
            lr_min: 1e-5,
            lr_schedule: LrSchedule::Cosine,
            sweep_rho_db: vec![-10.0, 0.0, 10.0, 20.0, 30.0, 40.0],
            sweep_drops: 20,
            random_draws: 100,
            mc_trials: 100_000,
            bench_repetitions: 5,
            seed: 1,
            out_dir: PathBuf::from("out"),
        }
    }

    pub fn paper() -> Self {
        let sys = SystemConfig::paper();
        let ga = GaConfig::default();
        Self {
            m_aps: sys.m_aps,
            k_users: sys.k_users,
            n_elements: sys.n_elements,
            tau_p: sys.tau_p,
            ga_population: ga.population,
            ga_generations: ga.generations,
            diffusion_steps: 1000,
            implicit_steps: 20,
            ..Self::desk()
        }
    }

    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Profile defaults overridden by the keys of a flat TOML document.
    /// Unknown keys and nested tables are rejected.
    pub fn from_toml_str(profile: Profile, text: &str) -> Result<Self> {
        let base = Self::profile(profile);
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (key, value) in file {
            if !table.contains_key(&key) {
                return Err(Error::Config(format!("unknown key {key:?}")));
            }
            if value.is_table() {
                return Err(Error::Config(format!("key {key:?}: nested tables are not allowed")));
            }
            table.insert(key, value);
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(profile: Profile, path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::profile(profile)),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml_str(profile, &text)
            }
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.system_config().validate()?;
        self.ga_config().validate()?;
        self.train_config().validate()?;
        build_schedule::<f64>(self.diffusion_steps, self.v_first, self.v_last)?;
        if self.implicit_steps == 0 || self.implicit_steps > self.diffusion_steps {
            return Err(Error::Config(format!(
                "implicit_steps must lie in 1..={}, got {}",
                self.diffusion_steps, self.implicit_steps
            )));
        }
        if !self.n_elements.is_multiple_of(2) {
            return Err(Error::Config("n_elements must be even for the denoiser".into()));
        }
        if self.dataset_samples == 0 || self.dataset_rho_db.is_empty() {
            return Err(Error::Config("dataset needs samples and at least one power level".into()));
        }
        if self.sweep_rho_db.is_empty() || self.sweep_drops == 0 || self.random_draws == 0 {
            return Err(Error::Config("sweep needs power levels, drops and random draws".into()));
        }
        if self.mc_trials < 2 || self.bench_repetitions == 0 {
            return Err(Error::Config("mc_trials must be >= 2 and bench_repetitions >= 1".into()));
        }
        if !(self.shadow_fading_db >= 0.0) {
            return Err(Error::Config("shadow_fading_db must be non-negative".into()));
        }
        Ok(())
    }

    pub fn system_config(&self) -> SystemConfig {
        let mut s = SystemConfig::with_dims(self.m_aps, self.k_users, self.n_elements);
        s.tau_c = self.tau_c;
        s.tau_p = self.tau_p;
        s.p_p = db_to_linear(self.pilot_power_db);
        s.sigma_n2 = self.sigma_n2;
        s.area_side_m = self.area_side_m;
        s.min_ap_user_distance_m = self.min_ap_user_distance_m;
        s.noise_power_dbm = self.noise_power_dbm;
        s.ris_link_gain_db = self.ris_link_gain_db;
        s.shadow_fading_db = (self.shadow_fading_db > 0.0).then_some(self.shadow_fading_db);
        s
    }

    pub fn ga_config(&self) -> GaConfig {
        GaConfig {
            population: self.ga_population,
            generations: self.ga_generations,
            elite: self.ga_elite,
            tournament_size: self.ga_tournament_size,
            crossover_rate: self.ga_crossover_rate,
            mutation_rate: self.ga_mutation_rate,
            mutation_sigma_rad: self.ga_mutation_sigma_rad,
            blend_alpha: self.ga_blend_alpha,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_min: self.lr_min,
            lr_schedule: self.lr_schedule,
            seed: derive_seed(self.seed, seeds::TRAIN),
        }
    }

    pub fn dataset_options(&self) -> DatasetOptions {
        DatasetOptions { include_rho: self.include_rho, canonicalize: self.canonicalize_phases }
    }

    pub fn schedule<T: Real>(&self) -> Result<NoiseSchedule<T>> {
        build_schedule(self.diffusion_steps, self.v_first, self.v_last)
    }
}

/// Purpose tags for seeds derived from the global seed.
pub mod seeds {
    pub const DATASET: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SWEEP: u64 = 4;
    pub const BENCH: u64 = 5;
    pub const VALIDATE: u64 = 6;
    pub const BASELINE: u64 = 7;
}
