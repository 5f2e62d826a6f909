use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use super::config::{seeds, ExperimentConfig};
use crate::channel::{db_to_linear, draw_drop, ChannelState, PhaseVector};
use crate::denoiser::{
    load_checkpoint, save_checkpoint, Adam, Checkpoint, CountingPredictor, Denoiser, DenoiserDims, NoisePredictor,
};
use crate::diffusion::{ddim_sample, ddpm_sample, train, NoiseSchedule, TrainingSet};
use crate::error::{Error, Result};
use crate::expert::{generate_dataset, ga_optimize, regenerate_state, ExpertDataset, Objective};
use crate::io::atomic_write;
use crate::rng::{derive_seed, seeded, substream};

pub const DATASET_FILE: &str = "dataset.rdop";
pub const DATASET_CSV: &str = "dataset.csv";
pub const CHECKPOINT_FILE: &str = "model.rdnw";
pub const LOSS_CSV: &str = "loss.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const BENCH_CSV: &str = "bench.csv";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Mean sum SE of `draws` uniformly random phase vectors.
pub fn random_baseline(objective: &Objective<'_, f64>, draws: &[PhaseVector<f64>]) -> f64 {
    draws.iter().map(|p| objective.eval(&p.theta)).sum::<f64>() / draws.len() as f64
}

#[derive(Clone, Debug)]
pub struct DatasetReport {
    pub path: PathBuf,
    pub csv_path: PathBuf,
    pub records: usize,
    pub mean_achieved_se: f64,
    pub mean_random_se: f64,
}

pub fn cmd_gen_dataset(cfg: &ExperimentConfig) -> Result<DatasetReport> {
    let sys = cfg.system_config();
    let seed = derive_seed(cfg.seed, seeds::DATASET);
    let ds = generate_dataset(
        &sys,
        &cfg.dataset_rho_db,
        cfg.dataset_samples,
        &cfg.ga_config(),
        cfg.dataset_options(),
        seed,
    )?;
    let baseline_seed = derive_seed(cfg.seed, seeds::BASELINE);
    let random: Vec<f64> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let state = regenerate_state(&sys, seed, i)?;
            let obj = Objective::new(&sys, &state, db_to_linear(ds.records[i].rho_d_db))?;
            let mut rng = substream(baseline_seed, i as u64, 0);
            let draws: Vec<_> = (0..cfg.random_draws).map(|_| PhaseVector::random(sys.n_elements, &mut rng)).collect();
            Ok(random_baseline(&obj, &draws))
        })
        .collect::<Result<_>>()?;
    ensure_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(DATASET_FILE);
    let csv_path = cfg.out_dir.join(DATASET_CSV);
    ds.save(&path)?;
    ds.save_csv(&csv_path)?;
    let n = ds.len() as f64;
    Ok(DatasetReport {
        path,
        csv_path,
        records: ds.len(),
        mean_achieved_se: ds.records.iter().map(|r| r.achieved_se).sum::<f64>() / n,
        mean_random_se: random.iter().sum::<f64>() / n,
    })
}

fn check_dataset(cfg: &ExperimentConfig, ds: &ExpertDataset) -> Result<()> {
    if (ds.m, ds.k, ds.n) != (cfg.m_aps, cfg.k_users, cfg.n_elements) {
        return Err(Error::Dimension(format!(
            "dataset is (M,K,N)=({},{},{}), config ({},{},{})",
            ds.m, ds.k, ds.n, cfg.m_aps, cfg.k_users, cfg.n_elements
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub trace: Vec<f64>,
}

/// Trains a fresh network on `ds` and returns it with its optimizer state and
/// loss trace.
pub fn train_model(cfg: &ExperimentConfig, ds: &ExpertDataset) -> Result<(Checkpoint<f64>, Vec<f64>)> {
    check_dataset(cfg, ds)?;
    let schedule = cfg.schedule::<f64>()?;
    let data = TrainingSet::from_dataset(ds);
    let mut model = Denoiser::new(
        DenoiserDims::new(ds.n, ds.condition_len()),
        &mut seeded(derive_seed(cfg.seed, seeds::INIT)),
    )?;
    let mut adam = Adam::new(model.param_count());
    let trace = train(&data, &mut model, &mut adam, &schedule, &cfg.train_config())?;
    Ok((Checkpoint { denoiser: model, adam: Some(adam) }, trace))
}

pub fn loss_csv(trace: &[f64]) -> Result<Vec<u8>> {
    csv_bytes(&["epoch", "loss"], trace.iter().enumerate().map(|(e, l)| vec![(e + 1).to_string(), l.to_string()]))
}

pub fn cmd_train(cfg: &ExperimentConfig, dataset: &Path) -> Result<TrainReport> {
    let ds = ExpertDataset::load(dataset)?;
    let (ckpt, trace) = train_model(cfg, &ds)?;
    ensure_dir(&cfg.out_dir)?;
    let checkpoint = cfg.out_dir.join(CHECKPOINT_FILE);
    let loss_path = cfg.out_dir.join(LOSS_CSV);
    save_checkpoint(&checkpoint, &ckpt)?;
    atomic_write(&loss_path, &loss_csv(&trace)?)?;
    Ok(TrainReport { checkpoint, loss_csv: loss_path, trace })
}

fn load_model(cfg: &ExperimentConfig, checkpoint: &Path, ds: Option<&ExpertDataset>) -> Result<Denoiser<f64>> {
    let model = load_checkpoint::<f64>(checkpoint)?.denoiser;
    let d = model.dims();
    if d.n != cfg.n_elements {
        return Err(Error::Dimension(format!("checkpoint N={} but config N={}", d.n, cfg.n_elements)));
    }
    if let Some(ds) = ds {
        if d.dim_c != ds.condition_len() {
            return Err(Error::Dimension(format!(
                "checkpoint condition length {} but dataset {}",
                d.dim_c,
                ds.condition_len()
            )));
        }
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub rho_d_db: f64,
    pub method: String,
    pub mean_sum_se: f64,
    pub std_sum_se: f64,
    pub drops: usize,
}

/// Sum SE of every method on one drop at every power level. Returns
/// `[power][method]`.
fn sweep_drop(
    cfg: &ExperimentConfig,
    model: &Denoiser<f64>,
    ds: &ExpertDataset,
    schedule: &NoiseSchedule<f64>,
    seed: u64,
    drop: usize,
) -> Result<Vec<[f64; 4]>> {
    let sys = cfg.system_config();
    let d = drop as u64;
    let state: ChannelState<f64> = draw_drop(&sys, &mut substream(seed, d, 0))?;
    let mut rng = substream(seed, d, 1);
    let random: Vec<_> = (0..cfg.random_draws).map(|_| PhaseVector::random(sys.n_elements, &mut rng)).collect();
    cfg.sweep_rho_db
        .iter()
        .enumerate()
        .map(|(ri, &rho_db)| {
            let rho = db_to_linear(rho_db);
            let obj = Objective::new(&sys, &state, rho)?;
            let ri = ri as u64;
            let ga = ga_optimize(&sys, &state, rho, &cfg.ga_config(), &mut substream(seed, d, 0x100 + ri))?.fitness;
            let cond = ds.condition_for(&state, rho_db)?;
            let gcdm = ddpm_sample(model, &cond, schedule, &mut substream(seed, d, 0x200 + ri))?;
            let gcdim = ddim_sample(
                model,
                &cond,
                schedule,
                cfg.implicit_steps,
                cfg.implicit_rule,
                &mut substream(seed, d, 0x300 + ri),
            )?;
            Ok([random_baseline(&obj, &random), ga, obj.eval(&gcdm.theta), obj.eval(&gcdim.theta)])
        })
        .collect()
}

pub fn sweep_methods(cfg: &ExperimentConfig) -> [String; 4] {
    ["random".into(), "ga".into(), "gcdm".into(), format!("gcdim-{}", cfg.implicit_steps)]
}

/// Evaluates all methods on `sweep_drops` drops shared across power levels.
pub fn run_sweep(cfg: &ExperimentConfig, model: &Denoiser<f64>, ds: &ExpertDataset) -> Result<Vec<SweepRow>> {
    check_dataset(cfg, ds)?;
    let schedule = cfg.schedule::<f64>()?;
    let seed = derive_seed(cfg.seed, seeds::SWEEP);
    let per_drop: Vec<Vec<[f64; 4]>> = (0..cfg.sweep_drops)
        .into_par_iter()
        .map(|d| sweep_drop(cfg, model, ds, &schedule, seed, d))
        .collect::<Result<_>>()?;
    let names = sweep_methods(cfg);
    let n = cfg.sweep_drops as f64;
    let mut rows = Vec::new();
    for (ri, &rho_db) in cfg.sweep_rho_db.iter().enumerate() {
        for (mi, name) in names.iter().enumerate() {
            let vals: Vec<f64> = per_drop.iter().map(|d| d[ri][mi]).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            rows.push(SweepRow {
                rho_d_db: rho_db,
                method: name.clone(),
                mean_sum_se: mean,
                std_sum_se: std,
                drops: cfg.sweep_drops,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    csv_bytes(
        &["rho_d_dB", "method", "mean_sum_se", "std_sum_se", "drops"],
        rows.iter().map(|r| {
            vec![
                r.rho_d_db.to_string(),
                r.method.clone(),
                r.mean_sum_se.to_string(),
                r.std_sum_se.to_string(),
                r.drops.to_string(),
            ]
        }),
    )
}

pub fn cmd_sweep(cfg: &ExperimentConfig, checkpoint: &Path, dataset: &Path) -> Result<(PathBuf, Vec<SweepRow>)> {
    let ds = ExpertDataset::load(dataset)?;
    let model = load_model(cfg, checkpoint, Some(&ds))?;
    let rows = run_sweep(cfg, &model, &ds)?;
    ensure_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(SWEEP_CSV);
    atomic_write(&path, &sweep_csv(&rows)?)?;
    Ok((path, rows))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub median_s: f64,
    pub denoiser_evals: usize,
}

/// Median wall-clock time of `f` over `reps` runs after one discarded warm-up.
pub fn median_time<F: FnMut() -> Result<()>>(reps: usize, mut f: F) -> Result<Duration> {
    f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        f()?;
        times.push(t0.elapsed());
    }
    times.sort();
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 { times[mid] } else { (times[mid - 1] + times[mid]) / 2 })
}

/// Times one optimizer call of each method on a single drop.
pub fn run_bench(cfg: &ExperimentConfig, model: &Denoiser<f64>, condition: &[f64]) -> Result<Vec<BenchRow>> {
    let sys = cfg.system_config();
    let schedule = cfg.schedule::<f64>()?;
    let seed = derive_seed(cfg.seed, seeds::BENCH);
    let state: ChannelState<f64> = draw_drop(&sys, &mut substream(seed, 0, 0))?;
    let rho = sys.rho_d;
    let ga = cfg.ga_config();
    let reps = cfg.bench_repetitions;

    let mut rng = substream(seed, 1, 0);
    let t_ga = median_time(reps, || ga_optimize(&sys, &state, rho, &ga, &mut rng).map(|_| ()))?;

    let counter = CountingPredictor::new(model);
    ddpm_sample(&counter, condition, &schedule, &mut substream(seed, 2, 0))?;
    let gcdm_evals = counter.calls();
    let mut rng = substream(seed, 2, 1);
    let t_gcdm = median_time(reps, || ddpm_sample(model, condition, &schedule, &mut rng).map(|_| ()))?;

    let counter = CountingPredictor::new(model);
    let s = cfg.implicit_steps;
    ddim_sample(&counter, condition, &schedule, s, cfg.implicit_rule, &mut substream(seed, 3, 0))?;
    let gcdim_evals = counter.calls();
    let mut rng = substream(seed, 3, 1);
    let t_gcdim =
        median_time(reps, || ddim_sample(model, condition, &schedule, s, cfg.implicit_rule, &mut rng).map(|_| ()))?;

    let names = sweep_methods(cfg);
    Ok(vec![
        BenchRow { method: names[1].clone(), median_s: t_ga.as_secs_f64(), denoiser_evals: 0 },
        BenchRow { method: names[2].clone(), median_s: t_gcdm.as_secs_f64(), denoiser_evals: gcdm_evals },
        BenchRow { method: names[3].clone(), median_s: t_gcdim.as_secs_f64(), denoiser_evals: gcdim_evals },
    ])
}

pub fn bench_csv(rows: &[BenchRow]) -> Result<Vec<u8>> {
    csv_bytes(
        &["method", "median_s", "denoiser_evals"],
        rows.iter().map(|r| vec![r.method.clone(), r.median_s.to_string(), r.denoiser_evals.to_string()]),
    )
}

/// Without a dataset the all-zero (mean) condition is used.
pub fn cmd_bench(cfg: &ExperimentConfig, checkpoint: &Path, dataset: Option<&Path>) -> Result<(PathBuf, Vec<BenchRow>)> {
    let ds = dataset.map(ExpertDataset::load).transpose()?;
    let model = load_model(cfg, checkpoint, ds.as_ref())?;
    let condition = match &ds {
        Some(ds) => {
            check_dataset(cfg, ds)?;
            let seed = derive_seed(cfg.seed, seeds::BENCH);
            let state: ChannelState<f64> = draw_drop(&cfg.system_config(), &mut substream(seed, 0, 0))?;
            ds.condition_for(&state, crate::channel::linear_to_db(cfg.system_config().rho_d))?
        }
        None => vec![0.0; model.dims().dim_c],
    };
    let rows = run_bench(cfg, &model, &condition)?;
    ensure_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(BENCH_CSV);
    atomic_write(&path, &bench_csv(&rows)?)?;
    Ok((path, rows))
}

/// Counts predictor calls of one run of each sampler.
pub fn count_evals<P: NoisePredictor<f64>>(
    model: &P,
    condition: &[f64],
    schedule: &NoiseSchedule<f64>,
    s: usize,
) -> Result<(usize, usize)> {
    let c = CountingPredictor::new(model);
    ddpm_sample(&c, condition, schedule, &mut seeded(0))?;
    let gcdm = c.calls();
    let c = CountingPredictor::new(model);
    ddim_sample(&c, condition, schedule, s, Default::default(), &mut seeded(0))?;
    Ok((gcdm, c.calls()))
}
