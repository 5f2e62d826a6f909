use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rdopt::denoiser::load_checkpoint;
use rdopt::diffusion::{ddim_sample, ImplicitRule};
use rdopt::expert::ExpertDataset;
use rdopt::harness::{self, ExperimentConfig, Profile};
use rdopt::rng::seeded;

const TINY: &str = "\
m_aps = 4
k_users = 2
n_elements = 4
tau_p = 2
ga_population = 16
ga_generations = 12
dataset_samples = 12
dataset_rho_db = [0.0, 20.0]
epochs = 6
diffusion_steps = 50
implicit_steps = 5
sweep_rho_db = [-10.0, 10.0, 30.0]
sweep_drops = 3
random_draws = 20
bench_repetitions = 1
mc_trials = 20000
";

fn rdopt(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.toml");
    if !cfg.exists() {
        std::fs::write(&cfg, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_rdopt"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stdout {}\nstderr {}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
}

fn out_file(dir: &Path, name: &str) -> PathBuf {
    dir.join("out").join(name)
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

#[test]
fn pipeline_end_to_end() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        ok(&rdopt(dir, &["gen-dataset"]));
        ok(&rdopt(dir, &["train"]));
        ok(&rdopt(dir, &["sweep"]));
    }
    for name in [harness::DATASET_FILE, harness::DATASET_CSV, harness::CHECKPOINT_FILE, harness::LOSS_CSV, harness::SWEEP_CSV] {
        let x = std::fs::read(out_file(a.path(), name)).unwrap();
        let y = std::fs::read(out_file(b.path(), name)).unwrap();
        assert!(x == y, "{name} differs between identical runs");
    }

    let dir = a.path();
    let ds = ExpertDataset::load(&out_file(dir, harness::DATASET_FILE)).unwrap();
    assert_eq!(ds.len(), 12);
    assert_eq!(csv_rows(&out_file(dir, harness::DATASET_CSV)).len(), 12);

    let loss = csv_rows(&out_file(dir, harness::LOSS_CSV));
    assert_eq!(loss.len(), 6);
    assert!(loss.iter().all(|r| r[1].parse::<f64>().unwrap().is_finite()));

    // reloading reproduces sampler outputs bit for bit
    let ckpt = load_checkpoint::<f64>(&out_file(dir, harness::CHECKPOINT_FILE)).unwrap();
    let again = load_checkpoint::<f64>(&out_file(dir, harness::CHECKPOINT_FILE)).unwrap();
    let cfg = ExperimentConfig::from_toml_str(Profile::Desk, TINY).unwrap();
    let sched = cfg.schedule::<f64>().unwrap();
    let cond = ds.records[0].condition.clone();
    let x = ddim_sample(&ckpt.denoiser, &cond, &sched, 5, ImplicitRule::Exact, &mut seeded(3)).unwrap();
    let y = ddim_sample(&again.denoiser, &cond, &sched, 5, ImplicitRule::Exact, &mut seeded(3)).unwrap();
    assert_eq!(x.theta, y.theta);

    let sweep = csv_rows(&out_file(dir, harness::SWEEP_CSV));
    assert_eq!(sweep.len(), 3 * 4);
    let get = |rho: &str, method: &str| -> f64 {
        sweep.iter().find(|r| &r[0] == rho && &r[1] == method).unwrap()[2].parse().unwrap()
    };
    for rho in ["-10", "10", "30"] {
        assert!(get(rho, "ga") >= get(rho, "random"), "ga below random at {rho} dB");
    }
    assert!(get("-10", "ga") < get("10", "ga") && get("10", "ga") < get("30", "ga"));

    ok(&rdopt(dir, &["bench"]));
    let bench = csv_rows(&out_file(dir, harness::BENCH_CSV));
    let evals: Vec<(String, usize)> = bench.iter().map(|r| (r[0].to_string(), r[2].parse().unwrap())).collect();
    assert_eq!(evals, vec![("ga".into(), 0), ("gcdm".into(), 50), ("gcdim-5".into(), 5)]);
}

#[test]
fn seed_changes_dataset() {
    let a = tempfile::tempdir().unwrap();
    ok(&rdopt(a.path(), &["gen-dataset"]));
    let first = std::fs::read(out_file(a.path(), harness::DATASET_FILE)).unwrap();
    ok(&rdopt(a.path(), &["--seed", "99", "gen-dataset"]));
    let second = std::fs::read(out_file(a.path(), harness::DATASET_FILE)).unwrap();
    assert_ne!(first, second);
}

#[test]
fn validate_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_rdopt");
    let good = Command::new(bin).arg("validate").output().unwrap();
    ok(&good);
    let text = String::from_utf8_lossy(&good.stdout);
    assert_eq!(text.matches("PASS").count(), 4, "{text}");

    let bad = Command::new(bin).args(["validate", "--corrupt-delta", "2.0"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn configuration_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "epochz = 3\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_rdopt")).arg("--config").arg(&cfg).arg("validate").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));

    // training without a dataset
    let o = rdopt(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(2));

    let o = Command::new(env!("CARGO_BIN_EXE_rdopt")).arg("no-such-command").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    ok(&rdopt(dir.path(), &["gen-dataset"]));
    ok(&rdopt(dir.path(), &["train"]));
    let other = dir.path().join("other.toml");
    std::fs::write(&other, TINY.replace("n_elements = 4", "n_elements = 6")).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_rdopt"))
        .arg("--config")
        .arg(&other)
        .arg("--out")
        .arg(dir.path().join("out"))
        .arg("bench")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
