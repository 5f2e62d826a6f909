use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use rdopt::error::Result;
use rdopt::harness::{self, ExperimentConfig, Profile};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Parser, Debug)]
#[command(name = "rdopt", version, about = "RIS phase optimization: GA expert and diffusion samplers")]
struct Cli {
    /// Flat TOML file overriding profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    profile: ProfileArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Label random drops with GA solutions.
    GenDataset,
    /// Train the noise-prediction network on a dataset.
    Train,
    /// Sum SE of every method across downlink power levels.
    Sweep,
    /// Time one optimizer call per method.
    Bench,
    /// Run the numerical self-checks.
    Validate {
        /// Scale the closed-form δ by this factor (self-test of the checks).
        #[arg(long, hide = true)]
        corrupt_delta: Option<f64>,
    },
}

enum Outcome {
    Done,
    ValidationFailed,
}

fn run(cli: Cli) -> Result<Outcome> {
    harness::init_threads()?;
    let profile = match cli.profile {
        ProfileArg::Desk => Profile::Desk,
        ProfileArg::Paper => Profile::Paper,
    };
    let mut cfg = ExperimentConfig::load(profile, cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    let dataset = cli.dataset.unwrap_or_else(|| cfg.out_dir.join(harness::DATASET_FILE));
    let checkpoint = cli.checkpoint.unwrap_or_else(|| cfg.out_dir.join(harness::CHECKPOINT_FILE));

    match cli.command {
        Command::GenDataset => {
            let r = harness::cmd_gen_dataset(&cfg)?;
            println!("wrote {} ({} records) and {}", r.path.display(), r.records, r.csv_path.display());
            println!("mean expert sum SE {:.4}, random-phase mean {:.4}", r.mean_achieved_se, r.mean_random_se);
        }
        Command::Train => {
            let r = harness::cmd_train(&cfg, &dataset)?;
            let first = r.trace.first().copied().unwrap_or(f64::NAN);
            let last = r.trace.last().copied().unwrap_or(f64::NAN);
            println!("trained {} epochs: loss {first:.5} -> {last:.5}", r.trace.len());
            println!("wrote {} and {}", r.checkpoint.display(), r.loss_csv.display());
        }
        Command::Sweep => {
            let (path, rows) = harness::cmd_sweep(&cfg, &checkpoint, &dataset)?;
            for r in &rows {
                println!("{:>6} dB  {:<10} {:.4} ± {:.4}", r.rho_d_db, r.method, r.mean_sum_se, r.std_sum_se);
            }
            println!("wrote {}", path.display());
        }
        Command::Bench => {
            // normalization stats are optional for timing
            let ds = dataset.exists().then_some(dataset.as_path());
            let (path, rows) = harness::cmd_bench(&cfg, &checkpoint, ds)?;
            for r in &rows {
                println!("{:<10} median {:.6} s  denoiser evals {}", r.method, r.median_s, r.denoiser_evals);
            }
            println!("wrote {}", path.display());
        }
        Command::Validate { corrupt_delta } => {
            let report = harness::cmd_validate(&cfg, corrupt_delta)?;
            for c in &report.checks {
                println!("{c}");
            }
            if !report.passed() {
                return Ok(Outcome::ValidationFailed);
            }
        }
    }
    Ok(Outcome::Done)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::ValidationFailed) => {
            eprintln!("validation failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
