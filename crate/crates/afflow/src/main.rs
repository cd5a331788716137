use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use afflow::commands::{self, DataSource, InpaintOptions, TrainOptions};
use afflow::config::RunConfig;
use afflow::experiments::{self, UniversalityBudget};
use afflow::format::load_dataset;
use afflow::{CliError, CliResult};
use afflow_core::arch::ArchSpec;
use afflow_core::guidance::{GuidanceMode, GuidanceSpec};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "afflow", version, about = "Transformer autoregressive flows with exact likelihood")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint to load (resume for `train`).
    #[arg(long, global = true)]
    ckpt: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset: canonical, correlated:<rho>, gaussians-on-grid, bars or checker.
    GenData {
        source: DataSource,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Destination AFDS file.
        #[arg(long)]
        path: PathBuf,
    },
    /// Train a flow on an AFDS dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Stop after this many steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Sample from a checkpoint.
    Sample {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        omega: Option<f64>,
        #[arg(long)]
        mode: Option<GuidanceMode>,
    },
    /// Mean NLL of a dataset under a checkpoint.
    Nll {
        #[arg(long)]
        data: PathBuf,
    },
    /// Fill masked positions of one dataset sample by Metropolis-Hastings.
    Inpaint {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Missing positions, e.g. "1" or "0,4-7".
        #[arg(long)]
        mask: String,
        #[arg(long, default_value_t = 16)]
        chains: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 1.0)]
        init_sigma: f64,
        #[arg(long, default_value_t = 1.0)]
        prop_sigma: f64,
        #[arg(long)]
        class: Option<usize>,
    },
    /// Check the closed-form guided Gaussian against a numerical tilt.
    VerifyCfg {
        #[arg(long, default_value_t = 2001)]
        grid_points: usize,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
    /// Fit T = 1, 2, 3 stacks to the canonical target and report NLL gaps.
    Universality {
        #[arg(long, default_value_t = 1500)]
        steps: u64,
        /// Wall-clock budget per stack in seconds.
        #[arg(long, default_value_t = 600)]
        budget: u64,
    },
    /// Time guided sampling of a deep-shallow stack against an equal-sized one.
    Bench {
        /// Deep-shallow architecture; the equal-sized stack has one block fewer.
        #[arg(long, default_value = "6(4)-128")]
        arch: ArchSpec,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 8)]
        grid: usize,
        #[arg(long, default_value_t = 4)]
        channels: usize,
    },
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a PathBuf> {
    v.as_ref().ok_or_else(|| CliError::Validation(format!("--{flag} is required")))
}

fn run(cli: Cli) -> CliResult<()> {
    let s = &cli.shared;
    let seed = s.seed.unwrap_or(0);
    let out = s.out.clone().unwrap_or_else(|| PathBuf::from("."));
    match cli.command {
        Command::GenData { source, n, size, classes, path } => {
            let source = match source {
                DataSource::Images { kind, .. } => DataSource::Images { kind, size, classes },
                other => other,
            };
            let data = commands::gen_data(&source, n, seed)?;
            commands::write_dataset(&data, &path)?;
            println!("wrote {} samples (D={}, C={}) to {}", data.n, data.positions, data.channels, path.display());
        }
        Command::Train { data, steps } => {
            let mut config = match &s.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::from_toml("")?,
            };
            if let Some(seed) = s.seed {
                config.seed = seed;
            }
            let out = s.out.clone().or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("."));
            let data = load_dataset(&data)?;
            let report = commands::train(config, &data, s.ckpt.as_deref(), &TrainOptions { out, max_steps: steps })?;
            if let Some(m) = report.metrics.last() {
                println!("step {} nll {:.5} nats/dim ({:.5} bits/dim)", m.step, m.nll, m.bits_per_dim);
            }
            if let Some(mse) = report.decoder_mse.last() {
                println!("decoder mse {mse:.5}");
            }
            println!("checkpoint {}", report.checkpoint.display());
        }
        Command::Sample { n, class, omega, mode } => {
            let state = commands::load_state(require(&s.ckpt, "ckpt")?)?;
            let defaults = state.config.guidance.spec()?;
            let spec = GuidanceSpec::new(mode.unwrap_or(defaults.mode), omega.unwrap_or(defaults.omega))?;
            let report = commands::sample(&state, n, class, &spec, seed, Some(&out))?;
            println!("wrote {} samples to {} ({} backbone passes)", n, out.display(), report.stats.passes);
        }
        Command::Nll { data } => {
            let state = commands::load_state(require(&s.ckpt, "ckpt")?)?;
            let nll = commands::nll(&state, &load_dataset(&data)?, seed)?;
            println!("nll_nats_per_dim {nll}\nbits_per_dim {}", nll / std::f64::consts::LN_2);
        }
        Command::Inpaint { data, index, mask, chains, iters, init_sigma, prop_sigma, class } => {
            let state = commands::load_state(require(&s.ckpt, "ckpt")?)?;
            let opts = InpaintOptions { index, mask, chains, iters, init_sigma, prop_sigma, class, seed };
            let outcome = commands::inpaint(&state, &load_dataset(&data)?, &opts, Some(&out))?;
            let mean_acc = outcome.acceptance.iter().sum::<f64>() / outcome.acceptance.len().max(1) as f64;
            println!("{chains} chains, mean acceptance {mean_acc:.3}; wrote {}", out.display());
        }
        Command::VerifyCfg { grid_points, trials } => {
            let r = experiments::verify_cfg(grid_points, trials, seed, Some(&out))?;
            println!("max pointwise rel. err {:e}", r.max_rel_err);
            println!("max precision residual {:e}", r.max_precision_residual);
            println!("s = 1 matches standard guidance exactly: {}", r.s_one_exact);
            println!("guided sigma never exceeds conditional sigma: {}", r.sigma_never_grows);
            println!("{}", if r.passes() { "PASS" } else { "FAIL" });
        }
        Command::Universality { steps, budget } => {
            let b = UniversalityBudget { steps, time_limit: Duration::from_secs(budget), ..Default::default() };
            let r = experiments::universality(&b, seed, Some(&out))?;
            print!("{}", r.to_csv());
        }
        Command::Bench { arch, batch, reps, grid, channels } => {
            let (ds, eq) = experiments::bench_pair(arch, grid, channels, 10, seed)?;
            let r = experiments::bench(&ds, &eq, batch, reps, seed, Some(&out))?;
            print!("{}", r.to_csv());
            println!("ratio {:.3}", r.ratio());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are validation errors; help and version are not errors.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
