use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use skwsim::harness::{self, ExperimentConfig, RunManifest};

#[derive(Parser)]
#[command(name = "skwsim", version, about = "Damped stochastic wave equations and their small-mass limit")]
struct Cli {
    /// Worker threads for replica scheduling.
    #[arg(long, global = true, env = "SKWSIM_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the standing hypotheses and print the derived constants.
    Validate(RunArgs),
    /// Coupled rho-form vs u-form runs at dt and dt/2.
    Equivalence(RunArgs),
    /// Synchronous-coupling contraction rate in H^-1.
    Contraction(RunArgs),
    /// Wave vs limit trajectories over the mass grid.
    LimitSweep(RunArgs),
    /// Wasserstein distance between stationary marginals.
    Transport(RunArgs),
    /// Verify manifests in run directories and recompute the fits.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output` entry.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run even if the model fails the hypothesis check.
    #[arg(long)]
    allow_nonconforming: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories to scan for manifests.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

impl RunArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
        let Some(dir) = self.out.clone().or_else(|| cfg.output.clone()) else {
            bail!("no output directory: pass --out or set `output` in the config");
        };
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

type Driver = fn(&ExperimentConfig, &Path, bool) -> skwsim::Result<RunManifest>;

fn run_experiment(args: &RunArgs, driver: Driver) -> anyhow::Result<ExitCode> {
    let cfg = args.load()?;
    let out = args.out_dir(&cfg)?;
    let manifest = driver(&cfg, &out, args.allow_nonconforming)?;
    for f in &manifest.outputs {
        println!("{}  {}", f.sha256, out.join(&f.name).display());
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("building thread pool")?;
    }
    match &cli.command {
        Command::Validate(args) => {
            let cfg = args.load()?;
            let report = harness::cmd_validate(&cfg)?;
            println!("{}", harness::format_validation(&report));
            Ok(if report.passes() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Equivalence(args) => run_experiment(args, harness::cmd_equivalence),
        Command::Contraction(args) => run_experiment(args, harness::cmd_contraction),
        Command::LimitSweep(args) => run_experiment(args, harness::cmd_limit_sweep),
        Command::Transport(args) => run_experiment(args, harness::cmd_transport),
        Command::Report(args) => {
            std::fs::create_dir_all(&args.out)?;
            let rows = harness::cmd_report(&args.dirs, &args.out)?;
            print!("{}", std::fs::read_to_string(args.out.join("summary.txt"))?);
            Ok(if rows.iter().all(|r| r.matches()) { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
