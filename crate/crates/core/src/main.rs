use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pfld::harness::config::{OutputFormat, SeedSpec};
use pfld::harness::{cmd_compare_baseline, cmd_run, cmd_sweep_particles, cmd_sweep_pruning, verify, ExperimentConfig};
use pfld::PfldError;

#[derive(Parser)]
#[command(name = "pfld", version, about = "Particle-filtered latent diffusion experiments")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds, or `start..end`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// One run per seed.
    Run(Common),
    /// Sweep the initial particle count.
    SweepParticles {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,15,20,25,30")]
        ns: Vec<usize>,
    },
    /// Sweep the pruning period.
    SweepPruning {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "10,20,30")]
        rs: Vec<usize>,
    },
    /// Particle filter against the best of N0 independent single-particle runs.
    CompareBaseline {
        #[command(flatten)]
        common: Common,
        /// Defaults to `filter.particles` from the config.
        #[arg(long)]
        n0: Option<usize>,
    },
    /// Run the built-in self-checks.
    Verify,
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, PfldError> {
    let bad = || PfldError::Config {
        path: "--seeds".into(),
        message: format!("cannot parse `{text}`"),
    };
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if b <= a {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

fn load(common: &Common) -> Result<ExperimentConfig, PfldError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seeds = SeedSpec::List { list: vec![seed] };
    }
    if let Some(text) = &common.seeds {
        cfg.seeds = SeedSpec::List { list: parse_seeds(text)? };
    }
    if let Some(dir) = &common.out {
        cfg.output.dir = dir.clone();
    }
    if let Some(f) = common.format {
        cfg.output.formats = vec![match f {
            Format::Json => OutputFormat::Json,
            Format::Csv => OutputFormat::Csv,
        }];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<bool, PfldError> {
    match cli.command {
        Command::Run(common) => {
            let cfg = load(&common)?;
            let reports = cmd_run(&cfg)?;
            for r in &reports {
                println!(
                    "seed {:>6}  {:<19}  l2 {:.6}  psnr {:.3}  residual {:.3e}  steps {}",
                    r.seed, r.label, r.metrics.l2_error, r.metrics.psnr, r.metrics.residual_sq, r.particle_steps
                );
            }
        }
        Command::SweepParticles { common, ns } => {
            let cfg = load(&common)?;
            for r in cmd_sweep_particles(&cfg, &ns)? {
                println!("N0 {:>3}  {:<18}  mean {:.6}  std {:.6}  n {}", r.value, r.metric, r.mean, r.std, r.n_seeds);
            }
        }
        Command::SweepPruning { common, rs } => {
            let cfg = load(&common)?;
            for r in cmd_sweep_pruning(&cfg, &rs)? {
                println!("R {:>4}  {:<18}  mean {:.6}  std {:.6}  n {}", r.value, r.metric, r.mean, r.std, r.n_seeds);
            }
        }
        Command::CompareBaseline { common, n0 } => {
            let cfg = load(&common)?;
            let n0 = n0.unwrap_or(cfg.filter.particles);
            for r in cmd_compare_baseline(&cfg, n0)? {
                println!(
                    "seed {:>6}  pfld l2 {:.6} ({} steps)  best-of-{} l2 {:.6} ({} steps)  ratio {:.2}",
                    r.seed, r.pfld_l2_error, r.pfld_steps, r.n0, r.baseline_l2_error, r.baseline_steps, r.step_ratio
                );
            }
        }
        Command::Verify => {
            let checks = verify::run_checks();
            for c in &checks {
                println!("[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
