//! Experiment commands: single runs, sweeps and the repeated-baseline comparison.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::Result;
use crate::filter::{pfld_run, FilterConfig, FilterOutcome};
use crate::harness::config::{ExperimentConfig, OutputFormat};
use crate::harness::problem::Problem;
use crate::harness::report::{write_csv, write_json, CompareRow, RunReport, SweepRow};
use crate::metrics::{l2_error, MetricReport, PERCEPTUAL_SUBSTITUTE};
use crate::rng::{mix, Purpose};

/// Runs one seed with the given filter settings.
pub fn run_seed(
    cfg: &ExperimentConfig,
    problem: &Problem,
    filter: &FilterConfig,
    seed: u64,
) -> Result<RunReport> {
    let start = Instant::now();
    let outcome = pfld_run(&problem.context(), &problem.psld, filter, seed, false)?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    report_from(cfg, problem, filter, seed, outcome, wall_ms)
}

fn report_from(
    cfg: &ExperimentConfig,
    problem: &Problem,
    filter: &FilterConfig,
    seed: u64,
    outcome: FilterOutcome,
    wall_ms: f64,
) -> Result<RunReport> {
    let metrics = MetricReport::compute(
        &problem.truth,
        &outcome.estimate,
        problem.shape,
        problem.max_value,
        outcome.residual_sq,
    )?;
    let posterior_l2_error = match problem.gaussian_posterior()? {
        Some(post) => Some(l2_error(&post.mean, &outcome.estimate)?),
        None => None,
    };
    let mut config = cfg.clone();
    config.filter = filter.clone();
    Ok(RunReport {
        config_hash: config.hash(),
        seed,
        label: RunReport::label_for(filter.particles).to_string(),
        n0: filter.particles,
        prune_period: filter.prune_period,
        steps: problem.schedule.steps(),
        estimate: outcome.estimate,
        truth: problem.truth.clone(),
        measurement: problem.measurement.y.clone(),
        metrics,
        perceptual_substitute: PERCEPTUAL_SUBSTITUTE.to_string(),
        posterior_l2_error,
        prior_mean_l2_error: l2_error(&problem.prior_mean_estimate()?, &problem.truth)?,
        particle_steps: outcome.particle_steps,
        survivors: outcome.survivors,
        selected_particle: outcome.selected,
        trajectory: outcome.history,
        aborted: outcome.aborted,
        config,
        wall_ms,
    })
}

/// Runs every seed (concurrently) with the given filter settings, in seed order.
pub fn run_all(cfg: &ExperimentConfig, problem: &Problem, filter: &FilterConfig) -> Result<Vec<RunReport>> {
    cfg.seeds
        .seeds()
        .par_iter()
        .map(|&seed| run_seed(cfg, problem, filter, seed))
        .collect()
}

fn csv_wanted(cfg: &ExperimentConfig) -> bool {
    cfg.output.wants(OutputFormat::Csv)
}

fn json_wanted(cfg: &ExperimentConfig) -> bool {
    cfg.output.wants(OutputFormat::Json)
}

/// One run per seed; writes `run_<hash>_<seed>.json` files and `runs.csv`.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<Vec<RunReport>> {
    let problem = Problem::build(cfg)?;
    let reports = run_all(cfg, &problem, &cfg.filter)?;
    let dir = &cfg.output.dir;
    if json_wanted(cfg) {
        for r in &reports {
            write_json(&dir.join(format!("run_{}_{}.json", r.config_hash, r.seed)), r)?;
        }
    }
    if csv_wanted(cfg) {
        let rows: Vec<_> = reports.iter().map(RunReport::aggregate_row).collect();
        write_csv(&dir.join("runs.csv"), &rows)?;
    }
    Ok(reports)
}

/// Sample mean and standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(hash: &str, parameter: &str, value: usize, reports: &[RunReport]) -> Vec<SweepRow> {
    let seeds = reports.iter().map(|r| r.seed.to_string()).collect::<Vec<_>>().join(";");
    let mut metrics: Vec<(&str, Vec<f64>)> = vec![
        ("psnr", reports.iter().map(|r| r.metrics.psnr).collect()),
        ("ssim", reports.iter().map(|r| r.metrics.ssim).collect()),
        ("l2_error", reports.iter().map(|r| r.metrics.l2_error).collect()),
        ("residual_sq", reports.iter().map(|r| r.metrics.residual_sq).collect()),
        ("particle_steps", reports.iter().map(|r| r.particle_steps as f64).collect()),
    ];
    if reports.iter().all(|r| r.posterior_l2_error.is_some()) {
        metrics.push((
            "posterior_l2_error",
            reports.iter().filter_map(|r| r.posterior_l2_error).collect(),
        ));
    }
    metrics
        .into_iter()
        .map(|(name, vals)| {
            let (mean, std) = mean_std(&vals);
            SweepRow {
                config_hash: hash.to_string(),
                parameter: parameter.to_string(),
                value,
                metric: name.to_string(),
                mean,
                std,
                n_seeds: vals.len(),
                seeds: seeds.clone(),
            }
        })
        .collect()
}

fn sweep(
    cfg: &ExperimentConfig,
    parameter: &str,
    values: &[usize],
    file: &str,
    filter_at: impl Fn(usize) -> FilterConfig,
) -> Result<Vec<SweepRow>> {
    let problem = Problem::build(cfg)?;
    let hash = cfg.hash();
    let mut rows = Vec::new();
    for &v in values {
        let filter = filter_at(v);
        filter.validate()?;
        let reports = run_all(cfg, &problem, &filter)?;
        rows.extend(summarize(&hash, parameter, v, &reports));
    }
    let dir = &cfg.output.dir;
    if csv_wanted(cfg) {
        write_csv(&dir.join(format!("{file}.csv")), &rows)?;
    }
    if json_wanted(cfg) {
        write_json(&dir.join(format!("{file}.json")), &rows)?;
    }
    Ok(rows)
}

/// Runs every seed for each initial population in `ns`.
pub fn cmd_sweep_particles(cfg: &ExperimentConfig, ns: &[usize]) -> Result<Vec<SweepRow>> {
    sweep(cfg, "N0", ns, "sweep_particles", |n| cfg.filter.with_particles(n))
}

/// Runs every seed for each pruning period in `rs`.
pub fn cmd_sweep_pruning(cfg: &ExperimentConfig, rs: &[usize]) -> Result<Vec<SweepRow>> {
    sweep(cfg, "R", rs, "sweep_pruning", |r| FilterConfig {
        prune_period: r,
        ..cfg.filter.clone()
    })
}

/// Seed of the `i`-th independent single-particle run paired with `seed`.
pub fn baseline_seed(seed: u64, i: usize) -> u64 {
    mix(seed, &[Purpose::Baseline as u64, i as u64])
}

/// Compares one particle-filter run of `n0` particles against the best
/// (smallest final residual) of `n0` independent single-particle runs.
pub fn compare_seed(cfg: &ExperimentConfig, problem: &Problem, n0: usize, seed: u64) -> Result<CompareRow> {
    let filter = cfg.filter.with_particles(n0);
    filter.validate()?;
    let pf = run_seed(cfg, problem, &filter, seed)?;
    let single = cfg.filter.with_particles(1);
    let runs: Vec<RunReport> = (0..n0)
        .map(|i| run_seed(cfg, problem, &single, baseline_seed(seed, i)))
        .collect::<Result<_>>()?;
    let best = runs
        .iter()
        .min_by(|a, b| a.metrics.residual_sq.total_cmp(&b.metrics.residual_sq))
        .expect("n0 >= 1");
    let oracle_best = runs
        .iter()
        .map(|r| r.metrics.l2_error)
        .fold(f64::INFINITY, f64::min);
    let baseline_steps: u64 = runs.iter().map(|r| r.particle_steps).sum();
    Ok(CompareRow {
        config_hash: cfg.hash(),
        seed,
        n0,
        pfld_l2_error: pf.metrics.l2_error,
        baseline_l2_error: best.metrics.l2_error,
        pfld_posterior_l2_error: pf.posterior_l2_error,
        baseline_posterior_l2_error: best.posterior_l2_error,
        pfld_residual_sq: pf.metrics.residual_sq,
        baseline_residual_sq: best.metrics.residual_sq,
        baseline_oracle_l2_error: oracle_best,
        pfld_steps: pf.particle_steps,
        baseline_steps,
        step_ratio: baseline_steps as f64 / pf.particle_steps as f64,
        pfld_wall_ms: pf.wall_ms,
        baseline_wall_ms: runs.iter().map(|r| r.wall_ms).sum(),
    })
}

pub fn cmd_compare_baseline(cfg: &ExperimentConfig, n0: usize) -> Result<Vec<CompareRow>> {
    let problem = Problem::build(cfg)?;
    let rows: Vec<CompareRow> = cfg
        .seeds
        .seeds()
        .par_iter()
        .map(|&seed| compare_seed(cfg, &problem, n0, seed))
        .collect::<Result<_>>()?;
    let dir = &cfg.output.dir;
    if csv_wanted(cfg) {
        write_csv(&dir.join("compare_baseline.csv"), &rows)?;
    }
    if json_wanted(cfg) {
        write_json(&dir.join("compare_baseline.json"), &rows)?;
    }
    Ok(rows)
}
