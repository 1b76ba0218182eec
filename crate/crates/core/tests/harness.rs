mod common;

use pfld::filter::FilterConfig;
use pfld::harness::commands::{compare_seed, mean_std, run_all};
use pfld::harness::config::SeedSpec;
use pfld::harness::{cmd_compare_baseline, cmd_run, cmd_sweep_particles, ExperimentConfig, Problem};
use pfld::PfldError;

use common::{config_path, load_config};

fn config_error_path(text: &str) -> String {
    match ExperimentConfig::from_toml_str(text) {
        Err(PfldError::Config { path, .. }) => path,
        other => panic!("expected a config error, got {other:?}"),
    }
}

fn with_line(replace: &str, by: &str) -> String {
    let text = std::fs::read_to_string(config_path("gaussian_inpaint.toml")).unwrap();
    assert!(text.contains(replace), "fixture line `{replace}` missing");
    text.replacen(replace, by, 1)
}

#[test]
fn config_errors_name_the_field() {
    assert_eq!(config_error_path(&with_line("particles = 10", "particles = \"ten\"")), "filter.particles");
    assert_eq!(config_error_path(&with_line("particles = 10", "particles = 0")), "filter.particles");
    assert_eq!(config_error_path(&with_line("sigma_nu = 0.01", "sigma_nu = -1.0")), "problem.sigma_nu");
    assert_eq!(config_error_path(&with_line("eta = 0.5", "eta = 0.5\ncolour = 1")), "sampler.colour");
    assert_eq!(config_error_path(&with_line("threshold = 0.5", "threshold = 1.5")), "filter.threshold");
    assert_eq!(config_error_path(&with_line("observed = [1]", "observed = [1]\nhole = { row = 0, col = 0, height = 1, width = 1 }")), "problem.operator");

    let cfg = ExperimentConfig::from_toml_str(&with_line("values = [0.6, 1.2]", "values = [0.6, 1.2, 3.0]")).unwrap();
    match Problem::build(&cfg) {
        Err(PfldError::Config { path, .. }) => assert_eq!(path, "problem.truth.values"),
        other => panic!("expected a config error, got {other:?}"),
    }
    let cfg = ExperimentConfig::from_toml_str(&with_line("observed = [1]", "observed = [5]")).unwrap();
    match Problem::build(&cfg) {
        Err(PfldError::Config { path, .. }) => assert_eq!(path, "problem.operator"),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn shipped_configs_build() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        Problem::build(&cfg).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        count += 1;
    }
    assert!(count >= 5);
}

#[test]
fn hash_ignores_output_settings() {
    let a = load_config("gaussian_inpaint.toml");
    let mut b = a.clone();
    b.output.dir = "elsewhere".into();
    assert_eq!(a.hash(), b.hash());
    let mut c = a.clone();
    c.filter.particles = 11;
    assert_ne!(a.hash(), c.hash());
    assert_eq!(a.hash().len(), 16);
}

#[test]
fn single_particle_runs_are_labelled_baseline_equivalent() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = load_config("gaussian_inpaint.toml");
    cfg.filter = cfg.filter.with_particles(1);
    cfg.seeds = SeedSpec::List { list: vec![4, 9] };
    cfg.output.dir = dir.path().to_path_buf();
    let reports = cmd_run(&cfg).unwrap();
    assert!(reports.iter().all(|r| r.label == "baseline-equivalent"));
    assert!(dir.path().join(format!("run_{}_4.json", cfg.hash())).exists());
    let csv = std::fs::read_to_string(dir.path().join("runs.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "config_hash,seed,label,N0,R,psnr,ssim,l2_error,posterior_l2_error,prior_mean_l2_error,residual_sq,particle_steps,wall_ms"
    );
    assert!(lines.all(|l| l.contains("baseline-equivalent") && l.starts_with(&cfg.hash())));
}

#[test]
fn hundred_seed_run_beats_the_prior_mean() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = load_config("gaussian_inpaint.toml");
    cfg.seeds = SeedSpec::Range { base: 0, count: 100 };
    cfg.output.dir = dir.path().to_path_buf();
    let reports = cmd_run(&cfg).unwrap();
    assert_eq!(reports.len(), 100);
    let errors: Vec<f64> = reports.iter().map(|r| r.metrics.l2_error).collect();
    let (mean, _) = mean_std(&errors);
    let baseline = reports[0].prior_mean_l2_error;
    assert!(mean.is_finite() && mean < baseline, "mean l2 {mean} vs prior mean {baseline}");
    assert!(reports.iter().all(|r| r.perceptual_substitute == "l2_error"));
}

#[test]
fn particle_sweep_of_one_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = load_config("gmm3_inpaint.toml");
    cfg.seeds = SeedSpec::Range { base: 0, count: 5 };
    cfg.output.dir = dir.path().to_path_buf();
    let rows = cmd_sweep_particles(&cfg, &[1]).unwrap();
    let problem = Problem::build(&cfg).unwrap();
    let runs = run_all(&cfg, &problem, &cfg.filter.with_particles(1)).unwrap();
    let (mean, std) = mean_std(&runs.iter().map(|r| r.metrics.l2_error).collect::<Vec<_>>());
    let row = rows.iter().find(|r| r.metric == "l2_error").unwrap();
    assert_eq!((row.mean, row.std, row.n_seeds), (mean, std, 5));
    let csv = std::fs::read_to_string(dir.path().join("sweep_particles.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "config_hash,parameter,value,metric,mean,std,n_seeds,seeds");
}

#[test]
fn repeated_baseline_accounting() {
    let mut cfg = load_config("gaussian_inpaint_full.toml");
    let problem = Problem::build(&cfg).unwrap();
    let one = compare_seed(&cfg, &problem, 1, 0).unwrap();
    assert_eq!(one.step_ratio, 1.0);
    assert_eq!(one.pfld_steps, 1000);
    cfg.filter.prune_period = 20;
    let ten = compare_seed(&cfg, &problem, 10, 0).unwrap();
    assert_eq!((ten.pfld_steps, ten.baseline_steps), (1280, 10_000));
    assert!((ten.step_ratio - 10_000.0 / 1280.0).abs() < 1e-12);
    assert!(ten.baseline_oracle_l2_error <= ten.baseline_l2_error);
}

#[test]
fn filter_is_no_worse_than_best_of_independent_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = load_config("gaussian_inpaint.toml");
    cfg.seeds = SeedSpec::Range { base: 0, count: 50 };
    cfg.output.dir = dir.path().to_path_buf();
    let rows = cmd_compare_baseline(&cfg, 10).unwrap();
    let diff: Vec<f64> = rows.iter().map(|r| r.pfld_l2_error - r.baseline_l2_error).collect();
    let (mean, std) = mean_std(&diff);
    let se = std / (diff.len() as f64).sqrt();
    assert!(mean <= 2.0 * se, "paired difference {mean} vs 2 SE {}", 2.0 * se);
    let csv = std::fs::read_to_string(dir.path().join("compare_baseline.csv")).unwrap();
    assert!(csv.lines().next().unwrap().starts_with("config_hash,seed,N0,pfld_l2_error,baseline_l2_error"));
}

#[test]
fn period_at_least_steps_never_prunes() {
    let mut cfg = load_config("gaussian_inpaint.toml");
    cfg.filter = FilterConfig {
        particles: 6,
        prune_period: 200,
        ..cfg.filter.clone()
    };
    let problem = Problem::build(&cfg).unwrap();
    let r = pfld::harness::run_seed(&cfg, &problem, &cfg.filter, 2).unwrap();
    assert!(r.trajectory.iter().all(|h| h.population == 6 && !h.pruned));
    assert_eq!(r.particle_steps, 1200);
    assert_eq!(r.survivors, 6);
}

#[test]
fn image_and_latent_problems_run() {
    for name in ["image_deblur.toml", "latent_codec.toml"] {
        let mut cfg = load_config(name);
        cfg.seeds = SeedSpec::List { list: vec![0] };
        let problem = Problem::build(&cfg).unwrap();
        let r = pfld::harness::run_seed(&cfg, &problem, &cfg.filter, 0).unwrap();
        assert_eq!(r.estimate.len(), problem.shape.len());
        assert!(r.metrics.psnr.is_finite() && r.metrics.ssim.abs() <= 1.0);
        assert!(r.metrics.l2_error < r.prior_mean_l2_error * 1.5, "{name}");
    }
}
