//! Run reports and tabular exports.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::filter::{AbortRecord, StepRecord};
use crate::harness::config::ExperimentConfig;
use crate::metrics::MetricReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    /// `pfld`, or `baseline-equivalent` for a single-particle run.
    pub label: String,
    pub n0: usize,
    pub prune_period: usize,
    pub steps: usize,
    pub estimate: Vec<f64>,
    pub truth: Vec<f64>,
    pub measurement: Vec<f64>,
    pub metrics: MetricReport,
    /// LPIPS is not computed; this names the metric reported in its place.
    pub perceptual_substitute: String,
    /// Distance to the exact posterior mean, for Gaussian priors.
    pub posterior_l2_error: Option<f64>,
    /// Distance from the decoded prior mean to the truth.
    pub prior_mean_l2_error: f64,
    pub particle_steps: u64,
    pub survivors: usize,
    pub selected_particle: u64,
    pub trajectory: Vec<StepRecord>,
    pub aborted: Vec<AbortRecord>,
    pub config: ExperimentConfig,
    pub wall_ms: f64,
}

impl RunReport {
    pub fn label_for(n0: usize) -> &'static str {
        if n0 == 1 {
            "baseline-equivalent"
        } else {
            "pfld"
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// JSON with the timing field zeroed, for reproducibility comparisons.
    pub fn to_json_without_timing(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.wall_ms = 0.0;
        copy.to_json()
    }

    pub fn aggregate_row(&self) -> AggregateRow {
        AggregateRow {
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            label: self.label.clone(),
            n0: self.n0,
            prune_period: self.prune_period,
            psnr: self.metrics.psnr,
            ssim: self.metrics.ssim,
            l2_error: self.metrics.l2_error,
            posterior_l2_error: self.posterior_l2_error,
            prior_mean_l2_error: self.prior_mean_l2_error,
            residual_sq: self.metrics.residual_sq,
            particle_steps: self.particle_steps,
            wall_ms: self.wall_ms,
        }
    }
}

/// One row per run in `runs.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub config_hash: String,
    pub seed: u64,
    pub label: String,
    #[serde(rename = "N0")]
    pub n0: usize,
    #[serde(rename = "R")]
    pub prune_period: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub l2_error: f64,
    pub posterior_l2_error: Option<f64>,
    pub prior_mean_l2_error: f64,
    pub residual_sq: f64,
    pub particle_steps: u64,
    pub wall_ms: f64,
}

/// Mean and standard deviation of one metric at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config_hash: String,
    /// Swept parameter name (`N0` or `R`).
    pub parameter: String,
    pub value: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
    /// Seeds covered, `;`-separated.
    pub seeds: String,
}

/// Particle-filter run against the best of `N0` single-particle runs, for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub config_hash: String,
    pub seed: u64,
    #[serde(rename = "N0")]
    pub n0: usize,
    pub pfld_l2_error: f64,
    pub baseline_l2_error: f64,
    pub pfld_posterior_l2_error: Option<f64>,
    pub baseline_posterior_l2_error: Option<f64>,
    pub pfld_residual_sq: f64,
    pub baseline_residual_sq: f64,
    /// Best single-particle error when the truth picks the winner (diagnostic only).
    pub baseline_oracle_l2_error: f64,
    pub pfld_steps: u64,
    pub baseline_steps: u64,
    pub step_ratio: f64,
    pub pfld_wall_ms: f64,
    pub baseline_wall_ms: f64,
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp: PathBuf = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, to_csv(rows)?.as_bytes())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}
