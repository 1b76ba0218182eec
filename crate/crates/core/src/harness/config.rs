//! Declarative experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PfldError, Result};
use crate::filter::FilterConfig;
use crate::sampler::{GradientMode, StepSize};
use crate::schedule::ScheduleSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub seeds: SeedSpec,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// `[height, width]` of the pixel grid; a single number means a 1 x n signal.
    pub shape: ShapeSpec,
    pub sigma_nu: f64,
    /// Peak value used by PSNR and SSIM.
    #[serde(default = "default_max_value")]
    pub max_value: f64,
    /// Seed of the measurement noise; the measurement is shared by all run seeds.
    #[serde(default)]
    pub measurement_seed: u64,
    pub prior: PriorSpec,
    pub operator: OperatorSpec,
    #[serde(default)]
    pub codec: CodecSpec,
    pub truth: TruthSpec,
}

fn default_max_value() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ShapeSpec {
    Length(usize),
    Grid([usize; 2]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    Gaussian {
        mean: Vec<f64>,
        variance: Vec<f64>,
    },
    Gmm {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoleSpec {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    Identity,
    Mask {
        /// Flat indices of observed pixels.
        #[serde(default)]
        observed: Option<Vec<usize>>,
        /// Rectangular unobserved region.
        #[serde(default)]
        hole: Option<HoleSpec>,
    },
    Blur {
        sigma: f64,
        width: usize,
        #[serde(default)]
        two_d: bool,
    },
    Downsample {
        factor: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CodecSpec {
    #[default]
    Identity,
    /// Random decoder with orthonormal columns.
    Orthonormal { latent_dim: usize, seed: u64 },
    /// Explicit decoder, one row per pixel.
    Linear { decoder: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TruthSpec {
    /// Pixel-space signal given explicitly.
    Vector { values: Vec<f64> },
    /// Decoded draw from the prior.
    PriorDraw {
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlueAnchor {
    /// Observed pixels of the composite come from `A^T y`.
    #[default]
    Measurement,
    /// Noiseless `A x*`, for synthetic studies only.
    Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_eta")]
    pub eta: StepSize,
    /// Defaults to `0.1 * eta`.
    #[serde(default)]
    pub gamma: Option<StepSize>,
    /// Defaults to on for projector operators (identity, masks).
    #[serde(default)]
    pub glue: Option<bool>,
    #[serde(default)]
    pub glue_anchor: GlueAnchor,
    /// Defaults to analytic when the prior provides an exact Jacobian.
    #[serde(default)]
    pub gradient_mode: Option<GradientMode>,
}

fn default_eta() -> StepSize {
    StepSize::Constant(crate::sampler::PsldConfig::DEFAULT_ETA)
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            eta: default_eta(),
            gamma: None,
            glue: None,
            glue_anchor: GlueAnchor::Measurement,
            gradient_mode: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedSpec {
    List { list: Vec<u64> },
    Range { base: u64, count: u64 },
}

impl Default for SeedSpec {
    fn default() -> Self {
        SeedSpec::Range { base: 0, count: 1 }
    }
}

impl SeedSpec {
    pub fn seeds(&self) -> Vec<u64> {
        match self {
            SeedSpec::List { list } => list.clone(),
            SeedSpec::Range { base, count } => (*base..base + count).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<OutputFormat>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

fn default_formats() -> Vec<OutputFormat> {
    vec![OutputFormat::Json, OutputFormat::Csv]
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
            formats: default_formats(),
        }
    }
}

impl OutputConfig {
    pub fn wants(&self, f: OutputFormat) -> bool {
        self.formats.contains(&f)
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| PfldError::config("<toml>", e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            PfldError::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PfldError::config(path.display().to_string(), e.to_string()))?;
        Self::from_toml_str(&text)
    }

    /// Checks that need no problem construction.
    pub fn validate(&self) -> Result<()> {
        let p = &self.problem;
        if !(p.sigma_nu > 0.0 && p.sigma_nu.is_finite()) {
            return Err(PfldError::config("problem.sigma_nu", "must be positive and finite"));
        }
        if !(p.max_value > 0.0 && p.max_value.is_finite()) {
            return Err(PfldError::config("problem.max_value", "must be positive and finite"));
        }
        if self.shape_len() == 0 {
            return Err(PfldError::config("problem.shape", "must be non-empty"));
        }
        if let OperatorSpec::Mask { observed, hole } = &p.operator {
            if observed.is_some() == hole.is_some() {
                return Err(PfldError::config(
                    "problem.operator",
                    "mask needs exactly one of `observed` or `hole`",
                ));
            }
        }
        if self.schedule.steps == 0 {
            return Err(PfldError::config("schedule.steps", "must be at least 1"));
        }
        self.filter.validate()?;
        if self.seeds.seeds().is_empty() {
            return Err(PfldError::config("seeds", "at least one seed is required"));
        }
        if self.output.formats.is_empty() {
            return Err(PfldError::config("output.formats", "at least one format is required"));
        }
        Ok(())
    }

    pub fn shape_len(&self) -> usize {
        match self.problem.shape {
            ShapeSpec::Length(n) => n,
            ShapeSpec::Grid([h, w]) => h * w,
        }
    }

    /// Hash of everything that affects results; output settings are excluded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::json!({
            "problem": self.problem,
            "schedule": self.schedule,
            "sampler": self.sampler,
            "filter": self.filter,
        });
        let digest = Sha256::digest(canonical.to_string().as_bytes());
        hex::encode(&digest[..8])
    }
}
