//! Runtime problem assembled from a configuration.

use nalgebra::DMatrix;

use crate::error::{PfldError, Result};
use crate::harness::config::{
    CodecSpec, ExperimentConfig, GlueAnchor, OperatorSpec, PriorSpec, ShapeSpec, TruthSpec,
};
use crate::operators::{make_measurement, BlurKernel, Codec, DecodedOperator, ImageShape, LinearMap, LinearOperator, Measurement};
use crate::oracle::{gaussian_prior_posterior, GaussianPosterior};
use crate::rng::{stream, Purpose};
use crate::sampler::{PsldConfig, StepContext};
use crate::schedule::DiffusionSchedule;
use crate::score::{GaussianPrior, GmmPrior, PriorDescriptor, ScoreModel};

/// Analytic prior selected by configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorModel {
    Gaussian(GaussianPrior),
    Gmm(GmmPrior),
}

impl PriorModel {
    fn inner(&self) -> &dyn ScoreModel {
        match self {
            PriorModel::Gaussian(g) => g,
            PriorModel::Gmm(g) => g,
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            PriorModel::Gaussian(g) => g.mean().to_vec(),
            PriorModel::Gmm(g) => {
                let mut m = vec![0.0; g.dim()];
                for (w, c) in g.weights().iter().zip(g.components()) {
                    m.iter_mut().zip(c.mean()).for_each(|(a, b)| *a += w * b);
                }
                m
            }
        }
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            PriorModel::Gaussian(g) => g.sample(rng),
            PriorModel::Gmm(g) => g.sample(rng),
        }
    }
}

impl ScoreModel for PriorModel {
    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn score(&self, z: &[f64], t: usize, s: &DiffusionSchedule) -> Result<Vec<f64>> {
        self.inner().score(z, t, s)
    }

    fn log_density(&self, z: &[f64], t: usize, s: &DiffusionSchedule) -> Option<Result<f64>> {
        self.inner().log_density(z, t, s)
    }

    fn analytic_jacobian_vp(
        &self,
        z: &[f64],
        t: usize,
        s: &DiffusionSchedule,
        v: &[f64],
    ) -> Option<Result<Vec<f64>>> {
        self.inner().analytic_jacobian_vp(z, t, s, v)
    }

    fn has_analytic_jacobian(&self) -> bool {
        self.inner().has_analytic_jacobian()
    }

    fn prior(&self) -> PriorDescriptor {
        self.inner().prior()
    }
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub shape: ImageShape,
    pub prior: PriorModel,
    pub operator: LinearOperator,
    pub codec: Codec,
    pub schedule: DiffusionSchedule,
    pub psld: PsldConfig,
    /// Pixel-space ground truth.
    pub truth: Vec<f64>,
    pub measurement: Measurement,
    pub glue_anchor: Option<Vec<f64>>,
    pub max_value: f64,
}

fn at<T>(path: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        PfldError::Config { .. } => e,
        other => PfldError::config(path, other.to_string()),
    })
}

impl Problem {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let p = &cfg.problem;
        let shape = match p.shape {
            ShapeSpec::Length(n) => ImageShape::line(n),
            ShapeSpec::Grid([h, w]) => ImageShape::new(h, w),
        };
        let prior = at(
            "problem.prior",
            match &p.prior {
                PriorSpec::Gaussian { mean, variance } => {
                    GaussianPrior::new(mean.clone(), variance.clone()).map(PriorModel::Gaussian)
                }
                PriorSpec::Gmm { weights, means, variances } => {
                    GmmPrior::new(weights.clone(), means.clone(), variances.clone()).map(PriorModel::Gmm)
                }
            },
        )?;
        let operator = at(
            "problem.operator",
            match &p.operator {
                OperatorSpec::Identity => Ok(LinearOperator::identity(shape.len())),
                OperatorSpec::Mask { observed: Some(obs), .. } => LinearOperator::mask_observing(shape, obs),
                OperatorSpec::Mask { hole: Some(h), .. } => {
                    LinearOperator::mask_hole(shape, h.row, h.col, h.height, h.width)
                }
                OperatorSpec::Mask { .. } => Err(PfldError::invalid("mask needs `observed` or `hole`")),
                OperatorSpec::Blur { sigma, width, two_d } => {
                    BlurKernel::gaussian(*sigma, *width, *two_d).and_then(|k| LinearOperator::blur(shape, k))
                }
                OperatorSpec::Downsample { factor } => LinearOperator::downsample(shape, *factor),
            },
        )?;
        let codec = at(
            "problem.codec",
            match &p.codec {
                CodecSpec::Identity => Ok(Codec::identity(shape.len())),
                CodecSpec::Orthonormal { latent_dim, seed } => {
                    Codec::orthonormal(shape.len(), *latent_dim, &mut stream(*seed, Purpose::Codec, &[]))
                }
                CodecSpec::Linear { decoder } => {
                    let rows = decoder.len();
                    let cols = decoder.first().map_or(0, Vec::len);
                    if rows != shape.len() || cols == 0 || decoder.iter().any(|r| r.len() != cols) {
                        Err(PfldError::invalid(format!(
                            "decoder must have {} rows of equal, non-zero length",
                            shape.len()
                        )))
                    } else {
                        Codec::linear(DMatrix::from_fn(rows, cols, |i, j| decoder[i][j]))
                    }
                }
            },
        )?;
        if codec.latent_dim() != prior.dim() {
            return Err(PfldError::config(
                "problem.prior",
                format!("prior dimension {} does not match latent dimension {}", prior.dim(), codec.latent_dim()),
            ));
        }
        let schedule = at("schedule", cfg.schedule.build())?;
        let truth = match &p.truth {
            TruthSpec::Vector { values } => {
                if values.len() != shape.len() {
                    return Err(PfldError::config(
                        "problem.truth.values",
                        format!("expected {} values, got {}", shape.len(), values.len()),
                    ));
                }
                values.clone()
            }
            TruthSpec::PriorDraw { seed } => {
                let z = prior.sample(&mut stream(*seed, Purpose::Truth, &[]));
                codec.decode(&z)?
            }
        };
        let measurement = at(
            "problem.truth",
            make_measurement(&operator, &truth, p.sigma_nu, &mut stream(p.measurement_seed, Purpose::Measurement, &[])),
        )?;
        let glue_anchor = match cfg.sampler.glue_anchor {
            GlueAnchor::Measurement => None,
            GlueAnchor::Truth => Some(operator.apply(&truth)?),
        };

        let defaults = PsldConfig::defaults_for(&operator, &prior);
        let s = &cfg.sampler;
        let psld = PsldConfig {
            gamma: s.gamma.clone().unwrap_or_else(|| s.eta.scaled(0.1)),
            eta: s.eta.clone(),
            gradient_mode: s.gradient_mode.unwrap_or(defaults.gradient_mode),
            glue_enabled: s.glue.unwrap_or(defaults.glue_enabled),
        };
        at("sampler", psld.validate(schedule.steps()))?;

        let problem = Self {
            shape,
            prior,
            operator,
            codec,
            schedule,
            psld,
            truth,
            measurement,
            glue_anchor,
            max_value: p.max_value,
        };
        at("problem", problem.context().check())?;
        Ok(problem)
    }

    pub fn context(&self) -> StepContext<'_> {
        StepContext {
            schedule: &self.schedule,
            model: &self.prior,
            operator: &self.operator,
            codec: &self.codec,
            measurement: &self.measurement,
            glue_anchor: self.glue_anchor.as_deref(),
        }
    }

    /// Exact pixel-space posterior when the prior is Gaussian.
    pub fn gaussian_posterior(&self) -> Result<Option<GaussianPosterior>> {
        match &self.prior {
            PriorModel::Gaussian(g) => {
                let map = DecodedOperator {
                    operator: &self.operator,
                    codec: &self.codec,
                };
                let latent = gaussian_prior_posterior(g, &map, &self.measurement)?;
                Ok(Some(latent.decoded(&self.codec)?))
            }
            PriorModel::Gmm(_) => Ok(None),
        }
    }

    /// Decoded prior mean, the data-free baseline estimate.
    pub fn prior_mean_estimate(&self) -> Result<Vec<f64>> {
        self.codec.decode(&self.prior.mean())
    }
}
