//! Particle-filter wrapper around the guided sampler.
//!
//! Every reverse step advances each particle independently, rescales its
//! weight by the Cauchy-type likelihood `1 / (||y - A D z_hat0||^2 + 1)`,
//! renormalizes, resamples when the effective sample size drops to the
//! threshold and halves the population on the pruning schedule.

use std::cmp::Ordering;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, PfldError, Result};
use crate::rng::{standard_normal_vec, stream, Purpose};
use crate::sampler::{psld_step, PsldConfig, StepContext};

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub id: u64,
    /// Ancestor ids, oldest first.
    pub lineage: Vec<u64>,
    pub z: Vec<f64>,
    pub w: f64,
    /// Denoised estimate and residual from the most recent step.
    pub z_hat0: Option<Vec<f64>>,
    pub residual_sq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleScheme {
    #[default]
    Multinomial,
    Systematic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    /// Initial population `N0`.
    pub particles: usize,
    /// Resample when the degeneracy metric is at most `threshold * N`.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Halve the population every `prune_period` reverse steps.
    #[serde(default = "default_prune_period")]
    pub prune_period: usize,
    #[serde(default)]
    pub resample: ResampleScheme,
}

fn default_threshold() -> f64 {
    0.5
}

fn default_prune_period() -> usize {
    20
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            particles: 10,
            threshold: default_threshold(),
            prune_period: default_prune_period(),
            resample: ResampleScheme::Multinomial,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(PfldError::config("filter.particles", "must be at least 1"));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(PfldError::config("filter.threshold", "must lie in (0, 1]"));
        }
        if self.prune_period == 0 {
            return Err(PfldError::config("filter.prune_period", "must be at least 1"));
        }
        Ok(())
    }

    pub fn with_particles(&self, particles: usize) -> Self {
        Self {
            particles,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Transition index `t` (state `t` to `t - 1`).
    pub t: usize,
    /// Population that took this step.
    pub population: usize,
    /// Degeneracy metric after the weight update, before resampling.
    pub ess: f64,
    pub residual_min: f64,
    pub residual_median: f64,
    pub residual_max: f64,
    pub resampled: bool,
    pub pruned: bool,
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub particles: Vec<Particle>,
    /// Current state index.
    pub t: usize,
    pub n0: usize,
    pub history: Vec<StepRecord>,
    next_id: u64,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.w).collect()
    }

    /// Ensemble with explicit states and weights; ids are assigned in order.
    pub fn from_parts(states: Vec<Vec<f64>>, weights: Vec<f64>, t: usize) -> Result<Self> {
        if states.is_empty() || states.len() != weights.len() {
            return Err(PfldError::invalid("ensemble needs matching, non-empty states and weights"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(PfldError::invalid("weights must be finite and non-negative"));
        }
        let n0 = states.len();
        let particles = states
            .into_iter()
            .zip(weights)
            .enumerate()
            .map(|(i, (z, w))| Particle {
                id: i as u64,
                lineage: Vec::new(),
                z,
                w,
                z_hat0: None,
                residual_sq: f64::INFINITY,
            })
            .collect();
        Ok(Self {
            particles,
            t,
            n0,
            history: Vec::new(),
            next_id: n0 as u64,
        })
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }
}

/// `N0` standard-normal particles with uniform weights at state `t`.
pub fn init_ensemble<R: Rng + ?Sized>(n0: usize, dim: usize, t: usize, rng: &mut R) -> Result<Ensemble> {
    if n0 == 0 || dim == 0 {
        return Err(PfldError::invalid("ensemble needs at least one particle and one dimension"));
    }
    let states = (0..n0).map(|_| standard_normal_vec(rng, dim)).collect();
    Ensemble::from_parts(states, vec![1.0 / n0 as f64; n0], t)
}

/// `w / (residual_sq + 1)`.
pub fn update_weight(w_prev: f64, residual_sq: f64) -> Result<f64> {
    if !(w_prev >= 0.0 && w_prev.is_finite()) {
        return Err(PfldError::invalid(format!("weight {w_prev} must be finite and >= 0")));
    }
    if !(residual_sq >= 0.0) {
        return Err(PfldError::invalid(format!("residual {residual_sq} must be >= 0")));
    }
    Ok(w_prev / (residual_sq + 1.0))
}

/// Scales weights to unit sum in place.
pub fn normalize(weights: &mut [f64]) -> Result<()> {
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        return Err(PfldError::Numerical(format!(
            "cannot normalize weights with sum {sum}"
        )));
    }
    weights.iter_mut().for_each(|w| *w /= sum);
    Ok(())
}

pub fn normalize_weights(e: &mut Ensemble) -> Result<()> {
    let mut w = e.weights();
    normalize(&mut w)?;
    e.particles.iter_mut().zip(w).for_each(|(p, w)| p.w = w);
    Ok(())
}

/// `1 / sum w^2` for normalized weights, clamped to `[1, N]` against round-off.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || (sum - 1.0).abs() > 1e-9 {
        return Err(PfldError::invalid(format!(
            "degeneracy needs normalized weights (sum = {sum})"
        )));
    }
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    Ok((1.0 / sq).clamp(1.0, weights.len() as f64))
}

pub fn degeneracy(e: &Ensemble) -> Result<f64> {
    effective_sample_size(&e.weights())
}

/// Draws `n` ancestor indices with probability proportional to `weights`.
pub fn resample_indices<R: Rng + ?Sized>(
    weights: &[f64],
    n: usize,
    scheme: ResampleScheme,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || !(total > 0.0 && total.is_finite()) {
        return Err(PfldError::invalid("resampling needs positive weights"));
    }
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w / total;
        cdf.push(acc);
    }
    let last = weights.len() - 1;
    let locate = |u: f64| cdf.partition_point(|c| *c <= u).min(last);
    Ok(match scheme {
        ResampleScheme::Multinomial => (0..n).map(|_| locate(rng.random::<f64>())).collect(),
        ResampleScheme::Systematic => {
            let u0: f64 = rng.random::<f64>() / n as f64;
            (0..n).map(|i| locate(u0 + i as f64 / n as f64)).collect()
        }
    })
}

/// Resamples when the degeneracy metric is at most `threshold * N`.
/// Returns whether a resample happened.
pub fn maybe_resample<R: Rng + ?Sized>(
    e: &mut Ensemble,
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<bool> {
    let n = e.len();
    let nd = degeneracy(e)?;
    if nd > cfg.threshold * n as f64 {
        return Ok(false);
    }
    let picks = resample_indices(&e.weights(), n, cfg.resample, rng)?;
    let uniform = 1.0 / n as f64;
    let mut next = Vec::with_capacity(n);
    for j in picks {
        let parent = &e.particles[j];
        let mut lineage = parent.lineage.clone();
        lineage.push(parent.id);
        let (z, z_hat0, residual_sq) = (parent.z.clone(), parent.z_hat0.clone(), parent.residual_sq);
        next.push(Particle {
            id: e.fresh_id(),
            lineage,
            z,
            w: uniform,
            z_hat0,
            residual_sq,
        });
    }
    e.particles = next;
    Ok(true)
}

/// Removal priority: lowest weight first, then worst residual, then lowest id.
fn removal_order(a: &Particle, b: &Particle) -> Ordering {
    a.w.total_cmp(&b.w)
        .then(b.residual_sq.total_cmp(&a.residual_sq))
        .then(a.id.cmp(&b.id))
}

/// Keeps the `floor(N / 2)` fittest particles and renormalizes. No-op for `N = 1`.
pub fn prune(e: &mut Ensemble) -> Result<bool> {
    let n = e.len();
    if n <= 1 {
        return Ok(false);
    }
    e.particles.sort_by(removal_order);
    e.particles.drain(..n - n / 2);
    e.particles.sort_by_key(|p| p.id);
    normalize_weights(e)?;
    Ok(true)
}

/// Whether pruning fires after `elapsed` completed reverse steps out of `steps`.
pub fn prune_due(elapsed: usize, steps: usize, period: usize) -> bool {
    elapsed > 0 && elapsed < steps && elapsed % period == 0
}

/// Particle-steps of a run whose population only changes through pruning.
pub fn scheduled_particle_steps(n0: usize, steps: usize, period: usize) -> u64 {
    let mut n = n0;
    let mut total = 0u64;
    for elapsed in 1..=steps {
        total += n as u64;
        if n > 1 && prune_due(elapsed, steps, period) {
            n /= 2;
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub particle: u64,
    pub t: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    /// Decoded denoised estimate of the selected particle.
    pub estimate: Vec<f64>,
    pub latent_estimate: Vec<f64>,
    pub residual_sq: f64,
    pub selected: u64,
    pub history: Vec<StepRecord>,
    pub particle_steps: u64,
    pub survivors: usize,
    pub aborted: Vec<AbortRecord>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Runs the particle-filtered reverse diffusion from `t = T` down to `0`.
///
/// Random streams are derived from `seed` per (particle id, step), so the
/// outcome does not depend on `parallel`.
pub fn pfld_run(
    ctx: &StepContext<'_>,
    psld: &PsldConfig,
    cfg: &FilterConfig,
    seed: u64,
    parallel: bool,
) -> Result<FilterOutcome> {
    ctx.check()?;
    cfg.validate()?;
    let steps = ctx.schedule.steps();
    psld.validate(steps)?;
    let dim = ctx.model.dim();
    let mut e = init_ensemble(cfg.particles, dim, steps, &mut stream(seed, Purpose::Init, &[]))?;
    let mut particle_steps = 0u64;
    let mut aborted = Vec::new();

    for (k, t) in (1..=steps).rev().enumerate() {
        let population = e.len();
        particle_steps += population as u64;
        let advance = |p: &Particle| {
            let mut rng = stream(seed, Purpose::Step, &[p.id, t as u64]);
            psld_step(ctx, &p.z, t, psld, &mut rng)
        };
        let results: Vec<_> = if parallel {
            e.particles.par_iter().map(advance).collect()
        } else {
            e.particles.iter().map(advance).collect()
        };
        let mut kept = Vec::with_capacity(population);
        for (mut p, r) in e.particles.drain(..).zip(results) {
            match r {
                Ok(out) => {
                    p.w = update_weight(p.w, out.residual_sq)?;
                    p.z = out.z_next;
                    p.z_hat0 = Some(out.z_hat0);
                    p.residual_sq = out.residual_sq;
                    kept.push(p);
                }
                Err(err) if err.is_numerical() => aborted.push(AbortRecord {
                    particle: p.id,
                    t,
                    reason: err.to_string(),
                }),
                Err(err) => return Err(err),
            }
        }
        if kept.is_empty() {
            return Err(PfldError::Numerical(format!("every particle aborted by t={t}")));
        }
        e.particles = kept;
        e.t = t - 1;
        normalize_weights(&mut e)?;

        let mut residuals: Vec<f64> = e.particles.iter().map(|p| p.residual_sq).collect();
        residuals.sort_by(f64::total_cmp);
        let ess = degeneracy(&e)?;
        let resampled = maybe_resample(&mut e, cfg, &mut stream(seed, Purpose::Resample, &[t as u64]))?;
        let pruned = prune_due(k + 1, steps, cfg.prune_period) && prune(&mut e)?;
        e.history.push(StepRecord {
            t,
            population,
            ess,
            residual_min: residuals[0],
            residual_median: median(&residuals),
            residual_max: residuals[residuals.len() - 1],
            resampled,
            pruned,
        });
    }

    let best = e
        .particles
        .iter()
        .min_by(|a, b| removal_order(b, a))
        .expect("ensemble is non-empty");
    let latent = best.z_hat0.clone().expect("every survivor has stepped");
    let estimate = ctx.codec.decode(&latent)?;
    check_finite("final estimate", &estimate)?;
    Ok(FilterOutcome {
        estimate,
        latent_estimate: latent,
        residual_sq: best.residual_sq,
        selected: best.id,
        survivors: e.len(),
        history: e.history,
        particle_steps,
        aborted,
    })
}
