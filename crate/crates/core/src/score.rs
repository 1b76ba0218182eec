//! Score models for the diffused prior `p_t`.
//!
//! Under the variance-preserving forward process a Gaussian component
//! `N(m, diag(c))` diffuses to `N(sqrt(ab) m, ab c + (1 - ab))` with
//! `ab = alpha_bar_t`, so Gaussian and diagonal-mixture priors have exact
//! scores, log-densities and Hessian-vector products at every step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, PfldError, Result};
use crate::rng::standard_normal_vec;
use crate::schedule::DiffusionSchedule;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Prior metadata that oracles can use to build exact posteriors.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorDescriptor {
    Gaussian(GaussianPrior),
    Gmm(GmmPrior),
    Opaque,
}

/// Gradient of the log marginal density of the diffused prior.
pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    fn score(&self, z: &[f64], t: usize, s: &DiffusionSchedule) -> Result<Vec<f64>>;

    /// Log marginal density, when the model knows it.
    fn log_density(&self, _z: &[f64], _t: usize, _s: &DiffusionSchedule) -> Option<Result<f64>> {
        None
    }

    /// Exact `(d score / d z) v`, when the model knows it.
    fn analytic_jacobian_vp(
        &self,
        _z: &[f64],
        _t: usize,
        _s: &DiffusionSchedule,
        _v: &[f64],
    ) -> Option<Result<Vec<f64>>> {
        None
    }

    fn has_analytic_jacobian(&self) -> bool {
        false
    }

    fn prior(&self) -> PriorDescriptor {
        PriorDescriptor::Opaque
    }
}

fn validate_input(dim: usize, z: &[f64], t: usize, s: &DiffusionSchedule) -> Result<f64> {
    check_dim("score input", dim, z.len())?;
    check_finite("score input", z)?;
    s.check_state(t)?;
    Ok(s.alpha_bar(t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        check_dim("prior variance", mean.len(), variance.len())?;
        check_finite("prior mean", &mean)?;
        if variance.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(PfldError::invalid("prior variances must be positive"));
        }
        if mean.is_empty() {
            return Err(PfldError::invalid("prior must have at least one dimension"));
        }
        Ok(Self { mean, variance })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            variance: vec![1.0; dim],
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn score_at(&self, z: &[f64], alpha_bar: f64) -> Vec<f64> {
        let root = alpha_bar.sqrt();
        z.iter()
            .zip(&self.mean)
            .zip(&self.variance)
            .map(|((zi, m), c)| -(zi - root * m) / (alpha_bar * c + 1.0 - alpha_bar))
            .collect()
    }

    pub fn log_pdf_at(&self, z: &[f64], alpha_bar: f64) -> f64 {
        let root = alpha_bar.sqrt();
        z.iter()
            .zip(&self.mean)
            .zip(&self.variance)
            .map(|((zi, m), c)| {
                let var = alpha_bar * c + 1.0 - alpha_bar;
                -0.5 * ((zi - root * m).powi(2) / var + var.ln() + LN_2PI)
            })
            .sum()
    }

    pub fn hvp_at(&self, v: &[f64], alpha_bar: f64) -> Vec<f64> {
        v.iter()
            .zip(&self.variance)
            .map(|(vi, c)| -vi / (alpha_bar * c + 1.0 - alpha_bar))
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        standard_normal_vec(rng, self.dim())
            .into_iter()
            .zip(&self.mean)
            .zip(&self.variance)
            .map(|((e, m), c)| m + c.sqrt() * e)
            .collect()
    }
}

/// `-(ab Sigma0 + (1 - ab) I)^{-1} (z - sqrt(ab) mu0)` for a diagonal Gaussian prior.
pub fn gaussian_score(
    z: &[f64],
    t: usize,
    prior: &GaussianPrior,
    s: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    let ab = validate_input(prior.dim(), z, t, s)?;
    Ok(prior.score_at(z, ab))
}

impl ScoreModel for GaussianPrior {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn score(&self, z: &[f64], t: usize, s: &DiffusionSchedule) -> Result<Vec<f64>> {
        gaussian_score(z, t, self, s)
    }

    fn log_density(&self, z: &[f64], t: usize, s: &DiffusionSchedule) -> Option<Result<f64>> {
        Some(validate_input(self.dim(), z, t, s).map(|ab| self.log_pdf_at(z, ab)))
    }

    fn analytic_jacobian_vp(
        &self,
        z: &[f64],
        t: usize,
        s: &DiffusionSchedule,
        v: &[f64],
    ) -> Option<Result<Vec<f64>>> {
        Some(validate_input(self.dim(), z, t, s).and_then(|ab| {
            check_dim("jacobian direction", self.dim(), v.len())?;
            Ok(self.hvp_at(v, ab))
        }))
    }

    fn has_analytic_jacobian(&self) -> bool {
        true
    }

    fn prior(&self) -> PriorDescriptor {
        PriorDescriptor::Gaussian(self.clone())
    }
}

/// Mixture of diagonal Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmPrior {
    weights: Vec<f64>,
    components: Vec<GaussianPrior>,
}

struct MixtureTerms {
    responsibilities: Vec<f64>,
    scores: Vec<Vec<f64>>,
    log_density: f64,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(PfldError::invalid("mixture needs at least one component"));
        }
        check_dim("mixture means", weights.len(), means.len())?;
        check_dim("mixture variances", weights.len(), variances.len())?;
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(PfldError::invalid("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(PfldError::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        let components = means
            .into_iter()
            .zip(variances)
            .map(|(m, v)| GaussianPrior::new(m, v))
            .collect::<Result<Vec<_>>>()?;
        let dim = components[0].dim();
        for c in &components {
            check_dim("mixture component", dim, c.dim())?;
        }
        Ok(Self { weights, components })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianPrior] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    fn terms(&self, z: &[f64], alpha_bar: f64) -> MixtureTerms {
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w.ln() + c.log_pdf_at(z, alpha_bar))
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        let log_density = max + sum.ln();
        let responsibilities = logs.iter().map(|l| (l - log_density).exp()).collect();
        let scores = self
            .components
            .iter()
            .map(|c| c.score_at(z, alpha_bar))
            .collect();
        MixtureTerms {
            responsibilities,
            scores,
            log_density,
        }
    }

    /// Posterior component probabilities of `z` under the diffused mixture.
    pub fn responsibilities_at(&self, z: &[f64], alpha_bar: f64) -> Vec<f64> {
        self.terms(z, alpha_bar).responsibilities
    }

    pub fn score_at(&self, z: &[f64], alpha_bar: f64) -> Vec<f64> {
        let terms = self.terms(z, alpha_bar);
        let mut out = vec![0.0; z.len()];
        for (r, sk) in terms.responsibilities.iter().zip(&terms.scores) {
            for (o, v) in out.iter_mut().zip(sk) {
                *o += r * v;
            }
        }
        out
    }

    pub fn log_pdf_at(&self, z: &[f64], alpha_bar: f64) -> f64 {
        self.terms(z, alpha_bar).log_density
    }

    /// `H v` with `H = sum_k r_k (-P_k + s_k s_k^T) - s s^T`.
    pub fn hvp_at(&self, z: &[f64], alpha_bar: f64, v: &[f64]) -> Vec<f64> {
        let terms = self.terms(z, alpha_bar);
        let mut mean_score = vec![0.0; z.len()];
        let mut out = vec![0.0; z.len()];
        for ((r, sk), comp) in terms
            .responsibilities
            .iter()
            .zip(&terms.scores)
            .zip(&self.components)
        {
            let proj: f64 = sk.iter().zip(v).map(|(a, b)| a * b).sum();
            let curv = comp.hvp_at(v, alpha_bar);
            for i in 0..z.len() {
                out[i] += r * (curv[i] + sk[i] * proj);
                mean_score[i] += r * sk[i];
            }
        }
        let proj: f64 = mean_score.iter().zip(v).map(|(a, b)| a * b).sum();
        for (o, s) in out.iter_mut().zip(&mean_score) {
            *o -= s * proj;
        }
        out
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        self.components[k].sample(rng)
    }
}

/// Responsibility-weighted score of the diffused mixture, computed in log space.
pub fn gmm_score(z: &[f64], t: usize, prior: &GmmPrior, s: &DiffusionSchedule) -> Result<Vec<f64>> {
    let ab = validate_input(prior.dim(), z, t, s)?;
    Ok(prior.score_at(z, ab))
}

impl ScoreModel for GmmPrior {
    fn dim(&self) -> usize {
        GmmPrior::dim(self)
    }

    fn score(&self, z: &[f64], t: usize, s: &DiffusionSchedule) -> Result<Vec<f64>> {
        gmm_score(z, t, self, s)
    }

    fn log_density(&self, z: &[f64], t: usize, s: &DiffusionSchedule) -> Option<Result<f64>> {
        Some(validate_input(self.dim(), z, t, s).map(|ab| self.log_pdf_at(z, ab)))
    }

    fn analytic_jacobian_vp(
        &self,
        z: &[f64],
        t: usize,
        s: &DiffusionSchedule,
        v: &[f64],
    ) -> Option<Result<Vec<f64>>> {
        Some(validate_input(self.dim(), z, t, s).and_then(|ab| {
            check_dim("jacobian direction", self.dim(), v.len())?;
            Ok(self.hvp_at(z, ab, v))
        }))
    }

    fn has_analytic_jacobian(&self) -> bool {
        true
    }

    fn prior(&self) -> PriorDescriptor {
        PriorDescriptor::Gmm(self.clone())
    }
}

/// Directional central difference of the score, step `1e-4 * max(1, |z|_inf)`.
pub fn fd_jacobian_vp(
    model: &dyn ScoreModel,
    z: &[f64],
    t: usize,
    s: &DiffusionSchedule,
    v: &[f64],
) -> Result<Vec<f64>> {
    check_dim("jacobian direction", model.dim(), v.len())?;
    let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if vmax == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let zmax = z.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let h = 1e-4 * zmax.max(1.0);
    let dir: Vec<f64> = v.iter().map(|x| x / vmax).collect();
    let plus: Vec<f64> = z.iter().zip(&dir).map(|(a, d)| a + h * d).collect();
    let minus: Vec<f64> = z.iter().zip(&dir).map(|(a, d)| a - h * d).collect();
    if plus == minus {
        return Err(PfldError::Numerical("finite-difference step underflow".into()));
    }
    let sp = model.score(&plus, t, s)?;
    let sm = model.score(&minus, t, s)?;
    Ok(sp
        .iter()
        .zip(&sm)
        .map(|(a, b)| (a - b) / (2.0 * h) * vmax)
        .collect())
}

/// `(d score / d z) v`: exact when the model provides it, else a central difference.
pub fn score_jacobian_vp(
    model: &dyn ScoreModel,
    z: &[f64],
    t: usize,
    s: &DiffusionSchedule,
    v: &[f64],
) -> Result<Vec<f64>> {
    match model.analytic_jacobian_vp(z, t, s, v) {
        Some(r) => r,
        None => fd_jacobian_vp(model, z, t, s, v),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use approx::assert_relative_eq;

    fn schedule() -> DiffusionSchedule {
        DiffusionSchedule::linear(200, 1e-4, 0.1).unwrap()
    }

    // Log-density of the diffused mixture written out from scratch.
    fn oracle_log_density(
        z: &[f64],
        ab: f64,
        weights: &[f64],
        means: &[Vec<f64>],
        vars: &[Vec<f64>],
    ) -> f64 {
        let mut total = 0.0;
        for k in 0..weights.len() {
            let mut dens = weights[k];
            for i in 0..z.len() {
                let var = ab * vars[k][i] + (1.0 - ab);
                let d = z[i] - ab.sqrt() * means[k][i];
                dens *= (-(d * d) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
            }
            total += dens;
        }
        total.ln()
    }

    fn fd_gradient(f: impl Fn(&[f64]) -> f64, z: &[f64]) -> Vec<f64> {
        let h = 1e-4 * z.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        (0..z.len())
            .map(|i| {
                let mut p = z.to_vec();
                let mut m = z.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        num / den.max(1e-12)
    }

    #[test]
    fn gaussian_score_examples() {
        let s = schedule();
        let prior = GaussianPrior::new(vec![1.0, -2.0], vec![0.5, 2.0]).unwrap();
        let root = s.alpha_bar(50).sqrt();
        let mode = vec![root * 1.0, root * -2.0];
        assert_eq!(gaussian_score(&mode, 50, &prior, &s).unwrap(), vec![0.0, 0.0]);

        let std = GaussianPrior::standard(3);
        let z = [0.3, -1.2, 2.0];
        let sc = gaussian_score(&z, 0, &std, &s).unwrap();
        for i in 0..3 {
            assert_relative_eq!(sc[i], -z[i]);
        }
        assert!(GaussianPrior::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn gaussian_score_matches_finite_difference() {
        let s = schedule();
        let mut rng = stream(21, Purpose::Init, &[]);
        let prior = GaussianPrior::new(vec![0.4, -1.0, 2.0], vec![0.3, 1.5, 4.0]).unwrap();
        for t in [0, 1, 10, 100, 200] {
            let z = standard_normal_vec(&mut rng, 3);
            let ab = s.alpha_bar(t);
            let fd = fd_gradient(
                |x| {
                    oracle_log_density(
                        x,
                        ab,
                        &[1.0],
                        &[prior.mean().to_vec()],
                        &[prior.variance().to_vec()],
                    )
                },
                &z,
            );
            let sc = gaussian_score(&z, t, &prior, &s).unwrap();
            for i in 0..3 {
                assert!((sc[i] - fd[i]).abs() <= 1e-6 * fd[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn gmm_single_component_reduces_to_gaussian() {
        let s = schedule();
        let g = GaussianPrior::new(vec![0.5, 1.0], vec![2.0, 0.7]).unwrap();
        let m = GmmPrior::new(vec![1.0], vec![vec![0.5, 1.0]], vec![vec![2.0, 0.7]]).unwrap();
        let z = [0.1, -0.4];
        assert_eq!(gmm_score(&z, 30, &m, &s).unwrap(), gaussian_score(&z, 30, &g, &s).unwrap());

        let dup = GmmPrior::new(
            vec![0.3, 0.7],
            vec![vec![0.5, 1.0], vec![0.5, 1.0]],
            vec![vec![2.0, 0.7], vec![2.0, 0.7]],
        )
        .unwrap();
        let a = gmm_score(&z, 30, &dup, &s).unwrap();
        let b = gaussian_score(&z, 30, &g, &s).unwrap();
        for i in 0..2 {
            assert_relative_eq!(a[i], b[i], max_relative = 1e-14);
        }
    }

    #[test]
    fn gmm_symmetric_midpoint() {
        let s = schedule();
        let m = GmmPrior::new(
            vec![0.5, 0.5],
            vec![vec![3.0, 0.0], vec![-3.0, 0.0]],
            vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        )
        .unwrap();
        for t in [0, 20, 150] {
            let sc = gmm_score(&[0.0, 0.8], t, &m, &s).unwrap();
            assert!(sc[0].abs() < 1e-14);
        }
    }

    #[test]
    fn gmm_score_matches_finite_difference() {
        let s = schedule();
        let mut rng = stream(22, Purpose::Init, &[]);
        let weights = vec![0.2, 0.5, 0.3];
        let means = vec![vec![2.0, 0.0], vec![-1.0, 1.5], vec![0.0, -2.5]];
        let vars = vec![vec![0.3, 0.8], vec![1.0, 0.2], vec![0.5, 0.5]];
        let m = GmmPrior::new(weights.clone(), means.clone(), vars.clone()).unwrap();
        for _ in 0..100 {
            let t = rng.random_range(0..=200);
            let z: Vec<f64> = standard_normal_vec(&mut rng, 2).iter().map(|x| 2.0 * x).collect();
            let ab = s.alpha_bar(t);
            let fd = fd_gradient(|x| oracle_log_density(x, ab, &weights, &means, &vars), &z);
            let sc = gmm_score(&z, t, &m, &s).unwrap();
            assert!(rel_err(&sc, &fd) <= 1e-5, "t={t} {sc:?} {fd:?}");
            let ld = m.log_density(&z, t, &s).unwrap().unwrap();
            assert_relative_eq!(ld, oracle_log_density(&z, ab, &weights, &means, &vars), max_relative = 1e-10);
        }
    }

    #[test]
    fn gmm_score_finite_far_away() {
        let s = schedule();
        let m = GmmPrior::new(
            vec![0.5, 0.5],
            vec![vec![3.0, 0.0], vec![-3.0, 0.0]],
            vec![vec![0.01, 0.01], vec![0.01, 0.01]],
        )
        .unwrap();
        for t in [0, 1, 200] {
            for z in [[1e3, -1e3], [-1e3, 0.0], [0.0, 1e3]] {
                assert!(gmm_score(&z, t, &m, &s).unwrap().iter().all(|v| v.is_finite()));
            }
        }
        assert!(gmm_score(&[f64::NAN, 0.0], 0, &m, &s).is_err());
    }

    #[test]
    fn jacobian_examples() {
        let s = schedule();
        let g = GaussianPrior::new(vec![0.0, 1.0], vec![2.0, 0.5]).unwrap();
        let t = 40;
        let ab = s.alpha_bar(t);
        let v = [0.7, -1.1];
        let j = score_jacobian_vp(&g, &[5.0, -3.0], t, &s, &v).unwrap();
        assert_relative_eq!(j[0], -v[0] / (ab * 2.0 + 1.0 - ab));
        assert_relative_eq!(j[1], -v[1] / (ab * 0.5 + 1.0 - ab));
        assert_eq!(score_jacobian_vp(&g, &[5.0, -3.0], t, &s, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(fd_jacobian_vp(&g, &[5.0, -3.0], t, &s, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn gmm_analytic_jacobian_matches_fallback() {
        let s = schedule();
        let m = GmmPrior::new(
            vec![0.4, 0.6],
            vec![vec![3.0, 0.0], vec![-3.0, 1.0]],
            vec![vec![1.0, 0.5], vec![0.3, 1.0]],
        )
        .unwrap();
        let mut rng = stream(23, Purpose::Init, &[]);
        for _ in 0..50 {
            let t = rng.random_range(0..=200);
            let z: Vec<f64> = standard_normal_vec(&mut rng, 2).iter().map(|x| 2.0 * x).collect();
            let v = standard_normal_vec(&mut rng, 2);
            let exact = score_jacobian_vp(&m, &z, t, &s, &v).unwrap();
            let fd = fd_jacobian_vp(&m, &z, t, &s, &v).unwrap();
            assert!(rel_err(&exact, &fd) <= 1e-4);
        }
    }

    struct Opaque(GmmPrior);

    impl ScoreModel for Opaque {
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn score(&self, z: &[f64], t: usize, s: &DiffusionSchedule) -> Result<Vec<f64>> {
            self.0.score(z, t, s)
        }
    }

    #[test]
    fn opaque_models_fall_back_to_differences() {
        let s = schedule();
        let m = GmmPrior::new(
            vec![0.5, 0.5],
            vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        )
        .unwrap();
        let model = Opaque(m.clone());
        assert!(!model.has_analytic_jacobian());
        let v = [0.3, 0.9];
        let a = score_jacobian_vp(&model, &[0.2, 0.1], 10, &s, &v).unwrap();
        let b = score_jacobian_vp(&m, &[0.2, 0.1], 10, &s, &v).unwrap();
        assert!(rel_err(&a, &b) <= 1e-4);
    }

    #[test]
    fn mixture_validation() {
        assert!(GmmPrior::new(vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], vec![vec![1.0], vec![1.0]]).is_err());
        assert!(GmmPrior::new(vec![1.0], vec![vec![0.0, 1.0]], vec![vec![1.0]]).is_err());
        assert!(GmmPrior::new(vec![-0.5, 1.5], vec![vec![0.0], vec![1.0]], vec![vec![1.0], vec![1.0]]).is_err());
    }
}
