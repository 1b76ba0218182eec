//! Exact posteriors for checking sampler output.
//!
//! Linear-Gaussian problems use the conjugate formula with dense algebra;
//! one- and two-dimensional problems with any analytic prior use
//! brute-force Bayes on a grid, accumulated in log space.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, PfldError, Result};
use crate::operators::{Codec, LinearMap, Measurement};
use crate::score::{GaussianPrior, PriorDescriptor};

/// Largest dimension handled by the dense conjugate solve.
pub const MAX_DENSE_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianPosterior {
    /// Marginal standard deviations.
    pub fn std(&self) -> Vec<f64> {
        self.covariance.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    /// Distribution of `D z` when `z` follows this posterior.
    pub fn decoded(&self, codec: &Codec) -> Result<Self> {
        let n = self.mean.len();
        check_dim("posterior decode", codec.latent_dim(), n)?;
        let mean = codec.decode(&self.mean)?;
        let mut d = DMatrix::zeros(codec.pixel_dim(), n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            d.set_column(j, &DVector::from_vec(codec.decode(&e)?));
        }
        let cov = &d * &self.covariance * d.transpose();
        Ok(Self {
            mean,
            covariance: symmetrize(cov),
        })
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Dense matrix of a linear map, one column per unit input.
pub fn dense_matrix(map: &dyn LinearMap) -> Result<DMatrix<f64>> {
    let n = map.in_dim();
    let mut a = DMatrix::zeros(map.out_dim(), n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        a.set_column(j, &DVector::from_vec(map.apply(&e)?));
    }
    Ok(a)
}

/// Conjugate posterior of `N(mu0, sigma0)` under `y = A x + sigma_nu * eps`.
pub fn linear_gaussian_posterior(
    mu0: &[f64],
    sigma0: &DMatrix<f64>,
    map: &dyn LinearMap,
    m: &Measurement,
) -> Result<GaussianPosterior> {
    let n = mu0.len();
    if n == 0 || n > MAX_DENSE_DIM {
        return Err(PfldError::invalid(format!(
            "dense posterior supports 1..={MAX_DENSE_DIM} dimensions, got {n}"
        )));
    }
    if sigma0.nrows() != n || sigma0.ncols() != n {
        return Err(PfldError::invalid("prior covariance must be square and match the mean"));
    }
    check_dim("posterior operator input", n, map.in_dim())?;
    check_dim("posterior measurement", map.out_dim(), m.y.len())?;
    if !(m.sigma_nu > 0.0 && m.sigma_nu.is_finite()) {
        return Err(PfldError::invalid("posterior needs a positive, finite sigma_nu"));
    }
    let prior_precision = sigma0
        .clone()
        .cholesky()
        .ok_or_else(|| PfldError::Numerical("prior covariance is not positive definite".into()))?
        .inverse();
    let a = dense_matrix(map)?;
    let inv_var = 1.0 / (m.sigma_nu * m.sigma_nu);
    let precision = &prior_precision + a.transpose() * &a * inv_var;
    let covariance = precision
        .cholesky()
        .ok_or_else(|| PfldError::Numerical("posterior precision is not positive definite".into()))?
        .inverse();
    let covariance = symmetrize(covariance);
    let rhs = &prior_precision * DVector::from_column_slice(mu0)
        + a.transpose() * DVector::from_column_slice(&m.y) * inv_var;
    let mean = &covariance * rhs;
    Ok(GaussianPosterior {
        mean: mean.iter().copied().collect(),
        covariance,
    })
}

/// Conjugate posterior for a diagonal Gaussian prior.
pub fn gaussian_prior_posterior(
    prior: &GaussianPrior,
    map: &dyn LinearMap,
    m: &Measurement,
) -> Result<GaussianPosterior> {
    let sigma0 = DMatrix::from_diagonal(&DVector::from_column_slice(prior.variance()));
    linear_gaussian_posterior(prior.mean(), &sigma0, map, m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPosterior {
    pub mean: Vec<f64>,
    /// Grid coordinates per axis.
    pub axes: Vec<Vec<f64>>,
    /// Normalized cell masses, first axis slowest.
    pub mass: Vec<f64>,
    /// Total mass on the outermost ring of cells.
    pub boundary_mass: f64,
}

impl GridPosterior {
    /// Coordinates of the heaviest cell.
    pub fn mode(&self) -> Vec<f64> {
        let k = self
            .mass
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        self.point(k)
    }

    pub fn point(&self, k: usize) -> Vec<f64> {
        match self.axes.len() {
            1 => vec![self.axes[0][k]],
            _ => {
                let r = self.axes[1].len();
                vec![self.axes[0][k / r], self.axes[1][k % r]]
            }
        }
    }

    /// Posterior mass of the region `pred` selects.
    pub fn mass_where(&self, pred: impl Fn(&[f64]) -> bool) -> f64 {
        (0..self.mass.len())
            .filter(|&k| pred(&self.point(k)))
            .map(|k| self.mass[k])
            .sum()
    }
}

/// Largest boundary mass accepted before the box is declared too tight.
pub const BOUNDARY_TOLERANCE: f64 = 1e-6;

/// Brute-force posterior on a regular grid over `bounds` (one `(lo, hi)` per axis).
pub fn grid_posterior(
    prior: &PriorDescriptor,
    map: &dyn LinearMap,
    m: &Measurement,
    bounds: &[(f64, f64)],
    resolution: usize,
) -> Result<GridPosterior> {
    let dim = bounds.len();
    if !(1..=2).contains(&dim) {
        return Err(PfldError::invalid("grid posterior supports one or two dimensions"));
    }
    if resolution < 3 {
        return Err(PfldError::invalid("grid resolution must be at least 3"));
    }
    if bounds.iter().any(|(lo, hi)| !(lo < hi && lo.is_finite() && hi.is_finite())) {
        return Err(PfldError::invalid("grid bounds must be finite with lo < hi"));
    }
    check_dim("grid operator input", dim, map.in_dim())?;
    check_dim("grid measurement", map.out_dim(), m.y.len())?;
    if !(m.sigma_nu > 0.0 && m.sigma_nu.is_finite()) {
        return Err(PfldError::invalid("grid posterior needs a positive, finite sigma_nu"));
    }
    let log_prior = |x: &[f64]| -> Result<f64> {
        match prior {
            PriorDescriptor::Gaussian(g) => {
                check_dim("grid prior", g.dim(), dim)?;
                Ok(g.log_pdf_at(x, 1.0))
            }
            PriorDescriptor::Gmm(g) => {
                check_dim("grid prior", g.dim(), dim)?;
                Ok(g.log_pdf_at(x, 1.0))
            }
            PriorDescriptor::Opaque => Err(PfldError::invalid("grid posterior needs an analytic prior")),
        }
    };
    let axes: Vec<Vec<f64>> = bounds
        .iter()
        .map(|&(lo, hi)| {
            let h = (hi - lo) / (resolution - 1) as f64;
            (0..resolution).map(|i| lo + h * i as f64).collect()
        })
        .collect();
    let cells = resolution.pow(dim as u32);
    let inv_two_var = 0.5 / (m.sigma_nu * m.sigma_nu);
    let mut logp = Vec::with_capacity(cells);
    let mut grid = GridPosterior {
        mean: vec![0.0; dim],
        axes,
        mass: Vec::new(),
        boundary_mass: 0.0,
    };
    for k in 0..cells {
        let x = grid.point(k);
        let pred = map.apply(&x)?;
        let misfit: f64 = pred.iter().zip(&m.y).map(|(p, y)| (p - y).powi(2)).sum();
        logp.push(log_prior(&x)? - misfit * inv_two_var);
    }
    let peak = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return Err(PfldError::Numerical("grid log-posterior has no finite cell".into()));
    }
    let mut mass: Vec<f64> = logp.iter().map(|l| (l - peak).exp()).collect();
    let total: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|w| *w /= total);

    let on_edge = |i: usize| i == 0 || i == resolution - 1;
    for (k, w) in mass.iter().enumerate() {
        let x = grid.point(k);
        for (acc, xi) in grid.mean.iter_mut().zip(&x) {
            *acc += w * xi;
        }
        let edge = match dim {
            1 => on_edge(k),
            _ => on_edge(k / resolution) || on_edge(k % resolution),
        };
        if edge {
            grid.boundary_mass += w;
        }
    }
    grid.mass = mass;
    if grid.boundary_mass >= BOUNDARY_TOLERANCE {
        return Err(PfldError::invalid(format!(
            "grid bounds too tight: boundary cells carry mass {:.3e}",
            grid.boundary_mass
        )));
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{ImageShape, LinearOperator};
    use crate::rng::{standard_normal_vec, stream, Purpose};
    use crate::score::GmmPrior;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn meas(y: Vec<f64>, sigma_nu: f64) -> Measurement {
        Measurement {
            y,
            sigma_nu,
            operator: "test".into(),
        }
    }

    #[test]
    fn identity_conjugacy() {
        let s2: f64 = 0.3 * 0.3;
        let y = vec![0.7, -1.2, 2.0];
        let post = gaussian_prior_posterior(&GaussianPrior::standard(3), &LinearOperator::identity(3), &meas(y.clone(), 0.3)).unwrap();
        for i in 0..3 {
            assert_relative_eq!(post.mean[i], y[i] / (1.0 + s2), epsilon = 1e-12);
            for j in 0..3 {
                let expect = if i == j { s2 / (1.0 + s2) } else { 0.0 };
                assert_relative_eq!(post.covariance[(i, j)], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn huge_noise_returns_prior_mean() {
        let prior = GaussianPrior::new(vec![0.4, -2.0], vec![1.0, 0.5]).unwrap();
        let post = gaussian_prior_posterior(&prior, &LinearOperator::identity(2), &meas(vec![5.0, 5.0], 1e6)).unwrap();
        assert_relative_eq!(post.mean[0], 0.4, epsilon = 1e-4);
        assert_relative_eq!(post.mean[1], -2.0, epsilon = 1e-4);
    }

    #[test]
    fn conjugate_matches_covariance_form() {
        // Independent route: gain form K = S0 A^T (A S0 A^T + s^2 I)^-1.
        let mut rng = stream(2, Purpose::Truth, &[]);
        for trial in 0..20 {
            let n = 2 + trial % 5;
            let mut l = DMatrix::<f64>::zeros(n, n);
            for i in 0..n {
                for j in 0..=i {
                    l[(i, j)] = rng.random_range(-1.0..1.0);
                }
                l[(i, i)] = 0.5 + rng.random::<f64>();
            }
            let s0 = &l * l.transpose();
            let mu0 = standard_normal_vec(&mut rng, n);
            let observed: Vec<usize> = (0..n).filter(|i| i % 2 == 0).collect();
            let op = LinearOperator::mask_observing(ImageShape::line(n), &observed).unwrap();
            let y = standard_normal_vec(&mut rng, n);
            let sigma = 0.2;
            let post = linear_gaussian_posterior(&mu0, &s0, &op, &meas(y.clone(), sigma)).unwrap();

            let a = dense_matrix(&op).unwrap();
            let s = &a * &s0 * a.transpose() + DMatrix::identity(n, n) * sigma * sigma;
            let k = &s0 * a.transpose() * s.try_inverse().unwrap();
            let mu = DVector::from_vec(mu0.clone());
            let mean = &mu + &k * (DVector::from_vec(y) - &a * &mu);
            let cov = &s0 - &k * &a * &s0;
            for i in 0..n {
                assert_relative_eq!(post.mean[i], mean[i], epsilon = 1e-9);
                for j in 0..n {
                    assert_relative_eq!(post.covariance[(i, j)], cov[(i, j)], epsilon = 1e-9);
                    assert_eq!(post.covariance[(i, j)], post.covariance[(j, i)]);
                }
            }
            assert!(post.covariance.clone().cholesky().is_some());
        }
    }

    #[test]
    fn conjugate_errors() {
        let op = LinearOperator::identity(2);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(linear_gaussian_posterior(&[0.0, 0.0], &singular, &op, &meas(vec![0.0, 0.0], 0.1)).is_err());
        let eye = DMatrix::identity(2, 2);
        assert!(linear_gaussian_posterior(&[0.0, 0.0], &eye, &op, &meas(vec![0.0, 0.0], 0.0)).is_err());
        assert!(linear_gaussian_posterior(&[0.0; 65], &DMatrix::identity(65, 65), &LinearOperator::identity(65), &meas(vec![0.0; 65], 0.1)).is_err());
    }

    #[test]
    fn grid_matches_conjugate_on_gaussian() {
        let prior = GaussianPrior::new(vec![0.3, -0.4], vec![1.0, 0.8]).unwrap();
        let op = LinearOperator::mask_observing(ImageShape::line(2), &[1]).unwrap();
        let m = meas(vec![0.0, 0.9], 0.3);
        let exact = gaussian_prior_posterior(&prior, &op, &m).unwrap();
        let sd = [1.0f64, 0.8f64.sqrt()];
        let bounds: Vec<(f64, f64)> = (0..2).map(|i| (prior.mean()[i] - 6.0 * sd[i], prior.mean()[i] + 6.0 * sd[i])).collect();
        let grid = grid_posterior(&PriorDescriptor::Gaussian(prior), &op, &m, &bounds, 401).unwrap();
        for i in 0..2 {
            assert!((grid.mean[i] - exact.mean[i]).abs() <= 1e-3, "{:?} vs {:?}", grid.mean, exact.mean);
        }
        assert_relative_eq!(grid.mass.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn symmetric_bimodal_mean_on_axis() {
        let prior = GmmPrior::new(
            vec![0.5, 0.5],
            vec![vec![3.0, 0.0], vec![-3.0, 0.0]],
            vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        )
        .unwrap();
        let op = LinearOperator::mask_observing(ImageShape::line(2), &[1]).unwrap();
        let m = meas(vec![0.0, 0.5], 0.1);
        let grid = grid_posterior(&PriorDescriptor::Gmm(prior), &op, &m, &[(-9.0, 9.0), (-6.0, 6.0)], 301).unwrap();
        assert!(grid.mean[0].abs() <= 1e-9);
        assert_relative_eq!(grid.mass_where(|x| x[0] > 0.0), grid.mass_where(|x| x[0] < 0.0), epsilon = 1e-9);
    }

    #[test]
    fn zero_noise_concentrates_on_inverse() {
        let prior = GaussianPrior::standard(2);
        let op = LinearOperator::identity(2);
        let y = vec![0.41, -0.77];
        let grid = grid_posterior(&PriorDescriptor::Gaussian(prior), &op, &meas(y.clone(), 1e-3), &[(-6.0, 6.0); 2], 401).unwrap();
        let h = 12.0 / 400.0;
        let cell = |x: &[f64]| (0..2).all(|i| (x[i] - y[i]).abs() <= h / 2.0);
        assert!(grid.mass_where(cell) > 0.99);
        let mode = grid.mode();
        assert!(cell(&mode));
    }

    #[test]
    fn tight_bounds_rejected() {
        let prior = GaussianPrior::standard(1);
        let op = LinearOperator::identity(1);
        let m = meas(vec![0.5], 1.0);
        assert!(grid_posterior(&PriorDescriptor::Gaussian(prior.clone()), &op, &m, &[(-1.0, 1.0)], 101).is_err());
        let g = grid_posterior(&PriorDescriptor::Gaussian(prior), &op, &m, &[(-8.0, 8.0)], 2001).unwrap();
        assert_relative_eq!(g.mean[0], 0.25, epsilon = 1e-9);
        assert!(grid_posterior(&PriorDescriptor::Opaque, &op, &m, &[(-8.0, 8.0)], 11).is_err());
    }

    #[test]
    fn decoded_posterior_push_forward() {
        let post = GaussianPosterior {
            mean: vec![1.0, 2.0],
            covariance: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
        };
        let same = post.decoded(&Codec::identity(2)).unwrap();
        assert_eq!(same.mean, post.mean);
        assert_eq!(same.covariance, post.covariance);
        assert_relative_eq!(post.std()[0], 2f64.sqrt());
    }
}
