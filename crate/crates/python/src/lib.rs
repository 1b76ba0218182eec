//! Python bindings for the `pfld` sampler, metrics and oracles.

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

use pfld::filter::{effective_sample_size, normalize, scheduled_particle_steps, update_weight as update_weight_rs};
use pfld::harness::verify::run_checks;
use pfld::harness::{run_seed, ExperimentConfig, Problem};
use pfld::operators::{make_measurement as make_measurement_rs, BlurKernel, ImageShape, LinearMap};
use pfld::oracle::gaussian_prior_posterior;
use pfld::rng::{stream, Purpose};
use pfld::score::ScoreModel;
use pfld::{metrics, PfldError, SigmaConvention};

fn to_py(e: PfldError) -> PyErr {
    match e {
        PfldError::Io(err) => PyOSError::new_err(err.to_string()),
        e if e.is_numerical() => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for pfld::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

#[pyclass(name = "Schedule", frozen)]
struct Schedule(pfld::DiffusionSchedule);

#[pymethods]
impl Schedule {
    #[new]
    #[pyo3(signature = (steps, beta_min = 1e-4, beta_max = 0.02, convention = "posterior"))]
    fn new(steps: usize, beta_min: f64, beta_max: f64, convention: &str) -> PyResult<Self> {
        let convention = match convention {
            "posterior" => SigmaConvention::Posterior,
            "beta" => SigmaConvention::Beta,
            other => return Err(PyValueError::new_err(format!("unknown convention `{other}`"))),
        };
        pfld::DiffusionSchedule::linear_with(steps, beta_min, beta_max, convention)
            .py()
            .map(Schedule)
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps()
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.0.check_state(t).py()?;
        Ok(self.0.alpha_bar(t))
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.0.check_transition(t).py()?;
        Ok(self.0.beta(t))
    }

    fn alpha(&self, t: usize) -> PyResult<f64> {
        self.0.check_transition(t).py()?;
        Ok(self.0.alpha(t))
    }

    fn sigma_tilde(&self, t: usize) -> PyResult<f64> {
        self.0.check_transition(t).py()?;
        Ok(self.0.sigma_tilde(t))
    }
}

#[pyclass(name = "GaussianPrior", frozen)]
struct GaussianPrior(pfld::GaussianPrior);

#[pymethods]
impl GaussianPrior {
    #[new]
    fn new(mean: Vec<f64>, variance: Vec<f64>) -> PyResult<Self> {
        pfld::GaussianPrior::new(mean, variance).py().map(GaussianPrior)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    /// Score of the prior diffused to step `t`.
    fn score(&self, z: Vec<f64>, t: usize, schedule: &Schedule) -> PyResult<Vec<f64>> {
        self.0.score(&z, t, &schedule.0).py()
    }

    fn sample(&self, seed: u64) -> Vec<f64> {
        self.0.sample(&mut stream(seed, Purpose::Truth, &[]))
    }
}

#[pyclass(name = "GmmPrior", frozen)]
struct GmmPrior(pfld::GmmPrior);

#[pymethods]
impl GmmPrior {
    #[new]
    fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> PyResult<Self> {
        pfld::GmmPrior::new(weights, means, variances).py().map(GmmPrior)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn score(&self, z: Vec<f64>, t: usize, schedule: &Schedule) -> PyResult<Vec<f64>> {
        self.0.score(&z, t, &schedule.0).py()
    }

    /// Component responsibilities of the undiffused prior at `x`.
    fn responsibilities(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        if x.len() != self.0.dim() {
            return Err(PyValueError::new_err("dimension mismatch"));
        }
        Ok(self.0.responsibilities_at(&x, 1.0))
    }

    fn sample(&self, seed: u64) -> Vec<f64> {
        self.0.sample(&mut stream(seed, Purpose::Truth, &[]))
    }
}

#[pyclass(name = "Operator", frozen)]
struct Operator(pfld::LinearOperator);

fn shape_of(height: usize, width: usize) -> ImageShape {
    ImageShape::new(height, width)
}

#[pymethods]
impl Operator {
    #[staticmethod]
    fn identity(n: usize) -> Self {
        Operator(pfld::LinearOperator::identity(n))
    }

    /// Mask observing the listed flat pixel indices of a `height x width` image.
    #[staticmethod]
    #[pyo3(signature = (observed, width, height = 1))]
    fn mask(observed: Vec<usize>, width: usize, height: usize) -> PyResult<Self> {
        pfld::LinearOperator::mask_observing(shape_of(height, width), &observed)
            .py()
            .map(Operator)
    }

    #[staticmethod]
    #[pyo3(signature = (sigma, kernel_width, width, height = 1))]
    fn blur(sigma: f64, kernel_width: usize, width: usize, height: usize) -> PyResult<Self> {
        let kernel = BlurKernel::gaussian(sigma, kernel_width, height > 1).py()?;
        pfld::LinearOperator::blur(shape_of(height, width), kernel)
            .py()
            .map(Operator)
    }

    #[staticmethod]
    #[pyo3(signature = (factor, width, height = 1))]
    fn downsample(factor: usize, width: usize, height: usize) -> PyResult<Self> {
        pfld::LinearOperator::downsample(shape_of(height, width), factor)
            .py()
            .map(Operator)
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.0.name()
    }

    #[getter]
    fn in_dim(&self) -> usize {
        self.0.in_dim()
    }

    #[getter]
    fn out_dim(&self) -> usize {
        self.0.out_dim()
    }

    fn apply(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.apply(&x).py()
    }

    fn adjoint(&self, u: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.adjoint(&u).py()
    }
}

/// `y = A x + sigma_nu * eps` with noise drawn from `seed`.
#[pyfunction]
fn make_measurement(op: &Operator, x: Vec<f64>, sigma_nu: f64, seed: u64) -> PyResult<Vec<f64>> {
    make_measurement_rs(&op.0, &x, sigma_nu, &mut stream(seed, Purpose::Measurement, &[]))
        .py()
        .map(|m| m.y)
}

#[pyfunction]
fn update_weight(w_prev: f64, residual_sq: f64) -> PyResult<f64> {
    update_weight_rs(w_prev, residual_sq).py()
}

#[pyfunction]
fn normalize_weights(mut weights: Vec<f64>) -> PyResult<Vec<f64>> {
    normalize(&mut weights).py()?;
    Ok(weights)
}

#[pyfunction]
fn degeneracy(weights: Vec<f64>) -> PyResult<f64> {
    effective_sample_size(&weights).py()
}

#[pyfunction]
fn particle_steps(n0: usize, steps: usize, prune_period: usize) -> u64 {
    scheduled_particle_steps(n0, steps, prune_period)
}

#[pyfunction]
#[pyo3(signature = (reference, estimate, max_value = 1.0))]
fn psnr(reference: Vec<f64>, estimate: Vec<f64>, max_value: f64) -> PyResult<f64> {
    metrics::psnr(&reference, &estimate, max_value).py()
}

#[pyfunction]
#[pyo3(signature = (reference, estimate, width, height = 1, window = 11, max_value = 1.0))]
fn ssim(
    reference: Vec<f64>,
    estimate: Vec<f64>,
    width: usize,
    height: usize,
    window: usize,
    max_value: f64,
) -> PyResult<f64> {
    metrics::ssim(&reference, &estimate, shape_of(height, width), window, max_value).py()
}

/// Exact posterior `(mean, covariance)` of a diagonal Gaussian prior.
#[pyfunction]
fn linear_gaussian_posterior(
    prior: &GaussianPrior,
    op: &Operator,
    y: Vec<f64>,
    sigma_nu: f64,
) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let m = pfld::Measurement {
        y,
        sigma_nu,
        operator: op.0.name().to_string(),
    };
    let post = gaussian_prior_posterior(&prior.0, &op.0, &m).py()?;
    let n = post.mean.len();
    let cov = (0..n)
        .map(|i| (0..n).map(|j| post.covariance[(i, j)]).collect())
        .collect();
    Ok((post.mean, cov))
}

/// Runs one seed of a TOML experiment and returns the report as JSON.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_toml: &str, seed: u64) -> PyResult<String> {
    let cfg = ExperimentConfig::from_toml_str(config_toml).py()?;
    py.detach(|| {
        let problem = Problem::build(&cfg)?;
        run_seed(&cfg, &problem, &cfg.filter, seed)?.to_json()
    })
    .py()
}

/// Built-in self-checks as `(name, passed, detail)` tuples.
#[pyfunction]
fn verify() -> Vec<(String, bool, String)> {
    run_checks()
        .into_iter()
        .map(|c| (c.name.to_string(), c.passed, c.detail))
        .collect()
}

#[pymodule]
fn pfld_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Schedule>()?;
    m.add_class::<GaussianPrior>()?;
    m.add_class::<GmmPrior>()?;
    m.add_class::<Operator>()?;
    m.add_function(wrap_pyfunction!(make_measurement, m)?)?;
    m.add_function(wrap_pyfunction!(update_weight, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_weights, m)?)?;
    m.add_function(wrap_pyfunction!(degeneracy, m)?)?;
    m.add_function(wrap_pyfunction!(particle_steps, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(linear_gaussian_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
