//! Quick self-checks run by `pfld verify`.

use rand::Rng;

use crate::filter::{effective_sample_size, normalize, resample_indices, scheduled_particle_steps, ResampleScheme};
use crate::metrics::{psnr, ssim};
use crate::operators::{make_measurement, BlurKernel, Codec, ImageShape, LinearOperator, Measurement};
use crate::oracle::{gaussian_prior_posterior, grid_posterior};
use crate::rng::{standard_normal_vec, stream, Purpose};
use crate::sampler::{gluing_gradient, measurement_gradient, GradientMode, StepContext};
use crate::schedule::DiffusionSchedule;
use crate::score::{GaussianPrior, PriorDescriptor, ScoreModel};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn degeneracy_bounds() -> Check {
    let mut rng = stream(11, Purpose::Resample, &[]);
    let mut bad = 0;
    for k in 0..2000 {
        let n = 2 + k % 63;
        let mut w: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(4)).collect();
        if normalize(&mut w).is_err() {
            continue;
        }
        match effective_sample_size(&w) {
            Ok(nd) if (1.0..=n as f64).contains(&nd) => {}
            _ => bad += 1,
        }
    }
    let uniform = effective_sample_size(&[1.0 / 7.0; 7]).unwrap_or(f64::NAN);
    check(
        "degeneracy bounds",
        bad == 0 && (uniform - 7.0).abs() <= 1e-9,
        format!("{bad} violations, uniform N_d = {uniform}"),
    )
}

fn resampling_frequencies() -> Check {
    let w = [0.5, 0.3, 0.2];
    let trials = 20_000;
    let mut counts = [0usize; 3];
    let mut rng = stream(12, Purpose::Resample, &[]);
    for _ in 0..trials {
        if let Ok(ix) = resample_indices(&w, 3, ResampleScheme::Multinomial, &mut rng) {
            ix.into_iter().for_each(|i| counts[i] += 1);
        }
    }
    let draws = (3 * trials) as f64;
    let ok = (0..3).all(|i| {
        let sd = (w[i] * (1.0 - w[i]) / draws).sqrt();
        (counts[i] as f64 / draws - w[i]).abs() <= 3.0 * sd
    });
    check("resampling frequencies", ok, format!("counts {counts:?} of {draws}"))
}

fn pruning_counts() -> Check {
    let totals: Vec<u64> = [10, 20, 30].iter().map(|&r| scheduled_particle_steps(10, 1000, r)).collect();
    check(
        "pruning step counts",
        totals == [1140, 1280, 1420],
        format!("R = 10/20/30 -> {totals:?}"),
    )
}

fn gradient_fidelity() -> Check {
    let schedule = match DiffusionSchedule::linear(50, 1e-4, 0.05) {
        Ok(s) => s,
        Err(e) => return check("gradient fidelity", false, e.to_string()),
    };
    let n = 6;
    let shape = ImageShape::line(n);
    let ops = [
        LinearOperator::identity(n),
        LinearOperator::mask_observing(shape, &[0, 2, 5]).expect("valid mask"),
        LinearOperator::blur(shape, BlurKernel::horizontal(&[1.0, 2.0, 1.0]).expect("valid kernel")).expect("valid blur"),
    ];
    let prior = GaussianPrior::new(vec![0.2; n], vec![0.8; n]).expect("valid prior");
    let codec = Codec::identity(n);
    let mut rng = stream(13, Purpose::Truth, &[]);
    let mut worst = 0.0f64;
    for op in &ops {
        for k in 0..10 {
            let x = standard_normal_vec(&mut rng, n);
            let m: Measurement = make_measurement(op, &x, 0.05, &mut rng).expect("valid measurement");
            let ctx = StepContext {
                schedule: &schedule,
                model: &prior as &dyn ScoreModel,
                operator: op,
                codec: &codec,
                measurement: &m,
                glue_anchor: None,
            };
            let z = standard_normal_vec(&mut rng, n);
            let t = 1 + (k * 5) % 50;
            for f in [measurement_gradient, gluing_gradient] {
                let (Ok(a), Ok(d)) = (f(&ctx, &z, t, GradientMode::Analytic), f(&ctx, &z, t, GradientMode::FiniteDifference)) else {
                    return check("gradient fidelity", false, "gradient evaluation failed".into());
                };
                let num: f64 = a.iter().zip(&d).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                let den: f64 = d.iter().map(|q| q * q).sum::<f64>().sqrt().max(1e-12);
                worst = worst.max(num / den);
            }
        }
    }
    check("gradient fidelity", worst <= 1e-4, format!("worst relative error {worst:.2e}"))
}

fn oracle_agreement() -> Check {
    let prior = GaussianPrior::new(vec![0.3, -0.4], vec![1.0, 0.8]).expect("valid prior");
    let op = LinearOperator::mask_observing(ImageShape::line(2), &[1]).expect("valid mask");
    let m = Measurement {
        y: vec![0.0, 0.9],
        sigma_nu: 0.3,
        operator: "mask".into(),
    };
    let result = gaussian_prior_posterior(&prior, &op, &m).and_then(|exact| {
        let bounds = [(-5.7, 6.3), (-0.4 - 6.0 * 0.8f64.sqrt(), -0.4 + 6.0 * 0.8f64.sqrt())];
        grid_posterior(&PriorDescriptor::Gaussian(prior.clone()), &op, &m, &bounds, 401)
            .map(|g| (0..2).map(|i| (g.mean[i] - exact.mean[i]).abs()).fold(0.0, f64::max))
    });
    match result {
        Ok(gap) => check("oracle agreement", gap <= 1e-3, format!("max mean gap {gap:.2e}")),
        Err(e) => check("oracle agreement", false, e.to_string()),
    }
}

fn metric_units() -> Check {
    let x = vec![0.4; 25];
    let y: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
    let p = psnr(&x, &y, 1.0).unwrap_or(f64::NAN);
    let s = ssim(&x, &x, ImageShape::new(5, 5), 5, 1.0).unwrap_or(f64::NAN);
    check(
        "metric units",
        (p - 20.0).abs() <= 1e-9 && s == 1.0,
        format!("psnr {p} dB, ssim(x, x) {s}"),
    )
}

pub fn run_checks() -> Vec<Check> {
    vec![
        degeneracy_bounds(),
        resampling_frequencies(),
        pruning_counts(),
        gradient_fidelity(),
        oracle_agreement(),
        metric_units(),
    ]
}
