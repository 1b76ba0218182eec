//! Reconstruction quality metrics.
//!
//! LPIPS needs a pretrained network and is not provided; reports carry
//! `l2_error` and `residual_sq` instead and say so.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, PfldError, Result};
use crate::operators::ImageShape;

/// Returned when the mean squared error is below [`PSNR_MSE_FLOOR`].
pub const PSNR_CAP_DB: f64 = 200.0;
pub const PSNR_MSE_FLOOR: f64 = 1e-20;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Name of the metric standing in for LPIPS in reports.
pub const PERCEPTUAL_SUBSTITUTE: &str = "l2_error";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub l2_error: f64,
    pub residual_sq: f64,
}

impl MetricReport {
    /// All metrics of `estimate` against `reference`; SSIM uses [`fitted_window`].
    pub fn compute(
        reference: &[f64],
        estimate: &[f64],
        shape: ImageShape,
        max_value: f64,
        residual_sq: f64,
    ) -> Result<Self> {
        Ok(Self {
            psnr: psnr(reference, estimate, max_value)?,
            ssim: ssim(reference, estimate, shape, fitted_window(shape), max_value)?,
            l2_error: l2_error(reference, estimate)?,
            residual_sq,
        })
    }
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim("metric inputs", a.len(), b.len())?;
    if a.is_empty() {
        return Err(PfldError::invalid("metrics need non-empty inputs"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// Euclidean distance.
pub fn l2_error(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok((mse(a, b)? * a.len() as f64).sqrt())
}

/// `10 log10(max^2 / MSE)`, capped at 200 dB.
pub fn psnr(reference: &[f64], estimate: &[f64], max_value: f64) -> Result<f64> {
    if !(max_value > 0.0 && max_value.is_finite()) {
        return Err(PfldError::invalid("psnr max_value must be positive"));
    }
    let e = mse(reference, estimate)?;
    if e < PSNR_MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (max_value * max_value / e).log10())
}

/// Standard window shrunk to the largest odd size the image admits.
/// Single-row images use a one-dimensional window along the row.
pub fn fitted_window(shape: ImageShape) -> usize {
    let side = if shape.height == 1 {
        shape.width
    } else {
        shape.height.min(shape.width)
    };
    let odd = if side % 2 == 1 { side } else { side.saturating_sub(1) };
    SSIM_WINDOW.min(odd.max(1))
}

fn gaussian_taps(size: usize) -> Vec<f64> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Mean local SSIM over all fully contained windows.
pub fn ssim(
    reference: &[f64],
    estimate: &[f64],
    shape: ImageShape,
    window: usize,
    max_value: f64,
) -> Result<f64> {
    check_dim("ssim reference", shape.len(), reference.len())?;
    check_dim("ssim estimate", shape.len(), estimate.len())?;
    if window == 0 || window % 2 == 0 {
        return Err(PfldError::invalid("ssim window must be odd"));
    }
    if !(max_value > 0.0 && max_value.is_finite()) {
        return Err(PfldError::invalid("ssim max_value must be positive"));
    }
    let one_d = shape.height == 1;
    let win_h = if one_d { 1 } else { window };
    if shape.width < window || shape.height < win_h {
        return Err(PfldError::invalid(format!(
            "image {}x{} is smaller than the {window}-wide window",
            shape.height, shape.width
        )));
    }
    let taps = gaussian_taps(window);
    let row_taps = if one_d { vec![1.0] } else { taps.clone() };
    let c1 = (0.01 * max_value).powi(2);
    let c2 = (0.03 * max_value).powi(2);
    let at = |v: &[f64], r: usize, c: usize| v[r * shape.width + c];

    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=(shape.height - win_h) {
        for c0 in 0..=(shape.width - window) {
            let (mut mx, mut my) = (0.0, 0.0);
            for (i, wr) in row_taps.iter().enumerate() {
                for (j, wc) in taps.iter().enumerate() {
                    let w = wr * wc;
                    mx += w * at(reference, r0 + i, c0 + j);
                    my += w * at(estimate, r0 + i, c0 + j);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for (i, wr) in row_taps.iter().enumerate() {
                for (j, wc) in taps.iter().enumerate() {
                    let w = wr * wc;
                    let dx = at(reference, r0 + i, c0 + j) - mx;
                    let dy = at(estimate, r0 + i, c0 + j) - my;
                    vx += w * dx * dx;
                    vy += w * dy * dy;
                    cxy += w * dx * dy;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal_vec, stream, Purpose};
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn psnr_examples() {
        let x = vec![0.3; 16];
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP_DB);
        let y: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&x, &y, 1.0).unwrap() - 20.0).abs() <= 1e-9);
        let y: Vec<f64> = x.iter().map(|v| v + 0.01).collect();
        assert!((psnr(&x, &y, 1.0).unwrap() - 40.0).abs() <= 1e-9);
        assert!(psnr(&x, &y[..3], 1.0).is_err());
        assert!(psnr(&x, &y, 0.0).is_err());
    }

    #[test]
    fn psnr_symmetric_and_monotone() {
        let mut rng = stream(1, Purpose::Truth, &[]);
        let a = standard_normal_vec(&mut rng, 32);
        let b = standard_normal_vec(&mut rng, 32);
        assert_eq!(psnr(&a, &b, 2.0).unwrap(), psnr(&b, &a, 2.0).unwrap());
        let mut prev = f64::INFINITY;
        for k in 1..20 {
            let c: Vec<f64> = a.iter().map(|v| v + 0.05 * k as f64).collect();
            let p = psnr(&a, &c, 1.0).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn ssim_identity_and_bounds() {
        let mut rng = stream(2, Purpose::Truth, &[]);
        let shape = ImageShape::new(12, 14);
        for _ in 0..1000 {
            let a: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert_eq!(ssim(&a, &a, shape, 11, 1.0).unwrap(), 1.0);
            let s = ssim(&a, &b, shape, 11, 1.0).unwrap();
            assert!(s.abs() <= 1.0);
        }
    }

    #[test]
    fn ssim_heavy_noise_is_low() {
        let mut rng = stream(3, Purpose::Truth, &[]);
        let shape = ImageShape::new(32, 32);
        let x: Vec<f64> = (0..shape.len())
            .map(|k| 0.5 + 0.1 * ((k % 32) as f64 / 5.0).sin())
            .collect();
        let noise = standard_normal_vec(&mut rng, shape.len());
        let y: Vec<f64> = x.iter().zip(noise).map(|(a, n)| a + 2.0 * n).collect();
        assert!(ssim(&x, &y, shape, 11, 1.0).unwrap() < 0.2);
    }

    /// Scalar SSIM written from raw moments over an explicit window list.
    fn naive_ssim(x: &[f64], y: &[f64], h: usize, w: usize, win: usize, max: f64) -> f64 {
        let g: Vec<f64> = (0..win)
            .map(|i| (-((i as f64 - (win / 2) as f64).powi(2)) / 4.5).exp())
            .collect();
        let gs: f64 = g.iter().sum();
        let mut vals = Vec::new();
        for r in 0..=h - win {
            for c in 0..=w - win {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..win {
                    for j in 0..win {
                        let wt = g[i] * g[j] / (gs * gs);
                        let a = x[(r + i) * w + c + j];
                        let b = y[(r + i) * w + c + j];
                        sx += wt * a;
                        sy += wt * b;
                        sxx += wt * a * a;
                        syy += wt * b * b;
                        sxy += wt * a * b;
                    }
                }
                let c1 = (0.01 * max) * (0.01 * max);
                let c2 = (0.03 * max) * (0.03 * max);
                let l = (2.0 * sx * sy + c1) / (sx * sx + sy * sy + c1);
                let cs = (2.0 * (sxy - sx * sy) + c2) / ((sxx - sx * sx) + (syy - sy * sy) + c2);
                vals.push(l * cs);
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn ssim_matches_scalar_reimplementation_on_toys() {
        let mut rng = stream(4, Purpose::Truth, &[]);
        let shape = ImageShape::new(5, 5);
        for _ in 0..50 {
            let x: Vec<f64> = (0..25).map(|_| rng.random::<f64>()).collect();
            let a = rng.random_range(0.2..2.0);
            let b = rng.random_range(-0.5..0.5);
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            for win in [3, 5] {
                let got = ssim(&x, &y, shape, win, 1.0).unwrap();
                assert_relative_eq!(got, naive_ssim(&x, &y, 5, 5, win, 1.0), epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn ssim_one_dimensional_and_window_fit() {
        let x = [0.1, 0.5, 0.9, 0.3, 0.2];
        let shape = ImageShape::line(5);
        assert_eq!(ssim(&x, &x, shape, 5, 1.0).unwrap(), 1.0);
        assert!(ssim(&x, &x, shape, 7, 1.0).is_err());
        assert!(ssim(&x, &x, shape, 4, 1.0).is_err());
        assert_eq!(fitted_window(ImageShape::line(2)), 1);
        assert_eq!(fitted_window(ImageShape::line(5)), 5);
        assert_eq!(fitted_window(ImageShape::new(8, 8)), 7);
        assert_eq!(fitted_window(ImageShape::new(64, 64)), 11);
        let r = MetricReport::compute(&[1.0, 2.0], &[1.0, 2.0], ImageShape::line(2), 1.0, 0.0).unwrap();
        assert_eq!(r.ssim, 1.0);
        assert_eq!(r.l2_error, 0.0);
    }
}
