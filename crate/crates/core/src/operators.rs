//! Matrix-free forward operators, measurement synthesis and the latent codec.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, PfldError, Result};
use crate::rng::standard_normal_vec;

/// A linear map given only through its action and the action of its adjoint.
pub trait LinearMap: Send + Sync {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn adjoint(&self, u: &[f64]) -> Result<Vec<f64>>;
}

/// Row-major image geometry. One-dimensional signals use `height = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn line(len: usize) -> Self {
        Self::new(1, len)
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Odd-sized correlation stencil, normalized to unit sum.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
}

impl BlurKernel {
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>) -> Result<Self> {
        if rows % 2 == 0 || cols % 2 == 0 {
            return Err(PfldError::invalid("blur kernel sides must be odd"));
        }
        check_dim("blur kernel", rows * cols, weights.len())?;
        check_finite("blur kernel", &weights)?;
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(PfldError::invalid("blur kernel must have positive sum"));
        }
        let weights = weights.into_iter().map(|w| w / sum).collect();
        Ok(Self { rows, cols, weights })
    }

    pub fn horizontal(taps: &[f64]) -> Result<Self> {
        Self::new(1, taps.len(), taps.to_vec())
    }

    /// Sampled Gaussian of the given width; square when `two_d`, else a single row.
    pub fn gaussian(sigma: f64, width: usize, two_d: bool) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(PfldError::invalid("gaussian blur sigma must be positive"));
        }
        if width % 2 == 0 {
            return Err(PfldError::invalid("gaussian blur width must be odd"));
        }
        let c = (width / 2) as f64;
        let taps: Vec<f64> = (0..width)
            .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
            .collect();
        if two_d {
            let w = taps
                .iter()
                .flat_map(|a| taps.iter().map(move |b| a * b))
                .collect();
            Self::new(width, width, w)
        } else {
            Self::horizontal(&taps)
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(idx: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = idx.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorKind {
    Identity,
    /// `keep[i]` marks observed pixels; unobserved pixels map to zero.
    Mask { keep: Vec<bool> },
    Blur { kernel: BlurKernel },
    /// Block average over `factor` pixels along each axis longer than one.
    Downsample { factor: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearOperator {
    shape: ImageShape,
    kind: OperatorKind,
}

impl LinearOperator {
    pub fn identity(n: usize) -> Self {
        Self {
            shape: ImageShape::line(n),
            kind: OperatorKind::Identity,
        }
    }

    pub fn mask(shape: ImageShape, keep: Vec<bool>) -> Result<Self> {
        check_dim("mask", shape.len(), keep.len())?;
        Ok(Self {
            shape,
            kind: OperatorKind::Mask { keep },
        })
    }

    /// Mask observing only the listed pixel indices.
    pub fn mask_observing(shape: ImageShape, observed: &[usize]) -> Result<Self> {
        let mut keep = vec![false; shape.len()];
        for &i in observed {
            if i >= shape.len() {
                return Err(PfldError::invalid(format!(
                    "observed index {i} outside image of {} pixels",
                    shape.len()
                )));
            }
            keep[i] = true;
        }
        Self::mask(shape, keep)
    }

    /// Mask that hides a rectangular hole and observes everything else.
    pub fn mask_hole(
        shape: ImageShape,
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if row + height > shape.height || col + width > shape.width {
            return Err(PfldError::invalid("mask hole exceeds image bounds"));
        }
        let mut keep = vec![true; shape.len()];
        for r in row..row + height {
            for c in col..col + width {
                keep[r * shape.width + c] = false;
            }
        }
        Self::mask(shape, keep)
    }

    pub fn blur(shape: ImageShape, kernel: BlurKernel) -> Result<Self> {
        if shape.is_empty() {
            return Err(PfldError::invalid("blur needs a non-empty image"));
        }
        if kernel.rows > 1 && shape.height == 1 {
            return Err(PfldError::invalid("2-D blur kernel on a 1-D signal"));
        }
        Ok(Self {
            shape,
            kind: OperatorKind::Blur { kernel },
        })
    }

    pub fn downsample(shape: ImageShape, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(PfldError::invalid("downsample factor must be positive"));
        }
        let ok_w = shape.width % factor == 0;
        let ok_h = shape.height == 1 || shape.height % factor == 0;
        if !ok_w || !ok_h {
            return Err(PfldError::invalid(format!(
                "downsample factor {factor} does not divide image {}x{}",
                shape.height, shape.width
            )));
        }
        Ok(Self {
            shape,
            kind: OperatorKind::Downsample { factor },
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            OperatorKind::Identity => "identity",
            OperatorKind::Mask { .. } => "mask",
            OperatorKind::Blur { .. } => "blur",
            OperatorKind::Downsample { .. } => "downsample",
        }
    }

    /// True when `A^T A` is an orthogonal projector (identity and masks).
    pub fn is_projector(&self) -> bool {
        matches!(self.kind, OperatorKind::Identity | OperatorKind::Mask { .. })
    }

    fn down_axes(&self, factor: usize) -> (usize, usize) {
        let fh = if self.shape.height == 1 { 1 } else { factor };
        (fh, factor)
    }

    fn blur_apply(&self, kernel: &BlurKernel, x: &[f64], transpose: bool) -> Vec<f64> {
        let ImageShape { height, width } = self.shape;
        let (cr, cc) = ((kernel.rows / 2) as isize, (kernel.cols / 2) as isize);
        let mut out = vec![0.0; height * width];
        for r in 0..height {
            for c in 0..width {
                let o = r * width + c;
                for i in 0..kernel.rows {
                    let rr = reflect(r as isize + i as isize - cr, height);
                    for j in 0..kernel.cols {
                        let k = kernel.weights[i * kernel.cols + j];
                        let cc2 = reflect(c as isize + j as isize - cc, width);
                        let src = rr * width + cc2;
                        if transpose {
                            out[src] += k * x[o];
                        } else {
                            out[o] += k * x[src];
                        }
                    }
                }
            }
        }
        out
    }
}

impl LinearMap for LinearOperator {
    fn in_dim(&self) -> usize {
        self.shape.len()
    }

    fn out_dim(&self) -> usize {
        match &self.kind {
            OperatorKind::Downsample { factor } => {
                let (fh, fw) = self.down_axes(*factor);
                (self.shape.height / fh) * (self.shape.width / fw)
            }
            _ => self.shape.len(),
        }
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("operator input", self.in_dim(), x.len())?;
        Ok(match &self.kind {
            OperatorKind::Identity => x.to_vec(),
            OperatorKind::Mask { keep } => x
                .iter()
                .zip(keep)
                .map(|(v, &k)| if k { *v } else { 0.0 })
                .collect(),
            OperatorKind::Blur { kernel } => self.blur_apply(kernel, x, false),
            OperatorKind::Downsample { factor } => {
                let (fh, fw) = self.down_axes(*factor);
                let (oh, ow) = (self.shape.height / fh, self.shape.width / fw);
                let scale = 1.0 / (fh * fw) as f64;
                let mut out = vec![0.0; oh * ow];
                for r in 0..self.shape.height {
                    for c in 0..self.shape.width {
                        out[(r / fh) * ow + c / fw] += scale * x[r * self.shape.width + c];
                    }
                }
                out
            }
        })
    }

    fn adjoint(&self, u: &[f64]) -> Result<Vec<f64>> {
        check_dim("operator adjoint input", self.out_dim(), u.len())?;
        Ok(match &self.kind {
            OperatorKind::Identity | OperatorKind::Mask { .. } => self.apply(u)?,
            OperatorKind::Blur { kernel } => self.blur_apply(kernel, u, true),
            OperatorKind::Downsample { factor } => {
                let (fh, fw) = self.down_axes(*factor);
                let ow = self.shape.width / fw;
                let scale = 1.0 / (fh * fw) as f64;
                let mut out = vec![0.0; self.shape.len()];
                for r in 0..self.shape.height {
                    for c in 0..self.shape.width {
                        out[r * self.shape.width + c] = scale * u[(r / fh) * ow + c / fw];
                    }
                }
                out
            }
        })
    }
}

/// Encoder/decoder pair between pixel space and latent space.
#[derive(Debug, Clone, PartialEq)]
pub enum Codec {
    Identity { dim: usize },
    /// `decode(z) = W z`, `encode(x) = pinv(W) x`.
    Linear {
        decoder: DMatrix<f64>,
        encoder: DMatrix<f64>,
    },
}

impl Codec {
    pub fn identity(dim: usize) -> Self {
        Codec::Identity { dim }
    }

    /// Linear codec from a full-column-rank decoder matrix (pixels x latents).
    pub fn linear(decoder: DMatrix<f64>) -> Result<Self> {
        if decoder.nrows() < decoder.ncols() {
            return Err(PfldError::invalid(
                "decoder must map to at least as many pixels as latents",
            ));
        }
        let encoder = decoder
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|e| PfldError::Numerical(e.to_string()))?;
        let codec = Codec::Linear { decoder, encoder };
        // Rank-deficient decoders have no left inverse.
        let k = codec.latent_dim();
        let probe = DMatrix::<f64>::identity(k, k);
        if let Codec::Linear { decoder, encoder } = &codec {
            let err = (encoder * decoder - probe).abs().max();
            if err > 1e-8 {
                return Err(PfldError::invalid("decoder is rank deficient"));
            }
        }
        Ok(codec)
    }

    /// Random decoder with orthonormal columns.
    pub fn orthonormal<R: Rng + ?Sized>(pixels: usize, latents: usize, rng: &mut R) -> Result<Self> {
        if latents == 0 || latents > pixels {
            return Err(PfldError::invalid("orthonormal codec needs 0 < latents <= pixels"));
        }
        let g = DMatrix::from_vec(pixels, latents, standard_normal_vec(rng, pixels * latents));
        let q = g.qr().q();
        Self::linear(q.columns(0, latents).into_owned())
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Codec::Identity { dim } => *dim,
            Codec::Linear { decoder, .. } => decoder.ncols(),
        }
    }

    pub fn pixel_dim(&self) -> usize {
        match self {
            Codec::Identity { dim } => *dim,
            Codec::Linear { decoder, .. } => decoder.nrows(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Codec::Identity { .. } => "identity",
            Codec::Linear { .. } => "linear",
        }
    }

    fn matvec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
        (m * nalgebra::DVector::from_column_slice(v)).as_slice().to_vec()
    }

    fn tr_matvec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
        m.tr_mul(&nalgebra::DVector::from_column_slice(v))
            .as_slice()
            .to_vec()
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim("decode input", self.latent_dim(), z.len())?;
        Ok(match self {
            Codec::Identity { .. } => z.to_vec(),
            Codec::Linear { decoder, .. } => Self::matvec(decoder, z),
        })
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("encode input", self.pixel_dim(), x.len())?;
        Ok(match self {
            Codec::Identity { .. } => x.to_vec(),
            Codec::Linear { encoder, .. } => Self::matvec(encoder, x),
        })
    }

    pub fn decode_adjoint(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("decode adjoint input", self.pixel_dim(), x.len())?;
        Ok(match self {
            Codec::Identity { .. } => x.to_vec(),
            Codec::Linear { decoder, .. } => Self::tr_matvec(decoder, x),
        })
    }

    pub fn encode_adjoint(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim("encode adjoint input", self.latent_dim(), z.len())?;
        Ok(match self {
            Codec::Identity { .. } => z.to_vec(),
            Codec::Linear { encoder, .. } => Self::tr_matvec(encoder, z),
        })
    }
}

/// `A` composed after the decoder, as a map on latents.
pub struct DecodedOperator<'a> {
    pub operator: &'a LinearOperator,
    pub codec: &'a Codec,
}

impl LinearMap for DecodedOperator<'_> {
    fn in_dim(&self) -> usize {
        self.codec.latent_dim()
    }

    fn out_dim(&self) -> usize {
        self.operator.out_dim()
    }

    fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.operator.apply(&self.codec.decode(z)?)
    }

    fn adjoint(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.codec.decode_adjoint(&self.operator.adjoint(u)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub y: Vec<f64>,
    pub sigma_nu: f64,
    /// Name of the operator kind that produced `y`.
    pub operator: String,
}

/// `y = A x* + sigma_nu * eps` with `eps` drawn from `rng`.
pub fn make_measurement<R: Rng + ?Sized>(
    op: &LinearOperator,
    x_star: &[f64],
    sigma_nu: f64,
    rng: &mut R,
) -> Result<Measurement> {
    if !(sigma_nu >= 0.0 && sigma_nu.is_finite()) {
        return Err(PfldError::invalid("sigma_nu must be finite and non-negative"));
    }
    check_finite("true signal", x_star)?;
    let mut y = op.apply(x_star)?;
    let eps = standard_normal_vec(rng, y.len());
    for (yi, e) in y.iter_mut().zip(eps) {
        *yi += sigma_nu * e;
    }
    Ok(Measurement {
        y,
        sigma_nu,
        operator: op.name().to_string(),
    })
}

/// `||y - A(D(z_hat0))||^2`.
pub fn residual_norm_sq(
    m: &Measurement,
    op: &LinearOperator,
    codec: &Codec,
    z_hat0: &[f64],
) -> Result<f64> {
    let pred = op.apply(&codec.decode(z_hat0)?)?;
    check_dim("measurement", pred.len(), m.y.len())?;
    let r: f64 = pred.iter().zip(&m.y).map(|(p, y)| (y - p).powi(2)).sum();
    if r.is_finite() {
        Ok(r)
    } else {
        Err(PfldError::NonFinite("measurement residual".into()))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
