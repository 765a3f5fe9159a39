//! ISTA over pluggable linear degradation models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::prox::ProxOperator;
use crate::tensor::PlanarImage;

/// Power-iteration steps used for the Lipschitz estimate.
pub const POWER_ITERATIONS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub enum DegradationOp {
    Identity,
    /// correlation with a `size x size` kernel (zero padding), then the
    /// upper-left sample of every `scale x scale` block
    BlurDownsample {
        kernel: Vec<f64>,
        size: usize,
        scale: usize,
    },
}

/// Normalised isotropic Gaussian kernel.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (u, v) = ((i / size) as f64 - c, (i % size) as f64 - c);
            (-(u * u + v * v) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Per-channel correlation with zero padding, optionally with the kernel
/// flipped in both axes.
fn blur(x: &PlanarImage, kernel: &[f64], size: usize, flipped: bool) -> PlanarImage {
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let r = (size / 2) as isize;
    let mut out = vec![0.0; x.data().len()];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let dst = ((i as usize) * w + j as usize) * c;
            for u in 0..size {
                let yy = i + u as isize - r;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for v in 0..size {
                    let xx = j + v as isize - r;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let k = if flipped {
                        kernel[(size - 1 - u) * size + (size - 1 - v)]
                    } else {
                        kernel[u * size + v]
                    };
                    let src = ((yy as usize) * w + xx as usize) * c;
                    for ch in 0..c {
                        out[dst + ch] += k * x.data()[src + ch];
                    }
                }
            }
        }
    }
    x.with_data(out).expect("same shape")
}

impl DegradationOp {
    pub fn blur_downsample(kernel: Vec<f64>, size: usize, scale: usize) -> Result<Self> {
        if size % 2 == 0 || kernel.len() != size * size {
            return Err(Error::InvalidArgument(format!(
                "kernel must be odd-sized and square, got {} values for size {size}",
                kernel.len()
            )));
        }
        if scale == 0 {
            return Err(Error::InvalidArgument("scale must be at least 1".into()));
        }
        if kernel.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "kernel has non-finite entries".into(),
            ));
        }
        Ok(Self::BlurDownsample {
            kernel,
            size,
            scale,
        })
    }

    pub fn scale(&self) -> usize {
        match self {
            Self::Identity => 1,
            Self::BlurDownsample { scale, .. } => *scale,
        }
    }

    fn check_divides(&self, h: usize, w: usize) -> Result<()> {
        let s = self.scale();
        if h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!("scale {s} does not divide {h}x{w}")));
        }
        Ok(())
    }

    pub fn apply(&self, x: &PlanarImage) -> Result<PlanarImage> {
        match self {
            Self::Identity => Ok(x.clone()),
            Self::BlurDownsample {
                kernel,
                size,
                scale,
            } => {
                self.check_divides(x.height(), x.width())?;
                let b = blur(x, kernel, *size, false);
                let (h, w, c) = (x.height() / scale, x.width() / scale, x.channels());
                Ok(PlanarImage::from_fn(
                    h,
                    w,
                    c,
                    x.mesh() * *scale as f64,
                    |i, j, k| b.get(i * scale, j * scale, k),
                ))
            }
        }
    }

    /// Exact transpose: zero-fill upsampling, then correlation with the
    /// flipped kernel.
    pub fn adjoint(&self, y: &PlanarImage) -> Result<PlanarImage> {
        match self {
            Self::Identity => Ok(y.clone()),
            Self::BlurDownsample {
                kernel,
                size,
                scale,
            } => {
                let (h, w, c) = (y.height() * scale, y.width() * scale, y.channels());
                let up = PlanarImage::from_fn(h, w, c, y.mesh() / *scale as f64, |i, j, k| {
                    if i % scale == 0 && j % scale == 0 {
                        y.get(i / scale, j / scale, k)
                    } else {
                        0.0
                    }
                });
                Ok(blur(&up, kernel, *size, true))
            }
        }
    }

    /// Estimate of `||A||^2` by power iteration on `A^T A` over inputs of the
    /// given shape.
    pub fn lipschitz(&self, height: usize, width: usize, channels: usize) -> Result<f64> {
        if *self == Self::Identity {
            return Ok(1.0);
        }
        self.check_divides(height, width)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut v = PlanarImage::from_fn(height, width, channels, 1.0, |_, _, _| {
            StandardNormal.sample(&mut rng)
        });
        let mut estimate = 0.0;
        for _ in 0..POWER_ITERATIONS {
            let n = v.norm();
            if n == 0.0 {
                return Ok(0.0);
            }
            v = v.map(|a| a / n);
            let next = self.adjoint(&self.apply(&v)?)?;
            estimate = next.dot(&v)?;
            v = next;
        }
        Ok(estimate)
    }
}

/// `A x` plus seeded Gaussian noise of standard deviation `noise_sigma`.
pub fn degrade(
    op: &DegradationOp,
    x: &PlanarImage,
    noise_sigma: f64,
    seed: u64,
) -> Result<PlanarImage> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be nonnegative, got {noise_sigma}"
        )));
    }
    let y = op.apply(x)?;
    if noise_sigma == 0.0 {
        return Ok(y);
    }
    let normal =
        Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(y.map(|v| v + normal.sample(&mut rng)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnfoldingConfig {
    pub steps: usize,
    pub step_size: f64,
    pub prox: ProxOperator,
    pub record_objective: bool,
}

impl UnfoldingConfig {
    /// Checks `0 < eta <= 1 / L_A` for inputs of the given shape.
    pub fn validate(
        &self,
        op: &DegradationOp,
        height: usize,
        width: usize,
        channels: usize,
    ) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "step size {} must be positive",
                self.step_size
            )));
        }
        let l = op.lipschitz(height, width, channels)?;
        if self.step_size * l > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "step size {} exceeds 1/L = {}",
                self.step_size,
                1.0 / l
            )));
        }
        Ok(())
    }
}

/// `1/2 |A x - y|^2`.
pub fn fidelity(op: &DegradationOp, x: &PlanarImage, y: &PlanarImage) -> Result<f64> {
    let r = op.apply(x)?.zip_map(y, |a, b| a - b)?;
    Ok(0.5 * r.norm_sq())
}

/// Fidelity plus `lambda R(x)` when the prox has a closed-form penalty.
pub fn objective(
    op: &DegradationOp,
    cfg: &UnfoldingConfig,
    x: &PlanarImage,
    y: &PlanarImage,
) -> Result<f64> {
    let f = fidelity(op, x, y)?;
    // the prox weight is eta * lambda
    Ok(f + cfg.prox.penalty(x).map_or(0.0, |p| p / cfg.step_size))
}

/// `prox(x - eta A^T (A x - y))`.
pub fn ista_step(
    x: &PlanarImage,
    y: &PlanarImage,
    op: &DegradationOp,
    cfg: &UnfoldingConfig,
) -> Result<PlanarImage> {
    let residual = op.apply(x)?.zip_map(y, |a, b| a - b)?;
    let g = op.adjoint(&residual)?;
    let eta = cfg.step_size;
    let moved = x.zip_map(&g, |a, b| a - eta * b)?;
    cfg.prox.apply(&moved)
}

/// Runs `cfg.steps` ISTA steps from `A^T y`. The trace holds `steps + 1`
/// objective values when recording is on.
pub fn ista_solve(
    y: &PlanarImage,
    op: &DegradationOp,
    cfg: &UnfoldingConfig,
) -> Result<(PlanarImage, Vec<f64>)> {
    let mut x = op.adjoint(y)?;
    cfg.validate(op, x.height(), x.width(), x.channels())?;
    let mut trace = Vec::new();
    if cfg.record_objective {
        trace.push(objective(op, cfg, &x, y)?);
    }
    for step in 1..=cfg.steps {
        x = ista_step(&x, y, op, cfg)?;
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step });
        }
        if cfg.record_objective {
            trace.push(objective(op, cfg, &x, y)?);
        }
    }
    Ok((x, trace))
}

/// Peak signal-to-noise ratio in dB; infinite for identical images.
pub fn psnr(estimate: &PlanarImage, truth: &PlanarImage, peak: f64) -> Result<f64> {
    let d = estimate.zip_map(truth, |a, b| a - b)?;
    let mse = d.norm_sq() / d.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> PlanarImage {
        PlanarImage::from_fn(h, w, 1, 1.0, |i, j, _| (i * w + j) as f64)
    }

    #[test]
    fn delta_kernel_decimates_upper_left() {
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let x = ramp(4, 6);
        let id = DegradationOp::blur_downsample(k.clone(), 3, 1).unwrap();
        assert_eq!(degrade(&id, &x, 0.0, 0).unwrap(), x);
        let s2 = DegradationOp::blur_downsample(k, 3, 2).unwrap();
        let y = s2.apply(&x).unwrap();
        assert_eq!((y.height(), y.width()), (2, 3));
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(y.get(i, j, 0), x.get(2 * i, 2 * j, 0));
            }
        }
    }

    #[test]
    fn scale_must_divide() {
        let op = DegradationOp::blur_downsample(gaussian_kernel(3, 1.0), 3, 3).unwrap();
        assert!(matches!(op.apply(&ramp(4, 6)), Err(Error::Shape(_))));
        assert!(DegradationOp::blur_downsample(vec![1.0; 4], 2, 1).is_err());
    }

    #[test]
    fn identity_step_from_anywhere_lands_on_y() {
        let cfg = UnfoldingConfig {
            steps: 1,
            step_size: 1.0,
            prox: ProxOperator::soft_threshold(0.0).unwrap(),
            record_objective: true,
        };
        let y = ramp(3, 3);
        let x = ista_step(
            &PlanarImage::zeros(3, 3, 1, 1.0),
            &y,
            &DegradationOp::Identity,
            &cfg,
        )
        .unwrap();
        assert_eq!(x, y);
        let (x, trace) = ista_solve(
            &y,
            &DegradationOp::Identity,
            &UnfoldingConfig { steps: 0, ..cfg },
        )
        .unwrap();
        assert_eq!(x, y);
        assert_eq!(trace.len(), 1);
    }

    #[test]
    fn step_size_above_inverse_lipschitz_is_rejected() {
        let cfg = UnfoldingConfig {
            steps: 1,
            step_size: 1.5,
            prox: ProxOperator::soft_threshold(0.0).unwrap(),
            record_objective: false,
        };
        assert!(cfg.validate(&DegradationOp::Identity, 4, 4, 1).is_err());
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let x = ramp(2, 2);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
    }
}
