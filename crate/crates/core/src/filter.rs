//! Continuous filters as windowed 2D Fourier series.
//!
//! A filter is `phi(x) = sum_j c_j b_j(x)` where each basis function is a
//! sinusoid `cos(w.x)` or `sin(w.x)` with `w = pi k / R` for an integer
//! frequency pair `k` inside a disk, multiplied by the radial window
//! `(1 - |x|^2/R^2)^3`. The window is C2 and vanishes for `|x| >= R`, where
//! `R = (p+1)h/2` is the physical support radius. `R` is fixed at 1 so the
//! mesh is `h = 2/(p+1)`: changing the filter size refines the grid without
//! changing the continuous filter.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::cos_sin;

/// Physical support radius of every filter.
pub const SUPPORT_RADIUS: f64 = 1.0;

/// He-style gain `c` in the coefficient variance `c / (n_in p^2)`.
pub const INIT_GAIN: f64 = 2.0;

// sup over the unit disk of |grad w| for w(s) = (1-s)^3, s = |x|^2:
// |w'(s)| 2 sqrt(s) = 6 (1-s)^2 sqrt(s), maximal at s = 1/5.
const WINDOW_GRAD_SUP: f64 = 96.0 / (25.0 * 2.236_067_977_499_79);
// sup of the Frobenius norm of the window Hessian:
// 6 (1-s) sqrt((5s-1)^2 + (1-s)^2), maximal at s = 0.
const WINDOW_HESS_SUP: f64 = 6.0 * std::f64::consts::SQRT_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Cosine,
    Sine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BasisFunction {
    pub k1: i32,
    pub k2: i32,
    pub phase: Phase,
}

/// Upper bounds on `|phi|`, `||grad phi||` and the Frobenius norm of the
/// Hessian of a continuous function over the plane.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SmoothnessBounds {
    pub value: f64,
    pub gradient: f64,
    pub hessian: f64,
}

impl SmoothnessBounds {
    pub fn max(self, other: Self) -> Self {
        Self {
            value: self.value.max(other.value),
            gradient: self.gradient.max(other.gradient),
            hessian: self.hessian.max(other.hessian),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FourierBasis {
    filter_size: usize,
    mesh: f64,
    cutoff: usize,
    functions: Vec<BasisFunction>,
}

impl FourierBasis {
    /// Basis for `p x p` taps with all frequencies `|k| <= cutoff`.
    ///
    /// Frequencies are taken from a half plane (`k1 > 0`, or `k1 == 0` and
    /// `k2 >= 0`) since `k` and `-k` span the same pair of sinusoids; the
    /// zero frequency contributes only its cosine.
    pub fn new(filter_size: usize, cutoff: usize) -> Result<Self> {
        if filter_size == 0 || filter_size % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "filter size must be odd and positive, got {filter_size}"
            )));
        }
        if cutoff > (filter_size - 1) / 2 {
            return Err(Error::InvalidArgument(format!(
                "cutoff {cutoff} exceeds (p-1)/2 = {} for p = {filter_size}",
                (filter_size - 1) / 2
            )));
        }
        let kc = cutoff as i32;
        let mut functions = Vec::new();
        for k1 in 0..=kc {
            for k2 in -kc..=kc {
                if k1 * k1 + k2 * k2 > kc * kc || (k1 == 0 && k2 < 0) {
                    continue;
                }
                functions.push(BasisFunction {
                    k1,
                    k2,
                    phase: Phase::Cosine,
                });
                if k1 != 0 || k2 != 0 {
                    functions.push(BasisFunction {
                        k1,
                        k2,
                        phase: Phase::Sine,
                    });
                }
            }
        }
        Ok(Self {
            filter_size,
            mesh: 2.0 * SUPPORT_RADIUS / (filter_size as f64 + 1.0),
            cutoff,
            functions,
        })
    }

    pub fn filter_size(&self) -> usize {
        self.filter_size
    }

    pub fn mesh(&self) -> f64 {
        self.mesh
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn functions(&self) -> &[BasisFunction] {
        &self.functions
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    fn frequency(&self, j: usize) -> (f64, f64) {
        let b = self.functions[j];
        let scale = std::f64::consts::PI / SUPPORT_RADIUS;
        (scale * b.k1 as f64, scale * b.k2 as f64)
    }

    /// Value of basis function `j` at the physical point `(x, y)`.
    pub fn evaluate(&self, j: usize, x: f64, y: f64) -> f64 {
        let s = (x * x + y * y) / (SUPPORT_RADIUS * SUPPORT_RADIUS);
        if s >= 1.0 {
            return 0.0;
        }
        let (wx, wy) = self.frequency(j);
        let arg = wx * x + wy * y;
        let trig = match self.functions[j].phase {
            Phase::Cosine => arg.cos(),
            Phase::Sine => arg.sin(),
        };
        let u = 1.0 - s;
        trig * u * u * u
    }

    /// Analytic upper bounds on basis function `j` and its derivatives.
    pub fn function_bounds(&self, j: usize) -> SmoothnessBounds {
        let (wx, wy) = self.frequency(j);
        let omega = (wx * wx + wy * wy).sqrt();
        let r = SUPPORT_RADIUS;
        let wg = WINDOW_GRAD_SUP / r;
        let wh = WINDOW_HESS_SUP / (r * r);
        SmoothnessBounds {
            value: 1.0,
            gradient: omega + wg,
            hessian: omega * omega + 2.0 * omega * wg + wh,
        }
    }

    /// Physical coordinates of tap `(u, v)` (row, column).
    pub fn tap_position(&self, u: usize, v: usize) -> (f64, f64) {
        let r = (self.filter_size / 2) as f64;
        ((v as f64 - r) * self.mesh, (r - u as f64) * self.mesh)
    }

    /// Every basis function sampled on the tap grid rotated by `theta`:
    /// entry `[j * p^2 + u * p + v] = b_j(A(-theta) x_uv)`.
    pub fn sample_basis(&self, theta: f64) -> Vec<f64> {
        let p = self.filter_size;
        let (c, s) = cos_sin(theta);
        let mut out = vec![0.0; self.len() * p * p];
        for u in 0..p {
            for v in 0..p {
                let (x, y) = self.tap_position(u, v);
                let qx = c * x + s * y;
                let qy = -s * x + c * y;
                for j in 0..self.len() {
                    out[j * p * p + u * p + v] = self.evaluate(j, qx, qy);
                }
            }
        }
        out
    }
}

/// Combines sampled basis functions into taps, accumulating in basis order.
pub(crate) fn combine_taps(coefficients: &[f64], sampled: &[f64], taps: &mut [f64]) {
    let n = taps.len();
    taps.fill(0.0);
    for (j, &c) in coefficients.iter().enumerate() {
        for (t, b) in taps.iter_mut().zip(&sampled[j * n..(j + 1) * n]) {
            *t += c * b;
        }
    }
}

/// A continuous filter given by its Fourier coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamFilter {
    basis: Arc<FourierBasis>,
    coefficients: Vec<f64>,
}

impl ParamFilter {
    pub fn new(basis: Arc<FourierBasis>, coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() != basis.len() {
            return Err(Error::Shape(format!(
                "{} coefficients for a basis of size {}",
                coefficients.len(),
                basis.len()
            )));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(
                "non-finite filter coefficient".into(),
            ));
        }
        Ok(Self {
            basis,
            coefficients,
        })
    }

    pub fn zeros(basis: Arc<FourierBasis>) -> Self {
        let n = basis.len();
        Self {
            basis,
            coefficients: vec![0.0; n],
        }
    }

    /// Coefficients drawn i.i.d. from `N(0, INIT_GAIN / (fan_in p^2))`.
    pub fn random<R: Rng + ?Sized>(basis: Arc<FourierBasis>, fan_in: usize, rng: &mut R) -> Self {
        let p = basis.filter_size() as f64;
        let std = (INIT_GAIN / (fan_in.max(1) as f64 * p * p)).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let coefficients = (0..basis.len()).map(|_| normal.sample(rng)).collect();
        Self {
            basis,
            coefficients,
        }
    }

    pub fn basis(&self) -> &Arc<FourierBasis> {
        &self.basis
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn coefficients_mut(&mut self) -> &mut [f64] {
        &mut self.coefficients
    }

    /// `phi(x, y)`
    pub fn evaluate(&self, x: f64, y: f64) -> f64 {
        self.coefficients
            .iter()
            .enumerate()
            .map(|(j, c)| c * self.basis.evaluate(j, x, y))
            .sum()
    }

    /// The filter rotated by `theta`, evaluated at `(x, y)`.
    pub fn evaluate_rotated(&self, theta: f64, x: f64, y: f64) -> f64 {
        let (c, s) = cos_sin(theta);
        self.evaluate(c * x + s * y, -s * x + c * y)
    }

    /// `p x p` taps (row-major) of the filter rotated by `theta`.
    pub fn sample(&self, theta: f64) -> Vec<f64> {
        let p = self.basis.filter_size();
        let mut taps = vec![0.0; p * p];
        combine_taps(
            &self.coefficients,
            &self.basis.sample_basis(theta),
            &mut taps,
        );
        taps
    }

    /// Triangle-inequality bounds from the per-basis analytic bounds.
    pub fn bounds(&self) -> SmoothnessBounds {
        let mut out = SmoothnessBounds::default();
        for (j, c) in self.coefficients.iter().enumerate() {
            let b = self.basis.function_bounds(j);
            let a = c.abs();
            out.value += a * b.value;
            out.gradient += a * b.gradient;
            out.hessian += a * b.hessian;
        }
        out
    }
}

pub fn sample_filter(f: &ParamFilter, theta: f64) -> Vec<f64> {
    f.sample(theta)
}

pub fn filter_bounds(f: &ParamFilter) -> SmoothnessBounds {
    f.bounds()
}

/// Safety factor applied to finite-difference derivative estimates of a
/// discrete image.
pub const IMAGE_BOUND_SAFETY: f64 = 1.5;

/// Bounds on the latent continuous image behind `img`: the largest magnitude
/// for `F0`, and central-difference gradient and Hessian maxima (scaled by
/// the mesh) times [`IMAGE_BOUND_SAFETY`] for `G0` and `H0`. Only pixels with
/// both neighbours along an axis contribute to derivatives along it.
pub fn image_bounds(img: &crate::tensor::PlanarImage) -> SmoothnessBounds {
    let (hgt, wid, ch) = (img.height(), img.width(), img.channels());
    let h = img.mesh();
    let value = img.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut grad: f64 = 0.0;
    let mut hess: f64 = 0.0;
    for c in 0..ch {
        for y in 0..hgt {
            for x in 0..wid {
                let at = |yy: usize, xx: usize| img.get(yy, xx, c);
                let hx = x > 0 && x + 1 < wid;
                let hy = y > 0 && y + 1 < hgt;
                let gx = if hx {
                    (at(y, x + 1) - at(y, x - 1)) / (2.0 * h)
                } else {
                    0.0
                };
                let gy = if hy {
                    (at(y - 1, x) - at(y + 1, x)) / (2.0 * h)
                } else {
                    0.0
                };
                grad = grad.max((gx * gx + gy * gy).sqrt());
                let dxx = if hx {
                    (at(y, x + 1) - 2.0 * at(y, x) + at(y, x - 1)) / (h * h)
                } else {
                    0.0
                };
                let dyy = if hy {
                    (at(y + 1, x) - 2.0 * at(y, x) + at(y - 1, x)) / (h * h)
                } else {
                    0.0
                };
                let dxy = if hx && hy {
                    (at(y - 1, x + 1) - at(y - 1, x - 1) - at(y + 1, x + 1) + at(y + 1, x - 1))
                        / (4.0 * h * h)
                } else {
                    0.0
                };
                hess = hess.max((dxx * dxx + dyy * dyy + 2.0 * dxy * dxy).sqrt());
            }
        }
    }
    SmoothnessBounds {
        value,
        gradient: IMAGE_BOUND_SAFETY * grad,
        hessian: IMAGE_BOUND_SAFETY * hess,
    }
}
