//! Proximal operators: soft thresholding, anisotropic total variation and
//! the learned equivariant proximal network.

use crate::conv::{ActShape, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{relative_difference, rotate_image, PlanarImage};

/// Dual step of the TV solver.
pub const TV_DUAL_STEP: f64 = 1.0 / 8.0;

#[derive(Clone, Debug, PartialEq)]
pub enum ProxOperator {
    /// soft thresholding with weight `lambda * eta`
    SoftThreshold(f64),
    TvProx {
        weight: f64,
        tol: f64,
        max_iter: usize,
    },
    /// identity plus the network's correction
    NeuralProx(NetworkSpec),
}

impl ProxOperator {
    pub fn soft_threshold(weight: f64) -> Result<Self> {
        check_weight(weight)?;
        Ok(Self::SoftThreshold(weight))
    }

    pub fn tv(weight: f64, tol: f64, max_iter: usize) -> Result<Self> {
        check_weight(weight)?;
        if !(tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "TV tolerance must be positive, got {tol}"
            )));
        }
        Ok(Self::TvProx {
            weight,
            tol,
            max_iter,
        })
    }

    /// Rejects networks whose output shape differs from their input shape.
    pub fn neural(net: NetworkSpec) -> Result<Self> {
        match net.output_shape() {
            ActShape::Planar { channels } if channels == net.input_channels() => {
                Ok(Self::NeuralProx(net))
            }
            other => Err(Error::Shape(format!(
                "proximal network maps {} channels to {other:?}",
                net.input_channels()
            ))),
        }
    }

    pub fn apply(&self, x: &PlanarImage) -> Result<PlanarImage> {
        match self {
            Self::SoftThreshold(w) => Ok(soft_threshold(x, *w)),
            Self::TvProx {
                weight,
                tol,
                max_iter,
            } => Ok(tv_prox(x, *weight, *tol, *max_iter)?.image),
            Self::NeuralProx(net) => neural_prox(x, net),
        }
    }

    /// `w * R(x)` for the closed-form regularisers, `None` for networks.
    pub fn penalty(&self, x: &PlanarImage) -> Option<f64> {
        match self {
            Self::SoftThreshold(w) => Some(w * x.data().iter().map(|v| v.abs()).sum::<f64>()),
            Self::TvProx { weight, .. } => Some(weight * anisotropic_tv(x)),
            Self::NeuralProx(_) => None,
        }
    }

    /// Border excluded by equivariance checks.
    pub fn crop(&self) -> usize {
        match self {
            Self::NeuralProx(net) => net.receptive_radius(),
            _ => 0,
        }
    }
}

fn check_weight(w: f64) -> Result<()> {
    if w >= 0.0 && w.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "prox weight must be finite and nonnegative, got {w}"
        )))
    }
}

pub fn soft_threshold(x: &PlanarImage, w: f64) -> PlanarImage {
    if w == 0.0 {
        return x.clone();
    }
    x.map(|v| v.signum() * (v.abs() - w).max(0.0))
}

/// Sum of absolute horizontal and vertical forward differences, per channel.
pub fn anisotropic_tv(x: &PlanarImage) -> f64 {
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let d = x.data();
    let mut s = 0.0;
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                let v = d[(i * w + j) * c + k];
                if j + 1 < w {
                    s += (d[(i * w + j + 1) * c + k] - v).abs();
                }
                if i + 1 < h {
                    s += (d[((i + 1) * w + j) * c + k] - v).abs();
                }
            }
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct TvProxResult {
    pub image: PlanarImage,
    pub converged: bool,
    pub iterations: usize,
}

/// `D u` with forward differences, zero across the last row and column.
/// Layout `[pixel][channel][axis]`, axis 0 horizontal.
fn grad(u: &[f64], h: usize, w: usize, c: usize, out: &mut [f64]) {
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                let at = (i * w + j) * c + k;
                let v = u[at];
                out[2 * at] = if j + 1 < w { u[at + c] - v } else { 0.0 };
                out[2 * at + 1] = if i + 1 < h { u[at + w * c] - v } else { 0.0 };
            }
        }
    }
}

/// `D^T q`.
fn grad_adjoint(q: &[f64], h: usize, w: usize, c: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                let at = (i * w + j) * c + k;
                let (qx, qy) = (q[2 * at], q[2 * at + 1]);
                if j + 1 < w {
                    out[at + c] += qx;
                    out[at] -= qx;
                }
                if i + 1 < h {
                    out[at + w * c] += qy;
                    out[at] -= qy;
                }
            }
        }
    }
}

/// Minimises `1/2 |u - x|^2 + w TV_aniso(u)` by projected gradient on the
/// dual `u = x - D^T q`, `|q| <= w`. Stops when the largest dual update is
/// below `tol`; returns the iterate with the lowest primal objective.
pub fn tv_prox(x: &PlanarImage, w: f64, tol: f64, max_iter: usize) -> Result<TvProxResult> {
    check_weight(w)?;
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "TV tolerance must be positive, got {tol}"
        )));
    }
    if w == 0.0 {
        return Ok(TvProxResult {
            image: x.clone(),
            converged: true,
            iterations: 0,
        });
    }
    let (h, wd, c) = (x.height(), x.width(), x.channels());
    let n = x.data().len();
    let objective = |u: &[f64]| {
        let img = x.with_data(u.to_vec()).expect("same shape");
        0.5 * u
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            + w * anisotropic_tv(&img)
    };
    let mut q = vec![0.0; 2 * n];
    let mut g = vec![0.0; 2 * n];
    let mut dtq = vec![0.0; n];
    let mut u = x.data().to_vec();
    let mut best = u.clone();
    let mut best_obj = objective(&u);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        grad(&u, h, wd, c, &mut g);
        let mut change: f64 = 0.0;
        for (qi, gi) in q.iter_mut().zip(&g) {
            let next = (*qi + TV_DUAL_STEP * gi).clamp(-w, w);
            change = change.max((next - *qi).abs());
            *qi = next;
        }
        grad_adjoint(&q, h, wd, c, &mut dtq);
        for ((ui, xi), di) in u.iter_mut().zip(x.data()).zip(&dtq) {
            *ui = xi - di;
        }
        let obj = objective(&u);
        if obj <= best_obj {
            best_obj = obj;
            best.copy_from_slice(&u);
        }
        if change < tol {
            converged = true;
            break;
        }
    }
    Ok(TvProxResult {
        image: x.with_data(best)?,
        converged,
        iterations,
    })
}

/// `x + net(x)`.
pub fn neural_prox(x: &PlanarImage, net: &NetworkSpec) -> Result<PlanarImage> {
    let correction = net.forward(x)?;
    x.zip_map(&correction, |a, b| a + b)
}

/// `relative_difference(p(rotate(x)), rotate(p(x)))` cropped by the
/// operator's border.
pub fn check_prox_equivariance(p: &ProxOperator, x: &PlanarImage, theta: f64) -> Result<f64> {
    let lhs = p.apply(&rotate_image(x, theta)?)?;
    let rhs = rotate_image(&p.apply(x)?, theta)?;
    relative_difference(&lhs, &rhs, p.crop())
}
