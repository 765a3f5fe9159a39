//! Seeded synthetic test scenes: sums of oriented Gabor patches confined to
//! a disk, so rotations about the centre never move content across the
//! image border.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::PlanarImage;

#[derive(Clone, Debug, PartialEq)]
pub struct GaborPatch {
    pub center: (f64, f64),
    pub sigma: f64,
    pub wavelength: f64,
    pub orientation: f64,
    pub phase: f64,
    pub amplitude: f64,
}

impl GaborPatch {
    pub fn evaluate(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        let env = (-(dx * dx + dy * dy) / (2.0 * self.sigma * self.sigma)).exp();
        let along = dx * self.orientation.cos() + dy * self.orientation.sin();
        self.amplitude * env * (2.0 * PI * along / self.wavelength + self.phase).cos()
    }
}

/// A continuous image: Gabor patches times a C2 window `(1 - r^2/R^2)^3`
/// that vanishes outside radius `R`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaborScene {
    pub window_radius: f64,
    pub patches: Vec<GaborPatch>,
}

impl GaborScene {
    /// Random scene scaled to an image of physical half-extent `half_extent`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, half_extent: f64) -> Self {
        Self::random_scaled(rng, half_extent, 1.0)
    }

    /// As [`GaborScene::random`] with wavelengths multiplied by
    /// `feature_scale` and envelope widths by its square root.
    pub fn random_scaled<R: Rng + ?Sized>(
        rng: &mut R,
        half_extent: f64,
        feature_scale: f64,
    ) -> Self {
        let stretch = feature_scale.sqrt();
        let n = rng.random_range(4..=6);
        let patches = (0..n)
            .map(|_| {
                let r = 0.5 * half_extent * rng.random::<f64>().sqrt();
                let a = rng.random_range(0.0..2.0 * PI);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                GaborPatch {
                    center: (r * a.cos(), r * a.sin()),
                    sigma: stretch * half_extent * rng.random_range(0.12..0.22),
                    wavelength: feature_scale * half_extent * rng.random_range(0.3..0.6),
                    orientation: rng.random_range(0.0..PI),
                    phase: rng.random_range(0.0..2.0 * PI),
                    amplitude: sign * rng.random_range(0.3..1.0),
                }
            })
            .collect();
        Self {
            window_radius: 0.9 * half_extent,
            patches,
        }
    }

    pub fn evaluate(&self, x: f64, y: f64) -> f64 {
        let s = (x * x + y * y) / (self.window_radius * self.window_radius);
        if s >= 1.0 {
            return 0.0;
        }
        let w = (1.0 - s).powi(3);
        w * self.patches.iter().map(|p| p.evaluate(x, y)).sum::<f64>()
    }

    /// Samples the scene on a centred `height x width` grid of spacing `mesh`.
    pub fn render(&self, height: usize, width: usize, mesh: f64) -> PlanarImage {
        let cy = (height as f64 - 1.0) / 2.0;
        let cx = (width as f64 - 1.0) / 2.0;
        PlanarImage::from_fn(height, width, 1, mesh, |i, j, _| {
            self.evaluate((j as f64 - cx) * mesh, (cy - i as f64) * mesh)
        })
    }
}

/// `count` square single-channel scenes of side `size`, deterministic in
/// `seed`.
pub fn synthetic_images(count: usize, size: usize, mesh: f64, seed: u64) -> Vec<PlanarImage> {
    scaled_synthetic_images(count, size, mesh, 1.0, seed)
}

/// Feature scale of the smooth scenes used by the equivariance sweeps.
pub const SMOOTH_FEATURE_SCALE: f64 = 2.5;

pub fn scaled_synthetic_images(
    count: usize,
    size: usize,
    mesh: f64,
    feature_scale: f64,
    seed: u64,
) -> Vec<PlanarImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = size as f64 * mesh / 2.0;
    (0..count)
        .map(|_| GaborScene::random_scaled(&mut rng, half, feature_scale).render(size, size, mesh))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_disk_confined() {
        let a = synthetic_images(2, 32, 1.0 / 3.0, 5);
        let b = synthetic_images(2, 32, 1.0 / 3.0, 5);
        assert_eq!(a, b);
        let img = &a[0];
        assert!(img.norm() > 0.0);
        // corners lie outside the window
        assert_eq!(img.get(0, 0, 0), 0.0);
        assert_eq!(img.get(31, 31, 0), 0.0);
        assert_eq!(img.get(0, 31, 0), 0.0);
    }
}
