//! Equivariance measurement, the multi-layer error bound, discretisation
//! scaling experiments, and rotation-invariance checks of classical
//! regularisers.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{lift_conv, Architecture, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::filter::{image_bounds, FourierBasis, ParamFilter, SmoothnessBounds};
use crate::synthetic::{scaled_synthetic_images, GaborScene, SMOOTH_FEATURE_SCALE};
use crate::tensor::{
    act_on_feature_map, relative_difference, rotate_image, GroupSpec, PlanarImage,
};

/// Per-layer smoothness data entering the bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerBound {
    /// input channel count `n_{i-1}` (all orientations of a group map)
    pub in_channels: usize,
    pub filter: SmoothnessBounds,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundInputs {
    pub layers: Vec<LayerBound>,
    pub image: SmoothnessBounds,
    pub filter_size: usize,
    pub mesh: f64,
    pub group_order: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundTerms {
    pub bound: f64,
    pub c1: f64,
    pub c2: f64,
    /// product of `n_{i-1} p^2 F_i` over layers
    pub f_script: f64,
}

/// Evaluates `C1 h^2 + C2 p h / t` with
///
/// ```text
/// F  = prod_i n_{i-1} p^2 F_i
/// C1 = 2 N F sum_i ( H_i F0 / F_i + 2 (G_i / F_i) sum_{m<i} G_m F0 / F_m
///                    + 2 G_i G0 / F_i + H0 )
/// C2 = 2 pi G0 F (2 max(H, W) / p + 2 N)
/// ```
pub fn theorem1_bound(b: &BoundInputs) -> Result<BoundTerms> {
    let n = b.layers.len();
    if n == 0 || b.group_order == 0 || b.filter_size == 0 {
        return Err(Error::InvalidArgument(
            "bound needs N >= 1, t >= 1 and p >= 1".into(),
        ));
    }
    let all = b.layers.iter().map(|l| l.filter).chain([b.image]);
    for s in all {
        if !(s.value >= 0.0 && s.gradient >= 0.0 && s.hessian >= 0.0) {
            return Err(Error::InvalidArgument(
                "smoothness bounds must be nonnegative".into(),
            ));
        }
    }
    if let Some(i) = b.layers.iter().position(|l| l.filter.value == 0.0) {
        return Err(Error::DegenerateBound(format!("F_{} = 0", i + 1)));
    }
    let p = b.filter_size as f64;
    let (f0, g0, h0) = (b.image.value, b.image.gradient, b.image.hessian);
    let f_script: f64 = b
        .layers
        .iter()
        .map(|l| l.in_channels as f64 * p * p * l.filter.value)
        .product();
    let mut sum = 0.0;
    let mut inner = 0.0; // sum_{m<i} G_m F0 / F_m
    for l in &b.layers {
        let (fi, gi, hi) = (l.filter.value, l.filter.gradient, l.filter.hessian);
        sum += hi * f0 / fi + 2.0 * (gi / fi) * inner + 2.0 * gi * g0 / fi + h0;
        inner += gi * f0 / fi;
    }
    let c1 = 2.0 * n as f64 * f_script * sum;
    let c2 = 2.0 * PI * g0 * f_script * (2.0 * b.height.max(b.width) as f64 / p + 2.0 * n as f64);
    let h = b.mesh;
    Ok(BoundTerms {
        bound: c1 * h * h + c2 * p * h / b.group_order as f64,
        c1,
        c2,
        f_script,
    })
}

/// Bound inputs for `net` applied to `images`: filter bounds are the maxima
/// over each convolution layer's filters, image bounds the maxima over the
/// images.
pub fn bound_inputs(net: &NetworkSpec, images: &[PlanarImage]) -> Result<BoundInputs> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("no images".into()))?;
    let mut layers = Vec::new();
    let mut filter_size = None;
    let mut mesh = None;
    for (i, layer) in net.layers().iter().enumerate() {
        if !layer.kind.is_conv() {
            continue;
        }
        let basis = layer.filters[0].basis();
        if *filter_size.get_or_insert(basis.filter_size()) != basis.filter_size() {
            return Err(Error::InvalidArgument(
                "bound assumes a single filter size".into(),
            ));
        }
        mesh.get_or_insert(basis.mesh());
        let filter = layer
            .filters
            .iter()
            .map(ParamFilter::bounds)
            .fold(SmoothnessBounds::default(), SmoothnessBounds::max);
        layers.push(LayerBound {
            in_channels: net.shapes()[i].total_channels(),
            filter,
        });
    }
    let (Some(filter_size), Some(mesh)) = (filter_size, mesh) else {
        return Err(Error::InvalidArgument(
            "network has no convolution layers".into(),
        ));
    };
    let image = images
        .iter()
        .map(image_bounds)
        .fold(SmoothnessBounds::default(), SmoothnessBounds::max);
    Ok(BoundInputs {
        layers,
        image,
        filter_size,
        mesh,
        group_order: net.group().order(),
        height: first.height(),
        width: first.width(),
    })
}

/// How rotation angles are chosen per image.
#[derive(Clone, Debug, PartialEq)]
pub enum AngleSampling {
    /// `per_image` uniform draws from `(-pi, pi]`
    Random {
        per_image: usize,
    },
    /// the three nontrivial quarter turns
    QuarterTurns,
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivarianceReport {
    /// `(angle, relative error)` in image-major order
    pub errors: Vec<(f64, f64)>,
    pub mean_error: f64,
    pub max_error: f64,
    pub bound: Option<f64>,
    pub bound_satisfied: Option<bool>,
    pub crop: usize,
    pub group_order: usize,
    pub filter_size: usize,
    pub conv_layers: usize,
    pub seed: u64,
}

impl EquivarianceReport {
    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = Some(bound);
        self.bound_satisfied = Some(self.errors.iter().all(|&(_, e)| e <= bound));
        self
    }
}

fn draw_angles(sampling: &AngleSampling, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match sampling {
        AngleSampling::Random { per_image } => (0..*per_image)
            // (-pi, pi]
            .map(|_| PI - 2.0 * PI * rng.random::<f64>())
            .collect(),
        AngleSampling::QuarterTurns => vec![0.5 * PI, PI, 1.5 * PI],
        AngleSampling::Fixed(a) => a.clone(),
    }
}

/// Relative equivariance error of `net` over `images` and sampled angles,
/// cropped by the receptive radius.
pub fn measure_equivariance(
    net: &NetworkSpec,
    images: &[PlanarImage],
    angles: &AngleSampling,
    seed: u64,
) -> Result<EquivarianceReport> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images to audit".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crop = net.receptive_radius();
    let mut errors = Vec::new();
    for x in images {
        let thetas = draw_angles(angles, &mut rng);
        if thetas.is_empty() {
            return Err(Error::InvalidArgument("no angles to audit".into()));
        }
        let fx = net.forward(x)?;
        for theta in thetas {
            let lhs = net.forward(&rotate_image(x, theta)?)?;
            let rhs = rotate_image(&fx, theta)?;
            errors.push((theta, relative_difference(&lhs, &rhs, crop)?));
        }
    }
    let mean_error = errors.iter().map(|e| e.1).sum::<f64>() / errors.len() as f64;
    let max_error = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let conv_layers = net.layers().iter().filter(|l| l.kind.is_conv()).count();
    let filter_size = net
        .layers()
        .iter()
        .find_map(LayerSpec::filter_size)
        .unwrap_or(0);
    Ok(EquivarianceReport {
        errors,
        mean_error,
        max_error,
        bound: None,
        bound_satisfied: None,
        crop,
        group_order: net.group().order(),
        filter_size,
        conv_layers,
        seed,
    })
}

impl EquivarianceReport {
    /// Pools the errors of several reports over the same configuration.
    /// The pooled bound is the smallest attached bound.
    pub fn merge(parts: Vec<EquivarianceReport>) -> Result<Self> {
        let mut iter = parts.into_iter();
        let mut merged = iter
            .next()
            .ok_or_else(|| Error::InvalidArgument("nothing to merge".into()))?;
        for r in iter {
            merged.errors.extend(r.errors);
            merged.bound = match (merged.bound, r.bound) {
                (Some(a), Some(b)) => Some(a.min(b)),
                _ => None,
            };
        }
        merged.mean_error =
            merged.errors.iter().map(|e| e.1).sum::<f64>() / merged.errors.len() as f64;
        merged.max_error = merged.errors.iter().map(|e| e.1).fold(0.0, f64::max);
        merged.bound_satisfied = merged
            .bound
            .map(|b| merged.errors.iter().all(|&(_, e)| e <= b));
        Ok(merged)
    }
}

/// Equivariance error with the bound of `theorem1_bound` attached.
pub fn audit_network(
    net: &NetworkSpec,
    images: &[PlanarImage],
    angles: &AngleSampling,
    seed: u64,
) -> Result<EquivarianceReport> {
    let report = measure_equivariance(net, images, angles, seed)?;
    let terms = theorem1_bound(&bound_inputs(net, images)?)?;
    Ok(report.with_bound(terms.bound))
}

/// Error-versus-group-order sweep over random-weight networks.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub arch: Architecture,
    pub group_orders: Vec<usize>,
    pub images: usize,
    pub image_size: usize,
    pub feature_scale: f64,
    pub angles: AngleSampling,
    /// independent networks averaged per group order
    pub nets: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            arch: Architecture {
                filter_size: 9,
                orientation_harmonics: Some(3),
                ..Architecture::default()
            },
            group_orders: vec![1, 2, 4, 8, 12, 24],
            images: 2,
            image_size: 64,
            feature_scale: SMOOTH_FEATURE_SCALE,
            angles: AngleSampling::Random { per_image: 10 },
            nets: 3,
            seed: 0,
        }
    }
}

/// One merged report per group order. Images, angles and network seeds are
/// shared across orders.
pub fn sweep_group_orders(cfg: &SweepConfig) -> Result<Vec<EquivarianceReport>> {
    if cfg.group_orders.is_empty() || cfg.nets == 0 || cfg.images == 0 {
        return Err(Error::InvalidArgument(
            "sweep needs orders, networks, images and angles".into(),
        ));
    }
    let mesh = FourierBasis::new(cfg.arch.filter_size, cfg.arch.cutoff)?.mesh();
    let images = scaled_synthetic_images(
        cfg.images,
        cfg.image_size,
        mesh,
        cfg.feature_scale,
        cfg.seed,
    );
    cfg.group_orders
        .iter()
        .map(|&t| {
            let arch = Architecture {
                group_order: t,
                ..cfg.arch.clone()
            };
            let parts = (0..cfg.nets as u64)
                .map(|n| {
                    let net = arch.build_seeded(cfg.seed.wrapping_add(1 + n))?;
                    audit_network(&net, &images, &cfg.angles, cfg.seed)
                })
                .collect::<Result<Vec<_>>>()?;
            EquivarianceReport::merge(parts)
        })
        .collect()
}

/// True when mean errors strictly decrease along `reports`.
pub fn strictly_decreasing(reports: &[EquivarianceReport]) -> bool {
    reports
        .windows(2)
        .all(|w| w[1].mean_error < w[0].mean_error)
}

/// Single-layer discretisation error at one mesh.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingPoint {
    pub filter_size: usize,
    pub mesh: f64,
    pub error: f64,
}

/// Lifting-layer equivariance error at `theta = 2 pi / t` for each filter
/// size, with the continuous filter and scene held fixed and the physical
/// image extent `2 * half_extent`. Errors compare against the feature-map
/// action with shift 1.
pub fn lift_scaling(
    filter_sizes: &[usize],
    cutoff: usize,
    group_order: usize,
    half_extent: f64,
    seed: u64,
) -> Result<Vec<ScalingPoint>> {
    let group = GroupSpec::new(group_order)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = GaborScene::random(&mut rng, half_extent);
    let mut coefficients: Option<Vec<f64>> = None;
    filter_sizes
        .iter()
        .map(|&p| {
            let basis = Arc::new(FourierBasis::new(p, cutoff)?);
            let coeffs = coefficients
                .get_or_insert_with(|| {
                    let normal = rand_distr::StandardNormal;
                    (0..basis.len())
                        .map(|_| rand_distr::Distribution::<f64>::sample(&normal, &mut rng))
                        .collect()
                })
                .clone();
            let filter = ParamFilter::new(basis.clone(), coeffs)?;
            let mesh = basis.mesh();
            let size = (2.0 * half_extent / mesh).round() as usize;
            let x = scene.render(size, size, mesh);
            let layer = LayerSpec::lift(1, 1, group, vec![filter])?;
            let theta = group.angle(1);
            let lhs = lift_conv(&rotate_image(&x, theta)?, &layer)?;
            let rhs = act_on_feature_map(&lift_conv(&x, &layer)?, theta, 1)?;
            Ok(ScalingPoint {
                filter_size: p,
                mesh,
                error: relative_difference(&lhs, &rhs, p / 2)?,
            })
        })
        .collect()
}

/// Classical regularisers checked for rotation invariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RegularizerKind {
    L1,
    /// smoothed count of nonzero Laplacian responses, `v^2 / (v^2 + eps^2)`
    LapL0 {
        epsilon: f64,
    },
    TvIso,
    Tv2,
}

pub const LAPL0_EPSILON: f64 = 0.01;

impl RegularizerKind {
    pub fn all() -> [RegularizerKind; 4] {
        [
            RegularizerKind::L1,
            RegularizerKind::LapL0 {
                epsilon: LAPL0_EPSILON,
            },
            RegularizerKind::TvIso,
            RegularizerKind::Tv2,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            RegularizerKind::L1 => "L1",
            RegularizerKind::LapL0 { .. } => "LapL0",
            RegularizerKind::TvIso => "TV",
            RegularizerKind::Tv2 => "TV2",
        }
    }
}

/// A regulariser evaluated on the disk inscribed in the image, shrunk by
/// `crop` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub crop: usize,
}

impl RegularizerSpec {
    pub fn new(kind: RegularizerKind, crop: usize) -> Result<Self> {
        if let RegularizerKind::LapL0 { epsilon } = kind {
            if !(epsilon > 0.0 && epsilon.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "LapL0 smoothing must be positive, got {epsilon}"
                )));
            }
        }
        Ok(Self { kind, crop })
    }
}

/// Per-pixel mean of the regulariser density over the evaluation disk,
/// summed over channels. Samples outside the image read as zero.
pub fn regularizer_value(r: &RegularizerSpec, x: &PlanarImage) -> Result<f64> {
    let (h, w) = (x.height(), x.width());
    let radius = h.min(w) as f64 / 2.0 - r.crop as f64;
    if radius <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "crop {} leaves no region",
            r.crop
        )));
    }
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let at = |i: isize, j: isize, c: usize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            x.get(i as usize, j as usize, c)
        }
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..h {
        for j in 0..w {
            let (dy, dx) = (i as f64 - cy, j as f64 - cx);
            if dy * dy + dx * dx > radius * radius {
                continue;
            }
            count += 1;
            let (i, j) = (i as isize, j as isize);
            for c in 0..x.channels() {
                let v = at(i, j, c);
                let (n, s, e, wv) = (
                    at(i - 1, j, c),
                    at(i + 1, j, c),
                    at(i, j + 1, c),
                    at(i, j - 1, c),
                );
                total += match r.kind {
                    RegularizerKind::L1 => v.abs(),
                    RegularizerKind::LapL0 { epsilon } => {
                        let lap = n + s + e + wv - 4.0 * v;
                        lap * lap / (lap * lap + epsilon * epsilon)
                    }
                    RegularizerKind::TvIso => {
                        // mean over the four one-sided stencils
                        let mut acc = 0.0;
                        for gx in [e - v, v - wv] {
                            for gy in [n - v, v - s] {
                                acc += (gx * gx + gy * gy).sqrt();
                            }
                        }
                        acc / 4.0
                    }
                    RegularizerKind::Tv2 => {
                        let dxx = e - 2.0 * v + wv;
                        let dyy = n - 2.0 * v + s;
                        let dxy = (at(i - 1, j + 1, c) - at(i - 1, j - 1, c) - at(i + 1, j + 1, c)
                            + at(i + 1, j - 1, c))
                            / 4.0;
                        (dxx * dxx + dyy * dyy + 2.0 * dxy * dxy).sqrt()
                    }
                };
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularizerSample {
    pub kind: RegularizerKind,
    pub angle: f64,
    pub value: f64,
}

/// The `count` angles `2 pi k / count`.
pub fn uniform_angles(count: usize) -> Vec<f64> {
    GroupSpec::new(count)
        .map(|g| g.angles())
        .unwrap_or_default()
}

/// Values of every regulariser in `kinds` on `x` rotated by each angle,
/// regulariser-major.
pub fn regularizer_sweep(
    x: &PlanarImage,
    kinds: &[RegularizerKind],
    angles: &[f64],
    crop: usize,
) -> Result<Vec<RegularizerSample>> {
    if angles.is_empty() || kinds.is_empty() {
        return Err(Error::InvalidArgument(
            "regulariser sweep needs angles and regularisers".into(),
        ));
    }
    let rotated = angles
        .iter()
        .map(|&a| rotate_image(x, a))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(kinds.len() * angles.len());
    for &kind in kinds {
        let spec = RegularizerSpec::new(kind, crop)?;
        for (&angle, img) in angles.iter().zip(&rotated) {
            out.push(RegularizerSample {
                kind,
                angle,
                value: regularizer_value(&spec, img)?,
            });
        }
    }
    Ok(out)
}

/// `(max - min) / mean`; zero when all values agree to 1e-12.
pub fn relative_spread(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if values.is_empty() || max - min <= 1e-12 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (max - min) / mean.abs()
}

/// Spread per regulariser, in first-appearance order.
pub fn spreads(samples: &[RegularizerSample]) -> Vec<(RegularizerKind, f64)> {
    let mut kinds: Vec<RegularizerKind> = Vec::new();
    for s in samples {
        if !kinds.contains(&s.kind) {
            kinds.push(s.kind);
        }
    }
    kinds
        .into_iter()
        .map(|k| {
            let v: Vec<f64> = samples
                .iter()
                .filter(|s| s.kind == k)
                .map(|s| s.value)
                .collect();
            (k, relative_spread(&v))
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "t,p,N,mean_error,max_error,bound,bound_satisfied";
pub const REGULARIZER_CSV_HEADER: &str = "regularizer,angle_rad,value";

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// CSV with one row per report.
pub fn sweep_csv(reports: &[EquivarianceReport]) -> String {
    let mut s = format!("{SWEEP_CSV_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.group_order,
            r.filter_size,
            r.conv_layers,
            r.mean_error,
            r.max_error,
            opt(r.bound),
            opt(r.bound_satisfied)
        );
    }
    s
}

pub fn regularizer_csv(samples: &[RegularizerSample]) -> String {
    let mut s = format!("{REGULARIZER_CSV_HEADER}\n");
    for r in samples {
        let _ = writeln!(s, "{},{},{}", r.kind.name(), r.angle, r.value);
    }
    s
}

/// Plain-text summary ending in a `bound_satisfied: true/false` line.
pub fn sweep_summary(reports: &[EquivarianceReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let _ =
            writeln!(
            s,
            "t={} p={} N={} pairs={} crop={} seed={} mean_error={:.6e} max_error={:.6e} bound={}",
            r.group_order,
            r.filter_size,
            r.conv_layers,
            r.errors.len(),
            r.crop,
            r.seed,
            r.mean_error,
            r.max_error,
            r.bound.map(|b| format!("{b:.6e}")).unwrap_or_else(|| "none".into())
        );
    }
    let _ = writeln!(s, "metric crop: receptive radius of each network");
    let _ = writeln!(
        s,
        "image bounds: central differences of the samples times safety factor {}",
        crate::filter::IMAGE_BOUND_SAFETY
    );
    let _ = writeln!(s, "strictly_decreasing: {}", strictly_decreasing(reports));
    let ok = reports.iter().all(|r| r.bound_satisfied == Some(true));
    let _ = writeln!(s, "bound_satisfied: {ok}");
    s
}

/// Writes `equivariance.csv` and `summary.txt` into `dir`.
pub fn emit_report(reports: &[EquivarianceReport], dir: &Path) -> Result<()> {
    if reports.is_empty() || reports.iter().any(|r| r.errors.is_empty()) {
        return Err(Error::InvalidArgument("nothing to report".into()));
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join("equivariance.csv"), sweep_csv(reports))?;
    fs::write(dir.join("summary.txt"), sweep_summary(reports))?;
    Ok(())
}

/// Writes `regularizers.csv` and `summary.txt` into `dir`.
pub fn emit_regularizer_report(
    samples: &[RegularizerSample],
    threshold: f64,
    dir: &Path,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("nothing to report".into()));
    }
    let mut summary = String::new();
    let all = spreads(samples);
    for (k, spread) in &all {
        let _ = writeln!(summary, "{}: relative_spread={spread:.6e}", k.name());
    }
    let ok = all.iter().all(|&(_, s)| s < threshold);
    let _ = writeln!(summary, "threshold: {threshold}");
    let _ = writeln!(summary, "invariant: {ok}");
    fs::create_dir_all(dir)?;
    fs::write(dir.join("regularizers.csv"), regularizer_csv(samples))?;
    fs::write(dir.join("summary.txt"), summary)?;
    Ok(())
}
