//! Rotation-equivariant layers and networks over the cyclic group of order `t`.
//!
//! Feature maps on the group carry `t` orientation slices. A lifting layer
//! correlates the planar input with the filter rotated by `2 pi o / t` to
//! produce slice `o`. A group layer mixes every input slice `o'` into output
//! slice `o` with the filter indexed by the relative orientation
//! `(o' - o) mod t`, rotated by `2 pi o / t`. Rotating the input by
//! `2 pi k / t` therefore rotates every slice and moves slice `o` to
//! `o + k`.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::filter::{combine_taps, FourierBasis, ParamFilter};
use crate::tensor::{GroupFeatureMap, GroupSpec, PlanarImage};

/// Largest im2col block, in matrix entries.
const BLOCK_ENTRIES: usize = 1 << 18;

/// Row-major or strided view of a dense matrix.
#[derive(Clone, Copy)]
struct Strides(usize, usize);

/// `c = a b + beta c` for an `m x k` by `k x n` product.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, s: Strides| (rows - 1) * s.0 + (cols - 1) * s.1;
    assert!(last(m, k, sa) < a.len() && last(k, n, sb) < b.len() && last(m, n, sc) < c.len());
    // SAFETY: every index reached through the strides is in bounds (checked
    // above) and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

/// Output rows per im2col block.
fn block_rows(h: usize, w: usize, k: usize) -> usize {
    (BLOCK_ENTRIES / (w * k).max(1)).clamp(1, h.max(1))
}

/// Patches of output rows `i0..i1` as a `(cin p p, pixels)` matrix, zero
/// outside the image. Row order is `(ci, u, v)`.
fn im2col(
    planes: &[f64],
    (h, w, cin): (usize, usize, usize),
    p: usize,
    i0: usize,
    i1: usize,
    col: &mut Vec<f64>,
) {
    let npix = (i1 - i0) * w;
    let r = (p / 2) as isize;
    col.clear();
    col.resize(cin * p * p * npix, 0.0);
    for ci in 0..cin {
        let plane = &planes[ci * h * w..(ci + 1) * h * w];
        for u in 0..p {
            let dy = u as isize - r;
            let (r0, r1) = valid_range(h, dy);
            for v in 0..p {
                let dx = v as isize - r;
                let (j0, j1) = valid_range(w, dx);
                let row =
                    &mut col[((ci * p + u) * p + v) * npix..((ci * p + u) * p + v + 1) * npix];
                for i in i0.max(r0)..i1.min(r1) {
                    let si = (i as isize + dy) as usize;
                    let s0 = (j0 as isize + dx) as usize;
                    row[(i - i0) * w + j0..(i - i0) * w + j1]
                        .copy_from_slice(&plane[si * w + s0..si * w + s0 + (j1 - j0)]);
                }
            }
        }
    }
}

/// Multi-channel 2D correlation with zero padding and stride 1.
///
/// `taps` is laid out `[out][in][u][v]`.
pub fn correlate(input: &PlanarImage, taps: &[f64], out_channels: usize, p: usize) -> PlanarImage {
    let (h, w, cin) = (input.height(), input.width(), input.channels());
    let k = cin * p * p;
    assert_eq!(taps.len(), out_channels * k, "tap bank shape");
    let planes = to_planes(input);
    let mut out = vec![0.0; h * w * out_channels];
    let rows = block_rows(h, w, k);
    let mut col = Vec::new();
    for i0 in (0..h).step_by(rows) {
        let i1 = (i0 + rows).min(h);
        im2col(&planes, (h, w, cin), p, i0, i1, &mut col);
        let npix = (i1 - i0) * w;
        gemm(
            (npix, k, out_channels),
            &col,
            Strides(1, npix),
            taps,
            Strides(1, k),
            0.0,
            &mut out[i0 * w * out_channels..i1 * w * out_channels],
            Strides(out_channels, 1),
        );
    }
    PlanarImage::new(h, w, out_channels, input.mesh(), out).expect("shape preserved")
}

/// Gradient of [`correlate`] with respect to its input.
pub(crate) fn correlate_input_grad(
    grad_out: &PlanarImage,
    taps: &[f64],
    in_channels: usize,
    p: usize,
) -> PlanarImage {
    let (h, w, cout) = (grad_out.height(), grad_out.width(), grad_out.channels());
    let k = in_channels * p * p;
    let r = (p / 2) as isize;
    let mut planes = vec![0.0; in_channels * h * w];
    let rows = block_rows(h, w, k);
    let mut dcol = Vec::new();
    let g = grad_out.data();
    for i0 in (0..h).step_by(rows) {
        let i1 = (i0 + rows).min(h);
        let npix = (i1 - i0) * w;
        dcol.clear();
        dcol.resize(k * npix, 0.0);
        gemm(
            (k, cout, npix),
            taps,
            Strides(1, k),
            &g[i0 * w * cout..i1 * w * cout],
            Strides(1, cout),
            0.0,
            &mut dcol,
            Strides(npix, 1),
        );
        // scatter the patch gradients back onto the image
        for ci in 0..in_channels {
            let plane = &mut planes[ci * h * w..(ci + 1) * h * w];
            for u in 0..p {
                let dy = u as isize - r;
                let (r0, r1) = valid_range(h, dy);
                for v in 0..p {
                    let dx = v as isize - r;
                    let (j0, j1) = valid_range(w, dx);
                    let row =
                        &dcol[((ci * p + u) * p + v) * npix..((ci * p + u) * p + v + 1) * npix];
                    for i in i0.max(r0)..i1.min(r1) {
                        let si = (i as isize + dy) as usize;
                        let s0 = (j0 as isize + dx) as usize;
                        let dst = &mut plane[si * w + s0..si * w + s0 + (j1 - j0)];
                        for (d, s) in dst
                            .iter_mut()
                            .zip(&row[(i - i0) * w + j0..(i - i0) * w + j1])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    from_planes(&planes, h, w, in_channels, grad_out.mesh())
}

/// Gradient of [`correlate`] with respect to its taps.
pub(crate) fn correlate_tap_grad(
    grad_out: &PlanarImage,
    input: &PlanarImage,
    p: usize,
) -> Vec<f64> {
    let (h, w, cin) = (input.height(), input.width(), input.channels());
    let cout = grad_out.channels();
    let k = cin * p * p;
    let planes = to_planes(input);
    let mut out = vec![0.0; cout * k];
    let rows = block_rows(h, w, k);
    let mut col = Vec::new();
    let g = grad_out.data();
    for i0 in (0..h).step_by(rows) {
        let i1 = (i0 + rows).min(h);
        im2col(&planes, (h, w, cin), p, i0, i1, &mut col);
        let npix = (i1 - i0) * w;
        gemm(
            (cout, npix, k),
            &g[i0 * w * cout..i1 * w * cout],
            Strides(1, cout),
            &col,
            Strides(1, npix),
            1.0,
            &mut out,
            Strides(k, 1),
        );
    }
    out
}

/// Output rows (or columns) `i` for which `i + d` stays inside `[0, n)`.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

fn to_planes(img: &PlanarImage) -> Vec<f64> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = vec![0.0; h * w * c];
    for (pix, vals) in img.data().chunks_exact(c).enumerate() {
        for (k, v) in vals.iter().enumerate() {
            out[k * h * w + pix] = *v;
        }
    }
    out
}

fn from_planes(planes: &[f64], h: usize, w: usize, c: usize, mesh: f64) -> PlanarImage {
    let mut data = vec![0.0; h * w * c];
    for k in 0..c {
        for pix in 0..h * w {
            data[pix * c + k] = planes[k * h * w + pix];
        }
    }
    PlanarImage::new(h, w, c, mesh, data).expect("shape preserved")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// planar -> group
    Lift,
    /// group -> group
    GroupConv,
    /// planar -> planar, ordinary convolution (`t = 1` baseline)
    PlainConv,
    /// one scalar per base channel, shared across orientations
    Bias,
    ReLU,
    /// adds the activation recorded at `skip` (0 is the network input,
    /// `i + 1` the output of layer `i`)
    ResidualAdd {
        skip: usize,
    },
    /// mean over the orientation axis, group -> planar
    OrientationPool,
}

impl LayerKind {
    pub fn is_conv(&self) -> bool {
        matches!(
            self,
            LayerKind::Lift | LayerKind::GroupConv | LayerKind::PlainConv
        )
    }
}

/// Shape of an activation flowing between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Planar { channels: usize },
    Group { base_channels: usize, order: usize },
}

impl ActShape {
    pub fn total_channels(&self) -> usize {
        match *self {
            ActShape::Planar { channels } => channels,
            ActShape::Group {
                base_channels,
                order,
            } => base_channels * order,
        }
    }

    fn base_channels(&self) -> usize {
        match *self {
            ActShape::Planar { channels } => channels,
            ActShape::Group { base_channels, .. } => base_channels,
        }
    }
}

/// One layer. Convolution filters are indexed
/// `[(out * in_channels + in) * t + relative_orientation]` for group layers
/// and `[out * in_channels + in]` for lifting and plain layers. Channel
/// counts are base channels (per orientation).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub group: GroupSpec,
    pub filters: Vec<ParamFilter>,
    pub bias: Vec<f64>,
}

/// A convolution layer's tap bank after sampling every filter at its angle.
#[derive(Clone, Debug)]
pub(crate) struct ExpandedBank {
    pub out_channels: usize,
    pub in_channels: usize,
    pub p: usize,
    pub taps: Vec<f64>,
    /// `(filter index, angle index)` for every `(out, in)` pair
    pub slots: Vec<(usize, usize)>,
    /// sampled basis for each group angle, see [`FourierBasis::sample_basis`]
    pub sampled: Vec<Vec<f64>>,
}

impl LayerSpec {
    fn conv(
        kind: LayerKind,
        in_channels: usize,
        out_channels: usize,
        group: GroupSpec,
        filters: Vec<ParamFilter>,
    ) -> Result<Self> {
        let expected = match kind {
            LayerKind::GroupConv => in_channels * out_channels * group.order(),
            _ => in_channels * out_channels,
        };
        if filters.len() != expected {
            return Err(Error::Shape(format!(
                "{kind:?} layer {in_channels}->{out_channels} needs {expected} filters, got {}",
                filters.len()
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Shape("convolution with zero channels".into()));
        }
        let basis = filters[0].basis();
        if filters.iter().any(|f| f.basis() != basis) {
            return Err(Error::InvalidArgument(
                "filters of one layer must share a basis".into(),
            ));
        }
        Ok(Self {
            kind,
            in_channels,
            out_channels,
            group,
            filters,
            bias: Vec::new(),
        })
    }

    pub fn lift(
        in_channels: usize,
        out_channels: usize,
        group: GroupSpec,
        filters: Vec<ParamFilter>,
    ) -> Result<Self> {
        Self::conv(LayerKind::Lift, in_channels, out_channels, group, filters)
    }

    pub fn group_conv(
        in_channels: usize,
        out_channels: usize,
        group: GroupSpec,
        filters: Vec<ParamFilter>,
    ) -> Result<Self> {
        Self::conv(
            LayerKind::GroupConv,
            in_channels,
            out_channels,
            group,
            filters,
        )
    }

    pub fn plain_conv(
        in_channels: usize,
        out_channels: usize,
        filters: Vec<ParamFilter>,
    ) -> Result<Self> {
        Self::conv(
            LayerKind::PlainConv,
            in_channels,
            out_channels,
            GroupSpec::new(1)?,
            filters,
        )
    }

    /// Conv layer with He-initialised random coefficients.
    pub fn random_conv<R: Rng + ?Sized>(
        kind: LayerKind,
        in_channels: usize,
        out_channels: usize,
        group: GroupSpec,
        basis: &Arc<FourierBasis>,
        rng: &mut R,
    ) -> Result<Self> {
        let (count, fan_in) = match kind {
            LayerKind::GroupConv => (
                in_channels * out_channels * group.order(),
                in_channels * group.order(),
            ),
            LayerKind::Lift | LayerKind::PlainConv => (in_channels * out_channels, in_channels),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "{other:?} is not a convolution"
                )))
            }
        };
        let filters = (0..count)
            .map(|_| ParamFilter::random(basis.clone(), fan_in, rng))
            .collect();
        let group = if kind == LayerKind::PlainConv {
            GroupSpec::new(1)?
        } else {
            group
        };
        Self::conv(kind, in_channels, out_channels, group, filters)
    }

    /// Group layer whose filter for relative orientation `r` is the sample at
    /// angle `2 pi r / t` of a random trigonometric polynomial of degree
    /// `degree` (per in/out pair and basis function), divided by `t`.
    ///
    /// The number of random draws does not depend on `t`, so layers built
    /// from equal seeds for different `t` discretise one continuous
    /// orientation profile.
    pub fn smooth_group_conv<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        group: GroupSpec,
        basis: &Arc<FourierBasis>,
        degree: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let t = group.order();
        let nb = basis.len();
        let p = basis.filter_size() as f64;
        let std = (crate::filter::INIT_GAIN / (in_channels as f64 * p * p)).sqrt();
        let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
        let mut filters = Vec::with_capacity(in_channels * out_channels * t);
        for _ in 0..in_channels * out_channels {
            // [harmonic][cos/sin][basis]
            let profile: Vec<f64> = (0..(degree + 1) * 2 * nb)
                .map(|_| rand_distr::Distribution::sample(&normal, rng))
                .collect();
            for r in 0..t {
                let a = group.angle(r);
                let coeffs = (0..nb)
                    .map(|j| {
                        let mut c = profile[j];
                        for m in 1..=degree {
                            let (cm, sm) = ((m as f64 * a).cos(), (m as f64 * a).sin());
                            c +=
                                profile[(2 * m) * nb + j] * cm + profile[(2 * m + 1) * nb + j] * sm;
                        }
                        c / t as f64
                    })
                    .collect();
                filters.push(ParamFilter::new(basis.clone(), coeffs)?);
            }
        }
        Self::group_conv(in_channels, out_channels, group, filters)
    }

    pub fn bias(channels: usize, group: GroupSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels {
            return Err(Error::Shape(format!(
                "{} bias values for {channels} channels",
                values.len()
            )));
        }
        Ok(Self {
            kind: LayerKind::Bias,
            in_channels: channels,
            out_channels: channels,
            group,
            filters: Vec::new(),
            bias: values,
        })
    }

    fn pointwise(kind: LayerKind, channels: usize, group: GroupSpec) -> Self {
        Self {
            kind,
            in_channels: channels,
            out_channels: channels,
            group,
            filters: Vec::new(),
            bias: Vec::new(),
        }
    }

    pub fn relu(channels: usize, group: GroupSpec) -> Self {
        Self::pointwise(LayerKind::ReLU, channels, group)
    }

    pub fn residual_add(skip: usize, channels: usize, group: GroupSpec) -> Self {
        Self::pointwise(LayerKind::ResidualAdd { skip }, channels, group)
    }

    pub fn orientation_pool(channels: usize, group: GroupSpec) -> Self {
        Self::pointwise(LayerKind::OrientationPool, channels, group)
    }

    pub fn filter_size(&self) -> Option<usize> {
        self.filters.first().map(|f| f.basis().filter_size())
    }

    /// Number of stored real parameters.
    pub fn param_count(&self) -> usize {
        self.filters
            .iter()
            .map(|f| f.coefficients().len())
            .sum::<usize>()
            + self.bias.len()
    }

    pub(crate) fn expand(&self) -> ExpandedBank {
        let t = self.group.order();
        let basis = self.filters[0].basis();
        let p = basis.filter_size();
        let nb = basis.len();
        let (angles, out_total, in_total) = match self.kind {
            LayerKind::Lift => (t, t * self.out_channels, self.in_channels),
            LayerKind::GroupConv => (t, t * self.out_channels, t * self.in_channels),
            _ => (1, self.out_channels, self.in_channels),
        };
        let sampled: Vec<Vec<f64>> = (0..angles)
            .map(|o| basis.sample_basis(self.group.angle(o)))
            .collect();
        let mut slots = Vec::with_capacity(out_total * in_total);
        for oc in 0..out_total {
            for ic in 0..in_total {
                let slot = match self.kind {
                    LayerKind::Lift => {
                        let (o, co) = (oc / self.out_channels, oc % self.out_channels);
                        (co * self.in_channels + ic, o)
                    }
                    LayerKind::GroupConv => {
                        let (o, co) = (oc / self.out_channels, oc % self.out_channels);
                        let (oi, ci) = (ic / self.in_channels, ic % self.in_channels);
                        let rel = (oi + t - o) % t;
                        ((co * self.in_channels + ci) * t + rel, o)
                    }
                    _ => (oc * self.in_channels + ic, 0),
                };
                slots.push(slot);
            }
        }
        let mut taps = vec![0.0; out_total * in_total * p * p];
        for (k, &(fi, ai)) in slots.iter().enumerate() {
            let coeffs = self.filters[fi].coefficients();
            debug_assert_eq!(coeffs.len(), nb);
            combine_taps(coeffs, &sampled[ai], &mut taps[k * p * p..(k + 1) * p * p]);
        }
        ExpandedBank {
            out_channels: out_total,
            in_channels: in_total,
            p,
            taps,
            slots,
            sampled,
        }
    }
}

/// Coefficient gradient of every stored filter from the gradient of the
/// expanded taps. Taps are linear in the coefficients, so this contracts
/// with the sampled basis.
pub(crate) fn fold_tap_grad(
    bank: &ExpandedBank,
    tap_grad: &[f64],
    n_filters: usize,
    nb: usize,
) -> Vec<f64> {
    let pp = bank.p * bank.p;
    let mut out = vec![0.0; n_filters * nb];
    for (k, &(fi, ai)) in bank.slots.iter().enumerate() {
        let g = &tap_grad[k * pp..(k + 1) * pp];
        let s = &bank.sampled[ai];
        for j in 0..nb {
            let b = &s[j * pp..(j + 1) * pp];
            out[fi * nb + j] += g.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        }
    }
    out
}

fn check_conv_input(layer: &LayerSpec, kind: LayerKind, channels: usize) -> Result<()> {
    if layer.kind != kind {
        return Err(Error::InvalidArgument(format!(
            "expected a {kind:?} layer, got {:?}",
            layer.kind
        )));
    }
    if channels != layer.in_channels {
        return Err(Error::Shape(format!(
            "layer expects {} input channels, got {channels}",
            layer.in_channels
        )));
    }
    Ok(())
}

/// Lifting correlation: slice `o` is `x` correlated with the filters rotated
/// by `2 pi o / t`.
pub fn lift_conv(x: &PlanarImage, layer: &LayerSpec) -> Result<GroupFeatureMap> {
    check_conv_input(layer, LayerKind::Lift, x.channels())?;
    let bank = layer.expand();
    let out = correlate(x, &bank.taps, bank.out_channels, bank.p);
    GroupFeatureMap::from_planar(out, layer.group.order())
}

/// Group correlation over the cyclic group.
pub fn group_conv(f: &GroupFeatureMap, layer: &LayerSpec) -> Result<GroupFeatureMap> {
    if f.group_order() != layer.group.order() {
        return Err(Error::Shape(format!(
            "feature map has group order {}, layer expects {}",
            f.group_order(),
            layer.group.order()
        )));
    }
    check_conv_input(layer, LayerKind::GroupConv, f.base_channels())?;
    let bank = layer.expand();
    let out = correlate(&f.to_planar(), &bank.taps, bank.out_channels, bank.p);
    GroupFeatureMap::from_planar(out, layer.group.order())
}

pub fn plain_conv(x: &PlanarImage, layer: &LayerSpec) -> Result<PlanarImage> {
    check_conv_input(layer, LayerKind::PlainConv, x.channels())?;
    let bank = layer.expand();
    Ok(correlate(x, &bank.taps, bank.out_channels, bank.p))
}

/// A value flowing through a network.
#[derive(Clone, Debug, PartialEq)]
pub enum Activation {
    Planar(PlanarImage),
    Group(GroupFeatureMap),
}

impl Activation {
    pub fn shape(&self) -> ActShape {
        match self {
            Activation::Planar(p) => ActShape::Planar {
                channels: p.channels(),
            },
            Activation::Group(g) => ActShape::Group {
                base_channels: g.base_channels(),
                order: g.group_order(),
            },
        }
    }

    /// Values as a planar image (group maps keep all `t*C` channels).
    pub fn into_planar(self) -> PlanarImage {
        match self {
            Activation::Planar(p) => p,
            Activation::Group(g) => g.into_planar(),
        }
    }

    pub(crate) fn from_planar(img: PlanarImage, shape: ActShape) -> Self {
        match shape {
            ActShape::Planar { .. } => Activation::Planar(img),
            ActShape::Group { order, .. } => {
                Activation::Group(GroupFeatureMap::from_planar(img, order).expect("shape checked"))
            }
        }
    }
}

pub(crate) fn add_bias(x: &PlanarImage, bias: &[f64]) -> PlanarImage {
    let c = bias.len();
    let mut out = x.clone();
    for px in out.data_mut().chunks_exact_mut(x.channels()) {
        for (k, v) in px.iter_mut().enumerate() {
            *v += bias[k % c];
        }
    }
    out
}

pub(crate) fn relu(x: &PlanarImage) -> PlanarImage {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub(crate) fn orientation_pool(x: &PlanarImage, order: usize) -> PlanarImage {
    let c = x.channels() / order;
    let mut data = Vec::with_capacity(x.height() * x.width() * c);
    for px in x.data().chunks_exact(x.channels()) {
        for k in 0..c {
            let mut s = 0.0;
            for o in 0..order {
                s += px[o * c + k];
            }
            data.push(s / order as f64);
        }
    }
    PlanarImage::new(x.height(), x.width(), c, x.mesh(), data).expect("pooled shape")
}

/// Ordered layer list with validated shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    input_channels: usize,
    group: GroupSpec,
    layers: Vec<LayerSpec>,
    shapes: Vec<ActShape>,
    receptive_radius: usize,
}

impl NetworkSpec {
    pub fn new(input_channels: usize, group: GroupSpec, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_channels == 0 {
            return Err(Error::Shape(
                "network input needs at least one channel".into(),
            ));
        }
        let mut shapes = vec![ActShape::Planar {
            channels: input_channels,
        }];
        let mut lifted = false;
        let mut radius = 0;
        for (i, layer) in layers.iter().enumerate() {
            let cur = *shapes.last().expect("nonempty");
            let fail =
                |msg: String| Err(Error::Shape(format!("layer {i} ({:?}): {msg}", layer.kind)));
            if layer.kind != LayerKind::PlainConv && layer.kind.is_conv() && layer.group != group {
                return fail(format!(
                    "group order {} != network order {}",
                    layer.group.order(),
                    group.order()
                ));
            }
            let next = match layer.kind {
                LayerKind::Lift => {
                    if lifted {
                        return fail("only one lifting layer is allowed".into());
                    }
                    if cur
                        != (ActShape::Planar {
                            channels: layer.in_channels,
                        })
                    {
                        return fail(format!(
                            "expects planar {} channels, got {cur:?}",
                            layer.in_channels
                        ));
                    }
                    lifted = true;
                    ActShape::Group {
                        base_channels: layer.out_channels,
                        order: group.order(),
                    }
                }
                LayerKind::GroupConv => {
                    let want = ActShape::Group {
                        base_channels: layer.in_channels,
                        order: group.order(),
                    };
                    if cur != want {
                        return fail(format!("expects {want:?}, got {cur:?}"));
                    }
                    ActShape::Group {
                        base_channels: layer.out_channels,
                        order: group.order(),
                    }
                }
                LayerKind::PlainConv => {
                    if cur
                        != (ActShape::Planar {
                            channels: layer.in_channels,
                        })
                    {
                        return fail(format!(
                            "expects planar {} channels, got {cur:?}",
                            layer.in_channels
                        ));
                    }
                    ActShape::Planar {
                        channels: layer.out_channels,
                    }
                }
                LayerKind::Bias | LayerKind::ReLU => {
                    if cur.base_channels() != layer.in_channels
                        || (layer.kind == LayerKind::Bias && layer.bias.len() != layer.in_channels)
                    {
                        return fail(format!(
                            "channel count {} does not match {cur:?}",
                            layer.in_channels
                        ));
                    }
                    cur
                }
                LayerKind::ResidualAdd { skip } => {
                    if skip > i || shapes[skip] != cur {
                        return fail(format!("skip source {skip} missing or shaped differently"));
                    }
                    cur
                }
                LayerKind::OrientationPool => {
                    if i + 1 != layers.len() {
                        return fail("orientation pooling must be the last layer".into());
                    }
                    match cur {
                        ActShape::Group {
                            base_channels,
                            order,
                        } if order == group.order() => ActShape::Planar {
                            channels: base_channels,
                        },
                        _ => return fail(format!("expects a group activation, got {cur:?}")),
                    }
                }
            };
            if let Some(p) = layer.filter_size() {
                radius += p / 2;
            }
            shapes.push(next);
        }
        Ok(Self {
            input_channels,
            group,
            layers,
            shapes,
            receptive_radius: radius,
        })
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn group(&self) -> GroupSpec {
        self.group
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Activation shapes; entry 0 is the input, entry `i + 1` follows layer `i`.
    pub fn shapes(&self) -> &[ActShape] {
        &self.shapes
    }

    pub fn output_shape(&self) -> ActShape {
        *self.shapes.last().expect("nonempty")
    }

    /// Sum of conv half-widths: pixels within this distance of the border
    /// see zero padding.
    pub fn receptive_radius(&self) -> usize {
        self.receptive_radius
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// All parameters, layer by layer: filter coefficients then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            for f in &layer.filters {
                out.extend_from_slice(f.coefficients());
            }
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters for a network with {}",
                params.len(),
                self.param_count()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        let mut at = 0;
        for layer in &mut self.layers {
            for f in &mut layer.filters {
                let n = f.coefficients().len();
                f.coefficients_mut().copy_from_slice(&params[at..at + n]);
                at += n;
            }
            let n = layer.bias.len();
            layer.bias.copy_from_slice(&params[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Offset of each layer's parameters in [`NetworkSpec::params`].
    pub fn param_offsets(&self) -> Vec<usize> {
        let mut at = 0;
        self.layers
            .iter()
            .map(|l| {
                let o = at;
                at += l.param_count();
                o
            })
            .collect()
    }

    /// Zeroes the coefficients and bias feeding the output of the last
    /// convolution, so the network computes zero (up to later biases).
    pub fn zero_last_conv(&mut self) {
        if let Some(i) = self.layers.iter().rposition(|l| l.kind.is_conv()) {
            for layer in &mut self.layers[i..] {
                for f in &mut layer.filters {
                    f.coefficients_mut().fill(0.0);
                }
                layer.bias.fill(0.0);
            }
        }
    }

    /// Runs every layer and returns the final activation.
    pub fn forward_features(&self, x: &PlanarImage) -> Result<Activation> {
        if x.channels() != self.input_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.input_channels,
                x.channels()
            )));
        }
        let mut acts: Vec<PlanarImage> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = &acts[i];
            let next = match layer.kind {
                LayerKind::Lift | LayerKind::GroupConv | LayerKind::PlainConv => {
                    let bank = layer.expand();
                    correlate(cur, &bank.taps, bank.out_channels, bank.p)
                }
                LayerKind::Bias => add_bias(cur, &layer.bias),
                LayerKind::ReLU => relu(cur),
                LayerKind::ResidualAdd { skip } => cur.zip_map(&acts[skip], |a, b| a + b)?,
                LayerKind::OrientationPool => orientation_pool(cur, self.group.order()),
            };
            acts.push(next);
        }
        let last = acts.pop().expect("nonempty");
        Ok(Activation::from_planar(last, self.output_shape()))
    }

    /// Network output as a planar image; group outputs expose all `t*C`
    /// channels.
    pub fn forward(&self, x: &PlanarImage) -> Result<PlanarImage> {
        Ok(self.forward_features(x)?.into_planar())
    }
}

pub fn forward(net: &NetworkSpec, x: &PlanarImage) -> Result<PlanarImage> {
    net.forward(x)
}

/// Recipe for the layer stacks used throughout: a lifting layer followed by
/// `conv_layers - 1` group layers with bias and ReLU in between, and mean
/// orientation pooling. With `plain`, every convolution is an ordinary one
/// and there is no pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub out_channels: usize,
    pub conv_layers: usize,
    pub filter_size: usize,
    pub cutoff: usize,
    pub group_order: usize,
    pub plain: bool,
    /// wrap every hidden group layer in a residual connection
    pub residual: bool,
    /// draw group-layer filters from a random trigonometric polynomial of
    /// this degree in the relative orientation instead of i.i.d. Hidden
    /// plain layers draw like a `t = 1` group layer.
    pub orientation_harmonics: Option<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            in_channels: 1,
            hidden_channels: 4,
            out_channels: 1,
            conv_layers: 3,
            filter_size: 5,
            cutoff: 2,
            group_order: 4,
            plain: false,
            residual: false,
            orientation_harmonics: None,
        }
    }
}

impl Architecture {
    /// [`Architecture::build`] with a ChaCha8 generator seeded by `seed`.
    pub fn build_seeded(&self, seed: u64) -> Result<NetworkSpec> {
        use rand::SeedableRng;
        self.build(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<NetworkSpec> {
        if self.conv_layers == 0 {
            return Err(Error::InvalidArgument(
                "at least one convolution layer is required".into(),
            ));
        }
        let basis = Arc::new(FourierBasis::new(self.filter_size, self.cutoff)?);
        let group = GroupSpec::new(if self.plain { 1 } else { self.group_order })?;
        let (first, rest) = if self.plain {
            (LayerKind::PlainConv, LayerKind::PlainConv)
        } else {
            (LayerKind::Lift, LayerKind::GroupConv)
        };
        let mut layers = Vec::new();
        let mut channels = self.in_channels;
        for n in 0..self.conv_layers {
            let last = n + 1 == self.conv_layers;
            let out = if last {
                self.out_channels
            } else {
                self.hidden_channels
            };
            let kind = if n == 0 { first } else { rest };
            if n > 0 {
                layers.push(LayerSpec::bias(channels, group, vec![0.0; channels])?);
                layers.push(LayerSpec::relu(channels, group));
            }
            let skip_from = layers.len();
            let layer = match (kind, self.orientation_harmonics) {
                (LayerKind::GroupConv, Some(degree)) => {
                    LayerSpec::smooth_group_conv(channels, out, group, &basis, degree, rng)?
                }
                (LayerKind::PlainConv, Some(degree)) if n > 0 => {
                    let one = GroupSpec::new(1)?;
                    let drawn =
                        LayerSpec::smooth_group_conv(channels, out, one, &basis, degree, rng)?;
                    LayerSpec::plain_conv(channels, out, drawn.filters)?
                }
                _ => LayerSpec::random_conv(kind, channels, out, group, &basis, rng)?,
            };
            layers.push(layer);
            if self.residual && n > 0 && !last && out == channels {
                // activation index before the bias of this block
                layers.push(LayerSpec::residual_add(skip_from - 2, out, group));
            }
            channels = out;
        }
        if !self.plain {
            layers.push(LayerSpec::orientation_pool(channels, group));
        }
        NetworkSpec::new(self.in_channels, group, layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{act_on_feature_map, relative_difference, rotate_image};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn noise_image(h: usize, c: usize, seed: u64) -> PlanarImage {
        let mut r = rng(seed);
        PlanarImage::from_fn(h, h, c, 1.0, |_, _, _| r.random::<f64>() - 0.5)
    }

    #[test]
    fn correlate_matches_direct_sum() {
        let x = noise_image(7, 2, 1);
        let mut r = rng(2);
        let taps: Vec<f64> = (0..3 * 2 * 9).map(|_| r.random::<f64>()).collect();
        let out = correlate(&x, &taps, 3, 3);
        for co in 0..3 {
            for i in 0..7 {
                for j in 0..7 {
                    let mut s = 0.0;
                    for ci in 0..2 {
                        for u in 0..3 {
                            for v in 0..3 {
                                let (yy, xx) =
                                    (i as isize + u as isize - 1, j as isize + v as isize - 1);
                                if yy >= 0 && xx >= 0 && yy < 7 && xx < 7 {
                                    s += taps[((co * 2 + ci) * 3 + u) * 3 + v]
                                        * x.get(yy as usize, xx as usize, ci);
                                }
                            }
                        }
                    }
                    assert!((out.get(i, j, co) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn lift_impulse_response_is_the_rotated_filter() {
        let basis = Arc::new(FourierBasis::new(5, 2).unwrap());
        let g = GroupSpec::new(8).unwrap();
        let layer = LayerSpec::random_conv(LayerKind::Lift, 1, 1, g, &basis, &mut rng(3)).unwrap();
        let mut x = PlanarImage::zeros(9, 9, 1, 1.0);
        x.set(4, 4, 0, 1.0);
        let f = lift_conv(&x, &layer).unwrap();
        for o in 0..8 {
            let taps = layer.filters[0].sample(g.angle(o));
            // correlation with a delta flips the filter about the centre
            for u in 0..5 {
                for v in 0..5 {
                    let got = f.get(4 + 2 - u, 4 + 2 - v, o, 0);
                    assert!((got - taps[u * 5 + v]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn zero_mean_filter_kills_constants() {
        let basis = Arc::new(FourierBasis::new(5, 2).unwrap());
        let g = GroupSpec::new(4).unwrap();
        let mut layer =
            LayerSpec::random_conv(LayerKind::Lift, 1, 2, g, &basis, &mut rng(5)).unwrap();
        // project the coefficients onto zero tap sum; quarter turns keep the sum
        let sampled = basis.sample_basis(0.0);
        let sums: Vec<f64> = sampled.chunks_exact(25).map(|b| b.iter().sum()).collect();
        let norm2: f64 = sums.iter().map(|s| s * s).sum();
        for f in &mut layer.filters {
            let dot: f64 = f.coefficients().iter().zip(&sums).map(|(c, s)| c * s).sum();
            for (c, s) in f.coefficients_mut().iter_mut().zip(&sums) {
                *c -= dot / norm2 * s;
            }
        }
        let x = PlanarImage::from_fn(12, 12, 1, 1.0, |_, _, _| 0.8);
        let out = lift_conv(&x, &layer).unwrap();
        for i in 2..10 {
            for j in 2..10 {
                for o in 0..4 {
                    for c in 0..2 {
                        assert!(out.get(i, j, o, c).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn lift_quarter_turn_equivariance() {
        let basis = Arc::new(FourierBasis::new(5, 2).unwrap());
        let g = GroupSpec::new(4).unwrap();
        let layer = LayerSpec::random_conv(LayerKind::Lift, 2, 3, g, &basis, &mut rng(9)).unwrap();
        let x = noise_image(16, 2, 4);
        let a = lift_conv(&rotate_image(&x, FRAC_PI_2).unwrap(), &layer).unwrap();
        let b = act_on_feature_map(&lift_conv(&x, &layer).unwrap(), FRAC_PI_2, 1).unwrap();
        assert!(relative_difference(&a, &b, 2).unwrap() < 1e-10);
    }

    #[test]
    fn group_conv_quarter_turn_equivariance() {
        let basis = Arc::new(FourierBasis::new(5, 2).unwrap());
        let g = GroupSpec::new(4).unwrap();
        let layer =
            LayerSpec::random_conv(LayerKind::GroupConv, 2, 2, g, &basis, &mut rng(10)).unwrap();
        let f = GroupFeatureMap::from_planar(noise_image(14, 8, 6), 4).unwrap();
        let a = group_conv(&act_on_feature_map(&f, FRAC_PI_2, 1).unwrap(), &layer).unwrap();
        let b = act_on_feature_map(&group_conv(&f, &layer).unwrap(), FRAC_PI_2, 1).unwrap();
        assert!(relative_difference(&a, &b, 2).unwrap() < 1e-10);
    }

    #[test]
    fn trivial_group_conv_is_plain_conv() {
        let basis = Arc::new(FourierBasis::new(5, 2).unwrap());
        let g1 = GroupSpec::new(1).unwrap();
        let gc =
            LayerSpec::random_conv(LayerKind::GroupConv, 2, 3, g1, &basis, &mut rng(12)).unwrap();
        let pc = LayerSpec::plain_conv(2, 3, gc.filters.clone()).unwrap();
        let x = noise_image(10, 2, 8);
        let a = group_conv(&GroupFeatureMap::from_planar(x.clone(), 1).unwrap(), &gc).unwrap();
        let b = plain_conv(&x, &pc).unwrap();
        assert_eq!(a.into_planar(), b);
    }

    #[test]
    fn parameter_sharing_ratio() {
        let basis = Arc::new(FourierBasis::new(5, 2).unwrap());
        for t in [1, 2, 4, 8] {
            let g = GroupSpec::new(t).unwrap();
            let gc =
                LayerSpec::random_conv(LayerKind::GroupConv, 3, 2, g, &basis, &mut rng(1)).unwrap();
            let pc =
                LayerSpec::random_conv(LayerKind::PlainConv, 3 * t, 2 * t, g, &basis, &mut rng(1))
                    .unwrap();
            assert_eq!(gc.param_count() * t, pc.param_count());
        }
    }

    #[test]
    fn group_order_mismatch_rejected() {
        let basis = Arc::new(FourierBasis::new(3, 1).unwrap());
        let layer = LayerSpec::random_conv(
            LayerKind::GroupConv,
            1,
            1,
            GroupSpec::new(4).unwrap(),
            &basis,
            &mut rng(1),
        )
        .unwrap();
        let f = GroupFeatureMap::from_planar(noise_image(6, 2, 1), 2).unwrap();
        assert!(matches!(group_conv(&f, &layer), Err(Error::Shape(_))));
    }

    #[test]
    fn empty_network_is_identity() {
        let net = NetworkSpec::new(2, GroupSpec::new(4).unwrap(), vec![]).unwrap();
        let x = noise_image(5, 2, 3);
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn broken_chains_rejected() {
        let basis = Arc::new(FourierBasis::new(3, 1).unwrap());
        let g = GroupSpec::new(4).unwrap();
        let gc =
            LayerSpec::random_conv(LayerKind::GroupConv, 1, 1, g, &basis, &mut rng(1)).unwrap();
        assert!(NetworkSpec::new(1, g, vec![gc.clone()]).is_err());
        let lift = LayerSpec::random_conv(LayerKind::Lift, 1, 1, g, &basis, &mut rng(1)).unwrap();
        let pool = LayerSpec::orientation_pool(1, g);
        assert!(NetworkSpec::new(1, g, vec![lift.clone(), pool.clone(), gc.clone()]).is_err());
        assert!(NetworkSpec::new(1, g, vec![lift.clone(), lift.clone()]).is_err());
        assert!(NetworkSpec::new(1, g, vec![lift.clone(), gc, pool]).is_ok());
        assert!(NetworkSpec::new(1, g, vec![lift, LayerSpec::residual_add(0, 1, g)]).is_err());
    }

    #[test]
    fn radial_filter_lift_pool_is_invariant() {
        let basis = Arc::new(FourierBasis::new(5, 2).unwrap());
        let g = GroupSpec::new(4).unwrap();
        let mut c = vec![0.0; basis.len()];
        c[0] = 1.0;
        let f = ParamFilter::new(basis.clone(), c).unwrap();
        let net = NetworkSpec::new(
            1,
            g,
            vec![
                LayerSpec::lift(1, 1, g, vec![f]).unwrap(),
                LayerSpec::orientation_pool(1, g),
            ],
        )
        .unwrap();
        let x = noise_image(16, 1, 21);
        for k in 1..4 {
            let th = g.angle(k);
            let a = net.forward(&rotate_image(&x, th).unwrap()).unwrap();
            let b = rotate_image(&net.forward(&x).unwrap(), th).unwrap();
            assert!(relative_difference(&a, &b, 2).unwrap() < 1e-10);
        }
    }

    #[test]
    fn random_net_quarter_turn_equivariance() {
        let arch = Architecture {
            residual: true,
            ..Architecture::default()
        };
        let mut net = arch.build(&mut rng(31)).unwrap();
        // nonzero biases exercise the shared-bias path
        let mut params = net.params();
        let offsets = net.param_offsets();
        for (layer, &off) in net.layers().iter().zip(&offsets) {
            if layer.kind == LayerKind::Bias {
                for k in 0..layer.bias.len() {
                    params[off + k] = 0.1 * (k as f64 + 1.0);
                }
            }
        }
        net.set_params(&params).unwrap();
        let x = noise_image(20, 1, 17);
        let crop = net.receptive_radius();
        for th in [FRAC_PI_2, 2.0 * FRAC_PI_2, 3.0 * FRAC_PI_2] {
            let a = net.forward(&rotate_image(&x, th).unwrap()).unwrap();
            let b = rotate_image(&net.forward(&x).unwrap(), th).unwrap();
            assert!(relative_difference(&a, &b, crop).unwrap() < 1e-8);
        }
    }

    #[test]
    fn params_round_trip() {
        let mut net = Architecture::default().build(&mut rng(2)).unwrap();
        let p = net.params();
        assert_eq!(p.len(), net.param_count());
        let doubled: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        net.set_params(&doubled).unwrap();
        assert_eq!(net.params(), doubled);
        assert!(net.set_params(&p[1..]).is_err());
    }

    #[test]
    fn trivial_group_and_plain_draw_the_same_network() {
        for harmonics in [None, Some(2)] {
            let arch = |plain| Architecture {
                group_order: 1,
                plain,
                orientation_harmonics: harmonics,
                ..Architecture::default()
            };
            let (g, p) = (
                arch(false).build_seeded(4).unwrap(),
                arch(true).build_seeded(4).unwrap(),
            );
            let x = noise_image(12, 1, 5);
            let (a, b) = (g.forward(&x).unwrap(), p.forward(&x).unwrap());
            assert!(relative_difference(&a, &b, 0).unwrap() < 1e-12);
        }
    }
}
