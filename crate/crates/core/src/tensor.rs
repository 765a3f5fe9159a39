//! Dense image and group feature-map values, and the rotation actions they
//! are compared under.
//!
//! Coordinates follow the usual mathematical orientation: for pixel `(i, j)`
//! (row, column) of an `H x W` grid the physical point is
//! `x = (j - (W-1)/2) h`, `y = ((H-1)/2 - i) h`. Rotating an image by `theta`
//! means `out(p) = in(A(-theta) p)`, i.e. a counter-clockwise turn of the
//! content as displayed.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};

/// Tolerance, in units of quarter turns, under which an angle is treated as
/// an exact multiple of `pi/2`.
const QUARTER_TOL: f64 = 1e-9;

/// Returns the number of quarter turns (mod 4) when `theta` is a multiple of
/// `pi/2`.
pub fn quarter_turns(theta: f64) -> Option<u8> {
    let q = theta / FRAC_PI_2;
    let k = q.round();
    if (q - k).abs() < QUARTER_TOL {
        Some(k.rem_euclid(4.0) as u8)
    } else {
        None
    }
}

/// `(cos theta, sin theta)`, exact at quarter turns so that rotated sample
/// points land bit-exactly on grid points.
pub fn cos_sin(theta: f64) -> (f64, f64) {
    match quarter_turns(theta) {
        Some(0) => (1.0, 0.0),
        Some(1) => (0.0, 1.0),
        Some(2) => (-1.0, 0.0),
        Some(3) => (0.0, -1.0),
        _ => (theta.cos(), theta.sin()),
    }
}

/// An `H x W x C` sampled grid stored row-major in `(y, x, c)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarImage {
    height: usize,
    width: usize,
    channels: usize,
    mesh: f64,
    data: Vec<f64>,
}

impl PlanarImage {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        mesh: f64,
        data: Vec<f64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if !(mesh > 0.0 && mesh.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "mesh must be positive, got {mesh}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "image contains non-finite entries".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            mesh,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize, mesh: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0 && mesh > 0.0);
        Self {
            height,
            width,
            channels,
            mesh,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mesh: f64,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Self::zeros(height, width, channels, mesh);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(y, x, c);
                }
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn mesh(&self) -> f64 {
        self.mesh
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Same grid geometry with new contents.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.height, self.width, self.channels, self.mesh, data)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..self.clone()
        })
    }

    pub(crate) fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    /// Euclidean inner product, accumulated in storage order.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Extracts a single channel as a one-channel image.
    pub fn channel(&self, c: usize) -> Self {
        assert!(c < self.channels);
        Self::from_fn(self.height, self.width, 1, self.mesh, |y, x, _| {
            self.get(y, x, c)
        })
    }
}

/// An `H x W x (t*C)` grid whose channel axis carries an orientation fiber,
/// stored as `(y, x, o, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupFeatureMap {
    height: usize,
    width: usize,
    base_channels: usize,
    group_order: usize,
    mesh: f64,
    data: Vec<f64>,
}

impl GroupFeatureMap {
    pub fn new(
        height: usize,
        width: usize,
        base_channels: usize,
        group_order: usize,
        mesh: f64,
        data: Vec<f64>,
    ) -> Result<Self> {
        if group_order == 0 {
            return Err(Error::InvalidArgument(
                "group order must be at least 1".into(),
            ));
        }
        let img = PlanarImage::new(height, width, base_channels * group_order, mesh, data)?;
        Self::from_planar(img, group_order)
    }

    /// Reinterprets a planar image with `t*C` channels as a feature map.
    pub fn from_planar(img: PlanarImage, group_order: usize) -> Result<Self> {
        if group_order == 0 || img.channels % group_order != 0 {
            return Err(Error::Shape(format!(
                "{} channels cannot be split into {group_order} orientations",
                img.channels
            )));
        }
        Ok(Self {
            height: img.height,
            width: img.width,
            base_channels: img.channels / group_order,
            group_order,
            mesh: img.mesh,
            data: img.data,
        })
    }

    /// The same values viewed as a planar image with `t*C` channels.
    pub fn into_planar(self) -> PlanarImage {
        PlanarImage {
            height: self.height,
            width: self.width,
            channels: self.base_channels * self.group_order,
            mesh: self.mesh,
            data: self.data,
        }
    }

    pub fn to_planar(&self) -> PlanarImage {
        self.clone().into_planar()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn base_channels(&self) -> usize {
        self.base_channels
    }

    pub fn group_order(&self) -> usize {
        self.group_order
    }

    pub fn mesh(&self) -> f64 {
        self.mesh
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, o: usize, c: usize) -> f64 {
        let fiber = self.base_channels * self.group_order;
        self.data[(y * self.width + x) * fiber + o * self.base_channels + c]
    }
}

/// The cyclic rotation group of order `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupSpec {
    order: usize,
}

impl GroupSpec {
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidArgument(
                "group order must be at least 1".into(),
            ));
        }
        Ok(Self { order })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Angle `2*pi*k/t` of the `k`-th group element.
    pub fn angle(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            2.0 * PI * k as f64 / self.order as f64
        }
    }

    pub fn angles(&self) -> Vec<f64> {
        (0..self.order).map(|k| self.angle(k)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RotationKind {
    /// Index permutation by this many quarter turns.
    ExactQuarterTurn(u8),
    /// Bilinear resampling about the grid centre with zero fill.
    Interpolated,
}

/// A rotation by `angle` radians resolved against a grid shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationAction {
    pub angle: f64,
    pub kind: RotationKind,
}

impl RotationAction {
    pub fn for_grid(angle: f64, height: usize, width: usize) -> Result<Self> {
        if !angle.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "rotation angle {angle} is not finite"
            )));
        }
        let kind = match quarter_turns(angle) {
            Some(q) if height == width || q % 2 == 0 => RotationKind::ExactQuarterTurn(q),
            _ if height != width => {
                return Err(Error::Shape(format!(
                    "rotating a {height}x{width} grid by {angle} rad would change its shape"
                )))
            }
            _ => RotationKind::Interpolated,
        };
        Ok(Self { angle, kind })
    }

    pub fn apply(&self, img: &PlanarImage) -> PlanarImage {
        match self.kind {
            RotationKind::ExactQuarterTurn(0) => img.clone(),
            RotationKind::ExactQuarterTurn(q) => permute_quarter(img, q),
            RotationKind::Interpolated => rotate_bilinear(img, self.angle),
        }
    }
}

/// Rotates every channel of `img` by `theta` about the grid centre.
pub fn rotate_image(img: &PlanarImage, theta: f64) -> Result<PlanarImage> {
    Ok(RotationAction::for_grid(theta, img.height, img.width)?.apply(img))
}

fn permute_quarter(img: &PlanarImage, q: u8) -> PlanarImage {
    let (h, w, ch) = (img.height, img.width, img.channels);
    let mut out = img.clone();
    for i in 0..h {
        for j in 0..w {
            let (si, sj) = match q {
                1 => (j, h - 1 - i),
                2 => (h - 1 - i, w - 1 - j),
                3 => (h - 1 - j, i),
                _ => unreachable!(),
            };
            let dst = (i * w + j) * ch;
            let src = (si * w + sj) * ch;
            out.data[dst..dst + ch].copy_from_slice(&img.data[src..src + ch]);
        }
    }
    out
}

fn rotate_bilinear(img: &PlanarImage, theta: f64) -> PlanarImage {
    let (h, w, ch) = (img.height, img.width, img.channels);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (c, s) = cos_sin(theta);
    let mut out = PlanarImage::zeros(h, w, ch, img.mesh);
    for i in 0..h {
        for j in 0..w {
            let px = j as f64 - cx;
            let py = cy - i as f64;
            // source point A(-theta) p
            let qx = c * px + s * py;
            let qy = -s * px + c * py;
            let col = qx + cx;
            let row = cy - qy;
            let r0 = row.floor();
            let c0 = col.floor();
            let fr = row - r0;
            let fc = col - c0;
            let dst = (i * w + j) * ch;
            for (dr, wr) in [(0i64, 1.0 - fr), (1, fr)] {
                for (dc, wc) in [(0i64, 1.0 - fc), (1, fc)] {
                    let weight = wr * wc;
                    if weight == 0.0 {
                        continue;
                    }
                    let sr = r0 as i64 + dr;
                    let sc = c0 as i64 + dc;
                    if sr < 0 || sc < 0 || sr >= h as i64 || sc >= w as i64 {
                        continue;
                    }
                    let src = (sr as usize * w + sc as usize) * ch;
                    for k in 0..ch {
                        out.data[dst + k] += weight * img.data[src + k];
                    }
                }
            }
        }
    }
    out
}

/// Applies the feature-map action: rotate every `(o, c)` slice by `theta`,
/// then move orientation `o` to `(o + k) mod t`.
pub fn act_on_feature_map(f: &GroupFeatureMap, theta: f64, k: usize) -> Result<GroupFeatureMap> {
    let t = f.group_order;
    if k >= t {
        return Err(Error::InvalidArgument(format!(
            "cyclic shift {k} out of range for group order {t}"
        )));
    }
    let rotated = rotate_image(&f.to_planar(), theta)?;
    if k == 0 {
        return GroupFeatureMap::from_planar(rotated, t);
    }
    let c = f.base_channels;
    let fiber = t * c;
    let mut data = vec![0.0; rotated.data.len()];
    for (dst, src) in data
        .chunks_exact_mut(fiber)
        .zip(rotated.data.chunks_exact(fiber))
    {
        for o in 0..t {
            let to = (o + k) % t;
            dst[to * c..(to + 1) * c].copy_from_slice(&src[o * c..(o + 1) * c]);
        }
    }
    GroupFeatureMap::from_planar(rotated.with_data(data)?, t)
}

/// Read access shared by images and feature maps for error metrics.
pub trait Grid {
    /// `(height, width, values per pixel)`
    fn dims(&self) -> (usize, usize, usize);
    fn values(&self) -> &[f64];
}

impl Grid for PlanarImage {
    fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    fn values(&self) -> &[f64] {
        &self.data
    }
}

impl Grid for GroupFeatureMap {
    fn dims(&self) -> (usize, usize, usize) {
        (
            self.height,
            self.width,
            self.base_channels * self.group_order,
        )
    }

    fn values(&self) -> &[f64] {
        &self.data
    }
}

fn check_crop(dims: (usize, usize, usize), crop: usize) -> Result<()> {
    if 2 * crop >= dims.0.min(dims.1) {
        return Err(Error::InvalidArgument(format!(
            "crop {crop} leaves no interior in a {}x{} grid",
            dims.0, dims.1
        )));
    }
    Ok(())
}

/// Squared L2 norm of `a - b` and of `b` on the interior left after removing
/// `crop` pixels from every side. Sequential accumulation in row-major order.
fn cropped_sums(a: &[f64], b: &[f64], dims: (usize, usize, usize), crop: usize) -> (f64, f64) {
    let (h, w, ch) = dims;
    let mut diff = 0.0;
    let mut reference = 0.0;
    for y in crop..h - crop {
        let start = (y * w + crop) * ch;
        let end = (y * w + w - crop) * ch;
        for (x, r) in a[start..end].iter().zip(&b[start..end]) {
            diff += (x - r) * (x - r);
            reference += r * r;
        }
    }
    (diff, reference)
}

/// `||a - b||_2 / ||b||_2` over the interior after cropping `crop` pixels on
/// each side.
pub fn relative_difference<G: Grid>(a: &G, b: &G, crop: usize) -> Result<f64> {
    let dims = a.dims();
    if dims != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", dims, b.dims())));
    }
    check_crop(dims, crop)?;
    let (diff, reference) = cropped_sums(a.values(), b.values(), dims, crop);
    if reference == 0.0 {
        return Err(Error::DegenerateReference);
    }
    Ok((diff / reference).sqrt())
}

/// L2 norm on the cropped interior.
pub fn cropped_norm<G: Grid>(a: &G, crop: usize) -> Result<f64> {
    let dims = a.dims();
    check_crop(dims, crop)?;
    let (_, reference) = cropped_sums(a.values(), a.values(), dims, crop);
    Ok(reference.sqrt())
}
