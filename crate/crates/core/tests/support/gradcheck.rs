//! Central-difference checks of every differentiable tape primitive.

use std::sync::Arc;

use equiprox::autodiff::{NodeId, Tape};
use equiprox::conv::LayerSpec;
use equiprox::filter::{FourierBasis, ParamFilter};
use equiprox::unfold::{gaussian_kernel, DegradationOp};
use equiprox::{GroupSpec, PlanarImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CONFIGS: u64 = 50;
pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> PlanarImage {
    PlanarImage::from_fn(h, w, c, 0.25, |_, _, _| rng.random_range(-1.0..1.0))
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// `<seed, out>` and its gradients with respect to the input and `params`.
fn evaluate<F>(
    build: &F,
    x: &PlanarImage,
    params: &[f64],
    seed: &PlanarImage,
) -> (f64, PlanarImage, Vec<f64>)
where
    F: Fn(&mut Tape, NodeId, &[f64]) -> NodeId,
{
    let mut tape = Tape::new(params.len());
    let input = tape.input(x.clone());
    let out = build(&mut tape, input, params);
    let loss = tape.value(out).dot(seed).unwrap();
    let g = tape.backward(out, seed).unwrap();
    let gx = g.node(input).cloned().unwrap_or_else(|| x.map(|_| 0.0));
    (loss, gx, g.params)
}

fn loss_only<F>(build: &F, x: &PlanarImage, params: &[f64], seed: &PlanarImage) -> f64
where
    F: Fn(&mut Tape, NodeId, &[f64]) -> NodeId,
{
    let mut tape = Tape::new(params.len());
    let input = tape.input(x.clone());
    let out = build(&mut tape, input, params);
    tape.value(out).dot(seed).unwrap()
}

fn relative(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Largest relative error of directional derivatives along a random input
/// direction and a random parameter direction.
fn check<F>(build: F, x: &PlanarImage, params: &[f64], rng: &mut ChaCha8Rng) -> f64
where
    F: Fn(&mut Tape, NodeId, &[f64]) -> NodeId,
{
    let out_shape = {
        let mut tape = Tape::new(params.len());
        let input = tape.input(x.clone());
        let out = build(&mut tape, input, params);
        tape.value(out).clone()
    };
    let seed = out_shape.map(|_| rng.random_range(-1.0..1.0));
    let (_, gx, gp) = evaluate(&build, x, params, &seed);
    let mut worst: f64 = 0.0;

    let vx = x.map(|_| rng.random_range(-1.0..1.0));
    let analytic = gx.dot(&vx).unwrap();
    let plus = x.zip_map(&vx, |a, v| a + STEP * v).unwrap();
    let minus = x.zip_map(&vx, |a, v| a - STEP * v).unwrap();
    let numeric = (loss_only(&build, &plus, params, &seed)
        - loss_only(&build, &minus, params, &seed))
        / (2.0 * STEP);
    worst = worst.max(relative(analytic, numeric));

    if !params.is_empty() {
        let vp = random_vec(rng, params.len());
        let analytic: f64 = gp.iter().zip(&vp).map(|(g, v)| g * v).sum();
        let plus: Vec<f64> = params.iter().zip(&vp).map(|(p, v)| p + STEP * v).collect();
        let minus: Vec<f64> = params.iter().zip(&vp).map(|(p, v)| p - STEP * v).collect();
        let numeric = (loss_only(&build, x, &plus, &seed) - loss_only(&build, x, &minus, &seed))
            / (2.0 * STEP);
        worst = worst.max(relative(analytic, numeric));
    }
    worst
}

fn filters_from(params: &[f64], basis: &Arc<FourierBasis>) -> Vec<ParamFilter> {
    params
        .chunks(basis.len())
        .map(|c| ParamFilter::new(basis.clone(), c.to_vec()).unwrap())
        .collect()
}

#[derive(Clone, Copy, Debug)]
enum ConvKind {
    Lift,
    Group,
    Plain,
}

fn conv_case(kind: ConvKind, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = if rng.random_bool(0.5) { 3 } else { 5 };
    let cutoff = rng.random_range(0..=(p - 1) / 2);
    let basis = Arc::new(FourierBasis::new(p, cutoff).unwrap());
    let t = rng.random_range(1..=4);
    let group = GroupSpec::new(t).unwrap();
    let cin = rng.random_range(1..=2);
    let cout = rng.random_range(1..=2);
    let (h, w) = (rng.random_range(5..=8), rng.random_range(5..=8));
    let (filters, x_channels) = match kind {
        ConvKind::Lift => (cin * cout, cin),
        ConvKind::Group => (cin * cout * t, cin * t),
        ConvKind::Plain => (cin * cout, cin),
    };
    let x = random_image(&mut rng, h, w, x_channels);
    let params = random_vec(&mut rng, filters * basis.len());
    let build = |tape: &mut Tape, input: NodeId, params: &[f64]| {
        let f = filters_from(params, &basis);
        let layer = match kind {
            ConvKind::Lift => LayerSpec::lift(cin, cout, group, f),
            ConvKind::Group => LayerSpec::group_conv(cin, cout, group, f),
            ConvKind::Plain => LayerSpec::plain_conv(cin, cout, f),
        }
        .unwrap();
        tape.conv(input, &layer, 0).unwrap()
    };
    check(build, &x, &params, &mut rng)
}

/// Worst relative error of one primitive over seeds `0..CONFIGS`.
pub fn worst(case: fn(u64) -> f64) -> f64 {
    (0..CONFIGS).map(case).fold(0.0, f64::max)
}

pub fn lift(seed: u64) -> f64 {
    conv_case(ConvKind::Lift, seed)
}

pub fn group(seed: u64) -> f64 {
    conv_case(ConvKind::Group, 100 + seed)
}

pub fn plain(seed: u64) -> f64 {
    conv_case(ConvKind::Plain, 200 + seed)
}

pub fn bias(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
    let c = rng.random_range(1..=3);
    let t = rng.random_range(1..=4);
    let x = random_image(&mut rng, 4, 5, c * t);
    let params = random_vec(&mut rng, c);
    let build =
        |tape: &mut Tape, input: NodeId, params: &[f64]| tape.bias(input, params, 0).unwrap();
    check(build, &x, &params, &mut rng)
}

/// Moves entries within `margin` of any kink to a safe value.
fn away_from(x: PlanarImage, kinks: &[f64], margin: f64, rng: &mut ChaCha8Rng) -> PlanarImage {
    x.map(|mut v| {
        while kinks.iter().any(|k| (v - k).abs() < margin) {
            v = rng.random_range(-1.0..1.0);
        }
        v
    })
}

pub fn relu(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
    let x = random_image(&mut rng, 5, 6, 2);
    let x = away_from(x, &[0.0], 1e-3, &mut rng);
    let build = |tape: &mut Tape, input: NodeId, _: &[f64]| tape.relu(input).unwrap();
    check(build, &x, &[], &mut rng)
}

pub fn add(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
    let x = random_image(&mut rng, 4, 4, 3);
    let other = random_image(&mut rng, 4, 4, 3);
    let both = rng.random_bool(0.5);
    let build = |tape: &mut Tape, input: NodeId, _: &[f64]| {
        let b = if both {
            input
        } else {
            tape.input(other.clone())
        };
        let r = tape.relu(b).unwrap();
        tape.add(input, if both { input } else { r }).unwrap()
    };
    let x = away_from(x, &[0.0], 1e-3, &mut rng);
    check(build, &x, &[], &mut rng)
}

pub fn pool(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
    let t = rng.random_range(1..=6);
    let c = rng.random_range(1..=3);
    let x = random_image(&mut rng, 4, 3, c * t);
    let build = |tape: &mut Tape, input: NodeId, _: &[f64]| tape.pool(input, t).unwrap();
    check(build, &x, &[], &mut rng)
}

pub fn soft_threshold(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
    let w = rng.random_range(0.0..0.8);
    let x = random_image(&mut rng, 5, 5, 1);
    let x = away_from(x, &[-w, w], 1e-3, &mut rng);
    let build = |tape: &mut Tape, input: NodeId, _: &[f64]| tape.soft_threshold(input, w).unwrap();
    check(build, &x, &[], &mut rng)
}

pub fn grad_step(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
    let scale = rng.random_range(1..=3);
    let n = scale * rng.random_range(2..=4);
    let op = if seed % 4 == 0 {
        DegradationOp::Identity
    } else {
        let size = [1, 3, 5][rng.random_range(0..3)];
        DegradationOp::blur_downsample(
            gaussian_kernel(size, rng.random_range(0.5..1.5)),
            size,
            scale,
        )
        .unwrap()
    };
    let x = random_image(&mut rng, n, n, 1);
    let y = op.apply(&random_image(&mut rng, n, n, 1)).unwrap();
    let eta = rng.random_range(0.1..1.0);
    let build =
        |tape: &mut Tape, input: NodeId, _: &[f64]| tape.grad_step(input, &y, &op, eta).unwrap();
    check(build, &x, &[], &mut rng)
}

/// Every differentiable primitive by name.
pub const PRIMITIVES: [(&str, fn(u64) -> f64); 9] = [
    ("lift", lift),
    ("group", group),
    ("plain", plain),
    ("bias", bias),
    ("relu", relu),
    ("add", add),
    ("pool", pool),
    ("soft_threshold", soft_threshold),
    ("grad_step", grad_step),
];
