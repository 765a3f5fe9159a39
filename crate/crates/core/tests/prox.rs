use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use equiprox::audit::{bound_inputs, theorem1_bound};
use equiprox::conv::Architecture;
use equiprox::prox::{check_prox_equivariance, soft_threshold, tv_prox, ProxOperator};
use equiprox::synthetic::synthetic_images;
use equiprox::PlanarImage;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exact 1D TV denoising by the taut-string construction: the solution is
/// the derivative of the shortest path through the tube of half-width
/// `lambda` around the cumulative sum of `y`, pinned at both ends.
fn taut_string(y: &[f64], lambda: f64) -> Vec<f64> {
    let n = y.len();
    let mut cum = vec![0.0; n + 1];
    for i in 0..n {
        cum[i + 1] = cum[i] + y[i];
    }
    let lo = |k: usize| {
        if k == 0 || k == n {
            cum[k]
        } else {
            cum[k] - lambda
        }
    };
    let hi = |k: usize| {
        if k == 0 || k == n {
            cum[k]
        } else {
            cum[k] + lambda
        }
    };
    let mut knots = vec![(0usize, 0.0)];
    let (mut k0, mut v0) = (0usize, 0.0);
    'outer: while k0 < n {
        let (mut lower_slope, mut lower_at) = (f64::NEG_INFINITY, k0);
        let (mut upper_slope, mut upper_at) = (f64::INFINITY, k0);
        for k in k0 + 1..=n {
            let d = (k - k0) as f64;
            let (sl, sh) = ((lo(k) - v0) / d, (hi(k) - v0) / d);
            if sl > upper_slope {
                // the string wraps over the tightest upper vertex
                (k0, v0) = (upper_at, hi(upper_at));
                knots.push((k0, v0));
                continue 'outer;
            }
            if sh < lower_slope {
                (k0, v0) = (lower_at, lo(lower_at));
                knots.push((k0, v0));
                continue 'outer;
            }
            if sl > lower_slope {
                (lower_slope, lower_at) = (sl, k);
            }
            if sh < upper_slope {
                (upper_slope, upper_at) = (sh, k);
            }
        }
        knots.push((n, cum[n]));
        break;
    }
    let mut x = vec![0.0; n];
    for w in knots.windows(2) {
        let ((a, va), (b, vb)) = (w[0], w[1]);
        let slope = (vb - va) / (b - a) as f64;
        x[a..b].fill(slope);
    }
    x
}

fn row(v: &[f64]) -> PlanarImage {
    PlanarImage::new(1, v.len(), 1, 1.0, v.to_vec()).unwrap()
}

#[test]
fn taut_string_oracle_closed_form() {
    let x = taut_string(&[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0], 0.5);
    for (i, v) in x.iter().enumerate() {
        let expect = if i < 4 { 0.125 } else { 0.875 };
        assert!((v - expect).abs() < 1e-15);
    }
}

#[test]
fn tv_prox_matches_taut_string_on_a_step() {
    let y = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
    let out = tv_prox(&row(&y), 0.5, 1e-13, 200_000).unwrap();
    assert!(out.converged);
    for (a, b) in out.image.data().iter().zip(taut_string(&y, 0.5)) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn tv_prox_matches_taut_string_on_random_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let n = rng.random_range(2..20);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lambda = rng.random_range(0.05..1.5);
        let out = tv_prox(&row(&y), lambda, 1e-13, 500_000).unwrap();
        for (a, b) in out.image.data().iter().zip(taut_string(&y, lambda)) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn tv_prox_commutes_with_quarter_turns() {
    let x = &synthetic_images(1, 24, 1.0 / 3.0, 8)[0];
    let p = ProxOperator::tv(0.05, 1e-10, 20_000).unwrap();
    for q in 1..4 {
        let err = check_prox_equivariance(&p, x, q as f64 * FRAC_PI_2).unwrap();
        assert!(err < 1e-6, "quarter turn {q}: {err}");
    }
}

#[test]
fn neural_prox_is_exact_under_quarter_turns() {
    let net = Architecture::default().build_seeded(21).unwrap();
    let p = ProxOperator::neural(net).unwrap();
    let x = &synthetic_images(1, 32, 1.0 / 3.0, 2)[0];
    for q in 1..4 {
        assert!(check_prox_equivariance(&p, x, q as f64 * FRAC_PI_2).unwrap() < 1e-8);
    }
}

#[test]
fn neural_prox_error_is_within_the_bound() {
    let arch = Architecture {
        group_order: 8,
        ..Architecture::default()
    };
    let net = arch.build_seeded(5).unwrap();
    let x = synthetic_images(1, 48, 1.0 / 3.0, 3).remove(0);
    let bound = theorem1_bound(&bound_inputs(&net, std::slice::from_ref(&x)).unwrap())
        .unwrap()
        .bound;
    let err = check_prox_equivariance(&ProxOperator::neural(net).unwrap(), &x, FRAC_PI_4).unwrap();
    assert!(err > 0.0 && err <= bound, "error {err} bound {bound}");
}

fn vec_image(n: usize) -> impl Strategy<Value = PlanarImage> {
    prop::collection::vec(-3.0..3.0f64, n * n)
        .prop_map(move |d| PlanarImage::new(n, n, 1, 1.0, d).unwrap())
}

proptest! {
    #[test]
    fn soft_threshold_is_monotone_and_nonexpansive(
        a in -5.0..5.0f64,
        b in -5.0..5.0f64,
        w in 0.0..3.0f64,
    ) {
        let s = |v: f64| soft_threshold(&row(&[v]), w).data()[0];
        prop_assert!((s(a) - s(b)).abs() <= (a - b).abs() + 1e-14);
        if a <= b {
            prop_assert!(s(a) <= s(b));
        }
    }

    #[test]
    fn soft_threshold_commutes_with_index_permutations(x in vec_image(7), w in 0.0..2.0f64, q in 1u8..4) {
        let p = ProxOperator::soft_threshold(w).unwrap();
        let rotated = equiprox::tensor::rotate_image(&x, q as f64 * FRAC_PI_2).unwrap();
        if soft_threshold(&rotated, w).norm() > 0.0 {
            prop_assert!(check_prox_equivariance(&p, &x, q as f64 * FRAC_PI_2).unwrap() <= 1e-14);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn tv_prox_is_nonexpansive(a in vec_image(6), b in vec_image(6), w in 0.05..1.0f64) {
        let tol = 1e-11;
        let pa = tv_prox(&a, w, tol, 100_000).unwrap().image;
        let pb = tv_prox(&b, w, tol, 100_000).unwrap().image;
        let lhs = pa.zip_map(&pb, |x, y| x - y).unwrap().norm();
        let rhs = a.zip_map(&b, |x, y| x - y).unwrap().norm();
        prop_assert!(lhs <= rhs + 1e-6);
    }
}
