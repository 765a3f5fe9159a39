mod support;

use std::f64::consts::FRAC_PI_2;

use equiprox::conv::Architecture;
use equiprox::prox::ProxOperator;
use equiprox::synthetic::synthetic_images;
use equiprox::tensor::{relative_difference, rotate_image};
use equiprox::unfold::{degrade, gaussian_kernel, ista_solve, DegradationOp, UnfoldingConfig};
use equiprox::PlanarImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracles::best_subset;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> PlanarImage {
    PlanarImage::from_fn(h, w, 1, 1.0, |_, _, _| rng.random_range(-1.0..1.0))
}

fn operators() -> Vec<(String, DegradationOp)> {
    let mut ops = vec![("identity".to_string(), DegradationOp::Identity)];
    for s in 1..=3 {
        for size in [1, 3, 5] {
            let op = DegradationOp::blur_downsample(gaussian_kernel(size, 1.0), size, s).unwrap();
            ops.push((format!("blur{size}_s{s}"), op));
        }
    }
    ops
}

#[test]
fn adjoint_is_the_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for (name, op) in operators() {
        let s = op.scale();
        for _ in 0..100 {
            let n = s * rng.random_range(2..=6);
            let x = random_image(&mut rng, n, n);
            let y = random_image(&mut rng, n / s, n / s);
            let lhs = op.apply(&x).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&op.adjoint(&y).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10, "{name}: {lhs} vs {rhs}");
        }
    }
}

#[test]
fn ista_objective_never_increases_with_l1() {
    let x = &synthetic_images(1, 24, 1.0 / 3.0, 7)[0];
    for (name, op) in operators() {
        let y = degrade(&op, x, 0.05, 3).unwrap();
        let l = op.lipschitz(24, 24, 1).unwrap();
        for eta in [1.0 / l, 0.5 / l] {
            let cfg = UnfoldingConfig {
                steps: 100,
                step_size: eta,
                prox: ProxOperator::soft_threshold(eta * 0.02).unwrap(),
                record_objective: true,
            };
            let (_, trace) = ista_solve(&y, &op, &cfg).unwrap();
            assert_eq!(trace.len(), 101);
            for (k, w) in trace.windows(2).enumerate() {
                assert!(
                    w[1] <= w[0] + 1e-12,
                    "{name} step {}: {} > {}",
                    k + 1,
                    w[1],
                    w[0]
                );
            }
        }
    }
}

#[test]
fn sparse_recovery_matches_best_subset() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..10 {
        let mut truth = vec![0.0; 64];
        let mut placed = 0;
        while placed < 3 {
            let i = rng.random_range(0..64);
            if truth[i] == 0.0 {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                truth[i] = sign * rng.random_range(0.5..1.0);
                placed += 1;
            }
        }
        let x = PlanarImage::new(8, 8, 1, 1.0, truth).unwrap();
        let y = degrade(&DegradationOp::Identity, &x, 0.01, 100 + trial).unwrap();
        let cfg = UnfoldingConfig {
            steps: 50,
            step_size: 1.0,
            prox: ProxOperator::soft_threshold(0.1).unwrap(),
            record_objective: false,
        };
        let (xh, _) = ista_solve(&y, &DegradationOp::Identity, &cfg).unwrap();
        let support: Vec<usize> = (0..64).filter(|&i| xh.data()[i] != 0.0).collect();
        assert_eq!(support, best_subset(y.data()), "trial {trial}");
    }
}

#[test]
fn unfolding_with_equivariant_prox_commutes_with_quarter_turns() {
    let net = Architecture::default().build_seeded(3).unwrap();
    let cfg = UnfoldingConfig {
        steps: 5,
        step_size: 1.0,
        prox: ProxOperator::neural(net).unwrap(),
        record_objective: false,
    };
    let y = degrade(
        &DegradationOp::Identity,
        &synthetic_images(1, 24, 1.0 / 3.0, 4)[0],
        0.1,
        9,
    )
    .unwrap();
    let (base, _) = ista_solve(&y, &DegradationOp::Identity, &cfg).unwrap();
    for q in 1..4 {
        let theta = q as f64 * FRAC_PI_2;
        let (turned, _) = ista_solve(
            &rotate_image(&y, theta).unwrap(),
            &DegradationOp::Identity,
            &cfg,
        )
        .unwrap();
        let err = relative_difference(&turned, &rotate_image(&base, theta).unwrap(), 0).unwrap();
        assert!(err < 1e-8, "quarter turn {q}: {err}");
    }
}
