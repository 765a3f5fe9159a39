//! Training of proximal networks, as residual denoisers or end to end
//! through an unrolled solver.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{planar_output, Optimizer, Tape};
use crate::conv::NetworkSpec;
use crate::error::{Error, Result};
use crate::prox::{neural_prox, ProxOperator};
use crate::synthetic::synthetic_images;
use crate::tensor::PlanarImage;
use crate::unfold::{degrade, ista_solve, DegradationOp, UnfoldingConfig};

/// Training aborts once the loss exceeds this value.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoisePair {
    pub clean: PlanarImage,
    pub noisy: PlanarImage,
}

/// Synthetic scenes of side `size` with additive Gaussian noise.
pub fn denoising_set(
    count: usize,
    size: usize,
    mesh: f64,
    sigma: f64,
    seed: u64,
) -> Result<Vec<DenoisePair>> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_65);
    Ok(synthetic_images(count, size, mesh, seed)
        .into_iter()
        .map(|clean| {
            let noisy = clean.map(|v| v + normal.sample(&mut rng));
            DenoisePair { clean, noisy }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    /// `None` trains on the full set every iteration
    pub batch_size: Option<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub net: NetworkSpec,
    /// full-set loss before each update and after the last one
    pub losses: Vec<f64>,
}

/// Mean squared error of `x + net(x)` against the clean images.
pub fn denoising_loss(net: &NetworkSpec, data: &[DenoisePair]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for pair in data {
        let out = neural_prox(&pair.noisy, net)?;
        sum += out.zip_map(&pair.clean, |a, b| a - b)?.norm_sq();
        count += out.data().len();
    }
    Ok(sum / count as f64)
}

/// Loss and parameter gradient over `data`, accumulated in order.
pub fn loss_and_grad(net: &NetworkSpec, data: &[DenoisePair]) -> Result<(f64, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    let channels = planar_output(net)?;
    if channels != net.input_channels() {
        return Err(Error::Shape(
            "denoiser must preserve the channel count".into(),
        ));
    }
    let total: usize = data.iter().map(|p| p.clean.data().len()).sum();
    let scale = 2.0 / total as f64;
    let mut grad = vec![0.0; net.param_count()];
    let mut loss = 0.0;
    for pair in data {
        let mut tape = Tape::new(net.param_count());
        let x = tape.input(pair.noisy.clone());
        let correction = tape.network(net, x, 0)?;
        let out = tape.add(x, correction)?;
        let residual = tape.value(out).zip_map(&pair.clean, |a, b| a - b)?;
        loss += residual.norm_sq();
        let g = tape.backward(out, &residual.map(|v| v * scale))?;
        for (a, b) in grad.iter_mut().zip(&g.params) {
            *a += b;
        }
    }
    Ok((loss / total as f64, grad))
}

/// Minimises the denoising loss. Deterministic for a fixed config.
pub fn train_denoiser(
    net: &NetworkSpec,
    data: &[DenoisePair],
    opt: &mut Optimizer,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    fit(net, data, opt, cfg, denoising_loss, loss_and_grad)
}

/// ISTA from `A^T y` with a neural prox shared by every step.
#[derive(Clone, Debug, PartialEq)]
pub struct Unrolled {
    pub op: DegradationOp,
    pub step_size: f64,
    pub steps: usize,
}

impl Unrolled {
    /// The reconstruction of one observation, identical to [`ista_solve`]
    /// with the neural prox.
    pub fn solve(&self, net: &NetworkSpec, y: &PlanarImage) -> Result<PlanarImage> {
        let cfg = self.config(ProxOperator::neural(net.clone())?);
        Ok(ista_solve(y, &self.op, &cfg)?.0)
    }

    fn config(&self, prox: ProxOperator) -> UnfoldingConfig {
        UnfoldingConfig {
            steps: self.steps,
            step_size: self.step_size,
            prox,
            record_objective: false,
        }
    }
}

/// Observations `A x + noise` of synthetic scenes. The `noisy` field holds
/// the observation.
pub fn degraded_set(
    count: usize,
    size: usize,
    mesh: f64,
    op: &DegradationOp,
    sigma: f64,
    seed: u64,
) -> Result<Vec<DenoisePair>> {
    synthetic_images(count, size, mesh, seed)
        .into_iter()
        .enumerate()
        .map(|(k, clean)| {
            let noisy = degrade(
                op,
                &clean,
                sigma,
                seed ^ (k as u64).wrapping_mul(0x9e37_79b9),
            )?;
            Ok(DenoisePair { clean, noisy })
        })
        .collect()
}

/// Mean squared error of the unrolled reconstructions.
pub fn unrolled_loss(net: &NetworkSpec, data: &[DenoisePair], solver: &Unrolled) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for pair in data {
        let out = solver.solve(net, &pair.noisy)?;
        sum += out.zip_map(&pair.clean, |a, b| a - b)?.norm_sq();
        count += out.data().len();
    }
    Ok(sum / count as f64)
}

/// Loss and parameter gradient through every unrolled step.
pub fn unrolled_loss_and_grad(
    net: &NetworkSpec,
    data: &[DenoisePair],
    solver: &Unrolled,
) -> Result<(f64, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    if planar_output(net)? != net.input_channels() {
        return Err(Error::Shape(
            "prox network must preserve the channel count".into(),
        ));
    }
    let total: usize = data.iter().map(|p| p.clean.data().len()).sum();
    let scale = 2.0 / total as f64;
    let mut grad = vec![0.0; net.param_count()];
    let mut loss = 0.0;
    for pair in data {
        let start = solver.op.adjoint(&pair.noisy)?;
        solver.config(ProxOperator::SoftThreshold(0.0)).validate(
            &solver.op,
            start.height(),
            start.width(),
            start.channels(),
        )?;
        let mut tape = Tape::new(net.param_count());
        let mut x = tape.input(start);
        for _ in 0..solver.steps {
            let moved = tape.grad_step(x, &pair.noisy, &solver.op, solver.step_size)?;
            let correction = tape.network(net, moved, 0)?;
            x = tape.add(moved, correction)?;
        }
        let residual = tape.value(x).zip_map(&pair.clean, |a, b| a - b)?;
        loss += residual.norm_sq();
        let g = tape.backward(x, &residual.map(|v| v * scale))?;
        for (a, b) in grad.iter_mut().zip(&g.params) {
            *a += b;
        }
    }
    Ok((loss / total as f64, grad))
}

/// Trains the prox end to end through the unrolled solver.
pub fn train_unrolled(
    net: &NetworkSpec,
    data: &[DenoisePair],
    solver: &Unrolled,
    opt: &mut Optimizer,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    fit(
        net,
        data,
        opt,
        cfg,
        |n, d| unrolled_loss(n, d, solver),
        |n, d| unrolled_loss_and_grad(n, d, solver),
    )
}

fn fit(
    net: &NetworkSpec,
    data: &[DenoisePair],
    opt: &mut Optimizer,
    cfg: &TrainConfig,
    loss_of: impl Fn(&NetworkSpec, &[DenoisePair]) -> Result<f64>,
    loss_and_grad_of: impl Fn(&NetworkSpec, &[DenoisePair]) -> Result<(f64, Vec<f64>)>,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    if let Some(b) = cfg.batch_size {
        if b == 0 || b > data.len() {
            return Err(Error::InvalidArgument(format!(
                "batch size {b} for {} pairs",
                data.len()
            )));
        }
    }
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = net.params();
    let mut losses = Vec::with_capacity(cfg.iterations + 1);
    let check = |iteration: usize, loss: f64, losses: &[f64]| {
        if loss.is_finite() && loss <= DIVERGENCE_LOSS {
            Ok(())
        } else {
            Err(Error::Divergence {
                iteration,
                loss,
                trace: losses.to_vec(),
            })
        }
    };
    for iteration in 0..cfg.iterations {
        let (full, grad) = match cfg.batch_size {
            None => loss_and_grad_of(&net, data)?,
            Some(b) => {
                let mut idx = sample(&mut rng, data.len(), b).into_vec();
                idx.sort_unstable();
                let batch: Vec<DenoisePair> = idx.iter().map(|&i| data[i].clone()).collect();
                let (_, g) = loss_and_grad_of(&net, &batch)?;
                (loss_of(&net, data)?, g)
            }
        };
        losses.push(full);
        check(iteration, full, &losses)?;
        opt.step(&mut params, &grad)?;
        net.set_params(&params).map_err(|_| Error::Divergence {
            iteration,
            loss: f64::NAN,
            trace: losses.clone(),
        })?;
    }
    let last = loss_of(&net, data)?;
    losses.push(last);
    check(cfg.iterations, last, &losses)?;
    Ok(TrainOutcome { net, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::Architecture;
    use crate::unfold::gaussian_kernel;
    use rand::Rng;

    fn identity_net() -> NetworkSpec {
        let arch = Architecture {
            hidden_channels: 2,
            conv_layers: 2,
            ..Architecture::default()
        };
        let mut net = arch.build(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        net.zero_last_conv();
        net
    }

    #[test]
    fn zero_noise_identity_start_stays_at_zero() {
        let data: Vec<DenoisePair> = synthetic_images(2, 16, 1.0 / 3.0, 1)
            .into_iter()
            .map(|c| DenoisePair {
                clean: c.clone(),
                noisy: c,
            })
            .collect();
        let cfg = TrainConfig {
            iterations: 3,
            batch_size: None,
            seed: 0,
        };
        let out = train_denoiser(&identity_net(), &data, &mut Optimizer::adam(1e-2), &cfg).unwrap();
        assert!(out.losses.iter().all(|&l| l == 0.0));
    }

    fn sr_solver() -> Unrolled {
        let op = DegradationOp::blur_downsample(gaussian_kernel(3, 1.0), 3, 2).unwrap();
        let step_size = 1.0 / op.lipschitz(12, 12, 1).unwrap();
        Unrolled {
            op,
            step_size,
            steps: 3,
        }
    }

    #[test]
    fn unrolled_tape_matches_the_solver() {
        let solver = sr_solver();
        let data = degraded_set(2, 12, 1.0 / 3.0, &solver.op, 0.01, 4).unwrap();
        let net = Architecture {
            hidden_channels: 2,
            conv_layers: 2,
            ..Architecture::default()
        }
        .build_seeded(8)
        .unwrap();
        let (loss, _) = unrolled_loss_and_grad(&net, &data, &solver).unwrap();
        let direct = unrolled_loss(&net, &data, &solver).unwrap();
        assert!(
            (loss - direct).abs() <= 1e-12 * direct,
            "{loss} vs {direct}"
        );
    }

    #[test]
    fn unrolled_gradient_matches_central_differences() {
        let solver = sr_solver();
        let data = degraded_set(1, 12, 1.0 / 3.0, &solver.op, 0.01, 5).unwrap();
        let net = Architecture {
            hidden_channels: 2,
            conv_layers: 2,
            ..Architecture::default()
        }
        .build_seeded(9)
        .unwrap();
        let (_, grad) = unrolled_loss_and_grad(&net, &data, &solver).unwrap();
        let base = net.params();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dir: Vec<f64> = (0..base.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let at = |s: f64| {
            let mut n = net.clone();
            let p: Vec<f64> = base.iter().zip(&dir).map(|(a, d)| a + s * d).collect();
            n.set_params(&p).unwrap();
            unrolled_loss(&n, &data, &solver).unwrap()
        };
        let d = 1e-5;
        let numeric = (at(d) - at(-d)) / (2.0 * d);
        let analytic: f64 = grad.iter().zip(&dir).map(|(g, v)| g * v).sum();
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-12);
        assert!(rel < 1e-4, "{numeric} vs {analytic}");
    }

    #[test]
    fn unrolled_step_size_is_validated() {
        let mut solver = sr_solver();
        let data = degraded_set(1, 12, 1.0 / 3.0, &solver.op, 0.0, 0).unwrap();
        solver.step_size *= 2.0;
        assert!(unrolled_loss_and_grad(&identity_net(), &data, &solver).is_err());
    }

    #[test]
    fn divergence_is_reported_with_trace() {
        let data = denoising_set(2, 16, 1.0 / 3.0, 0.1, 0).unwrap();
        let cfg = TrainConfig {
            iterations: 50,
            batch_size: None,
            seed: 0,
        };
        let err =
            train_denoiser(&identity_net(), &data, &mut Optimizer::sgd(1e6), &cfg).unwrap_err();
        match err {
            Error::Divergence { trace, .. } => assert!(!trace.is_empty()),
            other => panic!("unexpected {other:?}"),
        }
    }
}
