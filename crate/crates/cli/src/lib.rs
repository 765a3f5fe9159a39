//! The `equiprox` command line.
//!
//! Exit codes: 0 when the command's check passes, 1 when it fails or
//! training diverges, 2 for usage, configuration and runtime errors.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use thiserror::Error;

use equiprox::audit::{
    emit_regularizer_report, emit_report, regularizer_sweep, spreads, strictly_decreasing,
    sweep_group_orders, sweep_summary, uniform_angles, AngleSampling, RegularizerKind, SweepConfig,
};
use equiprox::autodiff::Optimizer;
use equiprox::conv::Architecture;
use equiprox::prox::ProxOperator;
use equiprox::synthetic::synthetic_images;
use equiprox::train::{denoising_set, train_denoiser, TrainConfig};
use equiprox::unfold::{
    degrade, gaussian_kernel, ista_solve, psnr, DegradationOp, UnfoldingConfig,
};
use equiprox::{checkpoint, io};

use config::{
    AngleMode, AuditConfig, ImageFormat, OptimizerChoice, ProxKind, RegularizerConfig, SolveConfig,
    TrainRunConfig,
};

/// Grid spacing of generated scenes.
pub const SCENE_MESH: f64 = 1.0 / 3.0;

/// Largest mean error accepted for exact quarter-turn audits.
pub const QUARTER_TURN_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read config {path}: {source}")]
    ConfigRead {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    ConfigParse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] equiprox::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(equiprox::Error::Divergence { .. }) => 1,
            _ => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "equiprox",
    version,
    about = "Rotation-equivariant proximal networks and their audits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Equivariance error of random networks across group orders
    AuditEquivariance(Common),
    /// Rotation invariance of classical regularizers
    AuditRegularizers(Common),
    /// ISTA denoising
    Denoise(Common),
    /// ISTA super-resolution with a blur and downsampling model
    Sr(Common),
    /// Train a proximal network as a residual denoiser
    Train(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON configuration; every key is optional
    #[arg(long)]
    config: Option<PathBuf>,
    /// output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// overrides the configured seed
    #[arg(long)]
    seed: Option<u64>,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut impl Write, err: &mut impl Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    let result = match &cli.command {
        Command::AuditEquivariance(c) => {
            load(c).and_then(|cfg| audit_equivariance(&cfg, &c.out, out))
        }
        Command::AuditRegularizers(c) => {
            load(c).and_then(|cfg| audit_regularizers(&cfg, &c.out, out))
        }
        Command::Denoise(c) => load(c).and_then(|cfg| solve(&cfg, false, &c.out, out)),
        Command::Sr(c) => load(c).and_then(|cfg| solve(&cfg, true, &c.out, out)),
        Command::Train(c) => load(c).and_then(|cfg| train(&cfg, &c.out, out, err)),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

trait Seeded {
    fn set_seed(&mut self, seed: u64);
}

macro_rules! seeded {
    ($($t:ty),*) => {
        $(impl Seeded for $t {
            fn set_seed(&mut self, seed: u64) {
                self.seed = seed;
            }
        })*
    };
}

seeded!(AuditConfig, RegularizerConfig, SolveConfig, TrainRunConfig);

fn load<T: DeserializeOwned + Default + Seeded>(c: &Common) -> Result<T, CliError> {
    let mut cfg = match &c.config {
        None => T::default(),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| CliError::ConfigRead {
                path: path.clone(),
                source,
            })?;
            serde_json::from_str(&text).map_err(|source| CliError::ConfigParse {
                path: path.clone(),
                source,
            })?
        }
    };
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn require(ok: bool, msg: &str) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(msg.into()))
    }
}

pub fn audit_equivariance(
    cfg: &AuditConfig,
    dir: &Path,
    out: &mut impl Write,
) -> Result<bool, CliError> {
    require(
        !cfg.group_orders.is_empty(),
        "group_orders must not be empty",
    )?;
    require(
        cfg.images > 0 && cfg.nets > 0,
        "images and nets must be positive",
    )?;
    require(cfg.image_size > 0, "image_size must be positive")?;
    let angles = match cfg.angle_mode {
        AngleMode::Random => {
            require(
                cfg.angles_per_image > 0,
                "angles_per_image must be positive",
            )?;
            AngleSampling::Random {
                per_image: cfg.angles_per_image,
            }
        }
        AngleMode::QuarterTurns => AngleSampling::QuarterTurns,
    };
    let sweep = SweepConfig {
        arch: Architecture {
            hidden_channels: cfg.channels,
            conv_layers: cfg.conv_layers,
            filter_size: cfg.filter_size,
            cutoff: cfg.cutoff,
            orientation_harmonics: cfg.orientation_harmonics,
            ..Architecture::default()
        },
        group_orders: cfg.group_orders.clone(),
        images: cfg.images,
        image_size: cfg.image_size,
        feature_scale: cfg.feature_scale,
        angles,
        nets: cfg.nets,
        seed: cfg.seed,
    };
    let reports = sweep_group_orders(&sweep)?;
    emit_report(&reports, dir)?;
    let _ = write!(out, "{}", sweep_summary(&reports));
    let mut pass =
        strictly_decreasing(&reports) && reports.iter().all(|r| r.bound_satisfied == Some(true));
    if cfg.angle_mode == AngleMode::QuarterTurns {
        let exact = reports
            .iter()
            .all(|r| r.mean_error < QUARTER_TURN_TOLERANCE);
        let _ = writeln!(out, "quarter_turn_exact: {exact}");
        pass &= exact;
    }
    Ok(pass)
}

pub fn audit_regularizers(
    cfg: &RegularizerConfig,
    dir: &Path,
    out: &mut impl Write,
) -> Result<bool, CliError> {
    require(cfg.angles > 0, "angles must be positive")?;
    require(cfg.threshold >= 0.0, "threshold must be nonnegative")?;
    let image = match &cfg.input {
        Some(path) => io::load_image(path)?,
        None => {
            require(cfg.image_size > 0, "image_size must be positive")?;
            synthetic_images(1, cfg.image_size, SCENE_MESH, cfg.seed).remove(0)
        }
    };
    let kinds = RegularizerKind::all().map(|k| match k {
        RegularizerKind::LapL0 { .. } => RegularizerKind::LapL0 {
            epsilon: cfg.lapl0_epsilon,
        },
        other => other,
    });
    let samples = regularizer_sweep(&image, &kinds, &uniform_angles(cfg.angles), cfg.crop)?;
    emit_regularizer_report(&samples, cfg.threshold, dir)?;
    let all = spreads(&samples);
    for (kind, spread) in &all {
        let _ = writeln!(out, "{}: relative_spread={spread:.6e}", kind.name());
    }
    let pass = all.iter().all(|&(_, s)| s < cfg.threshold);
    let _ = writeln!(out, "invariant: {pass}");
    Ok(pass)
}

fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

pub fn solve(
    cfg: &SolveConfig,
    super_resolve: bool,
    dir: &Path,
    out: &mut impl Write,
) -> Result<bool, CliError> {
    require(cfg.lambda >= 0.0, "lambda must be nonnegative")?;
    let clean = match &cfg.input {
        Some(path) => io::load_image(path)?,
        None => {
            require(cfg.image_size > 0, "image_size must be positive")?;
            synthetic_images(1, cfg.image_size, SCENE_MESH, cfg.seed).remove(0)
        }
    };
    let truth = match &cfg.ground_truth {
        Some(path) => io::load_image(path)?,
        None => clean.clone(),
    };
    let op = if super_resolve {
        DegradationOp::blur_downsample(
            gaussian_kernel(cfg.blur_size, cfg.blur_sigma),
            cfg.blur_size,
            cfg.scale,
        )?
    } else {
        DegradationOp::Identity
    };
    let y = degrade(&op, &clean, cfg.noise_sigma, cfg.seed)?;
    let eta = match cfg.step_size {
        Some(eta) => eta,
        None => 1.0 / op.lipschitz(clean.height(), clean.width(), clean.channels())?,
    };
    let prox = match &cfg.checkpoint {
        Some(path) => ProxOperator::neural(checkpoint::load(path)?)?,
        None => match cfg.prox {
            ProxKind::Soft => ProxOperator::soft_threshold(eta * cfg.lambda)?,
            ProxKind::Tv => ProxOperator::tv(eta * cfg.lambda, cfg.tv_tolerance, cfg.tv_max_iter)?,
        },
    };
    let unfolding = UnfoldingConfig {
        steps: cfg.steps,
        step_size: eta,
        record_objective: cfg.checkpoint.is_none(),
        prox,
    };
    let (restored, trace) = ista_solve(&y, &op, &unfolding)?;
    let baseline = if super_resolve {
        // zero-filled upsampling without the blur
        DegradationOp::blur_downsample(vec![1.0], 1, cfg.scale)?.adjoint(&y)?
    } else {
        y.clone()
    };
    let restored_psnr = psnr(&restored, &truth, 1.0)?;
    let baseline_psnr = psnr(&baseline, &truth, 1.0)?;

    fs::create_dir_all(dir)?;
    let name = match cfg.output_format {
        ImageFormat::Pgm => "restored.pgm",
        ImageFormat::Eqt => "restored.eqt",
    };
    io::save_image(&dir.join(name), &restored)?;
    let line = format!(
        "psnr_db={} baseline_psnr_db={} steps={} step_size={eta:.6e}",
        format_psnr(restored_psnr),
        format_psnr(baseline_psnr),
        cfg.steps
    );
    fs::write(dir.join("metrics.txt"), format!("{line}\n"))?;
    if !trace.is_empty() {
        let mut csv = String::from("step,objective\n");
        for (k, v) in trace.iter().enumerate() {
            let _ = writeln!(csv, "{k},{v:.17e}");
        }
        fs::write(dir.join("objective.csv"), csv)?;
    }
    let _ = writeln!(out, "{line}");
    Ok(true)
}

fn losses_csv(losses: &[f64]) -> String {
    let mut csv = String::from("iteration,loss\n");
    for (k, v) in losses.iter().enumerate() {
        let _ = writeln!(csv, "{k},{v:.17e}");
    }
    csv
}

pub fn train(
    cfg: &TrainRunConfig,
    dir: &Path,
    out: &mut impl Write,
    err: &mut impl Write,
) -> Result<bool, CliError> {
    require(
        cfg.images > 0 && cfg.image_size > 0,
        "images and image_size must be positive",
    )?;
    require(
        cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite(),
        "learning_rate must be positive",
    )?;
    let arch = Architecture {
        hidden_channels: cfg.channels,
        conv_layers: cfg.conv_layers,
        filter_size: cfg.filter_size,
        cutoff: cfg.cutoff,
        group_order: cfg.group_order,
        plain: cfg.plain,
        ..Architecture::default()
    };
    let mut net = arch.build_seeded(cfg.seed.wrapping_add(1))?;
    net.zero_last_conv();
    let data = denoising_set(
        cfg.images,
        cfg.image_size,
        SCENE_MESH,
        cfg.noise_sigma,
        cfg.seed.wrapping_add(5),
    )?;
    let mut opt = match cfg.optimizer {
        OptimizerChoice::Sgd => Optimizer::sgd(cfg.learning_rate),
        OptimizerChoice::Adam => Optimizer::adam(cfg.learning_rate),
    };
    let train_cfg = TrainConfig {
        iterations: cfg.iterations,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    };
    fs::create_dir_all(dir)?;
    let outcome = match train_denoiser(&net, &data, &mut opt, &train_cfg) {
        Ok(o) => o,
        Err(equiprox::Error::Divergence {
            iteration,
            loss,
            trace,
        }) => {
            fs::write(dir.join("losses.csv"), losses_csv(&trace))?;
            let _ = writeln!(
                err,
                "training diverged at iteration {iteration} (loss {loss:e})"
            );
            return Ok(false);
        }
        Err(e) => return Err(e.into()),
    };
    checkpoint::save(&outcome.net, &dir.join("model.eqck"))?;
    fs::write(dir.join("losses.csv"), losses_csv(&outcome.losses))?;
    let initial = outcome.losses[0];
    let last = *outcome.losses.last().expect("at least one loss");
    let pass = cfg.iterations > 0 && last <= 0.5 * initial;
    let _ = writeln!(
        out,
        "params={} initial_loss={initial:.6e} final_loss={last:.6e} ratio={:.4} pass={pass}",
        net.param_count(),
        last / initial
    );
    Ok(pass)
}
