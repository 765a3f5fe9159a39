//! JSON run configurations. Every field has a default and unknown keys are
//! rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleMode {
    Random,
    QuarterTurns,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub seed: u64,
    pub group_orders: Vec<usize>,
    pub image_size: usize,
    pub images: usize,
    pub feature_scale: f64,
    pub filter_size: usize,
    pub cutoff: usize,
    pub conv_layers: usize,
    pub channels: usize,
    /// `null` draws group filters i.i.d. per relative orientation
    pub orientation_harmonics: Option<usize>,
    pub nets: usize,
    pub angle_mode: AngleMode,
    pub angles_per_image: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        let sweep = equiprox::audit::SweepConfig::default();
        Self {
            seed: sweep.seed,
            group_orders: sweep.group_orders,
            image_size: sweep.image_size,
            images: sweep.images,
            feature_scale: sweep.feature_scale,
            filter_size: sweep.arch.filter_size,
            cutoff: sweep.arch.cutoff,
            conv_layers: sweep.arch.conv_layers,
            channels: sweep.arch.hidden_channels,
            orientation_harmonics: sweep.arch.orientation_harmonics,
            nets: sweep.nets,
            angle_mode: AngleMode::Random,
            angles_per_image: match sweep.angles {
                equiprox::audit::AngleSampling::Random { per_image } => per_image,
                _ => 10,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerConfig {
    pub seed: u64,
    /// image to audit; a synthetic scene when absent
    pub input: Option<PathBuf>,
    pub image_size: usize,
    pub angles: usize,
    pub crop: usize,
    pub lapl0_epsilon: f64,
    /// largest accepted relative spread
    pub threshold: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            input: None,
            image_size: 64,
            angles: 8,
            crop: 2,
            lapl0_epsilon: equiprox::audit::LAPL0_EPSILON,
            threshold: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxKind {
    Soft,
    Tv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    Pgm,
    Eqt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub seed: u64,
    /// clean image; a synthetic scene when absent
    pub input: Option<PathBuf>,
    /// reference for PSNR; defaults to the clean image
    pub ground_truth: Option<PathBuf>,
    /// learned proximal network; the classical prox is used when absent
    pub checkpoint: Option<PathBuf>,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub steps: usize,
    /// `null` uses `1 / L_A`
    pub step_size: Option<f64>,
    pub lambda: f64,
    pub prox: ProxKind,
    pub tv_tolerance: f64,
    pub tv_max_iter: usize,
    pub scale: usize,
    pub blur_size: usize,
    pub blur_sigma: f64,
    pub output_format: ImageFormat,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            input: None,
            ground_truth: None,
            checkpoint: None,
            image_size: 64,
            noise_sigma: 0.1,
            steps: 50,
            step_size: None,
            lambda: 0.05,
            prox: ProxKind::Soft,
            tv_tolerance: 1e-6,
            tv_max_iter: 500,
            scale: 2,
            blur_size: 5,
            blur_sigma: 1.0,
            output_format: ImageFormat::Eqt,
        }
    }
}

/// The network is initialised from `seed + 1` and the data drawn from
/// `seed + 5`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub seed: u64,
    pub images: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub iterations: usize,
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub optimizer: OptimizerChoice,
    pub group_order: usize,
    pub channels: usize,
    pub conv_layers: usize,
    pub filter_size: usize,
    pub cutoff: usize,
    pub plain: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            images: 32,
            image_size: 32,
            noise_sigma: 25.0 / 255.0,
            iterations: 200,
            batch_size: None,
            learning_rate: 3e-3,
            optimizer: OptimizerChoice::Adam,
            group_order: 4,
            channels: 2,
            conv_layers: 3,
            filter_size: 5,
            cutoff: 2,
            plain: false,
        }
    }
}
