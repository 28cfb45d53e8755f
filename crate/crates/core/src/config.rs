//! Experiment configuration, parsed strictly from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mkd::MkdConfig;
use crate::model::{ConvMode, ModelConfig};
use crate::synth::{ScaleProfile, SuiteParams};
use crate::topology::{CoefficientMode, SkeletonGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    FedAvg,
    FedProx,
    FedBn,
    Fsar,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [Self::FedAvg, Self::FedProx, Self::FedBn, Self::Fsar];

    pub fn name(self) -> &'static str {
        match self {
            Self::FedAvg => "fedavg",
            Self::FedProx => "fedprox",
            Self::FedBn => "fedbn",
            Self::Fsar => "fsar",
        }
    }

    /// Spatial convolution the strategy trains by default.
    pub fn default_conv_mode(self) -> ConvMode {
        match self {
            Self::Fsar => ConvMode::Ats,
            _ => ConvMode::Vanilla,
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}` (expected fedavg, fedprox, fedbn or fsar)")))
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_frames")]
    pub frames: usize,
    #[serde(default = "d_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "d_kernel")]
    pub temporal_kernel: usize,
    #[serde(default = "d_strides")]
    pub strides: Vec<usize>,
    #[serde(default = "d_feature_dim")]
    pub feature_dim: usize,
    /// Overrides the strategy's default spatial convolution.
    #[serde(default)]
    pub conv_mode: Option<ConvMode>,
    #[serde(default = "d_coef_mode")]
    pub coefficient_mode: CoefficientMode,
    #[serde(default = "d_coefficients")]
    pub coefficients: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    #[serde(default = "d_clients")]
    pub n_clients: usize,
    #[serde(default = "d_rounds")]
    pub rounds: usize,
    #[serde(default = "d_one")]
    pub local_epochs: usize,
    #[serde(default = "d_strategy")]
    pub strategy: StrategyKind,
    #[serde(default = "d_momentum")]
    pub server_momentum: f64,
    #[serde(default)]
    pub mu: f64,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    #[serde(default = "d_onef")]
    pub lambda_ce: f64,
    #[serde(default = "d_onef")]
    pub lambda_kd: f64,
    #[serde(default = "d_lambda_reg")]
    pub lambda_reg: f64,
    #[serde(default = "d_grains")]
    pub grains: usize,
    #[serde(default = "d_onef")]
    pub kd_temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "d_profile")]
    pub profile: ScaleProfile,
    #[serde(default = "d_base")]
    pub base_samples: usize,
    #[serde(default = "d_classes")]
    pub classes_per_client: usize,
    #[serde(default = "d_noise")]
    pub noise: f64,
    #[serde(default = "d_rewire")]
    pub rewire: usize,
    #[serde(default = "d_amp_jitter")]
    pub amplitude_jitter: f64,
    #[serde(default = "d_phase_jitter")]
    pub phase_jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "d_one")]
    pub interval: usize,
    #[serde(default = "d_one")]
    pub knn_k: usize,
    /// Id of a held-out client, at or beyond `n_clients`.
    #[serde(default)]
    pub unseen_client: Option<usize>,
    /// Eval points averaged into the final accuracy.
    #[serde(default = "d_final_window")]
    pub final_window: usize,
    /// Window of the rolling standard deviation.
    #[serde(default = "d_rolling")]
    pub rolling_window: usize,
    /// Probe samples per client for block similarity analysis.
    #[serde(default = "d_probe")]
    pub probe_per_client: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "d_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub federation: FederationSection,
    pub loss: LossSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

fn d_frames() -> usize { 50 }
fn d_channels() -> Vec<usize> { vec![16, 32, 64] }
fn d_kernel() -> usize { 9 }
fn d_strides() -> Vec<usize> { vec![1, 2, 2] }
fn d_feature_dim() -> usize { 128 }
fn d_coef_mode() -> CoefficientMode { CoefficientMode::Learnable }
fn d_coefficients() -> [f64; 3] { [1.0, 1.0, 1.0] }
fn d_clients() -> usize { 3 }
fn d_rounds() -> usize { 300 }
fn d_one() -> usize { 1 }
fn d_strategy() -> StrategyKind { StrategyKind::Fsar }
fn d_momentum() -> f64 { 0.9 }
fn d_lr() -> f64 { 0.05 }
fn d_wd() -> f64 { 1e-4 }
fn d_batch() -> usize { 32 }
fn d_onef() -> f64 { 1.0 }
fn d_lambda_reg() -> f64 { 0.1 }
fn d_grains() -> usize { 2 }
fn d_profile() -> ScaleProfile { ScaleProfile::Skewed }
fn d_base() -> usize { 400 }
fn d_classes() -> usize { 10 }
fn d_noise() -> f64 { 0.05 }
fn d_rewire() -> usize { 3 }
fn d_amp_jitter() -> f64 { 0.1 }
fn d_phase_jitter() -> f64 { 0.2 }
fn d_final_window() -> usize { 10 }
fn d_rolling() -> usize { 5 }
fn d_probe() -> usize { 16 }
fn d_name() -> String { "experiment".into() }

impl ExperimentConfig {
    /// Parses and validates; errors carry the offending line.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            match line {
                Some(l) => Error::Config(format!("line {l}: {}", e.message())),
                None => Error::Config(e.message().to_owned()),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        let f = &self.federation;
        if f.n_clients < 2 {
            return Err(Error::Config(format!("n_clients must be at least 2, got {}", f.n_clients)));
        }
        if f.local_epochs == 0 || f.batch_size < 2 {
            return Err(Error::Config("local_epochs must be positive and batch_size at least 2".into()));
        }
        if !(0.0..1.0).contains(&f.server_momentum) {
            return Err(Error::Config(format!("server_momentum must lie in [0, 1), got {}", f.server_momentum)));
        }
        if f.mu < 0.0 {
            return Err(Error::Config(format!("mu must be nonnegative, got {}", f.mu)));
        }
        let l = &self.loss;
        if [l.lambda_ce, l.lambda_kd, l.lambda_reg].iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        self.mkd().validate(self.model.channels.len())?;
        if self.data.noise < 0.0 {
            return Err(Error::Config("noise must be nonnegative".into()));
        }
        let e = &self.eval;
        if e.interval == 0 || e.knn_k == 0 || e.final_window == 0 || e.rolling_window < 2 {
            return Err(Error::Config(
                "eval interval, knn_k and final_window must be positive; rolling_window at least 2".into(),
            ));
        }
        if let Some(u) = e.unseen_client {
            if u < f.n_clients {
                return Err(Error::Config(format!(
                    "unseen_client {u} collides with a federated client (n_clients = {})",
                    f.n_clients
                )));
            }
        }
        Ok(())
    }

    pub fn skeleton(&self) -> SkeletonGraph {
        SkeletonGraph::ntu25()
    }

    pub fn conv_mode(&self) -> ConvMode {
        self.model
            .conv_mode
            .unwrap_or_else(|| self.federation.strategy.default_conv_mode())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            joints: self.skeleton().joints,
            frames: m.frames,
            in_channels: crate::synth::COORDS,
            channels: m.channels.clone(),
            temporal_kernel: m.temporal_kernel,
            strides: m.strides.clone(),
            feature_dim: m.feature_dim,
            num_classes: self.data.classes_per_client,
            conv_mode: self.conv_mode(),
            coefficient_mode: m.coefficient_mode,
            coefficients: m.coefficients,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mkd(&self) -> MkdConfig {
        MkdConfig {
            grains: self.loss.grains,
            kd_temperature: self.loss.kd_temperature,
        }
    }

    pub fn suite_params(&self) -> SuiteParams {
        SuiteParams {
            profile: self.data.profile,
            base_samples: self.data.base_samples,
            classes_per_client: self.data.classes_per_client,
            frames: self.model.frames,
            skeleton: self.skeleton(),
            rewire: self.data.rewire,
            noise: self.data.noise,
            amplitude_jitter: self.data.amplitude_jitter,
            phase_jitter: self.data.phase_jitter,
        }
    }
}
