use serde::{Deserialize, Serialize};

use crate::divergences::{BehaviorConfig, Kernel, KernelKind};
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::eval::DetectorConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Bc,
    Td3bc,
    Bear,
}

/// Where the actions of the gradient-penalty batch come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GpSampling {
    Dataset,
    Policy,
    Random,
}

/// How critic values become per-row constraint weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrMode {
    /// Batch min-max normalization into [0, 1].
    Minmax,
    /// The detached mean twin-Q value itself.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub algorithm: Algorithm,
    pub env: EnvKind,
    pub use_gp: bool,
    pub use_cr: bool,
    pub cr_mode: CrMode,
    pub gamma: f64,
    pub alpha: f64,
    pub lambda_gp: f64,
    pub gp_interval: u64,
    pub gp_threshold: f64,
    pub gp_sampling: GpSampling,
    pub gp_expansion: usize,
    pub epsilon: f64,
    pub tau: f64,
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub policy_delay: u64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub eval_interval: u64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub kernel: KernelKind,
    pub kernel_sigma: f64,
    pub mmd_samples: usize,
    pub dual_lr: f64,
    pub initial_log_eta: f64,
    pub behavior: BehaviorConfig,
    pub eval_episodes: usize,
    pub separability_samples: usize,
    pub grad_norm_samples: usize,
    pub log_interval: u64,
    /// Train on the top-X% reward transitions only (the %BC / %TD3+BC baselines).
    pub percentile: Option<f64>,
    /// Composite Lipschitz constant for the gradient bound column, if wanted.
    pub lipschitz_coupling: Option<f64>,
    pub detector: DetectorConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Td3bc,
            env: EnvKind::Pointmass2d,
            use_gp: false,
            use_cr: false,
            cr_mode: CrMode::Minmax,
            gamma: 0.99,
            alpha: 2.5,
            lambda_gp: 1.0,
            gp_interval: 5,
            gp_threshold: 1.0,
            gp_sampling: GpSampling::Random,
            gp_expansion: 16,
            epsilon: 0.05,
            tau: 0.005,
            policy_noise: 0.2,
            noise_clip: 0.5,
            policy_delay: 2,
            batch_size: 256,
            total_steps: 50_000,
            eval_interval: 5_000,
            seed: 0,
            hidden: vec![64, 64],
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            kernel: KernelKind::Laplacian,
            kernel_sigma: 1.0,
            mmd_samples: 4,
            dual_lr: 1e-3,
            initial_log_eta: 0.0,
            behavior: BehaviorConfig::default(),
            eval_episodes: crate::eval::EVAL_EPISODES,
            separability_samples: 1000,
            grad_norm_samples: 1000,
            log_interval: 100,
            percentile: None,
            lipschitz_coupling: None,
            detector: DetectorConfig::default(),
        }
    }
}

impl AgentConfig {
    /// The gradient penalty runs only when enabled with a positive weight.
    pub fn gp_active(&self) -> bool {
        self.use_gp && self.lambda_gp > 0.0
    }

    pub fn kernel(&self) -> Result<Kernel> {
        Kernel::new(self.kernel, self.kernel_sigma)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must be in [0, 1), got {}", self.gamma));
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(self.lambda_gp >= 0.0) {
            return bad(format!("lambda_gp must be >= 0, got {}", self.lambda_gp));
        }
        if !(self.gp_threshold > 0.0) {
            return bad(format!("gp_threshold must be > 0, got {}", self.gp_threshold));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must be in (0, 1], got {}", self.tau));
        }
        if !(self.policy_noise >= 0.0 && self.noise_clip >= 0.0) {
            return bad("policy_noise and noise_clip must be >= 0".into());
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0 && self.dual_lr > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        for (name, v) in [
            ("gp_interval", self.gp_interval),
            ("policy_delay", self.policy_delay),
            ("total_steps", self.total_steps),
            ("eval_interval", self.eval_interval),
            ("log_interval", self.log_interval),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("gp_expansion", self.gp_expansion),
            ("batch_size", self.batch_size),
            ("mmd_samples", self.mmd_samples),
            ("eval_episodes", self.eval_episodes),
            ("separability_samples", self.separability_samples),
            ("grad_norm_samples", self.grad_norm_samples),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden layer widths must be positive".into());
        }
        if let Some(p) = self.percentile {
            if !(p > 0.0 && p <= 100.0) {
                return bad(format!("percentile must be in (0, 100], got {p}"));
            }
        }
        if let Some(l) = self.lipschitz_coupling {
            if !(l >= 0.0 && self.gamma * l < 1.0) {
                return bad(format!("lipschitz_coupling {l} violates gamma·L < 1"));
            }
        }
        self.kernel()?;
        Ok(())
    }
}
