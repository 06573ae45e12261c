//! Pipeline configuration: one TOML file covering the corpus generator, the
//! diffusion schedule, and all three model stages, with a canonical content
//! hash so every artifact can state exactly which configuration produced it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusConfig;
use crate::diffusion::ScheduleConfig;
use crate::{Error, Result};

/// Stage-I coarse video planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    /// Channel width of the first encoder level; deeper levels double it.
    pub base_channels: usize,
    /// Width of the conditioning context (text tokens, image token).
    pub ctx_dim: usize,
    /// Probability of independently nulling the text / image condition
    /// during training, enabling classifier-free guidance.
    pub cond_drop: f64,
    pub lr: f64,
    pub batch: usize,
    pub train_steps: usize,
    /// Inference steps for the deterministic DDIM sampler.
    pub sample_steps: usize,
    /// Guidance weights for the text and image conditions.
    pub w_text: f64,
    pub w_img: f64,
    /// Keep temporal-mixing parameters at their initialization (train only
    /// spatial and context pathways).
    pub freeze_temporal: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            base_channels: 16,
            ctx_dim: 32,
            cond_drop: 0.1,
            lr: 2e-3,
            batch: 4,
            train_steps: 600,
            sample_steps: 50,
            w_text: 7.5,
            w_img: 7.5,
            freeze_temporal: false,
        }
    }
}

/// Stage-II motion refiner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Temporal length the refiner operates at; pose sequences of other
    /// lengths are linearly resampled at the boundary.
    pub l_p: usize,
    pub cond_drop: f64,
    pub lr: f64,
    pub batch: usize,
    pub train_steps: usize,
    pub sample_steps: usize,
    /// Default number of partial-refinement steps.
    pub n_rv: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            width: 96,
            blocks: 3,
            heads: 4,
            l_p: 16,
            cond_drop: 0.1,
            lr: 1e-3,
            batch: 8,
            train_steps: 1200,
            sample_steps: 50,
            n_rv: 10,
        }
    }
}

/// Stage-III pose-conditioned regenerator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseCtrlConfig {
    pub lr: f64,
    pub batch: usize,
    pub train_steps: usize,
    /// Keypoint disc radius in pixels at the configured image size.
    pub r_kp: f64,
    /// Bone stroke width in pixels.
    pub w_bone: f64,
}

impl Default for PoseCtrlConfig {
    fn default() -> Self {
        PoseCtrlConfig {
            lr: 2e-3,
            batch: 4,
            train_steps: 400,
            r_kp: 1.0,
            w_bone: 1.0,
        }
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Test fraction per action category (minimum one episode).
    pub test_fraction: f64,
    /// Keypoint-adherence radius in pixels.
    pub adherence_px: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            test_fraction: 0.02,
            adherence_px: 3.0,
        }
    }
}

/// The full configuration tree.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub corpus: CorpusConfig,
    pub schedule: ScheduleConfig,
    pub planner: PlannerConfig,
    pub motion: MotionConfig,
    pub posectrl: PoseCtrlConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// Parse a TOML file; missing keys fall back to defaults, unknown keys
    /// are rejected so typos cannot silently deconfigure a run.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig = toml::from_str(&text)
            .map_err(|e| Error::format(path, 0, format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_canonical_toml()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        if !(0.0..=1.0).contains(&self.planner.cond_drop)
            || !(0.0..=1.0).contains(&self.motion.cond_drop)
        {
            return Err(Error::contract("cond_drop outside [0,1]"));
        }
        if self.planner.sample_steps == 0 || self.motion.sample_steps == 0 {
            return Err(Error::contract("sample_steps must be positive"));
        }
        if self.motion.sample_steps > self.schedule.steps {
            return Err(Error::contract(format!(
                "motion sample_steps {} exceeds schedule steps {}",
                self.motion.sample_steps, self.schedule.steps
            )));
        }
        if self.motion.l_p < 2 {
            return Err(Error::contract("l_p must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.eval.test_fraction) {
            return Err(Error::contract("test_fraction outside [0,1]"));
        }
        Ok(())
    }

    /// Serialization with a fixed key order (struct declaration order), the
    /// input to [`Self::content_hash`].
    pub fn to_canonical_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::contract(format!("config serialization: {e}")))
    }

    /// Hex SHA-256 over the canonical serialization. Two configs hash
    /// equally iff every field is equal, regardless of how the source file
    /// ordered or omitted keys.
    pub fn content_hash(&self) -> Result<String> {
        let text = self.to_canonical_toml()?;
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        Ok(hex(&h.finalize()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
