//! Run configuration: one JSON document covering model, data, training,
//! evaluation and the token planner.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coreferring::RegionEncoderConfig;
use crate::data::{SceneConfig, Task};
use crate::lm::DecoderConfig;
use crate::model::{ConnectorConfig, ModelConfig};
use crate::training::StageConfig;
use crate::visual::{plan_resolution, ProjectorConfig, ResolutionPlan, VisualEncoderConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub scene: SceneConfig,
    pub seed: u64,
    /// Records per stage, indexed by stage − 1.
    pub sizes: [usize; 3],
    /// Held-out stage-2 records used for evaluation.
    pub eval_size: usize,
    pub eval_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            seed: 7,
            sizes: [2_000, 8_000, 2_000],
            eval_size: 1_000,
            eval_seed: 1_000_003,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub tasks: Vec<Task>,
    /// Generation cap; the context limit also bounds it.
    pub max_new: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tasks: vec![Task::Rec, Task::Detection, Task::Grounding, Task::Counting, Task::NonexistJudge, Task::Reg],
            max_new: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub limit: usize,
    pub answer: usize,
    pub reserve: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { limit: 320, answer: 280, reserve: 24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    pub train: Vec<StageConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub planner: PlannerConfig,
}

/// The shipped desk-scale model: 64-px inputs, 8-px patches, stride-2
/// projector (16 visual tokens) and a 4-layer decoder, about 1.2M parameters.
pub fn desk_model() -> ModelConfig {
    let d = 128;
    ModelConfig {
        encoder: VisualEncoderConfig { patch_size: 8, pretrained_grid: 4, embed_dim: 96, depth: 3, heads: 4, mlp_ratio: 2, resolution: 64 },
        connector: ConnectorConfig::Downsample(ProjectorConfig { kernel: 3, stride: 2, padding: 1, conv_channels: 64, out_dim: d }),
        region: RegionEncoderConfig { resolution: 16, patch_size: 4, embed_dim: 48, depth: 1, heads: 4, mlp_ratio: 2, out_dim: d },
        decoder: DecoderConfig { dim: d, depth: 4, heads: 4, mlp_ratio: 4, vocab_size: 0, context_limit: 320 },
        init_seed: 11,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let stage = |stage: u8, epochs: usize, lr: f64| StageConfig {
            stage,
            epochs,
            batch_size: 8,
            lr,
            seed: 100 + stage as u64,
            region_warmup: stage == 2,
            shift_augment: stage > 1,
            ..StageConfig::default()
        };
        Self {
            model: desk_model(),
            data: DataConfig::default(),
            train: vec![stage(1, 1, 1e-3), stage(2, 16, 1e-3), stage(3, 1, 3e-4)],
            eval: EvalConfig::default(),
            planner: PlannerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn stage(&self, n: u8) -> Result<&StageConfig> {
        self.train.iter().find(|s| s.stage == n).ok_or(Error::UnknownStage(n))
    }

    pub fn plan(&self) -> Result<ResolutionPlan> {
        let stride = match self.model.connector {
            ConnectorConfig::Downsample(p) => p.stride,
            ConnectorConfig::Resampler(_) => 1,
        };
        plan_resolution(self.planner.limit, self.planner.answer, self.planner.reserve, self.model.encoder.patch_size, stride)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.scene.validate()?;
        for s in &self.train {
            s.validate()?;
        }
        let mut stages: Vec<u8> = self.train.iter().map(|s| s.stage).collect();
        stages.sort_unstable();
        if stages.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("a stage is configured twice".into()));
        }
        if self.data.scene.canvas != self.model.encoder.resolution {
            log::warn!(
                "scene canvas {} differs from encoder resolution {}; images will be resized",
                self.data.scene.canvas,
                self.model.encoder.resolution
            );
        }
        let ctx = self.model.decoder.context_limit;
        if self.planner.limit > ctx {
            return Err(Error::Config(format!("planner limit {} exceeds the decoder context {ctx}", self.planner.limit)));
        }
        let plan = self.plan()?;
        if plan.tokens + self.planner.answer + self.planner.reserve > ctx {
            return Err(Error::Config(format!("planned {} visual tokens overflow the context {ctx}", plan.tokens)));
        }
        if let ConnectorConfig::Downsample(_) = self.model.connector {
            if self.model.visual_tokens() > plan.tokens {
                return Err(Error::Config(format!(
                    "encoder at {} px yields {} visual tokens, more than the planned {}",
                    self.model.encoder.resolution,
                    self.model.visual_tokens(),
                    plan.tokens
                )));
            }
        }
        if self.eval.max_new == 0 {
            return Err(Error::Config("eval.max_new must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        let plan = c.plan().unwrap();
        assert!(plan.resolution <= c.model.encoder.resolution);
        assert_eq!(plan.tokens, c.model.visual_tokens());
    }

    #[test]
    fn inconsistent_configs_fail() {
        let mut c = RunConfig::default();
        c.model.region.out_dim = 64;
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.planner.limit = 10_000;
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.planner.answer = 290;
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.train[1].stage = 1;
        assert!(c.validate().is_err());
    }
}
