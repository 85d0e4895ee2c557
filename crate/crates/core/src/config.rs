//! Pipeline configuration with every default in one place, loadable from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::RigConfig;
use crate::diffusion::checkpoint::{load_net, save_net};
use crate::diffusion::{make_schedule, pretrain_mv, DenoiserNet, NetConfig, NoiseSchedule, TrainConfig};
use crate::dragedit::DragConfig;
use crate::error::{Error, Result};
use crate::lora::FinetuneConfig;
use crate::refit::RefitConfig;
use crate::render::RenderOptions;
use crate::scenes::training_set;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Training timesteps T of the noise schedule.
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub net: NetConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02, net: NetConfig::default() }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Toy pretraining on renders of procedural scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub scenes: usize,
    pub data_seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        PretrainConfig {
            scenes: 64,
            data_seed: 1,
            steps: t.steps,
            learning_rate: t.learning_rate,
            clip_norm: t.clip_norm,
            seed: t.seed,
        }
    }
}

impl PretrainConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { steps: self.steps, learning_rate: self.learning_rate, clip_norm: self.clip_norm, seed: self.seed }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub rig: RigConfig,
    pub render: RenderOptions,
    pub diffusion: DiffusionConfig,
    pub pretrain: PretrainConfig,
    pub lora: FinetuneConfig,
    pub drag: DragConfig,
    pub refit: RefitConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.diffusion.schedule()?;
        self.lora.validate()?;
        self.drag.validate()?;
        self.refit.validate()?;
        if self.rig.width % 8 != 0 || self.rig.height % 8 != 0 || self.rig.width == 0 || self.rig.height == 0 {
            return Err(Error::Config("rig.width and rig.height must be positive multiples of 8".into()));
        }
        if self.pretrain.scenes == 0 {
            return Err(Error::Config("pretrain.scenes must be at least 1".into()));
        }
        Ok(())
    }

    /// Content key of everything that determines the pretrained network.
    pub fn pretrain_key(&self) -> String {
        let spec = serde_json::json!({ "rig": self.rig, "diffusion": self.diffusion, "pretrain": self.pretrain });
        let digest = Sha256::digest(spec.to_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Trains the toy denoiser from scratch, reporting `(step, loss)`.
    pub fn pretrain(&self, hook: impl FnMut(usize, f64)) -> Result<(DenoiserNet, NoiseSchedule)> {
        let schedule = self.diffusion.schedule()?;
        let data = training_set(self.pretrain.scenes, &self.rig, self.pretrain.data_seed)?;
        let mut net = DenoiserNet::new(self.diffusion.net.clone());
        pretrain_mv(&mut net, &schedule, &data, &self.pretrain.train_config(), hook)?;
        Ok((net, schedule))
    }

    /// Loads the pretrained net for this config from `cache_dir`, training
    /// and saving it first when absent.
    pub fn pretrained(&self, cache_dir: impl AsRef<Path>, hook: impl FnMut(usize, f64)) -> Result<(DenoiserNet, NoiseSchedule)> {
        let path = cache_dir.as_ref().join(format!("toy-{}.ckpt", self.pretrain_key()));
        if path.exists() {
            return load_net(&path);
        }
        let (net, schedule) = self.pretrain(hook)?;
        std::fs::create_dir_all(cache_dir.as_ref())?;
        let tmp = path.with_extension("tmp");
        save_net(&net, &schedule, &tmp)?;
        std::fs::rename(&tmp, &path)?;
        Ok((net, schedule))
    }
}
