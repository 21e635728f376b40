//! One declarative TOML config for the whole pipeline, with desk-scale and
//! full-scale presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::backbone::EncoderConfig;
use crate::error::{io_err, AvexError, Result};
use crate::heads::DecoderConfig;
use crate::scene::CameraConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Reconstruction,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub classes: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::Classification,
            classes: 10,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Synthetic: square canvas side.
    pub canvas: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub digit_min_side: usize,
    pub digit_max_side: usize,
    pub seed: u64,
    /// Directory mode: image folder and optional label CSV.
    pub path: Option<String>,
    pub labels: Option<String>,
    pub augment: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Directory,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            canvas: 64,
            n_train: 2000,
            n_val: 200,
            n_test: 500,
            digit_min_side: 16,
            digit_max_side: 32,
            seed: 7,
            path: None,
            labels: None,
            augment: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainScheduleConfig {
    pub epochs: usize,
    /// Warm-up epochs training the agent only, before alternation starts.
    pub warmup_agent_epochs: usize,
    pub pretrain_epochs: usize,
    pub pretrain_glimpse_count: usize,
    pub backbone_lr: f64,
    pub agent_lr: f64,
    pub weight_decay: f64,
    pub cosine_floor: f64,
    pub grad_clip: f64,
    /// Glimpse budget per episode.
    pub max_steps: usize,
    pub stop_threshold: f64,
    pub seed: u64,
    pub episodes_per_epoch: usize,
    pub sac_updates_per_epoch: usize,
    pub scene_batch: usize,
    pub patience: usize,
    /// Start each agent epoch with an empty replay buffer so the agent only
    /// sees observations from the current backbone.
    pub fresh_replay_per_agent_epoch: bool,
}

impl Default for TrainScheduleConfig {
    fn default() -> Self {
        TrainScheduleConfig {
            epochs: 30,
            warmup_agent_epochs: 3,
            pretrain_epochs: 20,
            pretrain_glimpse_count: 16,
            backbone_lr: 1e-4,
            agent_lr: 3e-4,
            weight_decay: 1e-4,
            cosine_floor: 1e-8,
            grad_clip: 1.0,
            max_steps: 12,
            stop_threshold: 0.85,
            seed: 0,
            episodes_per_epoch: 256,
            sac_updates_per_epoch: 128,
            scene_batch: 16,
            patience: 10,
            fresh_replay_per_agent_epoch: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AvexConfig {
    pub task: TaskConfig,
    pub camera: CameraConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub agent: AgentConfig,
    pub dataset: DatasetConfig,
    pub train: TrainScheduleConfig,
}

impl Default for AvexConfig {
    fn default() -> Self {
        AvexConfig::desk()
    }
}

impl AvexConfig {
    /// Desk-scale defaults: 64x64 synthetic scenes, 16x16 glimpses, a small
    /// encoder, everything sized for a workstation CPU.
    pub fn desk() -> Self {
        let d_patch = 16;
        let canvas = 64;
        let encoder = EncoderConfig::desk(d_patch);
        let mut agent = AgentConfig::desk(d_patch, encoder.embed);
        agent.hidden = 256;
        AvexConfig {
            task: TaskConfig::default(),
            camera: CameraConfig::new(32, d_patch),
            encoder,
            decoder: DecoderConfig::desk(d_patch, canvas),
            agent,
            dataset: DatasetConfig::default(),
            train: TrainScheduleConfig::default(),
        }
    }

    /// The calibrated locate-the-digit recipe: 64x64 scenes with a capped
    /// field of view (no single glimpse covers the scene), three 16^2
    /// glimpses per episode, and a training budget of minutes on a CPU.
    pub fn toy() -> Self {
        let mut cfg = AvexConfig::desk();
        cfg.task.kind = TaskKind::Classification;
        cfg.task.classes = 10;

        cfg.camera.d_cam = 16;
        cfg.camera.d_patch = 16;
        cfg.camera.d_max = Some(44);

        cfg.encoder.blocks = 2;
        cfg.encoder.embed = 48;
        cfg.encoder.heads = 4;
        cfg.encoder.pos_freqs = 4;
        cfg.encoder.mlp_ratio = 2;

        cfg.decoder.blocks = 1;
        cfg.decoder.width = 32;
        cfg.decoder.heads = 4;
        cfg.decoder.pos_freqs = 4;

        cfg.agent.hidden = 32;
        cfg.agent.pool_heads = 4;
        cfg.agent.latent_dim = 48;
        cfg.agent.batch_size = 32;
        cfg.agent.replay_capacity = 20_000;
        cfg.agent.lr = 1e-3;

        cfg.dataset.canvas = 64;
        cfg.dataset.digit_min_side = 24;
        cfg.dataset.digit_max_side = 36;
        cfg.dataset.n_train = 1500;
        cfg.dataset.n_val = 150;
        cfg.dataset.n_test = 300;
        cfg.dataset.seed = 7;

        cfg.train.max_steps = 3;
        cfg.train.stop_threshold = 0.85;
        cfg.train.pretrain_epochs = 20;
        cfg.train.pretrain_glimpse_count = 10;
        cfg.train.backbone_lr = 1e-3;
        cfg.train.agent_lr = 1e-3;
        cfg.train.epochs = 16;
        cfg.train.warmup_agent_epochs = 1;
        cfg.train.episodes_per_epoch = 300;
        cfg.train.sac_updates_per_epoch = 250;
        cfg.train.scene_batch = 16;
        cfg.train.patience = 100;
        cfg.train.fresh_replay_per_agent_epoch = true;
        cfg
    }

    /// Full-scale shapes: ViT-B encoder, 8-block decoder, 224x224 scenes,
    /// 12 glimpses of 32^2, warm-up 30 of 100 epochs, pretraining 600x196.
    pub fn full() -> Self {
        let d_patch = 16;
        let canvas = 224;
        let encoder = EncoderConfig::full(d_patch);
        let agent = AgentConfig::desk(d_patch, encoder.embed);
        AvexConfig {
            task: TaskConfig {
                kind: TaskKind::Classification,
                classes: 1000,
            },
            camera: CameraConfig::new(32, d_patch),
            encoder,
            decoder: DecoderConfig::full(d_patch, canvas),
            agent,
            dataset: DatasetConfig {
                canvas,
                ..Default::default()
            },
            train: TrainScheduleConfig {
                epochs: 100,
                warmup_agent_epochs: 30,
                pretrain_epochs: 600,
                pretrain_glimpse_count: 196,
                backbone_lr: 1e-5,
                max_steps: 12,
                ..Default::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.train.warmup_agent_epochs >= self.train.epochs {
            return Err(AvexError::Config(format!(
                "warmup {} must be smaller than total epochs {}",
                self.train.warmup_agent_epochs, self.train.epochs
            )));
        }
        for (name, v) in [
            ("backbone_lr", self.train.backbone_lr),
            ("agent_lr", self.train.agent_lr),
        ] {
            if v <= 0.0 {
                return Err(AvexError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.encoder.d_patch != self.camera.d_patch {
            return Err(AvexError::Config(
                "encoder and camera d_patch disagree".into(),
            ));
        }
        if self.agent.latent_dim != self.encoder.embed {
            return Err(AvexError::Config(
                "agent latent_dim must equal encoder embed width".into(),
            ));
        }
        if !(self.train.stop_threshold > 0.0 && self.train.stop_threshold <= 1.0) {
            return Err(AvexError::BadThreshold(self.train.stop_threshold));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: AvexConfig =
            toml::from_str(s).map_err(|e| AvexError::Config(format!("toml parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stable content hash of the canonical JSON form, for run logs.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        fnv1a(json.as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
