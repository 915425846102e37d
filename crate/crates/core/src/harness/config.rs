use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{HarnessError, Result};
use crate::detector::{DetectorConfig, FusionMode};
use crate::distill::DistillConfig;
use crate::losses::SupervisedConfig;
use crate::world::WorldConfig;

/// Environment variable that overrides [`RunConfig::seed`].
pub const SEED_ENV: &str = "FTKD_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_q: usize,
    pub c: usize,
    /// Temporal fusion of the online student; the teacher is always parallel.
    pub student_fusion: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { n_q: 32, c: 32, student_fusion: FusionMode::Parallel }
    }
}

/// SGD with momentum and a cosine step-size schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    /// Scenes per step; gradients are averaged over the batch.
    pub batch: usize,
    /// Global gradient-norm clip, if any.
    pub clip_norm: Option<f64>,
    /// Step size at the end of the schedule as a fraction of `lr`.
    pub final_lr_frac: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 5e-3, momentum: 0.9, steps: 2000, batch: 4, clip_norm: Some(10.0), final_lr_frac: 0.0 }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let t = if self.steps <= 1 { 0.0 } else { step as f64 / (self.steps - 1) as f64 };
        let floor = self.lr * self.final_lr_frac;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub distill: DistillConfig,
    pub supervised: SupervisedConfig,
    pub teacher_optim: OptimConfig,
    pub student_optim: OptimConfig,
    pub seed: u64,
    /// History frames seen by the teacher.
    pub m_his: usize,
    /// Future frames seen by the teacher.
    pub m_fut: usize,
    /// History frames seen by the student.
    pub n_his: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            distill: DistillConfig::default(),
            supervised: SupervisedConfig::default(),
            teacher_optim: OptimConfig::default(),
            student_optim: OptimConfig::default(),
            seed: 1,
            m_his: 3,
            m_fut: 3,
            n_his: 3,
            train_scenes: 64,
            eval_scenes: 32,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies the seed override from [`SEED_ENV`], if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| HarnessError::Config(format!("{SEED_ENV}={v} is not a u64")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.world.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.distill.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.n_his > self.m_his {
            return bad(format!("n_his ({}) must not exceed m_his ({})", self.n_his, self.m_his));
        }
        if self.model.n_q == 0 || self.model.c == 0 {
            return bad("model dimensions must be positive".into());
        }
        for (name, o) in [("teacher_optim", &self.teacher_optim), ("student_optim", &self.student_optim)] {
            if o.steps == 0 || o.batch == 0 || !(o.lr > 0.0) || !(0.0..1.0).contains(&o.momentum) {
                return bad(format!("{name}: steps and batch must be positive, lr > 0, momentum in [0, 1)"));
            }
        }
        if self.train_scenes == 0 || self.eval_scenes == 0 {
            return bad("scene counts must be positive".into());
        }
        Ok(())
    }

    fn detector(&self, num_frames: usize, fusion: FusionMode) -> DetectorConfig {
        DetectorConfig {
            n_q: self.model.n_q,
            c: self.model.c,
            num_classes: self.world.num_classes,
            c_img: self.world.c_img,
            grid_h: self.world.grid_h,
            grid_w: self.world.grid_w,
            extent: self.world.extent,
            dt: self.world.dt,
            num_frames,
            fusion,
        }
    }

    pub fn teacher_detector(&self) -> DetectorConfig {
        self.detector(self.m_his + 1 + self.m_fut, FusionMode::Parallel)
    }

    pub fn student_detector(&self) -> DetectorConfig {
        self.detector(self.n_his + 1, self.model.student_fusion)
    }

    /// The same run with every distillation weight zeroed.
    pub fn baseline(&self) -> RunConfig {
        let mut c = self.clone();
        c.distill.lambda_pv = 0.0;
        c.distill.lambda_bev = 0.0;
        c.distill.lambda_logits = 0.0;
        c
    }

    /// SHA-256 over the canonical JSON of everything except the seed, so
    /// runs of one configuration under different seeds share a hash.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        hex_digest(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    /// Hash of the fields that determine the trained teacher.
    pub fn teacher_hash(&self) -> String {
        let key = serde_json::json!({
            "world": self.world,
            "model": [self.model.n_q, self.model.c],
            "supervised": self.supervised,
            "optim": self.teacher_optim,
            "frames": [self.m_his, self.m_fut],
            "train_scenes": self.train_scenes,
            "seed": self.seed,
        });
        hex_digest(key.to_string().as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Independent seed streams derived from a master seed by fixed offsets, so
/// toggling one consumer (say masking) never shifts another's draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub world: u64,
    pub eval: u64,
    pub teacher_init: u64,
    pub student_init: u64,
    pub auxiliary: u64,
    pub mask: u64,
    pub teacher_order: u64,
    pub student_order: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Seeds {
    pub fn derive(master: u64) -> Seeds {
        let s = |k: u64| splitmix(master.wrapping_mul(0x100).wrapping_add(k));
        Seeds {
            world: s(1),
            eval: s(2),
            teacher_init: s(3),
            student_init: s(4),
            auxiliary: s(5),
            mask: s(6),
            teacher_order: s(7),
            student_order: s(8),
        }
    }

    /// Per-item seed within a stream.
    pub fn item(stream: u64, i: u64) -> u64 {
        splitmix(stream ^ splitmix(i))
    }
}
