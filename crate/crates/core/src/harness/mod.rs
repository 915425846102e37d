//! Operational shell: run configuration, training loops, evaluation,
//! ablation studies, checkpoints, manifests and plots.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod plot;
pub mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ablate::{CellResult, Experiment, Study};
pub use checkpoint::CheckpointArchive;
pub use config::{OptimConfig, RunConfig, Seeds};
pub use eval::{evaluate_model, Role};
pub use train::{cache_targets, train_student, train_teacher, Dataset, SceneData, StepLog, Trained};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("distillation needs a teacher checkpoint")]
    MissingTeacher,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    World(#[from] crate::world::WorldError),
    #[error(transparent)]
    Detector(#[from] crate::detector::DetectorError),
    #[error(transparent)]
    Distill(#[from] crate::distill::DistillError),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.to_path_buf(), source }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Provenance record written next to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    /// `teacher` or `student`: which frames the checkpoint reads.
    pub role: String,
    pub config: RunConfig,
    /// Checkpoint of the teacher a student was distilled from.
    pub teacher: Option<String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig, role: Role, teacher: Option<String>) -> Self {
        let config_hash = cfg.config_hash();
        let role = match role {
            Role::Teacher => "teacher",
            Role::Student => "student",
        };
        // Short content address: same command, config and seed give the same id.
        let run_id = config::hex_digest(format!("{command}/{role}/{config_hash}/{}", cfg.seed).as_bytes())[..12].to_string();
        Manifest { command: command.to_string(), run_id, config_hash, seed: cfg.seed, role: role.to_string(), config: cfg.clone(), teacher }
    }

    pub fn role(&self) -> Result<Role> {
        match self.role.as_str() {
            "teacher" => Ok(Role::Teacher),
            "student" => Ok(Role::Student),
            r => Err(HarnessError::Config(format!("unknown role {r}"))),
        }
    }

    /// `<artifact>.manifest.json`.
    pub fn path_for(artifact: &Path) -> PathBuf {
        let mut p = artifact.as_os_str().to_owned();
        p.push(".manifest.json");
        PathBuf::from(p)
    }

    pub fn save(&self, artifact: &Path) -> Result<()> {
        let p = Self::path_for(artifact);
        std::fs::write(&p, serde_json::to_string_pretty(self).expect("manifest serializes")).map_err(|e| HarnessError::io(&p, e))
    }

    pub fn load(artifact: &Path) -> Result<Self> {
        let p = Self::path_for(artifact);
        let text = std::fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))
    }
}
