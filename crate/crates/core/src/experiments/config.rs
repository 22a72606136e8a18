use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::learner::{BufferMode, TargetKind, TrainConfig};

/// One cell of the algorithm matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Algorithm {
    pub buffer: BufferMode,
    pub target: TargetKind,
}

impl Algorithm {
    pub const SHERB_MADDQN: Algorithm = Algorithm {
        buffer: BufferMode::Sherb,
        target: TargetKind::Ddqn,
    };
    pub const SHERB_MADQN: Algorithm = Algorithm {
        buffer: BufferMode::Sherb,
        target: TargetKind::Dqn,
    };
    pub const HHERB_MADDQN: Algorithm = Algorithm {
        buffer: BufferMode::Hherb,
        target: TargetKind::Ddqn,
    };
    pub const HHERB_MADQN: Algorithm = Algorithm {
        buffer: BufferMode::Hherb,
        target: TargetKind::Dqn,
    };

    pub fn all() -> Vec<Algorithm> {
        vec![
            Algorithm::SHERB_MADDQN,
            Algorithm::SHERB_MADQN,
            Algorithm::HHERB_MADDQN,
            Algorithm::HHERB_MADQN,
        ]
    }

    pub fn apply(&self, train: &TrainConfig) -> TrainConfig {
        TrainConfig {
            buffer: self.buffer,
            target: self.target,
            ..train.clone()
        }
    }

    pub fn label(&self) -> String {
        self.apply(&TrainConfig::default()).label()
    }
}

/// Greedy evaluation after training: `episodes` episodes per load, each
/// injecting `load` demands at step 0 and running up to `steps` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub loads: Vec<usize>,
    pub episodes: u64,
    pub steps: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            loads: vec![2, 4, 6, 8, 10],
            episodes: 20,
            steps: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub scenario: EnvConfig,
    pub algorithms: Vec<Algorithm>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "desk".into(),
            scenario: EnvConfig::default(),
            algorithms: Algorithm::all(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.algorithms.is_empty() {
            return Err(Error::Config("algorithms must be nonempty".into()));
        }
        if self.eval.loads.iter().any(|&l| l == 0) {
            return Err(Error::Config("demand loads must be positive".into()));
        }
        if self.eval.steps == 0 {
            return Err(Error::Config("eval.steps must be positive".into()));
        }
        let labels: std::collections::BTreeSet<String> = self.algorithms.iter().map(Algorithm::label).collect();
        if labels.len() != self.algorithms.len() {
            return Err(Error::Config("algorithms must be distinct".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
