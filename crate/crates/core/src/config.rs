//! Experiment configuration.
//!
//! One JSON document drives everything: task construction, optimization,
//! output locations. Every run writes its fully-resolved configuration next
//! to its outputs, and feeding that file back in reproduces the run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bilevel::BilevelOptions;
use crate::error::Result;
use crate::lora::Architecture;
use crate::task::TaskSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskParams {
    pub layers: usize,
    pub width: usize,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub planted: Vec<usize>,
    pub shift_magnitude: f64,
    pub source_samples: usize,
    pub target_samples: usize,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams {
            layers: 6,
            width: 128,
            input_dim: 16,
            embed_dim: 32,
            planted: vec![2, 4, 5],
            shift_magnitude: 1.0,
            source_samples: 256,
            target_samples: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimParams {
    pub eta_w: f64,
    pub eta_alpha: f64,
    pub epochs: usize,
    pub switch_epoch: usize,
    pub k: usize,
    pub rank: usize,
    pub gamma: f64,
    pub guard: f64,
    pub batch_size: Option<usize>,
    pub momentum: f64,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_threshold: f64,
    pub oracle_budget: usize,
    pub oracle_bound: usize,
}

impl Default for OptimParams {
    fn default() -> Self {
        OptimParams {
            eta_w: 1e-2,
            eta_alpha: 1e-2,
            epochs: 60,
            switch_epoch: 20,
            k: 3,
            rank: 8,
            gamma: 2.0,
            guard: 1e-12,
            batch_size: None,
            momentum: 0.0,
            pretrain_steps: 2000,
            pretrain_lr: 3e-3,
            pretrain_threshold: 1e-3,
            oracle_budget: 200,
            oracle_bound: crate::oracle::DEFAULT_TRACTABILITY_BOUND,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Flags {
    pub binarize_gates: bool,
    pub warm_start_stage2: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Flags { binarize_gates: true, warm_start_stage2: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub task_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub adapted_checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            task_dir: PathBuf::from("out/task"),
            checkpoint: PathBuf::from("out/pretrained.json"),
            adapted_checkpoint: PathBuf::from("out/adapted.json"),
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskParams,
    pub optim: OptimParams,
    pub flags: Flags,
    pub paths: Paths,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.task_spec().validate()?;
        self.bilevel_options().validate(self.task.layers)?;
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.task.input_dim,
            hidden_width: self.task.width,
            output_dim: self.task.input_dim,
            layers: self.task.layers,
        }
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            arch: self.architecture(),
            embed_dim: self.task.embed_dim,
            planted: self.task.planted.clone(),
            shift_magnitude: self.task.shift_magnitude,
            source_samples: self.task.source_samples,
            target_samples: self.task.target_samples,
            rank: self.optim.rank,
            gamma: self.optim.gamma,
            pretrain_steps: self.optim.pretrain_steps,
            pretrain_lr: self.optim.pretrain_lr,
            pretrain_threshold: self.optim.pretrain_threshold,
            seed: self.seed,
        }
    }

    pub fn bilevel_options(&self) -> BilevelOptions {
        BilevelOptions {
            eta_w: self.optim.eta_w,
            eta_alpha: self.optim.eta_alpha,
            epochs: self.optim.epochs,
            switch_epoch: self.optim.switch_epoch,
            k: self.optim.k,
            guard: self.optim.guard,
            batch_size: self.optim.batch_size,
            momentum: self.optim.momentum,
            binarize_gates: self.flags.binarize_gates,
            warm_start_stage2: self.flags.warm_start_stage2,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
