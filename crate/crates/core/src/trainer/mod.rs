//! Optimizers and training loops.

mod act;
mod check;
mod optim;
mod scene;

pub use act::{
    act_batch_loss, build_act_nets, em_run, evaluate_act, movie_features, sync_all, train_act,
    ActBatchLoss, ActEpoch, ActEval, ActMovie, ActNets, ActOutcome, EmOutcome,
};
pub use check::{tiny_config, tiny_gradchecks, GradcheckRow};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use scene::{
    build_scene_model, evaluate_scene, scene_batch_loss, scene_scores, train_scene,
    training_windows, weighted_scene_ce, window, SceneEpoch, SceneEval, SceneMovie, SceneOutcome,
};

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::distill::{LossParts, LossWeights};
use crate::error::{Error, Result};
use crate::numcore::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Windows per step for scenes, movies per step for acts.
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub loss_weights: LossWeights,
    /// Run the E-step every this many epochs.
    pub em_every: usize,
    /// First E-step from raw text-stream vs synopsis cosine similarity.
    pub warm_start: bool,
    /// Let the distillation loss reach the synopsis model and sync features.
    pub joint_distill: bool,
}

impl TrainConfig {
    /// 20 epochs, batch 1024, Adam at 1e-4.
    pub fn scene_reference() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 1024,
            seed: 0,
            optimizer: OptimizerConfig::adam(1e-4),
            loss_weights: LossWeights::default(),
            em_every: 1,
            warm_start: true,
            joint_distill: false,
        }
    }

    /// 10 epochs, 4 movies per step, SGD at 1e-3.
    pub fn act_reference() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 4,
            optimizer: OptimizerConfig::sgd(1e-3),
            ..TrainConfig::scene_reference()
        }
    }

    /// Desk-scale scene training.
    pub fn scene_desk() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            optimizer: OptimizerConfig::adam(1e-3),
            ..TrainConfig::scene_reference()
        }
    }

    /// Desk-scale act training: one movie per step, Adam at 3e-3, and
    /// targets re-estimated every 10 epochs, so once in a 10-epoch run.
    pub fn act_desk() -> Self {
        TrainConfig {
            batch_size: 1,
            optimizer: OptimizerConfig::adam(3e-3),
            em_every: 10,
            ..TrainConfig::act_reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.em_every == 0 {
            return Err(Error::Config(
                "epochs, batch_size and em_every must be positive".into(),
            ));
        }
        let w = self.loss_weights;
        if [w.contrastive, w.synopsis_ce, w.distill]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        self.optimizer.validate()
    }
}

/// Stream seed for step `step` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, step: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, Serialize)]
pub struct LogLine<'a> {
    pub task: &'a str,
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parts: Option<LossParts>,
    pub lr: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<&'a str>,
}

/// Optional side outputs of a training run.
#[derive(Default)]
pub struct Hooks {
    log: Option<BufWriter<File>>,
    checkpoint_dir: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
}

impl Hooks {
    pub fn none() -> Self {
        Hooks::default()
    }

    /// JSONL log at `log` and `epoch-NNN.ckpt` files under `checkpoint_dir`.
    pub fn files(log: Option<PathBuf>, checkpoint_dir: Option<PathBuf>) -> Result<Self> {
        let log = match log {
            Some(p) => Some(BufWriter::new(File::create(p)?)),
            None => None,
        };
        if let Some(d) = &checkpoint_dir {
            fs::create_dir_all(d)?;
        }
        Ok(Hooks {
            log,
            checkpoint_dir,
            checkpoints: Vec::new(),
        })
    }

    pub fn log(&mut self, line: &LogLine) -> Result<()> {
        if let Some(w) = &mut self.log {
            serde_json::to_writer(&mut *w, line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn checkpoint(
        &mut self,
        epoch: usize,
        meta: &serde_json::Value,
        store: &ParamStore,
    ) -> Result<()> {
        if let Some(d) = &self.checkpoint_dir {
            let p = d.join(format!("epoch-{epoch:03}.ckpt"));
            save_checkpoint(&p, meta, store)?;
            self.checkpoints.push(p);
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.log {
            w.flush()?;
        }
        Ok(())
    }
}
