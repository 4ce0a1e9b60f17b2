//! Mini-batch SGD on the cross-entropy of class-balanced batches.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Gradients, Mode, PatchBatch, PatchDnn, Topology, Widths};
use crate::patching::{next_batch, MiniBatch, Normalization, TrainingPool};
use crate::{seeded_stream, SeededRng};

/// Everything a training run needs. Unknown JSON fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub dropout: f64,
    /// Classical momentum coefficient; 0 is plain SGD.
    pub momentum: f64,
    pub seed: u64,
    /// Save `ckpt_{step}.pdnn` every this many steps; 0 disables.
    pub checkpoint_interval: u64,
    /// Evaluate held-out Dice every this many steps; 0 disables.
    pub eval_interval: u64,
    pub patch_size: usize,
    pub classes: usize,
    pub widths: Widths,
    pub mask_radius: usize,
    pub normalization: Normalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 200,
            steps: 20_000,
            dropout: 0.5,
            momentum: 0.0,
            seed: 0,
            checkpoint_interval: 0,
            eval_interval: 0,
            patch_size: 13,
            classes: 2,
            widths: Widths::default(),
            mask_radius: 3,
            normalization: Normalization::RoiZScore,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "batch size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        self.topology().validate()
    }

    pub fn topology(&self) -> Topology {
        Topology {
            patch: self.patch_size,
            classes: self.classes,
            widths: self.widths,
            dropout: self.dropout,
            normalization: self.normalization,
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    /// Mean batch cross-entropy before the update.
    pub loss: f64,
    pub ms_per_step: f64,
    pub heldout_dice: Option<f64>,
}

/// SGD with an optional momentum buffer.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Option<Gradients<f32>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: None,
        }
    }

    /// One update on `batch`. Dropout masks are drawn from `rng`.
    pub fn step(
        &mut self,
        net: &mut PatchDnn<f32>,
        batch: &MiniBatch,
        rng: &mut SeededRng,
    ) -> Result<TrainLogRecord> {
        let started = Instant::now();
        let step = net.step();
        let inputs = PatchBatch::<f32>::from_samples(net.patch(), &batch.samples)?;
        let targets = batch.labels();
        let tape = net.forward_batch(&inputs, Mode::Train(rng))?;
        let loss = net.loss(&tape, &targets)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: format!("non-finite loss {loss}"),
            });
        }
        let grads = net.backward(&tape, &targets)?;
        if !grads.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: "non-finite gradient".into(),
            });
        }
        let lr = self.learning_rate as f32;
        if self.momentum == 0.0 {
            net.apply_gradients(&grads, lr);
        } else {
            let mu = self.momentum as f32;
            let velocity = self.velocity.get_or_insert_with(|| {
                let mut zero = grads.clone();
                zero.weights.iter_mut().chain(zero.bias.iter_mut()).for_each(|v| v.fill(0.0));
                zero
            });
            for (v, g) in velocity
                .weights
                .iter_mut()
                .chain(velocity.bias.iter_mut())
                .zip(grads.weights.iter().chain(&grads.bias))
            {
                for (vi, &gi) in v.iter_mut().zip(g) {
                    *vi = mu * *vi + gi;
                }
            }
            net.apply_gradients(velocity, lr);
        }
        if !net.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: "non-finite parameters after update".into(),
            });
        }
        net.set_step(step + 1);
        Ok(TrainLogRecord {
            step: step + 1,
            loss,
            ms_per_step: started.elapsed().as_secs_f64() * 1e3,
            heldout_dice: None,
        })
    }
}

/// Plain SGD step: `θ ← θ − η · mean_batch(∇θ CE)`.
pub fn sgd_step(
    net: &mut PatchDnn<f32>,
    batch: &MiniBatch,
    learning_rate: f64,
    rng: &mut SeededRng,
) -> Result<TrainLogRecord> {
    Sgd::new(learning_rate, 0.0).step(net, batch, rng)
}

/// Optional side effects of a training run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub checkpoint_dir: Option<PathBuf>,
    /// Returns held-out Dice for the current network.
    pub heldout: Option<&'a dyn Fn(&PatchDnn<f32>) -> Result<f64>>,
    /// Called after every step.
    pub on_step: Option<&'a dyn Fn(&TrainLogRecord)>,
}

pub struct TrainOutcome {
    pub net: PatchDnn<f32>,
    pub log: Vec<TrainLogRecord>,
}

/// Trains a freshly initialised network for `config.steps` steps. The run is a
/// pure function of the pool and the config: the network is initialised from
/// stream 0 of the seed and batches and dropout draw from stream 1.
pub fn train(pool: &TrainingPool, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(pool, config, &TrainHooks::default())
}

pub fn train_with(pool: &TrainingPool, config: &TrainConfig, hooks: &TrainHooks<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    let net = PatchDnn::<f32>::init(config.topology(), &mut seeded_stream(config.seed, 0))?;
    continue_training(net, pool, config, hooks)
}

pub fn continue_training(
    mut net: PatchDnn<f32>,
    pool: &TrainingPool,
    config: &TrainConfig,
    hooks: &TrainHooks<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if pool.patch() != net.patch() {
        return Err(Error::PatchSizeMismatch {
            expected: net.patch(),
            found: pool.patch(),
        });
    }
    if let Some(dir) = &hooks.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rng = seeded_stream(config.seed, 1);
    let mut sgd = Sgd::new(config.learning_rate, config.momentum);
    let mut log = Vec::with_capacity(config.steps as usize);
    for _ in 0..config.steps {
        let batch = next_batch(pool, config.batch_size, &mut rng)?;
        debug_assert_eq!(
            batch.labels().iter().filter(|&&l| l > 0).count(),
            config.batch_size / 2
        );
        let mut record = sgd.step(&mut net, &batch, &mut rng)?;
        let step = record.step;
        if let Some(eval) = hooks.heldout {
            if config.eval_interval > 0 && step % config.eval_interval == 0 {
                record.heldout_dice = Some(eval(&net)?);
            }
        }
        if let Some(dir) = &hooks.checkpoint_dir {
            if config.checkpoint_interval > 0 && step % config.checkpoint_interval == 0 {
                crate::network::save_checkpoint(&net, dir.join(format!("ckpt_{step}.pdnn")))?;
            }
        }
        if let Some(cb) = hooks.on_step {
            cb(&record);
        }
        log.push(record);
    }
    Ok(TrainOutcome { net, log })
}

/// Writes the log as CSV: `step,loss,ms_per_step,heldout_dice`.
pub fn write_train_log(log: &[TrainLogRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss", "ms_per_step", "heldout_dice"])?;
    for r in log {
        w.write_record([
            r.step.to_string(),
            r.loss.to_string(),
            format!("{:.3}", r.ms_per_step),
            r.heldout_dice.map(|d| d.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean loss over consecutive windows of `width` steps.
pub fn windowed_loss(log: &[TrainLogRecord], width: usize) -> Vec<f64> {
    log.chunks(width.max(1))
        .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
        .collect()
}
