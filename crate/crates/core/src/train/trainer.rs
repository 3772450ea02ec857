use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rpose_tensor::{BatchMoments, Graph, Sgd, Tensor, TensorError};

use super::config::TrainConfig;
use super::evaluate::{evaluate, EvalOptions};
use super::log::{EpochRecord, StepRecord, TrainLog};
use crate::data::{epoch_order, make_batch, AugmentConfig, Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, PoseNet, TrainState};
use crate::supervision::{weighted_mse_loss, LossReport, SkeletonSpec};

/// Name prefix of the optimizer velocity tensors stored in checkpoints.
pub const VELOCITY_PREFIX: &str = "optim.velocity.";
/// File name of the rolling checkpoint in the output directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.rhnm";

/// Owns the model and optimizer state of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: PoseNet<f32>,
    cfg: TrainConfig,
    optim: Sgd<f32>,
    /// Completed epochs and optimizer steps.
    state: TrainState,
    log: TrainLog,
}

fn global_norm(grads: &[Tensor<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

fn augment_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6175_676d_656e_7400);
    rng.set_stream(epoch as u64);
    rng
}

impl Trainer {
    pub fn new(model: PoseNet<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
        let optim = Sgd::new(cfg.learning_rate(0), cfg.momentum, shapes.iter().map(|s| s.as_slice()));
        Ok(Self {
            model,
            cfg,
            optim,
            state: TrainState::default(),
            log: TrainLog::default(),
        })
    }

    /// Continues from a checkpoint written by [`Self::checkpoint`]; `log` is
    /// the history up to that point.
    pub fn resume(ckpt: Checkpoint, cfg: TrainConfig, log: TrainLog) -> Result<Self> {
        let state = ckpt
            .state
            .ok_or_else(|| Error::Format("checkpoint has no training state to resume from".into()))?;
        let mut velocity: Vec<(usize, Tensor<f32>)> = ckpt
            .extra
            .into_iter()
            .filter_map(|(name, t)| name.strip_prefix(VELOCITY_PREFIX).and_then(|i| i.parse().ok()).map(|i| (i, t)))
            .collect();
        velocity.sort_by_key(|(i, _)| *i);
        let mut trainer = Self::new(ckpt.model, cfg)?;
        if velocity.iter().enumerate().any(|(pos, (i, _))| pos != *i) {
            return Err(Error::Format("checkpoint optimizer velocities are not numbered 0..n".into()));
        }
        trainer.optim.set_velocity(velocity.into_iter().map(|(_, t)| t).collect())?;
        trainer.state = state;
        trainer.log = log;
        Ok(trainer)
    }

    pub fn model(&self) -> &PoseNet<f32> {
        &self.model
    }

    pub fn into_model(self) -> PoseNet<f32> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> TrainState {
        self.state
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    /// Model, position and optimizer velocities.
    pub fn checkpoint(&self, skeleton: Option<&SkeletonSpec>) -> Checkpoint {
        let mut ckpt = Checkpoint::new(self.model.clone());
        ckpt.skeleton = skeleton.cloned();
        ckpt.state = Some(self.state);
        ckpt.extra = self
            .optim
            .velocity()
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("{VELOCITY_PREFIX}{i}"), v.clone()))
            .collect();
        ckpt
    }

    /// Training-mode loss over all heads and the parameter gradients; the model is not changed.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(LossReport, Vec<Tensor<f32>>, Vec<(usize, BatchMoments<f32>)>)> {
        self.try_loss_and_grads(batch).map_err(|e| match e {
            Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss { step: self.state.step + 1 },
            other => other,
        })
    }

    fn try_loss_and_grads(&self, batch: &Batch) -> Result<(LossReport, Vec<Tensor<f32>>, Vec<(usize, BatchMoments<f32>)>)> {
        let mut g = Graph::new();
        let x = g.leaf(batch.images.clone(), false);
        let fv = self.model.forward_graph(&mut g, x, true, None)?;
        let heads: Vec<&Tensor<f32>> = fv.heads.iter().map(|&h| g.value(h)).collect();
        let (report, seeds) = weighted_mse_loss(&heads, &batch.packs)?;
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.state.step + 1 });
        }
        g.backward_from(fv.heads.iter().copied().zip(seeds).collect())?;
        let grads = fv
            .params
            .iter()
            .zip(self.model.params())
            .map(|(&v, p)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();
        Ok((report, grads, fv.moments))
    }

    /// One SGD step at `lr`. On a non-finite loss or gradient the model is left untouched.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<LossReport> {
        let (report, mut grads, moments) = self.loss_and_grads(batch)?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step: self.state.step + 1 });
        }
        if let Some(max) = self.cfg.clip_norm {
            let norm = global_norm(&grads);
            if norm > max {
                let s = (max / norm) as f32;
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        self.optim.learning_rate = lr;
        let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
        self.optim.step(&mut self.model.params_mut(), &grad_refs)?;
        self.model.apply_moments(&moments)?;
        self.state.step += 1;
        self.log.push_step(StepRecord {
            step: self.state.step,
            epoch: self.state.epoch,
            lr,
            loss: report.total,
            per_head: report.per_head.clone(),
        })?;
        Ok(report)
    }

    fn done(&self) -> bool {
        self.state.epoch >= self.cfg.epochs || self.cfg.max_steps.is_some_and(|m| self.state.step >= m)
    }

    /// Runs the next epoch of shuffled mini-batches and returns its mean loss.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Contract("cannot train on an empty dataset".into()));
        }
        let epoch = self.state.epoch;
        let lr = self.cfg.learning_rate(epoch);
        let order = epoch_order(data.len(), self.cfg.seed, epoch);
        let mut rng = augment_rng(self.cfg.seed, epoch);
        let (mut sum, mut batches) = (0.0, 0usize);
        for idx in order.chunks(self.cfg.batch_size) {
            if self.cfg.max_steps.is_some_and(|m| self.state.step >= m) {
                break;
            }
            let samples: Vec<_> = idx.iter().map(|&i| &data.samples[i]).collect();
            let aug: Option<(&AugmentConfig, &mut ChaCha8Rng)> = self.cfg.augment.as_ref().map(|a| (a, &mut rng));
            let batch = make_batch(&samples, &data.skeleton, &self.model.input_mean, self.cfg.scenario, aug)?;
            sum += self.step(&batch, lr)?.total;
            batches += 1;
        }
        self.state.epoch += 1;
        Ok(if batches == 0 { 0.0 } else { sum / batches as f64 })
    }

    /// Trains until the configured epoch or step budget is spent.
    ///
    /// Every `eval_every` epochs and at the end the model is scored on `val`
    /// and, when `out` is given, a checkpoint is written there atomically. A
    /// failed step leaves the last written checkpoint in place.
    pub fn fit(&mut self, train: &Dataset, val: Option<&Dataset>, out: Option<&Path>) -> Result<()> {
        let cfg = self.model.config();
        if cfg.keypoints != train.skeleton.num_keypoints() || cfg.parts != train.skeleton.num_parts() {
            return Err(Error::Config(format!(
                "model predicts {} keypoints and {} parts, dataset skeleton has {} and {}",
                cfg.keypoints,
                cfg.parts,
                train.skeleton.num_keypoints(),
                train.skeleton.num_parts()
            )));
        }
        if self.state == TrainState::default() {
            self.model.input_mean = train.channel_mean()?;
        }
        while !self.done() {
            let epoch = self.state.epoch;
            let train_loss = self.run_epoch(train)?;
            let last = self.done();
            let due = self.cfg.eval_every > 0 && (epoch + 1) % self.cfg.eval_every == 0;
            if !(due || last) {
                continue;
            }
            let (val_loss, val_pckh) = match val.filter(|v| !v.is_empty()) {
                Some(v) => {
                    let opts = EvalOptions {
                        scenario: self.cfg.scenario,
                        ..EvalOptions::default()
                    };
                    let r = evaluate(&self.model, v, &opts)?;
                    (Some(r.loss.total), Some(r.pckh.overall))
                }
                None => (None, None),
            };
            let lr = self.cfg.learning_rate(epoch);
            self.log.push_epoch(EpochRecord {
                epoch,
                lr,
                train_loss,
                val_loss,
                val_pckh,
            })?;
            if self.cfg.progress {
                let pckh = val_pckh.map(|p| format!(" val_pckh {p:.4}")).unwrap_or_default();
                eprintln!(
                    "epoch {:>3}  step {:>6}  lr {lr:.3e}  loss {train_loss:.6}{pckh}",
                    epoch + 1,
                    self.state.step
                );
            }
            if let Some(dir) = out {
                self.save(dir, Some(&train.skeleton))?;
            }
        }
        Ok(())
    }

    /// Writes the checkpoint and both log files into `dir`.
    pub fn save(&self, dir: &Path, skeleton: Option<&SkeletonSpec>) -> Result<PathBuf> {
        let path = dir.join(CHECKPOINT_FILE);
        self.checkpoint(skeleton).save(&path)?;
        crate::util::atomic_write(&dir.join("train_steps.csv"), self.log.steps_csv().as_bytes())?;
        crate::util::atomic_write(&dir.join("train_epochs.csv"), self.log.epochs_csv().as_bytes())?;
        Ok(path)
    }
}

/// Trains a fresh copy of `model` on `data`.
pub fn train(model: PoseNet<f32>, data: &Dataset, cfg: TrainConfig) -> Result<(PoseNet<f32>, TrainLog)> {
    let mut t = Trainer::new(model, cfg)?;
    t.fit(data, None, None)?;
    let log = t.log.clone();
    Ok((t.into_model(), log))
}
