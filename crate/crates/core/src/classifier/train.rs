use std::f64::consts::PI;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{image_to_tensor, init_model, sgd_step_in_place, GradientSet, LayerSpec, Model};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::semantics::{ImageDatabase, ImageId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    CosineDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub gradient_clip_norm: Option<f64>,
    pub seed: u64,
    /// Share of every class bucket held out for evaluation.
    pub holdout_fraction: f64,
}

impl TrainConfig {
    /// Victim-network hyperparameters of the full-scale reference setup.
    pub fn reference_preset() -> Self {
        TrainConfig {
            learning_rate: 0.03,
            schedule: Schedule::CosineDecay,
            warmup_steps: 500,
            total_steps: 10_000,
            batch_size: 64,
            gradient_clip_norm: Some(1.0),
            seed: 0,
            holdout_fraction: 0.2,
        }
    }

    /// Sized for the synthetic corpus on a single CPU core.
    pub fn desk_default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            schedule: Schedule::CosineDecay,
            warmup_steps: 100,
            total_steps: 2_000,
            batch_size: 32,
            gradient_clip_norm: Some(5.0),
            seed: 0,
            holdout_fraction: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::InvalidConfig("warmup_steps exceeds total_steps".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::InvalidConfig("holdout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `learning_rate` over `warmup_steps`, then either
/// constant or cosine decay reaching 0 at `total_steps`.
pub fn schedule_lr(step: usize, cfg: &TrainConfig) -> f64 {
    let lr = cfg.learning_rate;
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return lr * step as f64 / cfg.warmup_steps as f64;
    }
    match cfg.schedule {
        Schedule::Constant => lr,
        Schedule::CosineDecay => {
            let span = cfg.total_steps - cfg.warmup_steps;
            if span == 0 {
                return lr;
            }
            let t = (step - cfg.warmup_steps) as f64 / span as f64;
            0.5 * lr * (1.0 + (PI * t).cos())
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub held_out_accuracy: f64,
    pub train_ids: Vec<ImageId>,
    pub held_out_ids: Vec<ImageId>,
    /// Mean batch loss per step.
    pub loss_trace: Vec<f64>,
}

/// Fraction of `ids` the model classifies correctly.
pub fn evaluate(model: &Model, db: &ImageDatabase, ids: &[ImageId], exec: Execution) -> f64 {
    if ids.is_empty() {
        return 0.0;
    }
    let hits = exec.map_slice(ids, |id| {
        let img = db.get(*id).expect("id from this database");
        model.classify(img) == img.tag
    });
    hits.iter().filter(|&&h| h).count() as f64 / ids.len() as f64
}

/// Mini-batch SGD on a deterministic train split. Per-sample gradients are
/// computed in parallel and summed in index order, so the result does not
/// depend on the worker count.
pub fn train(spec: &[LayerSpec], db: &ImageDatabase, cfg: &TrainConfig, exec: Execution) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = init_model(spec, cfg.seed)?;
    let (train_ids, held_out_ids) = db.split(cfg.holdout_fraction, cfg.seed);
    if train_ids.is_empty() {
        return Err(Error::InvalidConfig("empty training split".into()));
    }

    let mut order: Vec<ImageId> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut loss_trace = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = train_ids.clone();
                let mut rng = crate::seed::rng(cfg.seed, &[crate::seed::label("epoch"), epoch]);
                order.shuffle(&mut rng);
                epoch += 1;
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let per_sample = exec.map_slice(&batch, |id| {
            let img = db.get(*id).expect("id from this database");
            model.loss_and_grads(&image_to_tensor(img), img.tag)
        });
        let mut grads = GradientSet::zeros_like(&model);
        let mut loss = 0.0;
        for (l, g) in &per_sample {
            loss += l;
            grads.add_scaled(g, 1.0);
        }
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv);
        loss_trace.push(loss * inv);

        if let Some(max_norm) = cfg.gradient_clip_norm {
            let n = grads.norm();
            if n > max_norm {
                grads.scale(max_norm / n);
            }
        }
        sgd_step_in_place(&mut model, &grads, schedule_lr(step + 1, cfg))?;
    }

    let held_out_accuracy = evaluate(&model, db, &held_out_ids, exec);
    Ok(TrainOutcome {
        model,
        held_out_accuracy,
        train_ids,
        held_out_ids,
        loss_trace,
    })
}
