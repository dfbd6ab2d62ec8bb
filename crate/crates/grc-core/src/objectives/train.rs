//! Toy-scale training loop: SGD with momentum over the combined loss,
//! with micro-batch gradient accumulation in a fixed order so seeded runs
//! are bitwise reproducible even when forwards run in parallel.

use super::{total_loss_with_grads, LossBreakdown, LossWeights, SimilarityScale};
use crate::bundle::{GrcGrads, GrcModel};
use crate::data::{augment_record, unify_batch_with, Augmented, DataRecord, ReconstructionPromptSet};
use crate::error::{GrcError, Result};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// The learning rate decays linearly to `lr × final_lr_fraction` over
    /// the run; 1.0 keeps it constant.
    pub final_lr_fraction: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub num_negatives: usize,
    pub weights: LossWeights,
    pub scale: SimilarityScale,
    /// Run micro-batch forwards in parallel (accumulation order is fixed
    /// regardless).
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            lr: 0.05,
            final_lr_fraction: 1.0,
            momentum: 0.9,
            batch_size: 4,
            num_negatives: 1,
            weights: LossWeights::default(),
            scale: SimilarityScale::default(),
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    pub total: f64,
    pub gen: f64,
    pub recons: f64,
    pub rep: f64,
}

/// Train in place over the records, returning the per-step loss trace.
pub fn train_toy(
    model: &mut GrcModel,
    records: &[DataRecord],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<StepLoss>> {
    if records.is_empty() {
        return Err(GrcError::InvalidInput("training dataset is empty".into()));
    }
    cfg.weights.validate()?;
    let prompts = ReconstructionPromptSet::default();
    let m = model.m();
    let items: Vec<Augmented> = records
        .iter()
        .map(|r| augment_record(r, m, &prompts, rng))
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let mut cursor = 0usize;

    let mut velocity = vec![0.0; model.num_params()];
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size.max(1) {
            if cursor >= order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            batch.push(items[order[cursor]].clone());
            cursor += 1;
        }
        let unified = unify_batch_with(&batch, cfg.num_negatives, rng)?;

        let results: Vec<Result<(LossBreakdown, GrcGrads)>> = if cfg.parallel {
            unified
                .par_iter()
                .map(|ex| total_loss_with_grads(ex, model, &cfg.weights, &cfg.scale))
                .collect()
        } else {
            unified
                .iter()
                .map(|ex| total_loss_with_grads(ex, model, &cfg.weights, &cfg.scale))
                .collect()
        };

        let mut grads = GrcGrads::zeros(model);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for result in results {
            let (breakdown, g) = result?;
            grads.accumulate(&g);
            sums.0 += breakdown.total;
            sums.1 += breakdown.gen;
            sums.2 += breakdown.recons;
            sums.3 += breakdown.rep;
        }
        let count = unified.len() as f64;
        grads.scale(1.0 / count);
        let step_loss = StepLoss {
            step,
            total: sums.0 / count,
            gen: sums.1 / count,
            recons: sums.2 / count,
            rep: sums.3 / count,
        };
        if !step_loss.total.is_finite() || !grads.is_finite() {
            return Err(GrcError::Divergence { step });
        }

        let progress = if cfg.steps > 1 {
            step as f64 / (cfg.steps - 1) as f64
        } else {
            0.0
        };
        let lr = cfg.lr * (1.0 - (1.0 - cfg.final_lr_fraction) * progress);
        let mut flat = model.to_flat();
        let grad_flat = grads.to_flat();
        for ((p, v), g) in flat.iter_mut().zip(&mut velocity).zip(&grad_flat) {
            *v = cfg.momentum * *v + g;
            *p -= lr * *v;
        }
        model.set_from_flat(&flat);
        trace.push(step_loss);
    }
    Ok(trace)
}

/// Emit the loss trace as `step,total,gen,recons,rep` CSV.
pub fn write_loss_csv(path: &Path, trace: &[StepLoss]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "step,total,gen,recons,rep")?;
    for row in trace {
        writeln!(
            file,
            "{},{},{},{},{}",
            row.step, row.total, row.gen, row.recons, row.rep
        )?;
    }
    Ok(())
}
