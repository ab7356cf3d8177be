//! Two-stage training loop, ablation modes, and held-out evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::MaskSampler;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, NllScope, Stage};
use crate::ndgrad::Real;
use crate::nn::{clip_global_norm, update_running, Adam, Ctx};
use crate::regobjectives::RegularizerConfig;
use crate::vaecore::{ContextMask, Image, Preset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Preset,
    pub stage: Stage,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub regularizer: RegularizerConfig,
    pub masks: MaskSampler,
    pub clip_norm: f64,
    pub bn_momentum: f64,
    /// Re-draw the copied semantic injections `V_l` when stage 2 starts.
    pub reinit_semantic_injection: bool,
    /// Caps the batches per epoch (all batches when `None`).
    pub max_batches_per_epoch: Option<usize>,
}

impl TrainConfig {
    pub fn preset(preset: Preset, stage: Stage) -> Self {
        let model = ModelConfig::preset(preset);
        let (batch_size, mmd) = match preset {
            Preset::Faithful => (64, 2e6),
            Preset::Desk => (32, 1e5),
        };
        TrainConfig {
            preset,
            stage,
            learning_rate: 1e-4,
            batch_size,
            epochs: 20,
            seed: 0,
            regularizer: RegularizerConfig::mmd(mmd),
            masks: MaskSampler::default_for(model.vae.image_size),
            clip_norm: 5.0,
            bn_momentum: 0.99,
            reinit_semantic_injection: true,
            max_batches_per_epoch: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} and batch size {} must be positive (batch >= 2 for batch norm)",
                self.learning_rate, self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument("bn momentum in [0,1) and positive clip norm required".into()));
        }
        self.regularizer.validate()?;
        self.masks.validate()
    }
}

/// Per-epoch averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub steps: usize,
    /// Nats per scored sub-pixel.
    pub nll: f64,
    /// Mean scaled regulariser per batch.
    pub regularizer: f64,
    pub grad_norm: f64,
    pub pixels: usize,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn bits_per_dim(&self) -> f64 {
        self.nll / std::f64::consts::LN_2
    }
}

/// Runs `cfg.epochs` epochs over `images` and returns the trained model with
/// its history. `on_epoch` sees each record as it completes.
pub fn train<T: Real>(
    mut model: Model<T>,
    cfg: &TrainConfig,
    images: &[Image],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model<T>, Vec<EpochRecord>)> {
    cfg.validate()?;
    if cfg.stage != model.stage {
        return Err(Error::InvalidArgument(format!("config stage {} but model stage {}", cfg.stage, model.stage)));
    }
    if images.len() < cfg.batch_size {
        return Err(Error::InvalidArgument(format!("{} images cannot fill a batch of {}", images.len(), cfg.batch_size)));
    }
    let frozen: Vec<(&str, String)> = model.frozen_prefixes().into_iter().map(|p| (p, model.store.digest(p))).collect();
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d80b);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let m2 = model.image_size() * model.image_size();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut data_rng);
        let batches = order.chunks_exact(cfg.batch_size).take(cfg.max_batches_per_epoch.unwrap_or(usize::MAX));
        let (mut steps, mut nll_sum, mut pixels, mut reg_sum, mut norm_sum) = (0usize, 0.0, 0usize, 0.0, 0.0);
        for (step, idx) in batches.enumerate() {
            let imgs: Vec<&Image> = idx.iter().map(|&i| &images[i]).collect();
            let masks: Vec<ContextMask> = idx.iter().map(|_| cfg.masks.sample(&mut data_rng)).collect();
            let mrefs: Vec<&ContextMask> = masks.iter().collect();
            let expected = if model.stage.target_only() {
                masks.iter().map(|m| m.target_count()).sum()
            } else {
                idx.len() * m2
            };
            let mut ctx = Ctx::new(&model.store, model.trainable()).with_rng(&mut drop_rng);
            let parts = model.loss(&mut ctx, &imgs, &mrefs, Some(&cfg.regularizer), &mut data_rng, true)?;
            if parts.nll.pixels != expected {
                return Err(Error::InvalidArgument(format!("scored {} pixels, expected {expected}", parts.nll.pixels)));
            }
            let loss = ctx.g.value(parts.loss).item().as_f64();
            let diverged = |detail: String| Error::Diverged { epoch, step, detail };
            if !loss.is_finite() {
                return Err(diverged(format!(
                    "loss {loss}, nll {} over {} pixels, regulariser {}",
                    parts.nll.total_nll, parts.nll.pixels, parts.regularizer
                )));
            }
            ctx.g.backward(parts.loss)?;
            let mut grads = ctx.grads();
            let moments = ctx.take_moments();
            drop(ctx);
            let norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(diverged(format!("gradient norm {norm} at loss {loss}")));
            }
            adam.update(&mut model.store, &grads)?;
            update_running(&mut model.store, &moments, cfg.bn_momentum)?;
            steps += 1;
            nll_sum += parts.nll.total_nll;
            pixels += parts.nll.pixels;
            reg_sum += parts.regularizer;
            norm_sum += norm;
        }
        let c = model.channels() as f64;
        let rec = EpochRecord {
            stage: model.stage,
            epoch,
            steps,
            nll: if pixels > 0 { nll_sum / (pixels as f64 * c) } else { 0.0 },
            regularizer: reg_sum / steps.max(1) as f64,
            grad_norm: norm_sum / steps.max(1) as f64,
            pixels,
            seconds: start.elapsed().as_secs_f64(),
        };
        tracing::info!(stage = %rec.stage, epoch, nll = rec.nll, reg = rec.regularizer, secs = rec.seconds, "epoch done");
        on_epoch(&rec);
        history.push(rec);
    }
    for (prefix, digest) in frozen {
        if model.store.digest(prefix) != digest {
            return Err(Error::InvalidArgument(format!("frozen tensors under {prefix} changed during training")));
        }
    }
    Ok((model, history))
}

/// Fresh model for `cfg.stage`, or the stage-2 starting point derived from
/// `stage1` (required for stage 2 and the forward-only ablation).
pub fn initial_model<T: Real>(model_cfg: ModelConfig, cfg: &TrainConfig, stage1: Option<&Model<T>>) -> Result<Model<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x1417));
    if cfg.stage.needs_stage1() {
        let s1 = stage1.ok_or_else(|| Error::MissingStage1(format!("stage {} needs a stage-1 checkpoint", cfg.stage)))?;
        Model::from_stage1(s1, cfg.stage, cfg.reinit_semantic_injection, &mut rng)
    } else {
        Model::init(model_cfg, cfg.stage, &mut rng)
    }
}

/// Fixed evaluation masks for `n` images.
pub fn evaluation_masks(sampler: &MaskSampler, n: usize, seed: u64) -> Vec<ContextMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sampler.sample(&mut rng)).collect()
}

/// Mean NLL (nats per scored sub-pixel) over `images` with the given masks,
/// in batches of `batch`.
pub fn mean_nll<T: Real>(model: &Model<T>, images: &[Image], masks: &[ContextMask], scope: NllScope, batch: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut total, mut pixels) = (0.0, 0usize);
    for (ic, mc) in images.chunks(batch.max(1)).zip(masks.chunks(batch.max(1))) {
        let ir: Vec<&Image> = ic.iter().collect();
        let mr: Vec<&ContextMask> = mc.iter().collect();
        let s = model.evaluate_nll(&ir, &mr, scope, &mut rng)?;
        total += s.total_nll;
        pixels += s.pixels;
    }
    Ok(if pixels > 0 { total / (pixels as f64 * model.channels() as f64) } else { 0.0 })
}

#[cfg(test)]
mod tests;
