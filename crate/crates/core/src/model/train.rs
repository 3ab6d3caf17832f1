//! Masked-reconstruction pretraining loop.

use ndarray::{Array2, Array3};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{make_mask, patch_values, segment_loss, MaskPlan, Model, ModelError, Standardize};
use crate::features::{sample_batch, BinauralSpectrogram};
use crate::nn::optim::{cosine_warmup_lr, AdamW, AdamWConfig};
use crate::nn::{Graph, Tensor};
use crate::seed::{item_seed, mix, rng, stage_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub warmup_steps: u64,
    pub base_lr: f64,
    pub clips_per_step: usize,
    pub segments_per_clip: usize,
    /// Held-out segments with fixed masks for the before/after comparison.
    pub eval_segments: usize,
    pub optimizer: AdamWConfig,
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            steps: 300,
            warmup_steps: 30,
            base_lr: 5e-3,
            clips_per_step: 8,
            segments_per_clip: 4,
            eval_segments: 64,
            optimizer: AdamWConfig { beta1: 0.8, beta2: 0.95, ..AdamWConfig::default() },
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.steps == 0 || self.clips_per_step == 0 || self.segments_per_clip == 0 {
            return Err(ModelError::Config("steps, clips_per_step and segments_per_clip must be positive".into()));
        }
        if self.warmup_steps > self.steps {
            return Err(ModelError::Config(format!("warmup {} exceeds {} steps", self.warmup_steps, self.steps)));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(ModelError::Config(format!("learning rate {}", self.base_lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    /// Mean squared deviation of the evaluation targets from their mean.
    pub eval_target_variance: f64,
    pub log: Vec<StepLog>,
}

/// Mean loss over segments and, when requested, the mean gradient in the
/// parameter set's name order. Segments are processed and summed in index order.
pub fn batch_loss(model: &Model, patches: &[Array2<f64>], masks: &[MaskPlan], with_grads: bool) -> Result<(f64, Option<Vec<Tensor>>), ModelError> {
    let n = patches.len() as f64;
    let mut total = 0.0;
    let mut acc: Option<Vec<Tensor>> = with_grads.then(|| model.params.zeros_like());
    for (x, m) in patches.iter().zip(masks) {
        let mut g = Graph::new();
        let p = if with_grads { model.params.bind(&mut g) } else { model.params.bind_frozen(&mut g) };
        let (loss, _) = segment_loss(&mut g, &p, &model.config, x, m)?;
        total += g.value(loss)[[]];
        if let Some(acc) = acc.as_mut() {
            let grads = p.gradients(&g, &g.backward(loss)?);
            for (a, gr) in acc.iter_mut().zip(grads) {
                *a += &gr;
            }
        }
    }
    if let Some(acc) = acc.as_mut() {
        for a in acc.iter_mut() {
            *a /= n;
        }
    }
    Ok((total / n, acc))
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub seed: u64,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let optimizer = AdamW::new(&model.params, config.optimizer);
        Ok(Self { model, optimizer, config, seed, step: 0 })
    }

    pub fn mask_for(&self, step: u64, index: usize) -> MaskPlan {
        let base = stage_seed(self.seed, "mask") ^ mix(step);
        make_mask(self.model.config.patch.n_tokens(), self.model.config.mask_ratio, item_seed(base, index as u64))
    }

    /// One optimizer update on `segments`.
    pub fn train_step(&mut self, segments: &[Array3<f64>]) -> Result<StepLog, ModelError> {
        let patches = to_patches(&self.model, segments)?;
        let masks: Vec<MaskPlan> = (0..segments.len()).map(|i| self.mask_for(self.step, i)).collect();
        let (loss, grads) = batch_loss(&self.model, &patches, &masks, true)?;
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                step: self.step,
                loss,
                detail: format!("params finite: {}, segments: {}", self.model.params.all_finite(), segments.len()),
            });
        }
        let lr = cosine_warmup_lr(self.step, self.config.warmup_steps, self.config.steps, self.config.base_lr)?;
        let stats = self.optimizer.step(&mut self.model.params, &grads.expect("gradients requested"), lr)?;
        let log = StepLog { step: self.step, lr, loss, grad_norm: stats.grad_norm };
        self.step += 1;
        Ok(log)
    }
}

fn to_patches(model: &Model, segments: &[Array3<f64>]) -> Result<Vec<Array2<f64>>, ModelError> {
    segments.iter().map(|s| patch_values(s.view(), &model.config.patch)).collect()
}

/// Segments for training step `step`: distinct clips drawn per step, then
/// random crops from each.
pub fn step_segments(corpus: &[BinauralSpectrogram], cfg: &TrainConfig, seed: u64, step: u64) -> Result<Vec<Array3<f64>>, ModelError> {
    let stage = stage_seed(seed, "batch");
    let mut r = rng(item_seed(stage, step));
    let k = cfg.clips_per_step.min(corpus.len());
    let picks = sample(&mut r, corpus.len(), k).into_vec();
    let ids: Vec<String> = picks.iter().map(|i| i.to_string()).collect();
    let parents: Vec<(&str, &BinauralSpectrogram)> = picks.iter().zip(&ids).map(|(&i, id)| (id.as_str(), &corpus[i])).collect();
    let batch = sample_batch(&parents, item_seed(stage, step) ^ mix(!step), cfg.segments_per_clip)?;
    Ok(batch.segments.iter().map(|s| s.to_f64()).collect())
}

/// Fixed evaluation segments and masks, independent of the training stream.
pub fn eval_set(model: &Model, corpus: &[BinauralSpectrogram], count: usize, seed: u64) -> Result<(Vec<Array2<f64>>, Vec<MaskPlan>), ModelError> {
    let stage = stage_seed(seed, "eval");
    let mut patches = Vec::with_capacity(count);
    let mut masks = Vec::with_capacity(count);
    for i in 0..count {
        let clip = &corpus[i % corpus.len()];
        let seg = crate::features::sample_segments_n(clip, "eval", item_seed(stage, i as u64), 1)?;
        patches.push(patch_values(seg.segments[0].to_f64().view(), &model.config.patch)?);
        masks.push(make_mask(model.config.patch.n_tokens(), model.config.mask_ratio, item_seed(stage ^ 1, i as u64)));
    }
    Ok((patches, masks))
}

/// Global mean and standard deviation over every value of every clip.
pub fn corpus_stats(corpus: &[BinauralSpectrogram]) -> Standardize {
    let mut n = 0usize;
    let (mut sum, mut sq) = (0.0, 0.0);
    for c in corpus {
        for &v in c.values() {
            let v = v as f64;
            sum += v;
            sq += v * v;
            n += 1;
        }
    }
    if n == 0 {
        return Standardize::IDENTITY;
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    Standardize { mean, std }
}

fn masked_target_variance(patches: &[Array2<f64>], masks: &[MaskPlan]) -> f64 {
    let vals: Vec<f64> = patches
        .iter()
        .zip(masks)
        .flat_map(|(p, m)| m.masked.iter().flat_map(move |&r| p.row(r).to_vec()))
        .collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64
}

/// Runs `trainer.config.steps` updates over `corpus`, calling `on_step` after each.
pub fn pretrain(trainer: &mut Trainer, corpus: &[BinauralSpectrogram], mut on_step: impl FnMut(&StepLog)) -> Result<PretrainReport, ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::Config("empty pretraining corpus".into()));
    }
    if trainer.step == 0 && trainer.model.config.fit_standardize {
        trainer.model.config.standardize = corpus_stats(corpus);
    }
    let (ep, em) = eval_set(&trainer.model, corpus, trainer.config.eval_segments.max(1), trainer.seed)?;
    let initial = batch_loss(&trainer.model, &ep, &em, false)?.0;
    let mut log = Vec::new();
    while trainer.step < trainer.config.steps {
        let segs = step_segments(corpus, &trainer.config, trainer.seed, trainer.step)?;
        let entry = trainer.train_step(&segs)?;
        on_step(&entry);
        log.push(entry);
    }
    let fin = batch_loss(&trainer.model, &ep, &em, false)?.0;
    Ok(PretrainReport { initial_eval_loss: initial, final_eval_loss: fin, eval_target_variance: masked_target_variance(&ep, &em), log })
}
