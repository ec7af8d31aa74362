//! Dataset splitting, label-fraction sampling, the masked pre-training loop,
//! downstream training and checkpointing.

pub mod checkpoint;
pub mod manifest;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::architecture::{Classifier, MaskedAutoencoder};
use crate::corruption::{apply_plan, plan_for, plan_mask, MaskPolicy};
use crate::error::{invalid, shape_err, Error, Result};
use crate::neuralops::{adam_step, AdamConfig, AdamState, BatchNormMode, Graph, Tensor};
use crate::rng::{seeded, SeededRng};
use crate::volume::Volume;

pub use checkpoint::{load_checkpoint, load_classifier, load_mae, save_classifier, save_mae, Model, TrainingMetadata};
pub use manifest::{AnyManifest, LabeledManifest, LabeledRecord, UnlabeledManifest, UnlabeledRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossRegion {
    /// Reconstruction error over every voxel.
    #[default]
    Full,
    /// Reconstruction error over voxels of corrupted cubes only.
    Masked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss_region: LossRegion,
    /// Stop after this many epochs without a lower loss. Off when `None`.
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            lr: 1e-4,
            seed: 0,
            loss_region: LossRegion::Full,
            early_stop_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid!("epochs and batch size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid!("learning rate must be positive"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Indices of each class, in manifest order.
fn class_indices(manifest: &LabeledManifest) -> Result<[Vec<usize>; 2]> {
    let mut classes = [Vec::new(), Vec::new()];
    for (i, r) in manifest.records.iter().enumerate() {
        classes[usize::from(r.label.min(1))].push(i);
    }
    if classes.iter().any(Vec::is_empty) {
        return Err(invalid!(
            "stratified sampling needs both classes, found {} negatives and {} positives",
            classes[0].len(),
            classes[1].len()
        ));
    }
    Ok(classes)
}

fn stratified_pick(manifest: &LabeledManifest, fraction: f64, min_one: bool, rng: &mut SeededRng) -> Result<HashSet<usize>> {
    let mut picked = HashSet::new();
    for mut idx in class_indices(manifest)? {
        let mut k = round_half_up(fraction * idx.len() as f64).min(idx.len());
        if min_one {
            k = k.max(1);
        }
        idx.shuffle(rng);
        picked.extend(idx.into_iter().take(k));
    }
    Ok(picked)
}

fn select(manifest: &LabeledManifest, keep: impl Fn(usize) -> bool) -> LabeledManifest {
    LabeledManifest {
        records: manifest
            .records
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, r)| r.clone())
            .collect(),
        base_dir: manifest.base_dir.clone(),
    }
}

/// Stratified train/test split. Each class contributes
/// round-half-up(`train_fraction` x class size) cases to the training set.
pub fn split_labeled(
    manifest: &LabeledManifest,
    train_fraction: f64,
    rng: &mut SeededRng,
) -> Result<(LabeledManifest, LabeledManifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(invalid!("train fraction must lie in (0, 1), got {train_fraction}"));
    }
    let train = stratified_pick(manifest, train_fraction, false, rng)?;
    Ok((
        select(manifest, |i| train.contains(&i)),
        select(manifest, |i| !train.contains(&i)),
    ))
}

/// Stratified subsample without replacement, at least one case per class.
/// A fraction of 1 returns the manifest unchanged.
pub fn sample_label_fraction(train: &LabeledManifest, fraction: f64, rng: &mut SeededRng) -> Result<LabeledManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid!("label fraction must lie in (0, 1], got {fraction}"));
    }
    if fraction == 1.0 {
        class_indices(train)?;
        return Ok(train.clone());
    }
    let picked = stratified_pick(train, fraction, true, rng)?;
    Ok(select(train, |i| picked.contains(&i)))
}

/// Stacks same-sized volumes into an `N x 1 x z x y x x` tensor.
pub fn batch_tensor(volumes: &[&Volume]) -> Result<Tensor<f32>> {
    let first = volumes.first().ok_or_else(|| invalid!("empty batch"))?;
    let [x, y, z] = first.dims();
    let mut data = Vec::with_capacity(volumes.len() * first.len());
    for v in volumes {
        if v.dims() != first.dims() {
            return Err(shape_err!("batch mixes dims {:?} and {:?}", first.dims(), v.dims()));
        }
        data.extend_from_slice(v.voxels());
    }
    Tensor::new([volumes.len(), 1, z, y, x], data)
}

fn check_dims(volumes: &[Volume], dims: [usize; 3]) -> Result<()> {
    match volumes.iter().position(|v| v.dims() != dims) {
        Some(i) => Err(shape_err!("volume {i} has dims {:?}, model expects {dims:?}", volumes[i].dims())),
        None => Ok(()),
    }
}

fn finish_epoch(history: &mut Vec<f64>, total: f64, count: usize, epoch: usize) -> Result<()> {
    let mean = total / count as f64;
    if !mean.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss in epoch {}", epoch + 1)));
    }
    history.push(mean);
    Ok(())
}

fn should_stop(history: &[f64], patience: Option<usize>) -> bool {
    let Some(p) = patience else { return false };
    let best = history.iter().cloned().fold(f64::INFINITY, f64::min);
    let best_at = history.iter().position(|&v| v == best).unwrap_or(0);
    history.len() - 1 - best_at >= p
}

/// Masked-image-modelling pre-training on in-memory volumes.
///
/// Every epoch visits the volumes in a freshly shuffled order; every visit
/// draws a new corruption plan. Returns the mean reconstruction loss per epoch.
pub fn pretrain_volumes(
    mae: &mut MaskedAutoencoder<f32>,
    volumes: &[Volume],
    policy: &MaskPolicy,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    policy.validate()?;
    if volumes.is_empty() {
        return Err(invalid!("pre-training needs at least one volume"));
    }
    check_dims(volumes, mae.config.input_dims)?;
    let mut rng = seeded(config.seed);
    let mut adam = AdamState::new(config.adam());
    let mut order: Vec<usize> = (0..volumes.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut corrupted = Vec::with_capacity(chunk.len());
            let mut mask = Vec::new();
            for &i in chunk {
                let v = &volumes[i];
                let (grid, plan) = plan_for(v.dims(), policy, &mut rng)?;
                corrupted.push(apply_plan(v, &grid, &plan)?);
                if config.loss_region == LossRegion::Masked {
                    mask.extend(plan_mask(&grid, &plan));
                }
            }
            let clean: Vec<&Volume> = chunk.iter().map(|&i| &volumes[i]).collect();
            let target = batch_tensor(&clean)?;
            let input = batch_tensor(&corrupted.iter().collect::<Vec<_>>())?;

            let mut g = Graph::new();
            let x = g.constant(input);
            let pass = mae.forward(&mut g, x, BatchNormMode::Train)?;
            let mask_ref = (config.loss_region == LossRegion::Masked).then_some(&mask[..]);
            let loss = g.mse_loss(pass.output, &target, mask_ref)?;
            let value = f64::from(g.value(loss).data()[0]);
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite reconstruction loss in epoch {}", epoch + 1)));
            }
            total += value * chunk.len() as f64;
            g.backward(loss)?;
            let grads: Vec<Tensor<f32>> = pass
                .params
                .iter()
                .map(|&v| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec())))
                .collect();
            let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
            adam_step(&mut mae.params_mut(), &grad_refs, &mut adam)?;
        }
        finish_epoch(&mut history, total, volumes.len(), epoch)?;
        log::info!("pretrain epoch {}: loss {:.6}", epoch + 1, history[epoch]);
        if should_stop(&history, config.early_stop_patience) {
            break;
        }
    }
    Ok(history)
}

/// Pre-trains on every volume of an unlabeled manifest.
pub fn pretrain(
    mae: &mut MaskedAutoencoder<f32>,
    unlabeled: &UnlabeledManifest,
    policy: &MaskPolicy,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    if unlabeled.is_empty() {
        return Err(invalid!("unlabeled manifest is empty"));
    }
    let volumes = unlabeled.load_volumes()?;
    pretrain_volumes(mae, &volumes, policy, config)
}

/// Supervised training with binary cross-entropy on in-memory volumes.
/// Only the classifier's trainable parameters change.
pub fn train_downstream_volumes(
    classifier: &mut Classifier<f32>,
    volumes: &[Volume],
    labels: &[u8],
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if volumes.is_empty() || volumes.len() != labels.len() {
        return Err(invalid!("need one label per volume and at least one volume"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(invalid!("labels must be 0 or 1"));
    }
    check_dims(volumes, classifier.config.input_dims)?;
    let mut rng = seeded(config.seed);
    let mut adam = AdamState::new(config.adam());
    let mut order: Vec<usize> = (0..volumes.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Volume> = chunk.iter().map(|&i| &volumes[i]).collect();
            let y: Vec<f32> = chunk.iter().map(|&i| f32::from(labels[i])).collect();
            let mut g = Graph::new();
            let x = g.constant(batch_tensor(&batch)?);
            let pass = classifier.forward(&mut g, x)?;
            let loss = g.bce_loss(pass.probabilities, &y)?;
            total += f64::from(g.value(loss).data()[0]) * chunk.len() as f64;
            g.backward(loss)?;
            let grads: Vec<Tensor<f32>> = pass
                .trainable
                .iter()
                .map(|&v| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec())))
                .collect();
            let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
            adam_step(&mut classifier.trainable_params_mut(), &grad_refs, &mut adam)?;
        }
        finish_epoch(&mut history, total, volumes.len(), epoch)?;
        log::debug!("downstream epoch {}: loss {:.6}", epoch + 1, history[epoch]);
        if should_stop(&history, config.early_stop_patience) {
            break;
        }
    }
    Ok(history)
}

pub fn train_downstream(classifier: &mut Classifier<f32>, labeled: &LabeledManifest, config: &TrainConfig) -> Result<Vec<f64>> {
    let volumes = labeled.load_volumes()?;
    train_downstream_volumes(classifier, &volumes, &labeled.labels(), config)
}

/// Probabilities for each volume, evaluated in batches of `batch_size`.
pub fn predict_volumes(classifier: &mut Classifier<f32>, volumes: &[Volume], batch_size: usize) -> Result<Vec<f64>> {
    check_dims(volumes, classifier.config.input_dims)?;
    let mut out = Vec::with_capacity(volumes.len());
    for chunk in volumes.chunks(batch_size.max(1)) {
        let refs: Vec<&Volume> = chunk.iter().collect();
        out.extend(classifier.predict(&batch_tensor(&refs)?)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
