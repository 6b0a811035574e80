//! Standard and adversarial training at desk scale.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::predict_batch;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{batch_tensor, Classifier, Mode};
use crate::tensor::Tape;
use crate::warp::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvMode {
    None,
    Fgsm,
    Ensemble,
    Pgd,
}

impl AdvMode {
    pub fn name(&self) -> &'static str {
        match self {
            AdvMode::None => "none",
            AdvMode::Fgsm => "fgsm",
            AdvMode::Ensemble => "ensemble",
            AdvMode::Pgd => "pgd",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub adversarial_mode: AdvMode,
    /// L-infinity budget for the adversarial halves, in pixel-range units.
    pub epsilon: f64,
    pub pgd_steps: usize,
    pub pgd_step_size: f64,
    /// Names of the held-fixed source models (ensemble mode); the models
    /// themselves are passed to [`train`].
    pub ensemble_source_models: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            adversarial_mode: AdvMode::None,
            epsilon: 0.3,
            pgd_steps: 7,
            pgd_step_size: 0.1,
            ensemble_source_models: vec![],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub epoch_losses: Vec<f64>,
    pub final_test_accuracy: f64,
    pub wall_ms: f64,
    pub seed: u64,
}

struct OptimizerState {
    momentum: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: usize,
}

impl OptimizerState {
    fn new(g: &Classifier) -> Self {
        let shapes: Vec<usize> = g.weights.iter().map(|(_, t)| t.numel()).collect();
        OptimizerState {
            momentum: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    fn apply(&mut self, kind: OptimizerKind, lr: f64, g: &mut Classifier, grads: &[Vec<f64>]) {
        self.step += 1;
        match kind {
            OptimizerKind::SgdMomentum => {
                for ((m, (_, w)), grad) in self.momentum.iter_mut().zip(g.weights.iter_mut()).zip(grads)
                {
                    for ((mi, wi), &gi) in m.iter_mut().zip(w.data.iter_mut()).zip(grad) {
                        *mi = 0.9 * *mi + gi;
                        *wi -= lr * *mi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
                let t = self.step as f64;
                let c1 = 1.0 - b1.powf(t);
                let c2 = 1.0 - b2.powf(t);
                for (((m, v), (_, w)), grad) in self
                    .momentum
                    .iter_mut()
                    .zip(self.second.iter_mut())
                    .zip(g.weights.iter_mut())
                    .zip(grads)
                {
                    for (((mi, vi), wi), &gi) in
                        m.iter_mut().zip(v.iter_mut()).zip(w.data.iter_mut()).zip(grad)
                    {
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                        *wi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

fn signum(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Batched FGSM against `model` (eval-mode gradients), used to fill the
/// adversarial half of a training batch.
fn fgsm_batch(model: &Classifier, images: &[&Image], labels: &[usize], epsilon: f64) -> Result<Vec<Image>> {
    let mut tape = Tape::new();
    let mut leaf = batch_tensor(images)?;
    leaf.requires_grad = true;
    let xv = tape.leaf(leaf);
    let wvars = model.tape_weights(&mut tape, false);
    let logits = model.forward(&mut tape, xv, &wvars, Mode::Eval, None)?;
    let loss = tape.cross_entropy(logits, labels)?;
    tape.backward(loss)?;
    let grads = tape.grad(xv).expect("input gradient populated");
    let per = images[0].data.len();
    let (lo, hi) = model.pixel_range;
    Ok(images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut adv = (*img).clone();
            for (v, g) in adv.data.iter_mut().zip(&grads[i * per..(i + 1) * per]) {
                *v = (*v + epsilon * signum(*g)).clamp(lo, hi);
            }
            adv
        })
        .collect())
}

fn pgd_batch(
    model: &Classifier,
    images: &[&Image],
    labels: &[usize],
    epsilon: f64,
    steps: usize,
    step_size: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Image>> {
    let (lo, hi) = model.pixel_range;
    let mut current: Vec<Image> = images
        .iter()
        .map(|img| {
            let mut start = (*img).clone();
            for v in start.data.iter_mut() {
                *v = (*v + rng.random_range(-epsilon..=epsilon)).clamp(lo, hi);
            }
            start
        })
        .collect();
    let per = images[0].data.len();
    for _ in 0..steps {
        let refs: Vec<&Image> = current.iter().collect();
        let mut tape = Tape::new();
        let mut leaf = batch_tensor(&refs)?;
        leaf.requires_grad = true;
        let xv = tape.leaf(leaf);
        let wvars = model.tape_weights(&mut tape, false);
        let logits = model.forward(&mut tape, xv, &wvars, Mode::Eval, None)?;
        let loss = tape.cross_entropy(logits, labels)?;
        tape.backward(loss)?;
        let grads = tape.grad(xv).expect("input gradient populated").to_vec();
        for (i, img) in current.iter_mut().enumerate() {
            for ((v, g), &orig) in img
                .data
                .iter_mut()
                .zip(&grads[i * per..(i + 1) * per])
                .zip(&images[i].data)
            {
                let stepped = *v + step_size * signum(*g);
                *v = stepped.clamp(orig - epsilon, orig + epsilon).clamp(lo, hi);
            }
        }
    }
    Ok(current)
}

/// Minibatch training with optional adversarial augmentation: under any
/// adversarial mode the back half of every batch is replaced by adversarial
/// versions of its samples (FGSM/PGD against the current weights, or FGSM
/// against held-fixed source models round-robin for ensemble mode).
/// Deterministic for a given seed and config.
pub fn train(
    g: &mut Classifier,
    train_data: &Dataset,
    test_data: &Dataset,
    cfg: &TrainConfig,
    sources: &[Classifier],
) -> Result<TrainReport> {
    let start = Instant::now();
    if train_data.is_empty() {
        return Err(Error::InvalidArgument("empty training dataset".into()));
    }
    if cfg.adversarial_mode == AdvMode::Ensemble && sources.is_empty() {
        return Err(Error::InvalidArgument(
            "ensemble adversarial training needs at least one source model".into(),
        ));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let (h, w, c) = g.input;
    for img in &train_data.images {
        if (img.height, img.width, img.channels) != (h, w, c) {
            return Err(Error::ShapeMismatch {
                op: "train",
                left: vec![img.height, img.width, img.channels],
                right: vec![h, w, c],
            });
        }
    }

    let mut rng = crate::rng(cfg.seed);
    let mut opt = OptimizerState::new(g);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut batch_counter = 0usize;

    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = batch_idx.iter().map(|&i| train_data.labels[i]).collect();
            let mut images: Vec<Image> = batch_idx
                .iter()
                .map(|&i| train_data.images[i].clone())
                .collect();

            // adversarial half: the back half of the batch, regenerated
            // against the adversary for this mode
            let adv_count = match cfg.adversarial_mode {
                AdvMode::None => 0,
                _ => images.len() / 2,
            };
            if adv_count > 0 {
                let split = images.len() - adv_count;
                let refs: Vec<&Image> = images[split..].iter().collect();
                let adv_labels = &labels[split..];
                let adv_images = match cfg.adversarial_mode {
                    AdvMode::Fgsm => fgsm_batch(g, &refs, adv_labels, cfg.epsilon)?,
                    AdvMode::Ensemble => {
                        let source = &sources[batch_counter % sources.len()];
                        fgsm_batch(source, &refs, adv_labels, cfg.epsilon)?
                    }
                    AdvMode::Pgd => pgd_batch(
                        g,
                        &refs,
                        adv_labels,
                        cfg.epsilon,
                        cfg.pgd_steps,
                        cfg.pgd_step_size,
                        &mut rng,
                    )?,
                    AdvMode::None => unreachable!(),
                };
                for (slot, adv) in images[split..].iter_mut().zip(adv_images) {
                    *slot = adv;
                }
            }

            let refs: Vec<&Image> = images.iter().collect();
            let mut tape = Tape::new();
            let xv = tape.leaf(batch_tensor(&refs)?);
            let wvars = g.tape_weights(&mut tape, true);
            let logits = g.forward(&mut tape, xv, &wvars, Mode::Train, Some(&mut rng))?;
            let loss = tape.cross_entropy(logits, &labels)?;
            epoch_loss += tape.scalar_value(loss);
            batches += 1;
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = wvars
                .iter()
                .map(|&v| tape.grad(v).expect("weight gradient populated").to_vec())
                .collect();
            drop(tape);
            opt.apply(cfg.optimizer, cfg.learning_rate, g, &grads);
            batch_counter += 1;
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }

    let final_test_accuracy = evaluate_accuracy(g, test_data)?;
    Ok(TrainReport {
        epochs: cfg.epochs,
        epoch_losses,
        final_test_accuracy,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        seed: cfg.seed,
    })
}

/// Eval-mode accuracy over a dataset.
pub fn evaluate_accuracy(g: &Classifier, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation dataset".into()));
    }
    let refs: Vec<&Image> = data.images.iter().collect();
    let preds = predict_batch(g, &refs)?;
    let correct = preds
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / data.len() as f64)
}
