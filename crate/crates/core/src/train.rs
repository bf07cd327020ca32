//! Training loop, evaluation pass and checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{coco_thresholds, compute_ap, exact_name_rate, rescale_scores, Detection, Dice, EvalReport, GroundTruth};
use crate::featurizer::ModelConfig;
use crate::model::{Decode, Detector};
use crate::numcore::checkpoint::{read_tensors, write_tensors};
use crate::numcore::{clip_grad_norm, round_state_f32, AdamW, DiffArray, Graph, OptimState};
use crate::objective::{LossBreakdown, LossWeights};
use crate::synthdata::{augment, DetectionSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_norm: f64,
    /// Steps of linear warmup from zero to `lr`.
    pub warmup_steps: usize,
    /// Cosine decay of the rate to zero over `epochs`.
    pub cosine: bool,
    /// Random square symmetries and pixel jitter on training samples.
    pub augment: bool,
    /// Jitter amplitude in `[0, 1]` pixel units.
    pub augment_noise: f64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    /// Desk-scale schedule: small batches, warmup and cosine decay.
    fn default() -> Self {
        let opt = AdamW::default();
        Self {
            epochs: 30,
            batch_size: 1,
            seed: 0,
            lr: 5e-4,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            clip_norm: 0.1,
            warmup_steps: 200,
            cosine: true,
            augment: false,
            augment_noise: 0.03,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    /// Large-scale optimizer settings: batch 16 at a constant 1e-4.
    pub fn large_batch() -> Self {
        let opt = AdamW::default();
        Self {
            batch_size: 16,
            lr: opt.lr,
            clip_norm: 0.0,
            warmup_steps: 0,
            cosine: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optimizer hyperparameters out of range".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    /// Learning rate of the 0-based `step` out of `total` planned steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = if step < self.warmup_steps { (step + 1) as f64 / self.warmup_steps as f64 } else { 1.0 };
        let decay = if self.cosine && total > 0 {
            let t = (step as f64 / total as f64).min(1.0);
            0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            1.0
        };
        self.lr * warm * decay
    }
}

/// Sample order for one epoch; depends only on the seed and epoch number.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn add_parts(acc: &mut LossBreakdown, p: &LossBreakdown, s: f64) {
    acc.total += p.total * s;
    acc.reg += p.reg * s;
    acc.iou += p.iou * s;
    acc.obj += p.obj * s;
    acc.dag += p.dag * s;
    acc.enc += p.enc * s;
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Detector,
    pub cfg: TrainConfig,
    pub state: OptimState,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut model = Detector::new(model_cfg, cfg.seed)?;
        let mut state = OptimState::for_params(&model.store);
        round_state_f32(&mut model.store, &mut state);
        Ok(Self { model, cfg: cfg.clone(), state, epoch: 0 })
    }

    /// One optimizer step on the mean loss of `batch`; returns the mean terms.
    pub fn step(&mut self, batch: &[&DetectionSample]) -> Result<LossBreakdown> {
        let lr = self.cfg.lr;
        self.step_with_lr(batch, lr)
    }

    fn step_with_lr(&mut self, batch: &[&DetectionSample], lr: f64) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        self.model.store.zero_grad();
        let mut mean = LossBreakdown::default();
        for sample in batch {
            let g = Graph::new();
            let (loss, parts, _) = self.model.loss(&g, sample, &self.cfg.loss)?;
            if !parts.total.is_finite() {
                return Err(Error::Data(format!("non-finite loss {parts:?}")));
            }
            g.backward(g.scale(loss, scale))?;
            self.model.store.accumulate_grads(&g);
            add_parts(&mut mean, &parts, scale);
        }
        if self.cfg.clip_norm > 0.0 {
            clip_grad_norm(&mut self.model.store, self.cfg.clip_norm);
        }
        AdamW { lr, ..self.cfg.optimizer() }.step(&mut self.model.store, &mut self.state);
        round_state_f32(&mut self.model.store, &mut self.state);
        Ok(mean)
    }

    /// One pass over `samples`; returns the sample-weighted mean terms.
    pub fn train_epoch(&mut self, samples: &[DetectionSample]) -> Result<LossBreakdown> {
        if samples.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        let order = epoch_order(self.cfg.seed, self.epoch, samples.len());
        let per_epoch = samples.len().div_ceil(self.cfg.batch_size);
        let total = per_epoch * self.cfg.epochs;
        let mut mean = LossBreakdown::default();
        let mut rng = ChaCha8Rng::seed_from_u64(!self.cfg.seed ^ (self.epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
        for (k, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let views: Vec<DetectionSample> = if self.cfg.augment {
                chunk.iter().map(|&i| augment(&samples[i], &mut rng, self.cfg.augment_noise)).collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let batch: Vec<&DetectionSample> =
                if self.cfg.augment { views.iter().collect() } else { chunk.iter().map(|&i| &samples[i]).collect() };
            let lr = self.cfg.lr_at(self.epoch * per_epoch + k, total);
            let parts = self.step_with_lr(&batch, lr)?;
            add_parts(&mut mean, &parts, chunk.len() as f64 / samples.len() as f64);
        }
        self.epoch += 1;
        Ok(mean)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let store = &self.model.store;
        let mut tensors: Vec<(String, DiffArray)> = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for (k, (name, t)) in store.iter().enumerate() {
            let m = self.state.m.get(k).cloned().unwrap_or_else(|| vec![0.0; t.len()]);
            let v = self.state.v.get(k).cloned().unwrap_or_else(|| vec![0.0; t.len()]);
            tensors.push((format!("optim.m.{name}"), DiffArray::new(t.shape(), m)?));
            tensors.push((format!("optim.v.{name}"), DiffArray::new(t.shape(), v)?));
        }
        // counters fit f32 exactly below 2^24
        tensors.push(("optim.step".into(), DiffArray::scalar(self.state.t as f64)));
        tensors.push(("train.epoch".into(), DiffArray::scalar(self.epoch as f64)));
        write_tensors(BufWriter::new(File::create(path)?), &tensors)
    }

    /// Restores parameters, optimizer moments and counters saved by [`Trainer::save`].
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let tensors = read_tensors(BufReader::new(File::open(path)?))?;
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let names: Vec<String> = self.model.store.iter().map(|(n, _)| n.to_string()).collect();
        let mut state = OptimState { m: Vec::new(), v: Vec::new(), t: find("optim.step")?.item() as u64 };
        for name in &names {
            self.model.store.set(name, find(name)?)?;
            state.m.push(find(&format!("optim.m.{name}"))?.into_data());
            state.v.push(find(&format!("optim.v.{name}"))?.into_data());
        }
        let expected = names.len() * 3 + 2;
        if tensors.len() != expected {
            return Err(Error::Checkpoint(format!("{} tensors, expected {expected}", tensors.len())));
        }
        self.state = state;
        self.epoch = find("train.epoch")?.item() as usize;
        Ok(())
    }
}

/// Detections and ground truths of one evaluation pass.
#[derive(Debug, Clone)]
pub struct EvalRun {
    pub detections: Vec<Vec<Detection>>,
    pub ground_truth: Vec<Vec<GroundTruth>>,
    pub report: EvalReport,
    pub exact_name_rate: f64,
}

/// Distinct ground-truth names, in first-seen order.
pub fn categories(samples: &[DetectionSample]) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = Vec::new();
    for name in samples.iter().flat_map(|s| &s.names) {
        if !out.contains(name) {
            out.push(name.clone());
        }
    }
    out
}

/// Runs the detector on every sample and scores it against `categories`.
pub fn evaluate(model: &Detector, samples: &[DetectionSample], categories: &[Vec<u32>], decode: Decode) -> Result<EvalRun> {
    if samples.is_empty() {
        return Err(Error::Data("no evaluation samples".into()));
    }
    let mut detections = Vec::with_capacity(samples.len());
    for s in samples {
        let raw: Vec<Detection> = model.detect(&s.image, decode)?.into_iter().map(|r| r.detection).collect();
        detections.push(rescale_scores(&raw, categories, &Dice));
    }
    let ground_truth: Vec<Vec<GroundTruth>> = samples
        .iter()
        .map(|s| s.boxes.iter().zip(&s.names).map(|(b, n)| GroundTruth { bbox: *b, name: n.clone() }).collect())
        .collect();
    let report = compute_ap(&detections, &ground_truth, &coco_thresholds());
    let exact_name_rate = exact_name_rate(&detections, &ground_truth);
    Ok(EvalRun { detections, ground_truth, report, exact_name_rate })
}
