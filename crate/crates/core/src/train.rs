//! Optimization pieces: dataset splitting, Adam, gradient clipping, and the
//! batch update shared by the sequential and parallel training loops.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{update_running_stats, NORM_MOMENTUM};
use crate::error::{invalid, Error, Result};
use crate::image::GrayImage;
use crate::math;
use crate::model::{Model, SampleGradients};
use crate::params::{ParamId, ParamStore};
use crate::text::TokenizedReport;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub lr_pretrain: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Classifier pretraining epochs run before caption training; 0 disables.
    pub pretrain_epochs: usize,
    pub seed: u64,
    pub split: (f64, f64, f64),
    pub adam: AdamHyper,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub min_count: usize,
    /// Decoder step cap for generation during evaluation.
    pub max_len: usize,
    pub beam_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_encoder: 1e-4,
            lr_decoder: 5e-4,
            lr_pretrain: 1e-3,
            batch_size: 8,
            epochs: 10,
            pretrain_epochs: 0,
            seed: 0,
            split: (0.8, 0.1, 0.1),
            adam: AdamHyper::default(),
            clip_norm: Some(5.0),
            min_count: crate::text::DEFAULT_MIN_COUNT,
            max_len: 40,
            beam_width: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.split;
        if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(invalid("split ratios must be non-negative and sum to 1"));
        }
        if !(self.lr_encoder > 0.0 && self.lr_decoder > 0.0 && self.lr_pretrain > 0.0) {
            return Err(invalid("learning rates must be positive"));
        }
        if self.batch_size == 0 || self.max_len == 0 || self.beam_width == 0 {
            return Err(invalid("batch_size, max_len and beam_width must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then contiguous `[val | test | train]` cuts. Validation and
/// test sizes are floored; the remainder goes to training.
pub fn split_dataset(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<SplitIndices> {
    if n == 0 {
        return Err(Error::Empty("dataset"));
    }
    let (a, b, c) = ratios;
    if ((a + b + c) - 1.0).abs() > 1e-9 || a < 0.0 || b < 0.0 || c < 0.0 {
        return Err(invalid("split ratios must be non-negative and sum to 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, &mut ChaCha8Rng::seed_from_u64(seed));
    let cut = |r: f64| math::floor(n as f64 * r + 1e-9) as usize;
    let (nv, nt) = (cut(b), cut(c));
    let val = order[..nv].to_vec();
    let test = order[nv..nv + nt].to_vec();
    let mut train = order[nv + nt..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    let mut test = test;
    test.sort_unstable();
    Ok(SplitIndices { train, val, test })
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Sample visiting order for one epoch; a function of `(seed, epoch)` only.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1)));
    shuffle(&mut order, &mut rng);
    order
}

/// One bias-corrected Adam update of a single tensor at step `t >= 1`.
///
/// A non-finite gradient rejects the update and leaves all buffers untouched.
pub fn adam_step(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: u64, hyper: AdamHyper) -> Result<()> {
    if t == 0 {
        return Err(invalid("adam step counter starts at 1"));
    }
    let n = param.len();
    if grad.len() != n || m.len() != n || v.len() != n {
        return Err(Error::LengthMismatch {
            what: "adam buffers",
            expected: n,
            actual: grad.len(),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { op: "adam gradient" });
    }
    let AdamHyper { beta1, beta2, eps } = hyper;
    let bc1 = 1.0 - libm::pow(beta1, t as f64);
    let bc2 = 1.0 - libm::pow(beta2, t as f64);
    for i in 0..n {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= lr * mhat / (math::sqrt(vhat) + eps);
    }
    Ok(())
}

/// Adam over a fixed set of tensors with one learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub hyper: AdamHyper,
    pub t: u64,
    pub ids: Vec<ParamId>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, lr: f64, hyper: AdamHyper) -> Self {
        let m: Vec<Vec<f64>> = ids.iter().map(|id| vec![0.0; store.get(*id).numel()]).collect();
        Self {
            lr,
            hyper,
            t: 0,
            v: m.clone(),
            m,
            ids,
        }
    }

    /// Applies `grads` (indexed by [`ParamId`]). Tensors without a gradient are
    /// skipped; tensors with a non-finite gradient are rejected and returned.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Vec<ParamId> {
        self.t += 1;
        let mut rejected = Vec::new();
        for (k, id) in self.ids.iter().enumerate() {
            let Some(g) = grads.get(id.0).and_then(|g| g.as_ref()) else {
                continue;
            };
            let param = store.get_mut(*id).data_mut();
            if adam_step(param, g, &mut self.m[k], &mut self.v[k], self.lr, self.t, self.hyper).is_err() {
                rejected.push(*id);
            }
        }
        rejected
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flatten().flat_map(|g| g.iter()).map(|v| v * v).sum();
    let norm = math::sqrt(sq);
    if norm.is_finite() && norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|v| *v *= f));
    }
    norm
}

/// Sums per-sample gradients in the given order and divides by the count.
pub fn average_gradients(samples: &[SampleGradients], n_params: usize) -> Vec<Option<Vec<f64>>> {
    let mut acc: Vec<Option<Vec<f64>>> = vec![None; n_params];
    for s in samples {
        for (dst, g) in acc.iter_mut().zip(&s.grads) {
            if let Some(g) = g {
                let d = dst.get_or_insert_with(|| vec![0.0; g.len()]);
                d.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }
    let inv = 1.0 / samples.len().max(1) as f64;
    acc.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|v| *v *= inv));
    acc
}

/// Index of the smallest value; ties resolve to the earliest.
pub fn select_best_epoch(val_losses: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &l) in val_losses.iter().enumerate() {
        if best.is_none_or(|b| l < val_losses[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchReport {
    pub mean_loss: f64,
    pub grad_norm: f64,
    pub rejected: Vec<ParamId>,
    pub clamp_hits: usize,
}

/// Model plus optimizer state for caption training. Encoder and decoder
/// each have their own Adam instance and learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub encoder_opt: Adam,
    pub decoder_opt: Adam,
    /// Caption epochs completed so far.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let frozen = model.config.encoder.frozen_blocks;
        let (enc, dec) = model.caption_param_groups(frozen);
        let encoder_opt = Adam::new(&model.store, enc, config.lr_encoder, config.adam);
        let decoder_opt = Adam::new(&model.store, dec, config.lr_decoder, config.adam);
        Ok(Self {
            model,
            config,
            encoder_opt,
            decoder_opt,
            epoch: 0,
        })
    }

    pub fn frozen_blocks(&self) -> usize {
        self.model.config.encoder.frozen_blocks
    }

    pub fn sample_gradients(&self, img: &GrayImage, truth: &TokenizedReport) -> Result<SampleGradients> {
        self.model.caption_gradients(img, truth, self.frozen_blocks())
    }

    /// Averages, clips, steps both optimizers, then folds in normalization statistics in sample order.
    pub fn apply_batch(&mut self, samples: &[SampleGradients]) -> BatchReport {
        let mut grads = average_gradients(samples, self.model.store.len());
        let grad_norm = match self.config.clip_norm {
            Some(c) => clip_global_norm(&mut grads, c),
            None => clip_global_norm(&mut grads, f64::INFINITY),
        };
        let mut rejected = self.encoder_opt.step(&mut self.model.store, &grads);
        rejected.extend(self.decoder_opt.step(&mut self.model.store, &grads));
        for s in samples {
            update_running_stats(&mut self.model.store, &s.norm_stats, NORM_MOMENTUM);
        }
        BatchReport {
            mean_loss: samples.iter().map(|s| s.loss).sum::<f64>() / samples.len().max(1) as f64,
            grad_norm,
            rejected,
            clamp_hits: samples.iter().map(|s| s.clamp_hits).sum(),
        }
    }

    /// Single-threaded caption epoch; returns the mean per-sample training loss.
    pub fn train_epoch(&mut self, data: &[(GrayImage, TokenizedReport)]) -> Result<f64> {
        let order = epoch_order(data.len(), self.config.seed, self.epoch);
        let mut total = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let samples = batch
                .iter()
                .map(|&i| self.sample_gradients(&data[i].0, &data[i].1))
                .collect::<Result<Vec<_>>>()?;
            total += samples.iter().map(|s| s.loss).sum::<f64>();
            self.apply_batch(&samples);
        }
        self.epoch += 1;
        Ok(total / data.len().max(1) as f64)
    }
}

/// Optimizer for the classifier pretraining phase (whole encoder plus head).
#[derive(Debug, Clone, PartialEq)]
pub struct Pretrainer {
    pub opt: Adam,
    pub clip_norm: Option<f64>,
}

impl Pretrainer {
    pub fn new(model: &Model, config: &TrainConfig) -> Self {
        Self {
            opt: Adam::new(&model.store, model.pretrain_params(), config.lr_pretrain, config.adam),
            clip_norm: config.clip_norm,
        }
    }

    pub fn apply_batch(&mut self, model: &mut Model, samples: &[SampleGradients]) -> BatchReport {
        let mut grads = average_gradients(samples, model.store.len());
        let grad_norm = clip_global_norm(&mut grads, self.clip_norm.unwrap_or(f64::INFINITY));
        let rejected = self.opt.step(&mut model.store, &grads);
        for s in samples {
            update_running_stats(&mut model.store, &s.norm_stats, NORM_MOMENTUM);
        }
        BatchReport {
            mean_loss: samples.iter().map(|s| s.loss).sum::<f64>() / samples.len().max(1) as f64,
            grad_norm,
            rejected,
            clamp_hits: 0,
        }
    }

    /// Single-threaded pretraining epoch over `(image, finding indicator)` pairs.
    pub fn train_epoch(&mut self, model: &mut Model, data: &[(GrayImage, Vec<f64>)], seed: u64, epoch: usize, batch_size: usize) -> Result<f64> {
        let order = epoch_order(data.len(), seed ^ 0x5eed, epoch);
        let mut total = 0.0;
        for batch in order.chunks(batch_size.max(1)) {
            let samples = batch
                .iter()
                .map(|&i| model.pretrain_gradients(&data[i].0, &data[i].1))
                .collect::<Result<Vec<_>>>()?;
            total += samples.iter().map(|s| s.loss).sum::<f64>();
            self.apply_batch(model, &samples);
        }
        Ok(total / data.len().max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_partition() {
        let s = split_dataset(10, (0.8, 0.1, 0.1), 4).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s, split_dataset(10, (0.8, 0.1, 0.1), 4).unwrap());
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split_dataset(0, (0.8, 0.1, 0.1), 4).is_err());
        assert!(split_dataset(5, (0.8, 0.3, 0.1), 4).is_err());
    }

    #[test]
    fn zero_gradient_leaves_param_and_decays_moments() {
        let mut p = [1.5];
        let mut m = [0.2];
        let mut v = [0.04];
        adam_step(&mut p, &[0.0], &mut m, &mut v, 0.1, 1, AdamHyper::default()).unwrap();
        // m/(1-β1) and sqrt(v/(1-β2)) are both nonzero, so the parameter still
        // moves by momentum; what must hold is the moment decay.
        assert!((m[0] - 0.18).abs() < 1e-15);
        assert!((v[0] - 0.04 * 0.999).abs() < 1e-15);

        let mut p = [1.5];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_step(&mut p, &[0.0], &mut m, &mut v, 0.1, 1, AdamHyper::default()).unwrap();
        assert_eq!(p, [1.5]);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut p = [0.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        let lr = 0.01;
        let mut last = 0.0;
        for t in 1..=2000 {
            let before = p[0];
            adam_step(&mut p, &[-3.0], &mut m, &mut v, lr, t, AdamHyper::default()).unwrap();
            last = p[0] - before;
        }
        assert!((last - lr).abs() < 1e-6 * lr + 1e-9);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = [1.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        assert!(adam_step(&mut p, &[f64::NAN], &mut m, &mut v, 0.1, 1, AdamHyper::default()).is_err());
        assert_eq!((p, m, v), ([1.0], [0.0], [0.0]));
    }

    #[test]
    fn best_epoch_ties_go_early() {
        assert_eq!(select_best_epoch(&[3.0, 1.0, 2.0, 1.0]), Some(1));
        assert_eq!(select_best_epoch(&[]), None);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Some(vec![3.0, 4.0]), None, Some(vec![0.0])];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let g0 = g[0].as_ref().unwrap();
        assert!((g0[0] - 0.6).abs() < 1e-15 && (g0[1] - 0.8).abs() < 1e-15);
    }
}
