//! Class weighting, composite loss, augmentation and the SGD training loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::netgraph::{self, Model, NetworkSpec, WeightStore};
use crate::tensor::Tensor;
use crate::volume::Image2D;

pub const LOSS_EPS: f64 = 1e-7;
pub const BN_MOMENTUM: f32 = 0.1;
/// Minimum absolute drop in validation loss that counts as progress.
pub const MIN_IMPROVEMENT: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub initial_lr: f64,
    pub lr_step_epochs: usize,
    pub lr_factor: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub val_fraction: f64,
    pub aug_translate_px: usize,
    pub aug_rotate_deg: f64,
    pub aug_scale_range: (f64, f64),
    pub boundary_weight_scale: f64,
    pub seed: u64,
    /// Caps the optimizer steps per epoch; each epoch then draws a fresh random subset.
    pub max_steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            momentum: 0.9,
            weight_decay: 1e-6,
            initial_lr: 0.01,
            lr_step_epochs: 20,
            lr_factor: 0.1,
            max_epochs: 60,
            early_stop_patience: 8,
            val_fraction: 0.15,
            aug_translate_px: 10,
            aug_rotate_deg: 10.0,
            aug_scale_range: (0.9, 1.1),
            boundary_weight_scale: 2.0,
            seed: 0,
            max_steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.max_epochs == 0 || self.lr_step_epochs == 0 || self.early_stop_patience == 0 {
            return bad("batch_size, max_epochs, lr_step_epochs and early_stop_patience must be positive");
        }
        if !(self.initial_lr > 0.0 && self.lr_factor > 0.0) {
            return bad("initial_lr and lr_factor must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay must be non-negative");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        let (lo, hi) = self.aug_scale_range;
        if !(lo > 0.0 && lo <= hi) || self.aug_rotate_deg < 0.0 || self.boundary_weight_scale < 0.0 {
            return bad("augmentation ranges must be non-negative with 0 < scale min <= max");
        }
        if self.max_steps_per_epoch == Some(0) {
            return bad("max_steps_per_epoch must be positive");
        }
        Ok(())
    }

    /// Disables every augmentation.
    pub fn without_augmentation(mut self) -> Self {
        self.aug_translate_px = 0;
        self.aug_rotate_deg = 0.0;
        self.aug_scale_range = (1.0, 1.0);
        self
    }
}

/// `lr(epoch) = initial_lr * lr_factor^floor(epoch / lr_step_epochs)`.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.initial_lr * cfg.lr_factor.powi((epoch / cfg.lr_step_epochs) as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    /// Classes with no voxel in the training data; their weight is 0.
    pub absent: Vec<bool>,
}

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        Self { weights: vec![1.0; num_classes], absent: vec![false; num_classes] }
    }
}

/// `w_c = median(freq over present classes) / freq_c`.
pub fn median_frequency_weights<'a, I>(labels: I, num_classes: usize) -> Result<ClassWeights>
where
    I: IntoIterator<Item = &'a [u8]>,
{
    let mut counts = vec![0u64; num_classes];
    for slice in labels {
        for &l in slice {
            let Some(c) = counts.get_mut(l as usize) else {
                return arg_err(format!("label {l} outside {num_classes} classes"));
            };
            *c += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return arg_err("no labeled voxels");
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let mut present: Vec<f64> = freqs.iter().copied().filter(|&f| f > 0.0).collect();
    present.sort_by(f64::total_cmp);
    let m = present.len();
    let median = if m % 2 == 1 { present[m / 2] } else { 0.5 * (present[m / 2 - 1] + present[m / 2]) };
    let weights = freqs.iter().map(|&f| if f > 0.0 { median / f } else { 0.0 }).collect();
    let absent = counts.iter().map(|&c| c == 0).collect();
    Ok(ClassWeights { weights, absent })
}

/// Ones everywhere plus `scale` where a 4-neighbor holds a different label.
pub fn boundary_weight_map(labels: &Image2D<u8>, scale: f64) -> Image2D<f32> {
    let (h, w) = (labels.rows, labels.cols);
    let mut out = Image2D::filled(h, w, 1.0f32);
    if scale == 0.0 {
        return out;
    }
    for r in 0..h {
        for c in 0..w {
            let v = labels.get(r, c);
            let edge = (r > 0 && labels.get(r - 1, c) != v)
                || (r + 1 < h && labels.get(r + 1, c) != v)
                || (c > 0 && labels.get(r, c - 1) != v)
                || (c + 1 < w && labels.get(r, c + 1) != v);
            if edge {
                out.set(r, c, (1.0 + scale) as f32);
            }
        }
    }
    out
}

/// Class-major probabilities or scores: `values[c * pixels + i]`.
fn check_loss_shapes(values: &[f64], target: &[u8], bw: &[f32], cw: &ClassWeights) -> Result<usize> {
    let p = target.len();
    let k = cw.weights.len();
    if p == 0 || values.len() != k * p || bw.len() != p {
        return dim_err(format!("loss operands disagree: {} values, {p} targets, {} weights, {k} classes", values.len(), bw.len()));
    }
    if let Some(&t) = target.iter().find(|&&t| t as usize >= k) {
        return dim_err(format!("target label {t} outside {k} classes"));
    }
    Ok(p)
}

/// Classes present in the target or as some pixel's argmax.
fn dice_classes(pred: &[f64], target: &[u8], k: usize) -> Vec<bool> {
    let p = target.len();
    let mut used = vec![false; k];
    for &t in target {
        used[t as usize] = true;
    }
    for i in 0..p {
        let mut best = 0;
        for c in 1..k {
            if pred[c * p + i] > pred[best * p + i] {
                best = c;
            }
        }
        used[best] = true;
    }
    used
}

/// Weighted cross-entropy and soft Dice terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub wce: f64,
    pub dice: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.wce + self.dice
    }
}

/// Composite loss of class-major probabilities `pred` against `target`.
pub fn composite_loss(pred: &[f64], target: &[u8], cw: &ClassWeights, bw: &[f32]) -> Result<LossTerms> {
    let p = check_loss_shapes(pred, target, bw, cw)?;
    let k = cw.weights.len();
    let wce = target
        .iter()
        .enumerate()
        .map(|(i, &t)| -cw.weights[t as usize] * bw[i] as f64 * (pred[t as usize * p + i] + LOSS_EPS).ln())
        .sum::<f64>()
        / p as f64;
    let used = dice_classes(pred, target, k);
    let mut acc = 0.0;
    for c in (0..k).filter(|&c| used[c]) {
        let (mut inter, mut pp, mut tt) = (0.0, 0.0, 0.0);
        for i in 0..p {
            let pc = pred[c * p + i];
            let tc = (target[i] as usize == c) as u8 as f64;
            inter += pc * tc;
            pp += pc * pc;
            tt += tc;
        }
        acc += (2.0 * inter + LOSS_EPS) / (pp + tt + LOSS_EPS);
    }
    let n_used = used.iter().filter(|&&u| u).count() as f64;
    Ok(LossTerms { wce, dice: 1.0 - acc / n_used })
}

/// Channel softmax of class-major scores.
pub fn softmax_classes(logits: &[f64], k: usize) -> Vec<f64> {
    let p = logits.len() / k;
    let mut out = vec![0.0; logits.len()];
    for i in 0..p {
        let mx = (0..k).map(|c| logits[c * p + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for c in 0..k {
            let e = (logits[c * p + i] - mx).exp();
            out[c * p + i] = e;
            s += e;
        }
        for c in 0..k {
            out[c * p + i] /= s;
        }
    }
    out
}

/// Composite loss of `softmax(logits)` and its gradient with respect to the logits.
pub fn composite_loss_grad(logits: &[f64], target: &[u8], cw: &ClassWeights, bw: &[f32]) -> Result<(LossTerms, Vec<f64>)> {
    let p = check_loss_shapes(logits, target, bw, cw)?;
    let k = cw.weights.len();
    let pred = softmax_classes(logits, k);
    let terms = composite_loss(&pred, target, cw, bw)?;
    // gradient with respect to the probabilities
    let mut g = vec![0.0; k * p];
    for (i, &t) in target.iter().enumerate() {
        let t = t as usize;
        g[t * p + i] -= cw.weights[t] * bw[i] as f64 / (p as f64 * (pred[t * p + i] + LOSS_EPS));
    }
    let used = dice_classes(&pred, target, k);
    let n_used = used.iter().filter(|&&u| u).count() as f64;
    for c in (0..k).filter(|&c| used[c]) {
        let (mut inter, mut pp, mut tt) = (0.0, 0.0, 0.0);
        for i in 0..p {
            let pc = pred[c * p + i];
            let tc = (target[i] as usize == c) as u8 as f64;
            inter += pc * tc;
            pp += pc * pc;
            tt += tc;
        }
        let num = 2.0 * inter + LOSS_EPS;
        let den = pp + tt + LOSS_EPS;
        for i in 0..p {
            let tc = (target[i] as usize == c) as u8 as f64;
            g[c * p + i] -= (2.0 * tc * den - num * 2.0 * pred[c * p + i]) / (den * den * n_used);
        }
    }
    // back through the softmax
    let mut dz = vec![0.0; k * p];
    for i in 0..p {
        let dot: f64 = (0..k).map(|c| pred[c * p + i] * g[c * p + i]).sum();
        for c in 0..k {
            dz[c * p + i] = pred[c * p + i] * (g[c * p + i] - dot);
        }
    }
    Ok((terms, dz))
}

/// Applies one random translation, rotation and global scaling about the slice centre;
/// bilinear for the image, nearest-neighbor for labels, edges replicated.
pub fn augment_slice(image: &Image2D<f32>, labels: &Image2D<u8>, cfg: &TrainConfig, seed: u64) -> Result<(Image2D<f32>, Image2D<u8>)> {
    if image.rows != labels.rows || image.cols != labels.cols {
        return dim_err("image and labels differ in size");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // whole-pixel shifts keep label edges aligned with image edges
    let t = cfg.aug_translate_px as i64;
    let ty = if t > 0 { rng.random_range(-t..=t) as f64 } else { 0.0 };
    let tx = if t > 0 { rng.random_range(-t..=t) as f64 } else { 0.0 };
    let a = cfg.aug_rotate_deg;
    let angle = if a > 0.0 { rng.random_range(-a..=a).to_radians() } else { 0.0 };
    let (lo, hi) = cfg.aug_scale_range;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    if ty == 0.0 && tx == 0.0 && angle == 0.0 && scale == 1.0 {
        return Ok((image.clone(), labels.clone()));
    }
    let (h, w) = (image.rows, image.cols);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut img = Image2D::filled(h, w, 0.0f32);
    let mut lab = Image2D::filled(h, w, 0u8);
    let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
    for r in 0..h {
        for c in 0..w {
            // inverse map: output -> source
            let (dy, dx) = ((r as f64 - cy - ty) / scale, (c as f64 - cx - tx) / scale);
            let sy = clamp(cos * dy + sin * dx + cy, h);
            let sx = clamp(-sin * dy + cos * dx + cx, w);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            let v = image.get(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + image.get(y0, x1) * (1.0 - fy) * fx
                + image.get(y1, x0) * fy * (1.0 - fx)
                + image.get(y1, x1) * fy * fx;
            img.set(r, c, v);
            lab.set(r, c, labels.get(sy.round() as usize, sx.round() as usize));
        }
    }
    Ok((img, lab))
}

/// Seed of one augmentation draw.
pub fn augmentation_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One training example: input `(1, C, D, H, W)` and labels over `D * H * W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub labels: Vec<u8>,
}

impl Sample {
    /// A single-channel 2D slice.
    pub fn from_slice(image: &Image2D<f32>, labels: &Image2D<u8>) -> Result<Self> {
        if image.rows != labels.rows || image.cols != labels.cols {
            return dim_err("image and labels differ in size");
        }
        let input = Tensor::from_vec([1, 1, 1, image.rows, image.cols], image.data.clone())?;
        Ok(Self { input, labels: labels.data.clone() })
    }

    fn is_slice(&self) -> bool {
        let [_, c, d, ..] = self.input.shape();
        c == 1 && d == 1
    }

    /// Boundary weights computed per in-plane slice.
    fn boundary_weights(&self, scale: f64) -> Vec<f32> {
        let [_, _, d, h, w] = self.input.shape();
        let mut out = Vec::with_capacity(d * h * w);
        for z in 0..d {
            let slice = Image2D { rows: h, cols: w, data: self.labels[z * h * w..(z + 1) * h * w].to_vec() };
            out.extend(boundary_weight_map(&slice, scale).data);
        }
        out
    }

    fn augmented(&self, cfg: &TrainConfig, seed: u64) -> Result<Sample> {
        if !self.is_slice() {
            return Ok(self.clone());
        }
        let [_, _, _, h, w] = self.input.shape();
        let img = Image2D { rows: h, cols: w, data: self.input.data().to_vec() };
        let lab = Image2D { rows: h, cols: w, data: self.labels.clone() };
        let (img, lab) = augment_slice(&img, &lab, cfg, seed)?;
        Sample::from_slice(&img, &lab)
    }
}

/// Seeded split of `n` items into `(train, validation)`. A single item is used for both.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if n < 2 {
        return (idx.clone(), idx);
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

/// Seeded `k`-fold partition of `n` items into `(train, test)` index sets.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 || k > n {
        return arg_err(format!("cannot split {n} items into {k} folds"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..k)
        .map(|f| {
            let mut test: Vec<usize> = idx.iter().enumerate().filter(|(i, _)| i % k == f).map(|(_, &v)| v).collect();
            let mut train: Vec<usize> = idx.iter().enumerate().filter(|(i, _)| i % k != f).map(|(_, &v)| v).collect();
            test.sort_unstable();
            train.sort_unstable();
            (train, test)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_loss,best_val_loss\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{:.8},{:.8},{:.8}", r.epoch, r.lr, r.train_loss, r.val_loss, r.best_val_loss);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Tracks the best validation loss and decides when to stop.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, wait: 0 }
    }

    /// Records an epoch's validation loss. Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        if val_loss < self.best - MIN_IMPROVEMENT || !self.best.is_finite() {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.wait = 0;
            (true, false)
        } else {
            self.wait += 1;
            (false, self.wait >= self.patience)
        }
    }
}

fn batch_input(samples: &[&Sample]) -> Result<Tensor> {
    Tensor::stack(&samples.iter().map(|s| &s.input).collect::<Vec<_>>())
}

/// Mean composite loss over the samples of a batch, and the matching logit gradient.
fn batch_loss_grad(logits: &Tensor, samples: &[Sample], cw: &ClassWeights, bw_scale: f64) -> Result<(f64, Tensor)> {
    let n = samples.len();
    let mut grad = Vec::with_capacity(logits.data().len());
    let mut total = 0.0;
    for (s, sample) in samples.iter().enumerate() {
        let z: Vec<f64> = logits.sample(s).iter().map(|&v| v as f64).collect();
        let bw = sample.boundary_weights(bw_scale);
        let (terms, dz) = composite_loss_grad(&z, &sample.labels, cw, &bw)?;
        total += terms.total();
        grad.extend(dz.iter().map(|&g| (g / n as f64) as f32));
    }
    Ok((total / n as f64, Tensor::from_vec(logits.shape(), grad)?))
}

/// Mean composite loss of inference-mode predictions.
pub fn evaluate_loss(model: &Model, samples: &[&Sample], cw: &ClassWeights, cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(cfg.batch_size) {
        let probs = netgraph::forward(model, batch_input(chunk)?)?;
        for (s, sample) in chunk.iter().enumerate() {
            let p: Vec<f64> = probs.sample(s).iter().map(|&v| v as f64).collect();
            let bw = sample.boundary_weights(cfg.boundary_weight_scale);
            total += composite_loss(&p, &sample.labels, cw, &bw)?.total();
        }
    }
    Ok(total / samples.len() as f64)
}

struct Sgd {
    velocity: std::collections::BTreeMap<String, Vec<Vec<f32>>>,
}

impl Sgd {
    /// `v = momentum * v - lr * (g + decay * w)`, `w += v`; decay applies to convolution kernels only.
    fn step(&mut self, weights: &mut WeightStore, grads: &netgraph::Gradients, lr: f64, momentum: f64, decay: f64) {
        for (name, params) in weights.layers.iter_mut() {
            let Some(g) = grads.get(name) else {
                continue;
            };
            let conv = !params.is_batch_norm();
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| g.iter().map(|a| vec![0.0; a.len()]).collect());
            for (a, (arr, (ga, va))) in params.trainable_mut().into_iter().zip(g.iter().zip(vel.iter_mut())).enumerate() {
                let wd = if conv && a == 0 { decay as f32 } else { 0.0 };
                for ((w, &gv), v) in arr.data.iter_mut().zip(ga).zip(va.iter_mut()) {
                    *v = momentum as f32 * *v - lr as f32 * (gv + wd * *w);
                    *w += *v;
                }
            }
        }
    }
}

/// Trains `spec` from a seeded initialization. Returns the weights of the best validation epoch.
pub fn train_model(spec: &NetworkSpec, data: &[Sample], cfg: &TrainConfig) -> Result<(WeightStore, TrainLog)> {
    let init = WeightStore::init(spec, cfg.seed);
    train_model_from(spec, init, data, cfg)
}

pub fn train_model_from(spec: &NetworkSpec, init: WeightStore, data: &[Sample], cfg: &TrainConfig) -> Result<(WeightStore, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return arg_err("empty training dataset");
    }
    let mut model = Model::new(spec.clone(), init)?;
    let (train_idx, val_idx) = validation_split(data.len(), cfg.val_fraction, cfg.seed);
    let cw = median_frequency_weights(train_idx.iter().map(|&i| data[i].labels.as_slice()), spec.num_classes)?;
    let val: Vec<&Sample> = val_idx.iter().map(|&i| &data[i]).collect();
    let mut sgd = Sgd { velocity: Default::default() };
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best = model.weights.clone();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.max_epochs {
        let lr = learning_rate(cfg, epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(augmentation_seed(cfg.seed, epoch, usize::MAX)));
        if let Some(steps) = cfg.max_steps_per_epoch {
            order.truncate(steps * cfg.batch_size);
        }
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<Sample> = chunk
                .iter()
                .map(|&i| data[i].augmented(cfg, augmentation_seed(cfg.seed, epoch, i)))
                .collect::<Result<_>>()?;
            let tape = netgraph::forward_train(&model, batch_input(&samples.iter().collect::<Vec<_>>())?)?;
            let (loss, d_logits) = batch_loss_grad(tape.logits(spec), &samples, &cw, cfg.boundary_weight_scale)?;
            netgraph::update_running_stats(&mut model, &tape, BN_MOMENTUM);
            let grads = netgraph::backward(&model, tape, d_logits)?;
            sgd.step(&mut model.weights, &grads, lr, cfg.momentum, cfg.weight_decay);
            loss_sum += loss;
            batches += 1;
        }
        let val_loss = evaluate_loss(&model, &val, &cw, cfg)?;
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best = model.weights.clone();
        }
        log.records.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            val_loss,
            best_val_loss: stopper.best,
        });
        if stop {
            log.stopped_early = true;
            break;
        }
    }
    log.best_epoch = stopper.best_epoch;
    Ok((best, log))
}
