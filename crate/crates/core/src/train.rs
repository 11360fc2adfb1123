//! SGD training and classification evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    backward, classify_head, classify_head_backward, forward, forward_trace, is_learnable, ExecOptions,
    ModelGraph, Weights,
};
use crate::ops::{resize_bilinear, resize_shorter_side, softmax_over_channels, Mode};
use crate::rng::{SeedStream, StreamRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentFlags {
    pub random_crop: bool,
    pub hflip: bool,
    pub color_jitter: bool,
}

impl AugmentFlags {
    pub const ALL: AugmentFlags = AugmentFlags {
        random_crop: true,
        hflip: true,
        color_jitter: true,
    };
    pub const NONE: AugmentFlags = AugmentFlags {
        random_crop: false,
        hflip: false,
        color_jitter: false,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epochs per tenfold learning-rate decay.
    pub lr_step: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentFlags,
    /// Training crop extent; 0 keeps the full image.
    pub crop: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            lr_step: 10,
            batch_size: 32,
            seed: 0,
            augment: AugmentFlags::ALL,
            crop: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be finite and >= 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.lr_step == 0 || self.batch_size == 0 {
            return bad("lr_step and batch_size must be >= 1".into());
        }
        Ok(())
    }

    /// `key = value` lines; `#` starts a comment. Unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| Error::format("train.cfg", format!("line {}: {m}", i + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`"))?;
            let (k, v) = (k.trim(), v.trim());
            fn num<T: FromStr>(v: &str, e: Error) -> Result<T> {
                v.parse().map_err(|_| e)
            }
            let bad = || err(&format!("invalid value `{v}` for `{k}`"));
            match k {
                "lr0" => cfg.lr0 = num(v, bad())?,
                "momentum" => cfg.momentum = num(v, bad())?,
                "weight_decay" => cfg.weight_decay = num(v, bad())?,
                "epochs" => cfg.epochs = num(v, bad())?,
                "lr_step" => cfg.lr_step = num(v, bad())?,
                "batch_size" => cfg.batch_size = num(v, bad())?,
                "seed" => cfg.seed = num(v, bad())?,
                "crop" => cfg.crop = num(v, bad())?,
                "random_crop" => cfg.augment.random_crop = parse_flag(v).ok_or_else(bad)?,
                "hflip" => cfg.augment.hflip = parse_flag(v).ok_or_else(bad)?,
                "color_jitter" => cfg.augment.color_jitter = parse_flag(v).ok_or_else(bad)?,
                other => return Err(err(&format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_cfg_string(&self) -> String {
        let mut s = String::new();
        let a = &self.augment;
        let _ = writeln!(s, "lr0 = {}", self.lr0);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "lr_step = {}", self.lr_step);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "crop = {}", self.crop);
        let _ = writeln!(s, "random_crop = {}", a.random_crop);
        let _ = writeln!(s, "hflip = {}", a.hflip);
        let _ = writeln!(s, "color_jitter = {}", a.color_jitter);
        s
    }
}

fn parse_flag(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Some(true),
        "0" | "false" | "no" | "off" => Some(false),
        _ => None,
    }
}

/// `lr0 · 10^-floor(epoch / lr_step)`.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * 10f64.powi(-((epoch / cfg.lr_step.max(1)) as i32))
}

/// Momentum buffers keyed like the weights they follow.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub velocity: Weights,
}

/// `v ← m·v + g + wd·w; w ← w − lr·v` for every parameter that has a gradient.
pub fn sgd_step(
    weights: &mut Weights,
    grads: &Weights,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads {
        let w = weights.get(name).ok_or_else(|| Error::WeightRecord {
            name: name.clone(),
            reason: "gradient for unknown parameter".into(),
        })?;
        if w.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                expected: w.shape().to_string(),
                actual: g.shape().to_string(),
            });
        }
        if let Some(v) = state.velocity.get(name) {
            if v.shape() != w.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step velocity",
                    expected: w.shape().to_string(),
                    actual: v.shape().to_string(),
                });
            }
        }
    }
    let (lr, m, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    for (name, g) in grads {
        let w = weights.get_mut(name).expect("checked above");
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(w.shape()));
        for ((wv, vv), &gv) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = m * *vv + gv + wd * *wv;
            *wv -= lr * *vv;
        }
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under the softmax of `logits`
/// `(n, C, 1, 1)`, and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 || labels.len() != s.n {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            expected: format!("({}, C, 1, 1) logits", labels.len()),
            actual: s.to_string(),
        });
    }
    let mut pixel_labels = Vec::with_capacity(labels.len());
    for &l in labels {
        if l >= s.c {
            return Err(Error::InvalidArgument(format!("label {l} >= {} classes", s.c)));
        }
        pixel_labels.push(l as u32);
    }
    pixel_cross_entropy(logits, &pixel_labels, None)
}

/// Per-pixel cross-entropy averaged over every pixel whose label differs
/// from `ignore`. When nothing is scored the loss and gradient are zero.
pub fn pixel_cross_entropy(logits: &Tensor, labels: &[u32], ignore: Option<u32>) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    let plane = s.plane();
    if labels.len() != s.n * plane {
        return Err(Error::ShapeMismatch {
            op: "pixel_cross_entropy labels",
            expected: (s.n * plane).to_string(),
            actual: labels.len().to_string(),
        });
    }
    let x = logits.cast::<f64>();
    let probs = softmax_over_channels(&x);
    let scored = labels.iter().filter(|&&l| Some(l) != ignore).count();
    let mut grad = vec![0.0f32; s.numel()];
    if scored == 0 {
        return Ok((0.0, Tensor::from_vec(s, grad)?));
    }
    let inv = 1.0 / scored as f64;
    let mut loss = 0.0;
    let p = probs.data();
    for n in 0..s.n {
        for px in 0..plane {
            let l = labels[n * plane + px];
            if Some(l) == ignore {
                continue;
            }
            let l = l as usize;
            if l >= s.c {
                return Err(Error::InvalidArgument(format!("label {l} >= {} classes", s.c)));
            }
            let base = n * s.c * plane + px;
            // log-sum-exp form keeps huge margins finite and lets NaN through
            let z = |c: usize| x.data()[base + c * plane];
            let max = (0..s.c).map(z).fold(f64::NEG_INFINITY, |a, b| if b > a || b.is_nan() { b } else { a });
            let lse = max + (0..s.c).map(|c| (z(c) - max).exp()).sum::<f64>().ln();
            loss += lse - z(l);
            for c in 0..s.c {
                let i = base + c * plane;
                let target = if c == l { 1.0 } else { 0.0 };
                grad[i] = ((p[i] - target) * inv) as f32;
            }
        }
    }
    Ok((loss * inv, Tensor::from_vec(s, grad)?))
}

/// Random resized crop (area 50–100%, aspect 3/4–4/3) back to the input
/// extent, horizontal flip and per-channel brightness ±10%, each as enabled.
pub fn augment(image: &Tensor, flags: AugmentFlags, rng: &mut StreamRng) -> Result<Tensor> {
    let s = image.shape();
    let mut out = image.clone();
    if flags.random_crop {
        let area = (s.h * s.w) as f64;
        let mut window = (s.h, s.w, 0, 0);
        for _ in 0..10 {
            let target = area * rng.random_range(0.5..=1.0);
            let aspect = rng.random_range((0.75f64).ln()..=(4.0f64 / 3.0).ln()).exp();
            let w = (target * aspect).sqrt().round() as usize;
            let h = (target / aspect).sqrt().round() as usize;
            if (1..=s.w).contains(&w) && (1..=s.h).contains(&h) {
                let top = rng.random_range(0..=s.h - h);
                let left = rng.random_range(0..=s.w - w);
                window = (h, w, top, left);
                break;
            }
        }
        let (h, w, top, left) = window;
        out = resize_bilinear(&out.crop(top, left, h, w)?, s.h, s.w)?;
    }
    if flags.hflip && rng.random_bool(0.5) {
        out = out.flip_horizontal();
    }
    if flags.color_jitter {
        let factors: Vec<f32> = (0..s.c).map(|_| rng.random_range(0.9..=1.1)).collect();
        let plane = s.plane();
        for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
            let f = factors[i % s.c];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
    }
    Ok(out)
}

/// `(top, left)` of the center and four corner crops, in that order.
pub fn ten_crop_offsets(h: usize, w: usize, crop: usize) -> Result<[(usize, usize); 5]> {
    if crop == 0 || crop > h || crop > w {
        return Err(Error::InvalidArgument(format!("crop {crop} does not fit a {h}x{w} image")));
    }
    let (dh, dw) = (h - crop, w - crop);
    Ok([(dh / 2, dw / 2), (0, 0), (0, dw), (dh, 0), (dh, dw)])
}

/// Center, top-left, top-right, bottom-left, bottom-right crops followed by
/// the horizontal flip of each.
pub fn ten_crop(image: &Tensor, crop: usize) -> Result<Vec<Tensor>> {
    let s = image.shape();
    let crops = ten_crop_offsets(s.h, s.w, crop)?
        .iter()
        .map(|&(t, l)| image.crop(t, l, crop, crop))
        .collect::<Result<Vec<_>>>()?;
    let flips: Vec<Tensor> = crops.iter().map(|c| c.flip_horizontal()).collect();
    Ok(crops.into_iter().chain(flips).collect())
}

/// Shorter side used before cropping: `crop · 256/224`, rounded.
pub fn resize_extent_for(crop: usize) -> usize {
    (crop as f64 * 256.0 / 224.0).round() as usize
}

/// Shorter-side resize then center crop.
pub fn one_crop(image: &Tensor, crop: usize) -> Result<Tensor> {
    let r = resize_shorter_side(image, resize_extent_for(crop))?;
    let s = r.shape();
    let [(t, l), ..] = ten_crop_offsets(s.h, s.w, crop)?;
    r.crop(t, l, crop, crop)
}

fn mean_probs(model: &ModelGraph, batch: &Tensor) -> Result<Vec<f64>> {
    let logits = forward(model, batch, Mode::Eval, &[])?.logits;
    let probs = softmax_over_channels(&logits.cast::<f64>());
    let s = probs.shape();
    let mut avg = vec![0.0; s.c];
    for n in 0..s.n {
        for (c, a) in avg.iter_mut().enumerate() {
            *a += probs.get(n, c, 0, 0) / s.n as f64;
        }
    }
    Ok(avg)
}

/// Class probabilities averaged over the ten crops of the resized image.
pub fn ten_crop_scores(model: &ModelGraph, image: &Tensor, crop: usize) -> Result<Vec<f64>> {
    let r = resize_shorter_side(image, resize_extent_for(crop))?;
    mean_probs(model, &Tensor::stack(&ten_crop(&r, crop)?)?)
}

/// Indices of the `k` largest scores, best first; ties favour the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k.max(1));
    idx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    #[serde(rename = "1crop")]
    OneCrop,
    #[serde(rename = "10crop")]
    TenCrop,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1crop" | "1-crop" => Ok(Protocol::OneCrop),
            "10crop" | "10-crop" => Ok(Protocol::TenCrop),
            other => Err(Error::InvalidArgument(format!("unknown protocol `{other}` (1crop|10crop)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub n: usize,
}

/// Top-1 and top-5 error of per-image class scores.
pub fn score_topk(scores: &[Vec<f64>], labels: &[usize]) -> EvalReport {
    let n = labels.len();
    let (mut miss1, mut miss5) = (0usize, 0usize);
    for (s, &l) in scores.iter().zip(labels) {
        let ranked = top_k(s, 5);
        miss1 += usize::from(ranked[0] != l);
        miss5 += usize::from(!ranked.contains(&l));
    }
    let d = n.max(1) as f64;
    EvalReport {
        top1: miss1 as f64 / d,
        top5: miss5 as f64 / d,
        n,
    }
}

const EVAL_BATCH: usize = 32;

/// Classification error with frozen normalization statistics.
pub fn evaluate(model: &ModelGraph, images: &[Tensor], labels: &[usize], protocol: Protocol, crop: usize) -> Result<EvalReport> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::InvalidArgument("evaluation needs one label per image".into()));
    }
    let mut scores = Vec::with_capacity(images.len());
    match protocol {
        Protocol::TenCrop => {
            for img in images {
                scores.push(ten_crop_scores(model, img, crop)?);
            }
        }
        Protocol::OneCrop => {
            for chunk in images.chunks(EVAL_BATCH) {
                let crops = chunk.iter().map(|i| one_crop(i, crop)).collect::<Result<Vec<_>>>()?;
                let logits = forward(model, &Tensor::stack(&crops)?, Mode::Eval, &[])?.logits;
                let s = logits.shape();
                for n in 0..s.n {
                    scores.push((0..s.c).map(|c| logits.get(n, c, 0, 0) as f64).collect());
                }
            }
        }
    }
    Ok(score_topk(&scores, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

/// A labelled image set held in memory.
#[derive(Clone, Debug, Default)]
pub struct ClassifySet {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl ClassifySet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Folds train-mode running statistics back into the weights.
pub(crate) fn apply_stats(weights: &mut Weights, stats: Weights) {
    for (k, v) in stats {
        weights.insert(k, v);
    }
}

pub(crate) fn check_finite(epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, loss })
    }
}

pub(crate) fn write_log(log: &mut Option<&mut dyn Write>, m: &EpochMetrics) -> Result<()> {
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{}", serde_json::to_string(m).expect("metrics serialize"))?;
    }
    Ok(())
}

/// Mini-batch SGD with the step schedule. Each epoch is logged with the
/// mean training loss and 1-crop error on `eval` (or the training images).
pub fn train(
    model: &ModelGraph,
    data: &ClassifySet,
    eval: Option<&ClassifySet>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(ModelGraph, Vec<EpochMetrics>)> {
    cfg.validate()?;
    if data.is_empty() || data.images.len() != data.labels.len() {
        return Err(Error::InvalidArgument("training set needs one label per image".into()));
    }
    let eval = eval.unwrap_or(data);
    let eval_crop = eval.images[0].shape().h.min(eval.images[0].shape().w);
    let mut model = model.clone();
    let mut state = OptimizerState::default();
    let seeds = SeedStream::new(cfg.seed);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg, epoch);
        let epoch_seeds = seeds.child_indexed("epoch", epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut epoch_seeds.rng("shuffle"));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut items = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut rng = epoch_seeds.child_indexed("augment", i as u64).rng("image");
                let img = augment(&data.images[i], cfg.augment, &mut rng)?;
                items.push(if cfg.crop > 0 { random_crop(&img, cfg.crop, &mut rng)? } else { img });
            }
            let x = Tensor::stack(&items)?;
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let loss = step(&mut model, &mut state, &x, &labels, lr, cfg)?;
            check_finite(epoch, loss)?;
            total += loss * batch.len() as f64;
        }
        let report = evaluate(&model, &eval.images, &eval.labels, Protocol::OneCrop, eval_crop)?;
        let m = EpochMetrics {
            epoch,
            lr,
            loss: total / data.len() as f64,
            top1: report.top1,
            top5: report.top5,
        };
        write_log(&mut log, &m)?;
        metrics.push(m);
    }
    Ok((model, metrics))
}

pub(crate) fn random_crop(image: &Tensor, crop: usize, rng: &mut StreamRng) -> Result<Tensor> {
    let s = image.shape();
    if crop > s.h || crop > s.w {
        return Err(Error::InvalidArgument(format!("crop {crop} does not fit {}x{}", s.h, s.w)));
    }
    let top = rng.random_range(0..=s.h - crop);
    let left = rng.random_range(0..=s.w - crop);
    image.crop(top, left, crop, crop)
}

/// One forward/backward/update on a batch; returns the batch loss.
fn step(
    model: &mut ModelGraph,
    state: &mut OptimizerState,
    x: &Tensor,
    labels: &[usize],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let trace = forward_trace(model, x, &ExecOptions::train(), &[])?;
    let logits = classify_head(model, &trace.features)?;
    let (loss, grad_logits) = cross_entropy(&logits, labels)?;
    let (grad_features, mut grads) = classify_head_backward(model, &trace.features, &grad_logits)?;
    let g = backward(model, &trace, &grad_features)?;
    grads.extend(g.params);
    debug_assert!(grads.keys().all(|k| is_learnable(k)));
    sgd_step(&mut model.weights, &grads, state, lr, cfg.momentum, cfg.weight_decay)?;
    apply_stats(&mut model.weights, trace.running_stats);
    Ok(loss)
}

/// Learnable parameters only, for comparisons that ignore running statistics.
pub fn learnable(weights: &Weights) -> BTreeMap<&str, &Tensor> {
    weights
        .iter()
        .filter(|(k, _)| is_learnable(k))
        .map(|(k, v)| (k.as_str(), v))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use crate::model::{build_drn_c, WidthMultiplier};
    use proptest::prelude::*;

    fn w(v: f32) -> Weights {
        let mut m = Weights::new();
        m.insert("p".into(), Tensor::vector(vec![v]).unwrap());
        m
    }

    #[test]
    fn schedule_points() {
        let cfg = TrainConfig {
            lr_step: 30,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(&cfg, 0), 0.1);
        assert!((lr_schedule(&cfg, 30) - 0.01).abs() < 1e-15);
        assert!((lr_schedule(&cfg, 119) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_step_recurrence() {
        let mut weights = w(1.0);
        let mut state = OptimizerState::default();
        sgd_step(&mut weights, &w(1.0), &mut state, 0.1, 0.9, 0.0).unwrap();
        assert!((weights["p"].data()[0] - 0.9).abs() < 1e-7);
        assert!((state.velocity["p"].data()[0] - 1.0).abs() < 1e-7);
        sgd_step(&mut weights, &w(1.0), &mut state, 0.1, 0.9, 0.0).unwrap();
        assert!((state.velocity["p"].data()[0] - 1.9).abs() < 1e-6);
        assert!((weights["p"].data()[0] - 0.71).abs() < 1e-6);
    }

    #[test]
    fn sgd_fixed_points_and_errors() {
        let mut weights = w(0.5);
        let mut state = OptimizerState::default();
        sgd_step(&mut weights, &w(0.0), &mut state, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(weights["p"].data()[0], 0.5);
        sgd_step(&mut weights, &w(2.0), &mut state, 0.25, 0.0, 0.0).unwrap();
        assert_eq!(weights["p"].data()[0], 0.0);
        let mut bad = Weights::new();
        bad.insert("p".into(), Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(sgd_step(&mut weights, &bad, &mut state, 0.1, 0.0, 0.0).is_err());
        assert!(sgd_step(&mut weights, &{
            let mut m = Weights::new();
            m.insert("q".into(), Tensor::vector(vec![1.0]).unwrap());
            m
        }, &mut state, 0.1, 0.0, 0.0)
        .is_err());
    }

    #[test]
    fn descent_on_convex_quadratic_is_monotone() {
        // f(a, b) = 2a² + 0.5b², Lipschitz constant of the gradient is 4
        let mut weights = Weights::new();
        weights.insert("x".into(), Tensor::vector(vec![1.5f32, -2.0]).unwrap());
        let f = |x: &[f32]| 2.0 * x[0] * x[0] + 0.5 * x[1] * x[1];
        let mut state = OptimizerState::default();
        let mut prev = f(weights["x"].data());
        for _ in 0..50 {
            let x = weights["x"].data().to_vec();
            let mut g = Weights::new();
            g.insert("x".into(), Tensor::vector(vec![4.0 * x[0], x[1]]).unwrap());
            sgd_step(&mut weights, &g, &mut state, 0.2, 0.0, 0.0).unwrap();
            let cur = f(weights["x"].data());
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let s = Shape::new(2, 4, 1, 1).unwrap();
        let (loss, _) = cross_entropy(&Tensor::zeros(s), &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-9);
        let mut big = Tensor::zeros(s);
        big.set(0, 1, 0, 0, 100.0);
        big.set(1, 2, 0, 0, 100.0);
        assert!(cross_entropy(&big, &[1, 2]).unwrap().0 < 1e-9);
        assert!(cross_entropy(&big, &[1, 4]).is_err());
        assert!(cross_entropy(&big, &[1]).is_err());
    }

    #[test]
    fn ignored_pixels_contribute_nothing() {
        let s = Shape::new(1, 3, 2, 2).unwrap();
        let logits = Tensor::from_fn(s, |_, c, h, w| (c + h * 2 + w) as f32 * 0.3);
        let (loss, grad) = pixel_cross_entropy(&logits, &[255; 4], Some(255)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
        let (a, _) = pixel_cross_entropy(&logits, &[1, 255, 2, 255], Some(255)).unwrap();
        let (b, _) = pixel_cross_entropy(
            &Tensor::from_fn(Shape::new(1, 3, 1, 2).unwrap(), |_, c, _, w| logits.get(0, c, w, 0)),
            &[1, 2],
            None,
        )
        .unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ten_crop_layout() {
        assert_eq!(
            ten_crop_offsets(256, 256, 224).unwrap(),
            [(16, 16), (0, 0), (0, 32), (32, 0), (32, 32)]
        );
        let img = Tensor::from_fn(Shape::new(1, 3, 8, 8).unwrap(), |_, c, h, w| (c * 64 + h * 8 + w) as f32);
        let crops = ten_crop(&img, 8).unwrap();
        assert_eq!(crops.len(), 10);
        for i in 0..5 {
            assert_eq!(crops[i], img);
            assert_eq!(crops[i + 5], img.flip_horizontal());
        }
        assert!(ten_crop(&img, 9).is_err());
    }

    #[test]
    fn topk_scoring() {
        let labels: Vec<usize> = (0..20).map(|i| i % 10).collect();
        let oracle: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..10).map(|c| if c == l { 1.0 } else { 0.0 }).collect())
            .collect();
        let r = score_topk(&oracle, &labels);
        assert_eq!((r.top1, r.top5), (0.0, 0.0));
        let constant = vec![vec![0.0; 10]; 20];
        let r = score_topk(&constant, &labels);
        assert!((r.top1 - 0.9).abs() < 1e-12 && (r.top5 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn config_round_trip() {
        let cfg = TrainConfig {
            lr0: 0.05,
            epochs: 3,
            augment: AugmentFlags { hflip: false, ..AugmentFlags::ALL },
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::parse(&cfg.to_cfg_string()).unwrap(), cfg);
        assert!(TrainConfig::parse("lr0 = -1").is_err());
        assert!(TrainConfig::parse("momentum = 1.0").is_err());
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("epochs 3").is_err());
    }

    fn tiny_set() -> ClassifySet {
        let mut set = ClassifySet::default();
        for i in 0..8 {
            let label = i % 2;
            let img = Tensor::from_fn(Shape::new(1, 3, 16, 16).unwrap(), |_, c, h, w| {
                let stripe = if label == 0 { h % 4 < 2 } else { w % 4 < 2 };
                if stripe { 0.5 } else { -0.5 + 0.05 * c as f32 + 0.01 * i as f32 }
            });
            set.images.push(img);
            set.labels.push(label);
        }
        set
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let m = build_drn_c(26, 2, WidthMultiplier::new(1, 8).unwrap(), 0).unwrap();
        let cfg = TrainConfig {
            lr0: 0.0,
            weight_decay: 0.0,
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (trained, _) = train(&m, &tiny_set(), None, &cfg, None).unwrap();
        assert_eq!(learnable(&trained.weights), learnable(&m.weights));
    }

    #[test]
    fn same_seed_same_log() {
        let m = build_drn_c(26, 2, WidthMultiplier::new(1, 8).unwrap(), 0).unwrap();
        let cfg = TrainConfig {
            lr0: 0.05,
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut a = Vec::new();
        let mut b = Vec::new();
        let (ma, _) = train(&m, &tiny_set(), None, &cfg, Some(&mut a)).unwrap();
        let (mb, _) = train(&m, &tiny_set(), None, &cfg, Some(&mut b)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma.weights, mb.weights);
        let first = String::from_utf8(a).unwrap();
        assert!(first.lines().next().unwrap().starts_with("{\"epoch\":0,\"lr\":0.05,"));
    }

    #[test]
    fn divergence_aborts() {
        let m = build_drn_c(26, 2, WidthMultiplier::new(1, 8).unwrap(), 0).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            augment: AugmentFlags::NONE,
            ..TrainConfig::default()
        };
        let mut set = tiny_set();
        set.images[3].data_mut()[0] = f32::NAN;
        match train(&m, &set, None, &cfg, None) {
            Err(Error::Diverged { epoch: 0, loss }) => assert!(loss.is_nan()),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1)),
        }
    }

    proptest! {
        #[test]
        fn augmentation_keeps_extent(seed in 0u64..1000) {
            let img = Tensor::from_fn(Shape::new(1, 3, 20, 24).unwrap(), |_, c, h, w| (c + h + w) as f32 / 50.0);
            let mut rng = SeedStream::new(seed).rng("a");
            let out = augment(&img, AugmentFlags::ALL, &mut rng).unwrap();
            prop_assert_eq!(out.shape(), img.shape());
            prop_assert!(out.all_finite());
        }
    }
}
