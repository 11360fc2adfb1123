//! Dense prediction: the classification network run fully convolutionally,
//! class probabilities upsampled bilinearly to the input extent.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{backward, forward, forward_trace, ExecOptions, ModelGraph, CLASSIFIER_BIAS, CLASSIFIER_WEIGHT};
use crate::ops::{
    argmax_channels, bilinear_upsample, bilinear_upsample_backward, classifier_1x1, classifier_params,
    conv2d_backward, softmax_over_channels, Mode,
};
use crate::rng::SeedStream;
use crate::tensor::Tensor;
use crate::train::{
    apply_stats, check_finite, lr_schedule, pixel_cross_entropy, sgd_step, OptimizerState, TrainConfig,
};

/// Mask value excluded from the loss and from scoring.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Debug, PartialEq)]
pub struct SegPrediction {
    pub height: usize,
    pub width: usize,
    /// Row-major class indices at input resolution.
    pub label_map: Vec<usize>,
    /// `(1, C, H, W)` upsampled probabilities.
    pub prob_maps: Tensor,
}

fn check_extent(model: &ModelGraph, image: &Tensor) -> Result<()> {
    let s = image.shape();
    let os = model.output_stride();
    if s.h % os != 0 || s.w % os != 0 {
        return Err(Error::InvalidArgument(format!(
            "segmentation input {}x{} is not divisible by {os}",
            s.h, s.w
        )));
    }
    Ok(())
}

/// Class probabilities at the final feature resolution, before upsampling.
pub fn coarse_probabilities(model: &ModelGraph, image: &Tensor) -> Result<Tensor> {
    check_extent(model, image)?;
    let features = forward(model, image, Mode::Eval, &[])?.features;
    Ok(softmax_over_channels(&classifier_1x1(&features, &model.classifier()?)?))
}

pub fn segment(model: &ModelGraph, image: &Tensor) -> Result<SegPrediction> {
    let s = image.shape();
    if s.n != 1 {
        return Err(Error::InvalidArgument("segment takes a single image".into()));
    }
    let coarse = coarse_probabilities(model, image)?;
    let prob_maps = bilinear_upsample(&coarse, s.h, s.w)?;
    let label_map = argmax_channels(&prob_maps).pop().unwrap_or_default();
    Ok(SegPrediction {
        height: s.h,
        width: s.w,
        label_map,
        prob_maps,
    })
}

/// Counts with ground truth as rows and predictions as columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument("confusion matrix must be square".into()));
        }
        Ok(Self {
            n_classes: n,
            counts: rows.concat(),
        })
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    /// Adds one pixel; ignore-labelled pixels are skipped.
    pub fn add(&mut self, truth: u8, pred: usize) -> Result<()> {
        if truth == IGNORE_LABEL {
            return Ok(());
        }
        let t = truth as usize;
        if t >= self.n_classes || pred >= self.n_classes {
            return Err(Error::InvalidArgument(format!(
                "label pair ({t}, {pred}) outside {} classes",
                self.n_classes
            )));
        }
        self.counts[t * self.n_classes + pred] += 1;
        Ok(())
    }

    pub fn add_maps(&mut self, truth: &[u8], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::ShapeMismatch {
                op: "confusion matrix",
                expected: truth.len().to_string(),
                actual: pred.len().to_string(),
            });
        }
        truth.iter().zip(pred).try_for_each(|(&t, &p)| self.add(t, p))
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiouReport {
    /// `None` for classes absent from both truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
}

/// `IoU_c = TP / (TP + FP + FN)`, averaged over classes that occur.
pub fn miou(cm: &ConfusionMatrix) -> Result<MiouReport> {
    if cm.total() == 0 {
        return Err(Error::InvalidArgument("confusion matrix is empty".into()));
    }
    let n = cm.n_classes;
    let per_class_iou: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let tp = cm.get(c, c);
            let row: u64 = (0..n).map(|p| cm.get(c, p)).sum();
            let col: u64 = (0..n).map(|t| cm.get(t, c)).sum();
            let denom = row + col - tp;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    Ok(MiouReport {
        mean_iou: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class_iou,
    })
}

#[derive(Clone, Debug)]
pub struct SegSample {
    pub image: Tensor,
    /// Row-major class indices, `IGNORE_LABEL` allowed.
    pub mask: Vec<u8>,
    pub name: String,
}

impl SegSample {
    fn check(&self) -> Result<()> {
        let s = self.image.shape();
        if self.mask.len() != s.h * s.w {
            return Err(Error::ShapeMismatch {
                op: "segmentation mask",
                expected: format!("{}x{}", s.h, s.w),
                actual: format!("{} pixels", self.mask.len()),
            });
        }
        Ok(())
    }
}

pub fn evaluate_segmentation(model: &ModelGraph, samples: &[SegSample]) -> Result<(ConfusionMatrix, MiouReport)> {
    let mut cm = ConfusionMatrix::new(model.n_classes);
    for s in samples {
        s.check()?;
        cm.add_maps(&s.mask, &segment(model, &s.image)?.label_map)?;
    }
    let report = miou(&cm)?;
    Ok((cm, report))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegEpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub mean_iou: f64,
}

fn crop_mask(mask: &[u8], width: usize, top: usize, left: usize, h: usize, w: usize) -> Vec<u8> {
    (top..top + h)
        .flat_map(|y| mask[y * width + left..y * width + left + w].iter().copied())
        .collect()
}

fn flip_mask(mask: &[u8], width: usize) -> Vec<u8> {
    mask.chunks_exact(width)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

/// Per-pixel cross-entropy training. Augmentation is limited to random
/// crops (`cfg.crop`, when `random_crop` is set) and mirroring. The model's
/// classifier must already have the dataset's class count.
pub fn train_segmentation(
    model: &ModelGraph,
    data: &[SegSample],
    eval: Option<&[SegSample]>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(ModelGraph, Vec<SegEpochMetrics>)> {
    use rand::seq::SliceRandom;
    use rand::Rng;

    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("segmentation set is empty".into()));
    }
    data.iter().try_for_each(SegSample::check)?;
    let mut model = model.clone();
    let mut state = OptimizerState::default();
    let seeds = SeedStream::new(cfg.seed);
    let mut metrics = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg, epoch);
        let es = seeds.child_indexed("epoch", epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut es.rng("shuffle"));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut images = Vec::new();
            let mut labels = Vec::new();
            for &i in batch {
                let mut rng = es.child_indexed("augment", i as u64).rng("image");
                let s = data[i].image.shape();
                let (mut img, mut mask, mut w) = (data[i].image.clone(), data[i].mask.clone(), s.w);
                if cfg.augment.random_crop && cfg.crop > 0 {
                    if cfg.crop > s.h || cfg.crop > s.w {
                        return Err(Error::InvalidArgument(format!("crop {} larger than image", cfg.crop)));
                    }
                    let top = rng.random_range(0..=s.h - cfg.crop);
                    let left = rng.random_range(0..=s.w - cfg.crop);
                    img = img.crop(top, left, cfg.crop, cfg.crop)?;
                    mask = crop_mask(&mask, s.w, top, left, cfg.crop, cfg.crop);
                    w = cfg.crop;
                }
                if cfg.augment.hflip && rng.random_bool(0.5) {
                    img = img.flip_horizontal();
                    mask = flip_mask(&mask, w);
                }
                images.push(img);
                labels.extend(mask.iter().map(|&m| m as u32));
            }
            let x = Tensor::stack(&images)?;
            let loss = seg_step(&mut model, &mut state, &x, &labels, lr, cfg)?;
            check_finite(epoch, loss)?;
            total += loss * batch.len() as f64;
        }
        let (_, report) = evaluate_segmentation(&model, eval.unwrap_or(data))?;
        let m = SegEpochMetrics {
            epoch,
            lr,
            loss: total / data.len() as f64,
            mean_iou: report.mean_iou,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&m).expect("metrics serialize"))?;
        }
        metrics.push(m);
    }
    Ok((model, metrics))
}

fn seg_step(
    model: &mut ModelGraph,
    state: &mut OptimizerState,
    x: &Tensor,
    labels: &[u32],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let s = x.shape();
    let trace = forward_trace(model, x, &ExecOptions::train(), &[])?;
    let k = model.classifier()?;
    let scores = classifier_1x1(&trace.features, &k)?;
    let up = bilinear_upsample(&scores, s.h, s.w)?;
    let (loss, g_up) = pixel_cross_entropy(&up, labels, Some(IGNORE_LABEL as u32))?;
    let g_scores = bilinear_upsample_backward(scores.shape(), &g_up)?;
    let ws = k.weights.shape();
    let (g_feat, fg) = conv2d_backward(&trace.features, &k, &classifier_params(ws.c, ws.n), &g_scores)?;
    let mut grads = backward(model, &trace, &g_feat)?.params;
    grads.insert(CLASSIFIER_WEIGHT.to_string(), fg.weights);
    if let Some(b) = fg.bias {
        grads.insert(CLASSIFIER_BIAS.to_string(), Tensor::vector(b)?);
    }
    sgd_step(&mut model.weights, &grads, state, lr, cfg.momentum, cfg.weight_decay)?;
    apply_stats(&mut model.weights, trace.running_stats);
    Ok(loss)
}
