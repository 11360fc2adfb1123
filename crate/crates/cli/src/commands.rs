use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;

use drn::analysis::{analytic_rf, degridding_comparison, empirical_rf, interior_unit, RfReport};
use drn::cam::{class_activation_maps, localization_accuracy, LocProtocol};
use drn::data::{synth_dataset, DatasetManifest, Image, Task};
use drn::model::{load_model, save_model, ArchFamily, ModelGraph, WidthMultiplier};
use drn::segment::{evaluate_segmentation, segment as segment_image, train_segmentation};
use drn::train::{evaluate, train as train_classifier, Protocol, TrainConfig};
use drn::{Shape, Tensor};

use crate::{
    BuildArgs, CamArgs, EvalArgs, GridArgs, LocalizeArgs, RfArgs, SegmentArgs, SynthArgs, TrainArgs, Usage,
};

fn emit(value: serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{value}")?;
    Ok(())
}

fn open_model(path: &Path) -> Result<ModelGraph> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn open_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn open_image(path: &Path, model: &ModelGraph) -> Result<Tensor> {
    let img = Image::read(path).with_context(|| format!("reading image {}", path.display()))?;
    Ok(img.to_tensor_channels(model.in_channels)?)
}

/// Largest multiple of the output stride not above 7/8 of `extent`.
fn default_ten_crop(extent: usize, model: &ModelGraph) -> usize {
    let os = model.output_stride();
    (extent * 7 / 8 / os * os).max(os)
}

fn min_extent(t: &Tensor) -> usize {
    t.shape().h.min(t.shape().w)
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let task: Task = a.task.parse()?;
    let m = synth_dataset(task, a.n, a.extent, a.classes, a.seed, &a.out)?;
    emit(json!({
        "task": task.to_string(),
        "n": m.entries.len(),
        "extent": a.extent,
        "classes": m.n_classes,
        "seed": a.seed,
        "manifest": a.out.join(drn::data::MANIFEST_FILE),
    }))
}

pub fn build(a: BuildArgs) -> Result<()> {
    let arch: ArchFamily = a.arch.parse()?;
    let width: WidthMultiplier = a.width.parse()?;
    let model = drn::model::build(arch, a.depth, a.classes, width, a.seed)?;
    save_model(&model, &a.out)?;
    emit(json!({
        "model": model.name(),
        "width": width.to_string(),
        "classes": model.n_classes,
        "params": model.param_count(),
        "output_stride": model.output_stride(),
        "out": a.out,
    }))
}

/// Writes every line to stdout and, when present, a metrics file.
struct Tee {
    file: Option<BufWriter<File>>,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stdout().write_all(buf)?;
        if let Some(f) = &mut self.file {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stdout().flush()?;
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut model = open_model(&a.model)?;
    let cfg = match &a.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    let data = open_manifest(&a.data)?;
    let eval = a.eval_data.as_deref().map(open_manifest).transpose()?;
    if let Some(e) = &eval {
        if e.task != data.task || e.n_classes != data.n_classes {
            return Err(Usage(format!(
                "eval dataset ({} with {} classes) does not match training dataset ({} with {} classes)",
                e.task, e.n_classes, data.task, data.n_classes
            ))
            .into());
        }
    }
    let file = a
        .metrics
        .as_ref()
        .map(|p| File::create(p).map(BufWriter::new).with_context(|| format!("creating {}", p.display())))
        .transpose()?;
    let mut tee = Tee { file };
    let c = model.in_channels;
    let trained = if data.task == Task::Segment {
        if model.n_classes != data.n_classes {
            model.reset_classifier(data.n_classes, cfg.seed)?;
        }
        let samples = data.seg_samples(c)?;
        let held = eval.as_ref().map(|e| e.seg_samples(c)).transpose()?;
        train_segmentation(&model, &samples, held.as_deref(), &cfg, Some(&mut tee))?.0
    } else {
        if model.n_classes != data.n_classes {
            return Err(Usage(format!(
                "model has {} classes, dataset has {}",
                model.n_classes, data.n_classes
            ))
            .into());
        }
        let set = data.classify_set(c)?;
        let held = eval.as_ref().map(|e| e.classify_set(c)).transpose()?;
        train_classifier(&model, &set, held.as_ref(), &cfg, Some(&mut tee))?.0
    };
    tee.flush()?;
    save_model(&trained, &a.out)?;
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let model = open_model(&a.model)?;
    let protocol: Protocol = a.protocol.parse()?;
    let set = open_manifest(&a.data)?.classify_set(model.in_channels)?;
    let extent = min_extent(&set.images[0]);
    let crop = a.crop.unwrap_or(match protocol {
        Protocol::OneCrop => extent,
        Protocol::TenCrop => default_ten_crop(extent, &model),
    });
    let r = evaluate(&model, &set.images, &set.labels, protocol, crop)?;
    emit(json!({ "protocol": protocol, "crop": crop, "top1": r.top1, "top5": r.top5, "n": r.n }))
}

/// Nearest-cell upsampling of one map to the image extent, min-max scaled to 8 bits.
fn heatmap(plane: &[f32], (mw, mh): (usize, usize), (iw, ih): (usize, usize)) -> (Image, f32, f32) {
    let min = plane.iter().copied().fold(f32::INFINITY, f32::min);
    let max = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = max - min;
    let mut pixels = Vec::with_capacity(iw * ih);
    for y in 0..ih {
        for x in 0..iw {
            let v = plane[(y * mh / ih) * mw + x * mw / iw];
            let q = if span > 0.0 { ((v - min) / span * 255.0).round() } else { 0.0 };
            pixels.push(q as u8);
        }
    }
    (Image::gray(iw, ih, pixels).expect("positive extent"), min, max)
}

pub fn cam(a: CamArgs) -> Result<()> {
    let model = open_model(&a.model)?;
    let x = open_image(&a.image, &model)?;
    let maps = class_activation_maps(&model, &x, !a.raw)?;
    let class = match a.class {
        Some(c) if c >= model.n_classes => {
            return Err(Usage(format!("class {c} >= {} classes", model.n_classes)).into())
        }
        Some(c) => c,
        None => {
            // pooled pre-softmax maps equal the classification logits
            let logits = class_activation_maps(&model, &x, false)?;
            let mean = |c: usize| logits.maps.plane(0, c).iter().map(|&v| v as f64).sum::<f64>();
            (0..model.n_classes).fold(0, |best, c| if mean(c) > mean(best) { c } else { best })
        }
    };
    let res = maps.resolution();
    let image_res = (x.shape().w, x.shape().h);
    let (img, min, max) = heatmap(maps.maps.plane(0, class), res, image_res);
    img.write(&a.out)?;
    let info = json!({
        "class": class,
        "softmax": !a.raw,
        "map": [res.0, res.1],
        "image": [image_res.0, image_res.1],
        "min": min,
        "max": max,
        "out": a.out,
    });
    let sidecar = sidecar_path(&a.out);
    std::fs::write(&sidecar, format!("{info}\n")).with_context(|| format!("writing {}", sidecar.display()))?;
    emit(info)
}

/// `heat.pgm` → `heat.pgm.json`.
fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn localize(a: LocalizeArgs) -> Result<()> {
    let model = open_model(&a.model)?;
    let protocol: LocProtocol = a.protocol.parse()?;
    let samples = open_manifest(&a.data)?.loc_samples(model.in_channels)?;
    let crop = a.crop.unwrap_or_else(|| default_ten_crop(min_extent(&samples[0].image), &model));
    let report = localization_accuracy(&model, &samples, a.t, protocol, crop, !a.raw)?;
    for r in &report.records {
        emit(serde_json::to_value(r)?)?;
    }
    if report.skipped > 0 {
        eprintln!("warning: {} images without a ground-truth box were skipped", report.skipped);
    }
    emit(json!({
        "summary": true,
        "protocol": protocol,
        "t": a.t,
        "crop": crop,
        "error": report.error,
        "hit_rate": 1.0 - report.error,
        "hits": report.hits,
        "scored": report.scored,
        "skipped": report.skipped,
    }))
}

pub fn rf(a: RfArgs) -> Result<()> {
    let model = match (&a.model, &a.arch, a.depth) {
        (Some(p), _, _) => open_model(p)?,
        (None, Some(arch), Some(depth)) => drn::model::build(arch.parse()?, depth, 10, a.width.parse()?, 0)?,
        _ => return Err(Usage("give --model or both --arch and --depth".into()).into()),
    };
    let spec = analytic_rf(&model, a.level)?;
    let mut out = serde_json::to_value(RfReport::new(&model.name(), a.level, &spec))?;
    if a.empirical {
        let e = empirical_rf(&model, a.level, interior_unit(&model, a.level)?)?;
        out["empirical"] = json!({ "rf": [e.rf_h, e.rf_w], "jump": e.jump });
    }
    emit(out)
}

pub fn grid(a: GridArgs) -> Result<()> {
    let models = a
        .models
        .iter()
        .map(|p| Ok((p.display().to_string(), open_model(p)?)))
        .collect::<Result<Vec<_>>>()?;
    for (name, model) in &models {
        let x = match &a.image {
            Some(p) => open_image(p, model)?,
            None => {
                let e = a.extent;
                let mut x = Tensor::zeros(Shape::new(1, model.in_channels, e, e)?);
                for c in 0..model.in_channels {
                    x.set(0, c, e / 2, e / 2, 0.5);
                }
                x
            }
        };
        for r in degridding_comparison(&[(name.clone(), model)], &x)? {
            emit(serde_json::to_value(r)?)?;
        }
    }
    Ok(())
}

pub fn segment(a: SegmentArgs) -> Result<()> {
    let model = open_model(&a.model)?;
    if let (Some(image), Some(out)) = (&a.image, &a.out) {
        let pred = segment_image(&model, &open_image(image, &model)?)?;
        let labels = pred
            .label_map
            .iter()
            .map(|&c| u8::try_from(c).map_err(|_| Usage(format!("class {c} does not fit a PGM label"))))
            .collect::<Result<Vec<u8>, _>>()?;
        Image::gray(pred.width, pred.height, labels)?.write(out)?;
        return emit(json!({ "out": out, "width": pred.width, "height": pred.height, "classes": model.n_classes }));
    }
    let data = a.data.as_deref().ok_or_else(|| Usage("give --image and --out, or --data".into()))?;
    let manifest = open_manifest(data)?;
    if manifest.n_classes != model.n_classes {
        return Err(Usage(format!(
            "model has {} classes, dataset has {}",
            model.n_classes, manifest.n_classes
        ))
        .into());
    }
    let (_, report) = evaluate_segmentation(&model, &manifest.seg_samples(model.in_channels)?)?;
    emit(serde_json::to_value(report)?)
}
