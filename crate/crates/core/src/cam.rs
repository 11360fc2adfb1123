//! Class activation maps and weakly-supervised localization.
//!
//! Dropping the global pooling and applying the 1×1 classifier at every
//! location of the final feature map yields one response map per class. The
//! dominant class per cell, a threshold `t` and the tightest enclosing box turn
//! those maps into a single box per class.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ModelGraph};
use crate::ops::{argmax_channels, classifier_1x1, softmax_over_channels, Mode};
use crate::tensor::Tensor;
use crate::train::{ten_crop_scores, top_k};

/// Per-class response maps `f(c, w, h)`, shape `(1, C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMaps {
    pub maps: Tensor,
    pub softmax: bool,
}

impl ActivationMaps {
    pub fn new(maps: Tensor, softmax: bool) -> Result<Self> {
        if maps.shape().n != 1 {
            return Err(Error::InvalidArgument(format!(
                "activation maps hold one image, got batch {}",
                maps.shape().n
            )));
        }
        Ok(Self { maps, softmax })
    }

    pub fn n_classes(&self) -> usize {
        self.maps.shape().c
    }

    /// `(W, H)`.
    pub fn resolution(&self) -> (usize, usize) {
        (self.maps.shape().w, self.maps.shape().h)
    }

    pub fn get(&self, class: usize, w: usize, h: usize) -> f32 {
        self.maps.get(0, class, h, w)
    }
}

/// Runs the backbone on one image and applies the classifier densely.
pub fn class_activation_maps(model: &ModelGraph, image: &Tensor, apply_softmax: bool) -> Result<ActivationMaps> {
    if image.shape().n != 1 {
        return Err(Error::InvalidArgument("class_activation_maps takes a single image".into()));
    }
    let out = forward(model, image, Mode::Eval, &[])?;
    let scores = classifier_1x1(&out.features, &model.classifier()?)?;
    let maps = if apply_softmax {
        softmax_over_channels(&scores)
    } else {
        scores
    };
    ActivationMaps::new(maps, apply_softmax)
}

/// Index of the strongest class at every cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DominantClassMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, `height × width`.
    pub classes: Vec<usize>,
}

impl DominantClassMap {
    pub fn get(&self, w: usize, h: usize) -> usize {
        self.classes[h * self.width + w]
    }
}

/// Per-cell argmax; ties go to the lowest class index.
pub fn dominant_class_map(maps: &ActivationMaps) -> DominantClassMap {
    let (width, height) = maps.resolution();
    let classes = argmax_channels(&maps.maps).pop().unwrap_or_default();
    DominantClassMap { width, height, classes }
}

/// Inclusive cell rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub w1: usize,
    pub h1: usize,
    pub w2: usize,
    pub h2: usize,
}

impl BBox {
    pub fn new(w1: usize, h1: usize, w2: usize, h2: usize) -> Result<Self> {
        if w1 > w2 || h1 > h2 {
            return Err(Error::InvalidArgument(format!(
                "box ({w1},{h1},{w2},{h2}) has negative extent"
            )));
        }
        Ok(Self { w1, h1, w2, h2 })
    }

    pub fn width(&self) -> usize {
        self.w2 - self.w1 + 1
    }

    pub fn height(&self) -> usize {
        self.h2 - self.h1 + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, w: usize, h: usize) -> bool {
        (self.w1..=self.w2).contains(&w) && (self.h1..=self.h2).contains(&h)
    }

    pub fn to_array(&self) -> [usize; 4] {
        [self.w1, self.h1, self.w2, self.h2]
    }
}

/// Tightest box around the cells where `class` dominates and its response
/// exceeds `t`. `None` when no cell qualifies.
pub fn minimal_bbox(maps: &ActivationMaps, g: &DominantClassMap, class: usize, t: f32) -> Option<BBox> {
    if class >= maps.n_classes() {
        return None;
    }
    let mut b: Option<BBox> = None;
    for h in 0..g.height {
        for w in 0..g.width {
            if g.get(w, h) != class || maps.get(class, w, h) <= t {
                continue;
            }
            b = Some(match b {
                None => BBox { w1: w, h1: h, w2: w, h2: h },
                Some(b) => BBox {
                    w1: b.w1.min(w),
                    h1: b.h1.min(h),
                    w2: b.w2.max(w),
                    h2: b.h2.max(h),
                },
            });
        }
    }
    b
}

/// Maps a cell box to image pixels: cell `i` covers pixels
/// `[floor(i·s), ceil((i+1)·s) - 1]` with `s = image / map`, so cell centers
/// land on pixel-region centers.
pub fn scale_box_to_image(b: BBox, map_res: (usize, usize), image_res: (usize, usize)) -> BBox {
    let lo = |v: usize, m: usize, i: usize| v * i / m;
    let hi = |v: usize, m: usize, i: usize| ((v + 1) * i).div_ceil(m) - 1;
    let (mw, mh) = map_res;
    let (iw, ih) = image_res;
    BBox {
        w1: lo(b.w1, mw, iw),
        h1: lo(b.h1, mh, ih),
        w2: hi(b.w2, mw, iw),
        h2: hi(b.h2, mh, ih),
    }
}

/// Intersection over union with inclusive-coordinate areas.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w1 = a.w1.max(b.w1);
    let h1 = a.h1.max(b.h1);
    let w2 = a.w2.min(b.w2);
    let h2 = a.h2.min(b.h2);
    let inter = if w1 > w2 || h1 > h2 { 0 } else { (w2 - w1 + 1) * (h2 - h1 + 1) };
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocProtocol {
    Top1,
    Top5,
}

impl LocProtocol {
    pub fn k(&self) -> usize {
        match self {
            LocProtocol::Top1 => 1,
            LocProtocol::Top5 => 5,
        }
    }
}

impl std::str::FromStr for LocProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "top1" => Ok(Self::Top1),
            "top5" => Ok(Self::Top5),
            other => Err(Error::InvalidArgument(format!("unknown protocol `{other}` (top1|top5)"))),
        }
    }
}

/// One image with its class and ground-truth box in pixels.
#[derive(Clone, Debug)]
pub struct LocSample {
    pub image: Tensor,
    pub label: usize,
    pub gt: Option<BBox>,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocRecord {
    pub path: String,
    pub pred_class: usize,
    #[serde(rename = "box")]
    pub bbox: Option<[usize; 4]>,
    pub iou: f64,
    pub hit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocReport {
    pub error: f64,
    pub hits: usize,
    pub scored: usize,
    pub skipped: usize,
    pub threshold: f32,
    #[serde(skip)]
    pub records: Vec<LocRecord>,
}

/// Scores one image given its maps and ranked class predictions. The box
/// for each candidate class is scaled to `image_res` and compared with `gt`;
/// the image counts as a hit when the label is among the candidates and its
/// box overlaps the ground truth with IoU > 0.5.
pub fn score_localization(
    maps: &ActivationMaps,
    ranked: &[usize],
    label: usize,
    gt: &BBox,
    t: f32,
    image_res: (usize, usize),
) -> (Option<BBox>, f64, bool) {
    let g = dominant_class_map(maps);
    let scaled = |c: usize| minimal_bbox(maps, &g, c, t).map(|b| scale_box_to_image(b, maps.resolution(), image_res));
    let pred = ranked.first().copied().unwrap_or(0);
    let candidate = if ranked.contains(&label) { label } else { pred };
    let b = scaled(candidate);
    let overlap = b.map_or(0.0, |b| iou(&b, gt));
    let hit = ranked.contains(&label) && overlap > 0.5;
    (b, overlap, hit)
}

/// Localization error over a dataset. Classes are ranked by ten-crop
/// classification at `crop`; boxes come from maps on the full image.
pub fn localization_accuracy(
    model: &ModelGraph,
    samples: &[LocSample],
    t: f32,
    protocol: LocProtocol,
    crop: usize,
    apply_softmax: bool,
) -> Result<LocReport> {
    let records: Vec<Option<LocRecord>> = samples
        .par_iter()
        .map(|s| -> Result<Option<LocRecord>> {
            let Some(gt) = s.gt else { return Ok(None) };
            let scores = ten_crop_scores(model, &s.image, crop)?;
            let ranked = top_k(&scores, protocol.k());
            let maps = class_activation_maps(model, &s.image, apply_softmax)?;
            let res = (s.image.shape().w, s.image.shape().h);
            let (b, overlap, hit) = score_localization(&maps, &ranked, s.label, &gt, t, res);
            Ok(Some(LocRecord {
                path: s.name.clone(),
                pred_class: ranked[0],
                bbox: b.map(|b| b.to_array()),
                iou: overlap,
                hit,
            }))
        })
        .collect::<Result<_>>()?;
    let skipped = records.iter().filter(|r| r.is_none()).count();
    let records: Vec<LocRecord> = records.into_iter().flatten().collect();
    if records.is_empty() {
        return Err(Error::InvalidArgument("no samples carry a ground-truth box".into()));
    }
    let hits = records.iter().filter(|r| r.hit).count();
    Ok(LocReport {
        error: 1.0 - hits as f64 / records.len() as f64,
        hits,
        scored: records.len(),
        skipped,
        threshold: t,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;

    fn maps_from(c: usize, h: usize, w: usize, data: Vec<f32>) -> ActivationMaps {
        ActivationMaps::new(Tensor::from_vec(Shape::new(1, c, h, w).unwrap(), data).unwrap(), false).unwrap()
    }

    #[test]
    fn iou_hand_cases() {
        let a = BBox::new(0, 0, 9, 9).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(10, 0, 12, 9).unwrap()), 0.0);
        assert_eq!(iou(&a, &BBox::new(0, 5, 9, 14).unwrap()), 1.0 / 3.0);
    }

    #[test]
    fn box_from_two_cells() {
        let mut data = vec![0.0f32; 2 * 4 * 5];
        // class 1 strong at (w=1,h=1) and (w=3,h=2)
        data[20 + 5 + 1] = 1.0;
        data[20 + 2 * 5 + 3] = 1.0;
        let m = maps_from(2, 4, 5, data);
        let g = dominant_class_map(&m);
        assert_eq!(minimal_bbox(&m, &g, 1, 0.5), Some(BBox::new(1, 1, 3, 2).unwrap()));
        assert_eq!(minimal_bbox(&m, &g, 1, 2.0), None);
    }

    #[test]
    fn scaling_preserves_centers() {
        let b = BBox::new(3, 5, 3, 5).unwrap();
        assert_eq!(scale_box_to_image(b, (28, 28), (28, 28)), b);
        let s = scale_box_to_image(b, (28, 28), (224, 224));
        assert_eq!(s, BBox::new(24, 40, 31, 47).unwrap());
        // continuous centers: 8·3 + 4 and 8·5 + 4
        assert_eq!((s.w1 + s.w2 + 1) as f64 / 2.0, 28.0);
        assert_eq!((s.h1 + s.h2 + 1) as f64 / 2.0, 44.0);
        let full = BBox::new(0, 0, 27, 27).unwrap();
        assert_eq!(scale_box_to_image(full, (28, 28), (224, 224)), BBox::new(0, 0, 223, 223).unwrap());
        let odd = scale_box_to_image(BBox::new(0, 0, 6, 6).unwrap(), (7, 7), (50, 50));
        assert_eq!(odd, BBox::new(0, 0, 49, 49).unwrap());
    }

    #[test]
    fn single_class_dominates_everywhere() {
        let m = maps_from(1, 3, 3, vec![0.3; 9]);
        assert!(dominant_class_map(&m).classes.iter().all(|&c| c == 0));
    }

    proptest! {
        #[test]
        fn argmax_invariant_under_monotone_transform(
            data in prop::collection::vec(-3.0f32..3.0, 3 * 4 * 4),
        ) {
            let m = maps_from(3, 4, 4, data.clone());
            let t = maps_from(3, 4, 4, data.iter().map(|v| (v * 0.7).exp() + 2.0).collect());
            prop_assert_eq!(dominant_class_map(&m), dominant_class_map(&t));
        }

        #[test]
        fn higher_threshold_never_enlarges(
            data in prop::collection::vec(0.0f32..1.0, 2 * 6 * 6),
            t1 in 0.0f32..1.0,
            dt in 0.0f32..0.5,
        ) {
            let m = maps_from(2, 6, 6, data);
            let g = dominant_class_map(&m);
            for c in 0..2 {
                match (minimal_bbox(&m, &g, c, t1), minimal_bbox(&m, &g, c, t1 + dt)) {
                    (None, Some(_)) => prop_assert!(false, "box appeared at a higher threshold"),
                    (Some(lo), Some(hi)) => {
                        prop_assert!(hi.w1 >= lo.w1 && hi.h1 >= lo.h1 && hi.w2 <= lo.w2 && hi.h2 <= lo.h2);
                    }
                    _ => {}
                }
            }
        }

        #[test]
        fn iou_is_symmetric_and_bounded(
            a in (0usize..10, 0usize..10, 0usize..6, 0usize..6),
            b in (0usize..10, 0usize..10, 0usize..6, 0usize..6),
        ) {
            let a = BBox::new(a.0, a.1, a.0 + a.2, a.1 + a.3).unwrap();
            let b = BBox::new(b.0, b.1, b.0 + b.2, b.1 + b.3).unwrap();
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
        }
    }
}
