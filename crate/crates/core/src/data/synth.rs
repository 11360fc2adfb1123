//! Seeded geometric scenes: one flat-colored shape on a flat background.

use std::path::Path;

use rand::Rng;

use super::pnm::Image;
use super::{DatasetManifest, ManifestEntry, Task};
use crate::cam::BBox;
use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// Shape vocabulary, indexed by class.
pub const SHAPES: [Shape; 4] = [Shape::Disc, Shape::Square, Shape::Triangle, Shape::Bar];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    /// Thin diagonal bar.
    Bar,
}

/// Placed shape in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub shape: Shape,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
    /// Bar thickness.
    pub thickness: f64,
    /// Bar runs down-right when true, up-right otherwise.
    pub falling: bool,
}

impl Placement {
    /// Whether the pixel centred at `(x + 0.5, y + 0.5)` is covered.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let px = x as f64 + 0.5 - self.cx;
        let py = y as f64 + 0.5 - self.cy;
        let half = self.size / 2.0;
        match self.shape {
            Shape::Disc => px * px + py * py <= half * half,
            Shape::Square => px.abs() <= half && py.abs() <= half,
            Shape::Triangle => py >= -half && py <= half && px.abs() <= (py + half) / 2.0,
            Shape::Bar => {
                // distance to the segment from (-half, -/+half) to (half, +/-half)
                let dir = if self.falling { 1.0 } else { -1.0 };
                let t = ((px + dir * py) / 2.0).clamp(-half, half);
                let (dx, dy) = (px - t, py - dir * t);
                (dx * dx + dy * dy).sqrt() <= self.thickness / 2.0
            }
        }
    }

    /// Row-major coverage mask over a `width x height` raster.
    pub fn rasterize(&self, width: usize, height: usize) -> Vec<bool> {
        (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| self.covers(x, y))
            .collect()
    }
}

/// Tight inclusive bounds of the set cells, `None` when empty.
pub fn mask_bbox(mask: &[bool], width: usize) -> Option<BBox> {
    let mut b: Option<BBox> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % width, i / width);
        b = Some(match b {
            None => BBox { w1: x, h1: y, w2: x, h2: y },
            Some(b) => BBox {
                w1: b.w1.min(x),
                h1: b.h1.min(y),
                w2: b.w2.max(x),
                h2: b.h2.max(y),
            },
        });
    }
    b
}

/// One rendered scene.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Image,
    pub coverage: Vec<bool>,
    pub placement: Placement,
    pub background: [u8; 3],
    pub foreground: [u8; 3],
}

/// Renders `shape` at a random size, position and color pair. Each
/// foreground channel differs from the background by at least 96.
pub fn render_scene(shape: Shape, extent: usize, rng: &mut impl Rng) -> Scene {
    let e = extent as f64;
    let size = rng.random_range(0.3 * e..=0.6 * e);
    let thickness = (e / 16.0).max(2.0);
    let margin = size / 2.0 + thickness + 1.0;
    let cx = rng.random_range(margin.min(e / 2.0)..=(e - margin).max(e / 2.0));
    let cy = rng.random_range(margin.min(e / 2.0)..=(e - margin).max(e / 2.0));
    let falling = rng.random_bool(0.5);
    let placement = Placement {
        shape,
        cx,
        cy,
        size,
        thickness,
        falling,
    };
    let mut background = [0u8; 3];
    let mut foreground = [0u8; 3];
    for c in 0..3 {
        let bg: u8 = rng.random();
        let gap: u8 = rng.random_range(96..=159);
        background[c] = bg;
        foreground[c] = if bg >= 128 { bg.saturating_sub(gap) } else { bg.saturating_add(gap) };
    }
    let coverage = placement.rasterize(extent, extent);
    let mut pixels = Vec::with_capacity(extent * extent * 3);
    for &on in &coverage {
        pixels.extend_from_slice(if on { &foreground } else { &background });
    }
    Scene {
        image: Image::rgb(extent, extent, pixels).expect("extent checked by caller"),
        coverage,
        placement,
        background,
        foreground,
    }
}

/// Writes `n_images` scenes plus `labels.csv` and `dataset.json` into
/// `out_dir`. Classes are assigned round-robin. For `Segment` class 0 is
/// background and shape `k` is drawn with mask value `k + 1`.
pub fn synth_dataset(
    task: Task,
    n_images: usize,
    extent: usize,
    n_classes: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let shape_classes = match task {
        Task::Segment => n_classes.saturating_sub(1),
        _ => n_classes,
    };
    if shape_classes == 0 || shape_classes > SHAPES.len() || n_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "{n_classes} classes unsupported for {task} with {} shapes",
            SHAPES.len()
        )));
    }
    if n_images == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one image".into()));
    }
    if extent < 16 {
        return Err(Error::InvalidArgument(format!("extent {extent} below 16")));
    }
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let masks_dir = out_dir.join("masks");
    if task == Task::Segment {
        std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    }
    let digits = (n_images - 1).to_string().len().max(3);
    let stream = SeedStream::new(seed).child("synth");
    let mut entries = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let k = i % shape_classes;
        let mut rng = stream.child_indexed("scene", i as u64).rng("render");
        let scene = render_scene(SHAPES[k], extent, &mut rng);
        let stem = format!("{i:0digits$}");
        let image = format!("images/{stem}.ppm");
        scene.image.write(out_dir.join(&image))?;
        let mut entry = ManifestEntry {
            image,
            label: k,
            bbox: None,
            mask: None,
        };
        match task {
            Task::Classify => {}
            Task::Localize => entry.bbox = mask_bbox(&scene.coverage, extent),
            Task::Segment => {
                entry.label = k + 1;
                let values = scene.coverage.iter().map(|&on| if on { k as u8 + 1 } else { 0 }).collect();
                let mask = format!("masks/{stem}.pgm");
                Image::gray(extent, extent, values)?.write(out_dir.join(&mask))?;
                entry.mask = Some(mask);
            }
        }
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        task,
        n_classes,
        entries,
    };
    manifest.write_labels_csv(out_dir.join("labels.csv"))?;
    manifest.save(out_dir.join(super::MANIFEST_FILE))?;
    Ok(manifest)
}
