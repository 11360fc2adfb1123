//! Image files, synthetic datasets and dataset manifests.

mod pnm;
mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cam::{BBox, LocSample};
use crate::error::{Error, Result};
use crate::segment::{SegSample, IGNORE_LABEL};
use crate::train::ClassifySet;

pub use pnm::Image;
pub use synth::{mask_bbox, render_scene, synth_dataset, Placement, Scene, Shape, SHAPES};

/// Manifest file name inside a dataset directory.
pub const MANIFEST_FILE: &str = "dataset.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Localize,
    Segment,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classify => "classify",
            Task::Localize => "localize",
            Task::Segment => "segment",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Task::Classify),
            "localize" => Ok(Task::Localize),
            "segment" => Ok(Task::Segment),
            other => Err(Error::InvalidArgument(format!(
                "unknown task {other:?} (classify, localize, segment)"
            ))),
        }
    }
}

/// Paths are relative to the manifest root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub task: Task,
    pub n_classes: usize,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize)]
struct LabelRow<'a> {
    image: &'a str,
    label: usize,
    w1: Option<usize>,
    h1: Option<usize>,
    w2: Option<usize>,
    h2: Option<usize>,
    mask: Option<&'a str>,
}

impl DatasetManifest {
    /// Reads a manifest from a `dataset.json` path or the directory holding
    /// one, then validates every entry.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut manifest: Self = serde_json::from_str(&text)
            .map_err(|e| Error::format("manifest", format!("{}: {e}", file.display())))?;
        manifest.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Flat CSV view: `image,label,w1,h1,w2,h2,mask` with empty optional cells.
    pub fn write_labels_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for e in &self.entries {
            w.serialize(LabelRow {
                image: &e.image,
                label: e.label,
                w1: e.bbox.map(|b| b.w1),
                h1: e.bbox.map(|b| b.h1),
                w2: e.bbox.map(|b| b.w2),
                h2: e.bbox.map(|b| b.h2),
                mask: e.mask.as_deref(),
            })
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.image)
    }

    /// Checks labels, files, extents and boxes, naming the first bad entry.
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::InvalidArgument("manifest declares zero classes".into()));
        }
        if self.entries.is_empty() {
            return Err(Error::InvalidArgument("manifest has no entries".into()));
        }
        for (i, e) in self.entries.iter().enumerate() {
            let bad = |reason: String| Error::Manifest {
                entry: format!("{i} ({})", e.image),
                reason,
            };
            if e.label >= self.n_classes {
                return Err(bad(format!("label {} >= {} classes", e.label, self.n_classes)));
            }
            let path = self.image_path(e);
            if !path.is_file() {
                return Err(bad(format!("missing image file {}", path.display())));
            }
            let img = Image::read(&path).map_err(|err| bad(err.to_string()))?;
            if let Some(b) = e.bbox {
                if b.w1 > b.w2 || b.h1 > b.h2 || b.w2 >= img.width || b.h2 >= img.height {
                    return Err(bad(format!(
                        "box {:?} outside {}x{} image",
                        b.to_array(),
                        img.width,
                        img.height
                    )));
                }
            } else if self.task == Task::Localize {
                return Err(bad("localize entry without a box".into()));
            }
            match &e.mask {
                Some(m) => {
                    let mpath = self.root.join(m);
                    if !mpath.is_file() {
                        return Err(bad(format!("missing mask file {}", mpath.display())));
                    }
                    let mask = Image::read(&mpath).map_err(|err| bad(err.to_string()))?;
                    if mask.channels != 1 || (mask.width, mask.height) != (img.width, img.height) {
                        return Err(bad(format!(
                            "mask is {}x{}x{}, image is {}x{}",
                            mask.width, mask.height, mask.channels, img.width, img.height
                        )));
                    }
                    if let Some(v) = mask
                        .pixels
                        .iter()
                        .find(|&&v| v != IGNORE_LABEL && v as usize >= self.n_classes)
                    {
                        return Err(bad(format!("mask value {v} >= {} classes", self.n_classes)));
                    }
                }
                None if self.task == Task::Segment => {
                    return Err(bad("segment entry without a mask".into()));
                }
                None => {}
            }
        }
        Ok(())
    }

    fn image_tensor(&self, e: &ManifestEntry, channels: usize) -> Result<crate::Tensor> {
        Image::read(self.image_path(e))?.to_tensor_channels(channels)
    }

    pub fn classify_set(&self, channels: usize) -> Result<ClassifySet> {
        let mut set = ClassifySet::default();
        for e in &self.entries {
            set.images.push(self.image_tensor(e, channels)?);
            set.labels.push(e.label);
        }
        Ok(set)
    }

    pub fn loc_samples(&self, channels: usize) -> Result<Vec<LocSample>> {
        self.entries
            .iter()
            .map(|e| {
                Ok(LocSample {
                    image: self.image_tensor(e, channels)?,
                    label: e.label,
                    gt: e.bbox,
                    name: e.image.clone(),
                })
            })
            .collect()
    }

    pub fn seg_samples(&self, channels: usize) -> Result<Vec<SegSample>> {
        self.entries
            .iter()
            .map(|e| {
                let m = e.mask.as_ref().ok_or_else(|| Error::Manifest {
                    entry: e.image.clone(),
                    reason: "no mask".into(),
                })?;
                Ok(SegSample {
                    image: self.image_tensor(e, channels)?,
                    mask: Image::read(self.root.join(m))?.pixels,
                    name: e.image.clone(),
                })
            })
            .collect()
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format("csv", format!("{other:?}")),
    }
}
