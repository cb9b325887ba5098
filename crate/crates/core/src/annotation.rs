//! Dataset model and the detection-annotation interchange format.
//!
//! Source datasets are read from a single JSON file with `images`,
//! `annotations` and `categories` sections. Distilled datasets are written
//! back in the same schema; the extra per-record fields (`score`,
//! `source_annotation_id`, `phi`, `diversity`) are ignored by ordinary
//! consumers and let [`read_distilled`] rebuild a [`DistilledDataset`].

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;
use crate::compositor::{encode_png, CompositorError, PixelBuffer};

/// Boxes whose clamped width or height is at or below this are dropped.
pub const MIN_BOX_SIDE: f64 = 1.0;

/// Name of the annotation file inside an output root.
pub const ANNOTATION_FILE: &str = "annotations.json";
/// Directory, relative to an output root, holding the rendered images.
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Syntax {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {section}[{index}]: {message}")]
    Record {
        path: PathBuf,
        section: &'static str,
        index: usize,
        message: String,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("rendering image {id}: {source}")]
    Render {
        id: u64,
        #[source]
        source: CompositorError,
    },
}

pub type Result<T, E = AnnotationError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
    #[serde(default)]
    pub supercategory: String,
}

/// One annotated object of a source image.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceObject {
    pub annotation_id: u64,
    pub bbox: BBox,
    pub category_id: u64,
    /// Crowd regions are kept for bookkeeping but never become candidates.
    pub iscrowd: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<SourceObject>,
}

/// Parsed original dataset. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceDataset {
    pub images: Vec<SourceImage>,
    pub categories: Vec<Category>,
    pub total_objects: usize,
    /// Directory image file names are resolved against.
    pub images_root: PathBuf,
    index: HashMap<u64, usize>,
}

/// Counts of records that were adjusted or discarded during ingestion.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParseReport {
    pub clamped: usize,
    pub dropped_degenerate: usize,
    pub crowd: usize,
}

impl SourceDataset {
    /// Builds a dataset, validating id uniqueness and box bounds.
    pub fn new(
        images: Vec<SourceImage>,
        categories: Vec<Category>,
        images_root: impl Into<PathBuf>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            if index.insert(img.id, i).is_some() {
                return Err(AnnotationError::Invariant(format!(
                    "duplicate image id {}",
                    img.id
                )));
            }
        }
        let mut cats = HashSet::new();
        for c in &categories {
            if !cats.insert(c.id) {
                return Err(AnnotationError::Invariant(format!(
                    "duplicate category id {}",
                    c.id
                )));
            }
        }
        let mut ann_ids = HashSet::new();
        for img in &images {
            for o in &img.objects {
                if !ann_ids.insert(o.annotation_id) {
                    return Err(AnnotationError::Invariant(format!(
                        "duplicate annotation id {}",
                        o.annotation_id
                    )));
                }
                if !o.bbox.within(img.width as f64, img.height as f64) {
                    return Err(AnnotationError::Invariant(format!(
                        "annotation {} lies outside image {}",
                        o.annotation_id, img.id
                    )));
                }
            }
        }
        let total_objects = images.iter().map(|i| i.objects.len()).sum();
        Ok(Self {
            images,
            categories,
            total_objects,
            images_root: images_root.into(),
            index,
        })
    }

    pub fn image(&self, id: u64) -> Option<&SourceImage> {
        self.index.get(&id).map(|&i| &self.images[i])
    }

    pub fn image_ids(&self) -> Vec<u64> {
        self.images.iter().map(|i| i.id).collect()
    }

    /// Non-crowd objects, which are the only ones eligible for pasting.
    pub fn candidate_objects(&self) -> impl Iterator<Item = (&SourceImage, &SourceObject)> {
        self.images
            .iter()
            .flat_map(|img| img.objects.iter().map(move |o| (img, o)))
            .filter(|(_, o)| !o.iscrowd)
    }

    /// Smallest and largest tight-box area over candidate objects.
    pub fn area_range(&self) -> Option<(f64, f64)> {
        self.candidate_objects().map(|(_, o)| o.bbox.area()).fold(None, |acc, a| {
            Some(match acc {
                None => (a, a),
                Some((lo, hi)) => (lo.min(a), hi.max(a)),
            })
        })
    }

    pub fn image_path(&self, image: &SourceImage) -> PathBuf {
        self.images_root.join(&image.file_name)
    }
}

/// One object of a synthesized image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistilledObject {
    /// Tight box in canvas coordinates.
    pub bbox: BBox,
    pub category_id: u64,
    pub source_annotation_id: u64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistilledImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<DistilledObject>,
    pub phi: f64,
    pub diversity: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistilledDataset {
    pub images: Vec<DistilledImage>,
    pub categories: Vec<Category>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EmitSummary {
    pub annotation_path: PathBuf,
    pub images_written: usize,
    pub annotations_written: usize,
}

// ---------------------------------------------------------------------------
// Interchange records

#[derive(Debug, Serialize, Deserialize)]
struct FileRecord {
    images: Vec<ImageRecord>,
    annotations: Vec<AnnotationRecord>,
    categories: Vec<Category>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageRecord {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    diversity: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    area: f64,
    #[serde(default)]
    iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_annotation_id: Option<u64>,
}

/// Rounds to the 2-decimal precision used for serialized boxes.
pub fn round2(v: f64) -> f64 {
    let r = (v * 100.0).round() / 100.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn serialized_box(b: &BBox) -> [f64; 4] {
    let x0 = round2(b.x);
    let y0 = round2(b.y);
    [x0, y0, round2(round2(b.right()) - x0), round2(round2(b.bottom()) - y0)]
}

fn read_record(path: &Path) -> Result<FileRecord> {
    let text = fs::read_to_string(path).map_err(|source| AnnotationError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| AnnotationError::Syntax {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

fn write_record(path: &Path, record: &FileRecord) -> Result<()> {
    let io_err = |source| AnnotationError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, record)
        .map_err(|e| AnnotationError::Invariant(format!("serializing annotations: {e}")))?;
    w.write_all(b"\n").map_err(io_err)?;
    w.flush().map_err(io_err)
}

/// Reads an annotation file. Boxes are clamped to their image; boxes whose
/// clamped side is at most [`MIN_BOX_SIDE`] pixels are dropped and counted.
/// Image files are not touched here.
pub fn parse_dataset(
    annotation_file: &Path,
    images_root: &Path,
) -> Result<(SourceDataset, ParseReport)> {
    let record = read_record(annotation_file)?;
    let rec_err = |section, index, message: String| AnnotationError::Record {
        path: annotation_file.to_path_buf(),
        section,
        index,
        message,
    };

    let mut report = ParseReport::default();
    let mut images: Vec<SourceImage> = Vec::with_capacity(record.images.len());
    let mut by_id = HashMap::with_capacity(record.images.len());
    for (i, im) in record.images.into_iter().enumerate() {
        if im.width == 0 || im.height == 0 {
            return Err(rec_err("images", i, format!("image {} has zero size", im.id)));
        }
        if by_id.insert(im.id, images.len()).is_some() {
            return Err(rec_err("images", i, format!("duplicate image id {}", im.id)));
        }
        images.push(SourceImage {
            id: im.id,
            file_name: im.file_name,
            width: im.width,
            height: im.height,
            objects: Vec::new(),
        });
    }

    let mut cat_ids = HashSet::new();
    for (i, c) in record.categories.iter().enumerate() {
        if !cat_ids.insert(c.id) {
            return Err(rec_err("categories", i, format!("duplicate category id {}", c.id)));
        }
    }

    let mut ann_ids = HashSet::new();
    for (i, a) in record.annotations.into_iter().enumerate() {
        if !ann_ids.insert(a.id) {
            return Err(rec_err("annotations", i, format!("duplicate annotation id {}", a.id)));
        }
        let Some(&slot) = by_id.get(&a.image_id) else {
            return Err(rec_err(
                "annotations",
                i,
                format!("annotation {} references unknown image {}", a.id, a.image_id),
            ));
        };
        if !cat_ids.contains(&a.category_id) {
            return Err(rec_err(
                "annotations",
                i,
                format!(
                    "annotation {} references unknown category {}",
                    a.id, a.category_id
                ),
            ));
        }
        let img = &mut images[slot];
        let (w, h) = (img.width as f64, img.height as f64);
        let [x, y, bw, bh] = a.bbox;
        let clamped = BBox::new(x, y, bw, bh).and_then(|b| {
            let c = b.clamp_to(w, h)?;
            if c != b {
                report.clamped += 1;
            }
            Some(c)
        });
        match clamped {
            Some(b) if b.w > MIN_BOX_SIDE && b.h > MIN_BOX_SIDE => {
                let iscrowd = a.iscrowd == 1;
                if iscrowd {
                    report.crowd += 1;
                }
                img.objects.push(SourceObject {
                    annotation_id: a.id,
                    bbox: b,
                    category_id: a.category_id,
                    iscrowd,
                });
            }
            _ => report.dropped_degenerate += 1,
        }
    }

    let dataset = SourceDataset::new(images, record.categories, images_root)?;
    Ok((dataset, report))
}

/// Writes a source dataset in the interchange schema.
pub fn write_source_dataset(dataset: &SourceDataset, annotation_file: &Path) -> Result<()> {
    let mut annotations = Vec::with_capacity(dataset.total_objects);
    let mut images = Vec::with_capacity(dataset.images.len());
    for img in &dataset.images {
        images.push(ImageRecord {
            id: img.id,
            file_name: img.file_name.clone(),
            width: img.width,
            height: img.height,
            phi: None,
            diversity: None,
        });
        for o in &img.objects {
            let bbox = serialized_box(&o.bbox);
            annotations.push(AnnotationRecord {
                id: o.annotation_id,
                image_id: img.id,
                category_id: o.category_id,
                bbox,
                area: round2(bbox[2] * bbox[3]),
                iscrowd: o.iscrowd as u8,
                score: None,
                source_annotation_id: None,
            });
        }
    }
    write_record(
        annotation_file,
        &FileRecord {
            images,
            annotations,
            categories: dataset.categories.clone(),
        },
    )
}

/// Writes `annotations.json` and one PNG per image under `output_root`.
///
/// `pixels` supplies the canvas for each image; images are encoded in
/// parallel on the ambient rayon pool.
pub fn emit_dataset<F>(
    dataset: &DistilledDataset,
    output_root: &Path,
    pixels: F,
) -> Result<EmitSummary>
where
    F: Fn(&DistilledImage) -> Result<PixelBuffer, CompositorError> + Sync,
{
    let mut seen = HashSet::new();
    for img in &dataset.images {
        if !seen.insert(img.id) {
            return Err(AnnotationError::Invariant(format!(
                "duplicate distilled image id {}",
                img.id
            )));
        }
    }

    let image_dir = output_root.join(IMAGE_DIR);
    fs::create_dir_all(&image_dir).map_err(|source| AnnotationError::Io {
        path: image_dir.clone(),
        source,
    })?;

    dataset.images.par_iter().try_for_each(|img| -> Result<()> {
        let buf = pixels(img).map_err(|source| AnnotationError::Render { id: img.id, source })?;
        if buf.width != img.width || buf.height != img.height {
            return Err(AnnotationError::Invariant(format!(
                "image {} rendered at {}x{}, expected {}x{}",
                img.id, buf.width, buf.height, img.width, img.height
            )));
        }
        let png = encode_png(&buf).map_err(|source| AnnotationError::Render { id: img.id, source })?;
        let path = image_dir.join(&img.file_name);
        fs::write(&path, png).map_err(|source| AnnotationError::Io { path, source })
    })?;

    let mut images = Vec::with_capacity(dataset.images.len());
    let mut annotations = Vec::new();
    let mut next_id = 1u64;
    for img in &dataset.images {
        images.push(ImageRecord {
            id: img.id,
            file_name: img.file_name.clone(),
            width: img.width,
            height: img.height,
            phi: Some(img.phi),
            diversity: Some(img.diversity),
        });
        for o in &img.objects {
            let bbox = serialized_box(&o.bbox);
            annotations.push(AnnotationRecord {
                id: next_id,
                image_id: img.id,
                category_id: o.category_id,
                bbox,
                area: round2(bbox[2] * bbox[3]),
                iscrowd: 0,
                score: Some(o.confidence),
                source_annotation_id: Some(o.source_annotation_id),
            });
            next_id += 1;
        }
    }
    let annotation_path = output_root.join(ANNOTATION_FILE);
    let annotations_written = annotations.len();
    write_record(
        &annotation_path,
        &FileRecord {
            images,
            annotations,
            categories: dataset.categories.clone(),
        },
    )?;

    Ok(EmitSummary {
        annotation_path,
        images_written: dataset.images.len(),
        annotations_written,
    })
}

/// Reads an annotation file written by [`emit_dataset`].
pub fn read_distilled(annotation_file: &Path) -> Result<DistilledDataset> {
    let record = read_record(annotation_file)?;
    let rec_err = |section, index, message: String| AnnotationError::Record {
        path: annotation_file.to_path_buf(),
        section,
        index,
        message,
    };

    let mut images = Vec::with_capacity(record.images.len());
    let mut by_id = HashMap::new();
    for (i, im) in record.images.into_iter().enumerate() {
        let (Some(phi), Some(diversity)) = (im.phi, im.diversity) else {
            return Err(rec_err("images", i, "missing phi/diversity".into()));
        };
        if by_id.insert(im.id, images.len()).is_some() {
            return Err(rec_err("images", i, format!("duplicate image id {}", im.id)));
        }
        images.push(DistilledImage {
            id: im.id,
            file_name: im.file_name,
            width: im.width,
            height: im.height,
            objects: Vec::new(),
            phi,
            diversity,
        });
    }
    for (i, a) in record.annotations.into_iter().enumerate() {
        let Some(&slot) = by_id.get(&a.image_id) else {
            return Err(rec_err("annotations", i, format!("unknown image {}", a.image_id)));
        };
        let (Some(confidence), Some(source_annotation_id)) = (a.score, a.source_annotation_id)
        else {
            return Err(rec_err("annotations", i, "missing score/source_annotation_id".into()));
        };
        let [x, y, w, h] = a.bbox;
        let bbox = BBox::new(x, y, w, h)
            .ok_or_else(|| rec_err("annotations", i, format!("degenerate box {:?}", a.bbox)))?;
        images[slot].objects.push(DistilledObject {
            bbox,
            category_id: a.category_id,
            source_annotation_id,
            confidence,
        });
    }
    Ok(DistilledDataset {
        images,
        categories: record.categories,
    })
}

/// Category histogram over annotation counts (`objects`) and over the
/// number of images containing the category (`images`).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CategoryCounts {
    pub objects: std::collections::BTreeMap<u64, usize>,
    pub images: std::collections::BTreeMap<u64, usize>,
}

impl CategoryCounts {
    fn add_image(&mut self, cats: impl Iterator<Item = u64>) {
        let mut present = HashSet::new();
        for c in cats {
            *self.objects.entry(c).or_default() += 1;
            present.insert(c);
        }
        for c in present {
            *self.images.entry(c).or_default() += 1;
        }
    }

    pub fn of_source(d: &SourceDataset) -> Self {
        let mut counts = Self::default();
        for img in &d.images {
            counts.add_image(img.objects.iter().filter(|o| !o.iscrowd).map(|o| o.category_id));
        }
        counts
    }

    pub fn of_distilled(d: &DistilledDataset) -> Self {
        let mut counts = Self::default();
        for img in &d.images {
            counts.add_image(img.objects.iter().map(|o| o.category_id));
        }
        counts
    }
}

/// Half the L1 distance between two count histograms after normalization.
/// An empty histogram is treated as all-zero mass.
pub fn total_variation(
    a: &std::collections::BTreeMap<u64, usize>,
    b: &std::collections::BTreeMap<u64, usize>,
) -> f64 {
    let na: usize = a.values().sum();
    let nb: usize = b.values().sum();
    let keys: std::collections::BTreeSet<u64> = a.keys().chain(b.keys()).copied().collect();
    let frac = |m: &std::collections::BTreeMap<u64, usize>, n: usize, k: u64| {
        if n == 0 {
            0.0
        } else {
            *m.get(&k).unwrap_or(&0) as f64 / n as f64
        }
    };
    0.5 * keys
        .into_iter()
        .map(|k| (frac(a, na, k) - frac(b, nb, k)).abs())
        .sum::<f64>()
}
