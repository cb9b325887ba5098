//! Candidate selection: scale-aware context extension and random placement
//! under the overlap threshold.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{SourceDataset, SourceImage, SourceObject};
use crate::bbox::{iou, BBox};
use crate::compositor::{pixel_rect, scaled_dims};

pub const DEFAULT_TAU: f64 = 0.6;
pub const DEFAULT_MAX_ATTEMPTS: u32 = 40;
pub const DEFAULT_EXTENSION_PX: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementConfig {
    /// Overlap threshold; a position is admissible when the max IoU against
    /// every occupant is strictly below it.
    pub tau: f64,
    pub max_attempts: u32,
    /// Largest per-side context extension, reached by the smallest object.
    pub extension_px: f64,
    pub a_min: f64,
    pub a_max: f64,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            extension_px: DEFAULT_EXTENSION_PX,
            a_min: 0.0,
            a_max: 0.0,
        }
    }
}

impl PlacementConfig {
    /// Fills the area range from the dataset's candidate objects.
    pub fn with_area_range_of(mut self, dataset: &SourceDataset) -> Self {
        if let Some((lo, hi)) = dataset.area_range() {
            self.a_min = lo;
            self.a_max = hi;
        }
        self
    }
}

/// One source object ready for pasting.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectCandidate {
    pub source_annotation_id: u64,
    pub source_image_id: u64,
    pub category_id: u64,
    /// Annotated extent, source coordinates.
    pub tight_box: BBox,
    /// Pixel-aligned crop region, source coordinates; always contains `tight_box`.
    pub extended_box: BBox,
    pub area: f64,
}

impl ObjectCandidate {
    pub fn new(image: &SourceImage, object: &SourceObject, cfg: &PlacementConfig) -> Self {
        let area = object.bbox.area();
        let ext = sa_dce_extension(area, cfg.a_min, cfg.a_max, cfg.extension_px);
        Self {
            source_annotation_id: object.annotation_id,
            source_image_id: image.id,
            category_id: object.category_id,
            tight_box: object.bbox,
            extended_box: extend_box(&object.bbox, ext, (image.width, image.height)),
            area,
        }
    }
}

/// Per-side context extension in pixels: `(1 - (area - a_min) / (a_max - a_min)) * r`.
///
/// Areas outside `[a_min, a_max]` are clamped into it. A degenerate range
/// (`a_max == a_min`) yields `r / 2`.
pub fn sa_dce_extension(area: f64, a_min: f64, a_max: f64, r: f64) -> f64 {
    if a_max <= a_min {
        return r / 2.0;
    }
    let t = ((area.clamp(a_min, a_max) - a_min) / (a_max - a_min)).clamp(0.0, 1.0);
    ((1.0 - t) * r).clamp(0.0, r)
}

/// Pushes each side of `tight` outward by `extension`, clamps to the source
/// bounds, and snaps outward to whole pixels.
pub fn extend_box(tight: &BBox, extension: f64, bounds: (u32, u32)) -> BBox {
    let (w, h) = (bounds.0 as f64, bounds.1 as f64);
    let x0 = (tight.x - extension).max(0.0).floor();
    let y0 = (tight.y - extension).max(0.0).floor();
    let x1 = (tight.right() + extension).min(w).ceil().min(w);
    let y1 = (tight.bottom() + extension).min(h).ceil().min(h);
    BBox::from_corners(x0, y0, x1, y1).expect("extension of a valid box is non-empty")
}

/// A candidate prepared for a specific canvas size.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedCandidate {
    pub candidate: ObjectCandidate,
    /// Uniform downscale factor, `<= 1`.
    pub scale: f64,
    /// Patch size in canvas pixels.
    pub patch_size: (u32, u32),
    /// Tight box relative to the patch origin, canvas pixels.
    pub tight_in_patch: BBox,
}

/// Downscales candidates whose extended box does not fit the canvas so
/// that it fits with a 1-pixel margin on each side.
pub fn resize_to_fit(candidate: &ObjectCandidate, canvas: (u32, u32)) -> FittedCandidate {
    let (_, _, pw, ph) = pixel_rect(&candidate.extended_box);
    let (cw, ch) = (canvas.0 as f64, canvas.1 as f64);
    let scale = if pw as f64 > cw || ph as f64 > ch {
        ((cw - 2.0) / pw as f64).min((ch - 2.0) / ph as f64).clamp(f64::MIN_POSITIVE, 1.0)
    } else {
        1.0
    };
    let (sw, sh) = scaled_dims(pw, ph, scale);
    // Per-axis pixel ratio actually realized by the resampled patch.
    let sx = sw as f64 / pw as f64;
    let sy = sh as f64 / ph as f64;
    let ext = &candidate.extended_box;
    let t = &candidate.tight_box;
    let x0 = (t.x - ext.x) * sx;
    let y0 = (t.y - ext.y) * sy;
    let x1 = ((t.right() - ext.x) * sx).min(sw as f64);
    let y1 = ((t.bottom() - ext.y) * sy).min(sh as f64);
    FittedCandidate {
        candidate: candidate.clone(),
        scale,
        patch_size: (sw, sh),
        tight_in_patch: BBox::from_corners(x0, y0, x1, y1)
            .expect("scaled tight box keeps positive extent"),
    }
}

/// An accepted candidate on a canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub candidate: ObjectCandidate,
    pub scale: f64,
    /// Top-left of the extended patch on the canvas.
    pub position: (u32, u32),
    pub placed_extended: BBox,
    pub placed_tight: BBox,
}

impl FittedCandidate {
    pub fn at(&self, x: u32, y: u32) -> Placement {
        let (pw, ph) = self.patch_size;
        Placement {
            candidate: self.candidate.clone(),
            scale: self.scale,
            position: (x, y),
            placed_extended: BBox::new(x as f64, y as f64, pw as f64, ph as f64)
                .expect("patch has positive size"),
            placed_tight: self.tight_in_patch.translate(x as f64, y as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlaceOutcome {
    Placed { placement: Placement, attempts: u32 },
    Rejected { attempts: u32 },
}

impl PlaceOutcome {
    pub fn attempts(&self) -> u32 {
        match self {
            PlaceOutcome::Placed { attempts, .. } | PlaceOutcome::Rejected { attempts } => *attempts,
        }
    }
}

/// Largest IoU between `b` and any occupant's extended box.
pub fn max_overlap(b: &BBox, occupants: &[Placement]) -> f64 {
    occupants
        .iter()
        .map(|o| iou(b, &o.placed_extended))
        .fold(0.0, f64::max)
}

/// Proposes up to `max_attempts` uniformly random positions and accepts the
/// first whose extended box overlaps every occupant with IoU below `tau`.
pub fn try_place<R: Rng + ?Sized>(
    fitted: &FittedCandidate,
    occupants: &[Placement],
    canvas: (u32, u32),
    cfg: &PlacementConfig,
    rng: &mut R,
) -> PlaceOutcome {
    let (pw, ph) = fitted.patch_size;
    if pw > canvas.0 || ph > canvas.1 {
        return PlaceOutcome::Rejected { attempts: 0 };
    }
    for attempt in 1..=cfg.max_attempts {
        let x = rng.random_range(0..=canvas.0 - pw);
        let y = rng.random_range(0..=canvas.1 - ph);
        let proposal = fitted.at(x, y);
        if max_overlap(&proposal.placed_extended, occupants) < cfg.tau {
            return PlaceOutcome::Placed {
                placement: proposal,
                attempts: attempt,
            };
        }
    }
    PlaceOutcome::Rejected {
        attempts: cfg.max_attempts,
    }
}
