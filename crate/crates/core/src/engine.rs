//! The add-then-remove loop that turns one segment of source images into
//! one synthesized canvas, and the driver that runs every segment.
//!
//! Per canvas: pick a background, shuffle the segment's objects into a
//! candidate pool, then alternate an add pass (random placement under the
//! overlap threshold) with a screening pass (drop occupants the observer
//! scores below `eta`) until the canvas is full or `t_max` rounds have run.
//! Screened-out candidates never return to the pool.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{
    emit_dataset, AnnotationError, DistilledDataset, DistilledImage, DistilledObject, EmitSummary,
    SourceDataset,
};
use crate::compositor::{render_canvas, CompositorError, ImageSource, PixelBuffer};
use crate::observer::{
    score_canvas, ObserverBackend, ObserverError, ObserverRequest, PlacedObject, DEFAULT_IOU_FLOOR,
};
use crate::placement::{resize_to_fit, try_place, ObjectCandidate, PlaceOutcome, Placement, PlacementConfig};
use crate::sampling::SegmentPlan;
use crate::seed::rng_for;

pub const DEFAULT_ETA: f64 = 0.2;
pub const DEFAULT_T_MAX: u32 = 5;
pub const DEFAULT_PATIENCE: u32 = 50;
pub const COCO_CANVAS: (u32, u32) = (484, 578);
pub const VOC_CANVAS: (u32, u32) = (375, 500);

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("canvas {canvas}: observer: {source}")]
    Observer {
        canvas: u64,
        #[source]
        source: ObserverError,
    },
    #[error("canvas {canvas}: rendering: {source}")]
    Render {
        canvas: u64,
        #[source]
        source: CompositorError,
    },
    #[error("canvas {canvas}: occupant {annotation_id} has not been scored")]
    Unscored { canvas: u64, annotation_id: u64 },
    #[error("canvas {0}: empty segment")]
    EmptySegment(u64),
    #[error("invalid engine configuration: {0}")]
    Config(String),
}

impl EngineError {
    pub fn observer_error(&self) -> Option<&ObserverError> {
        match self {
            EngineError::Observer { source, .. } => Some(source),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundMode {
    /// Background drawn from the canvas's own segment.
    #[default]
    Segment,
    /// Background drawn from the whole dataset.
    Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub eta: f64,
    pub t_max: u32,
    /// Consecutive rejections that end an add pass and declare the canvas full.
    pub patience: u32,
    pub placement: PlacementConfig,
    pub canvas: (u32, u32),
    pub seed: u64,
    pub iou_floor: f64,
    pub background: BackgroundMode,
    /// Canvas worker pool width; 0 means available parallelism.
    pub workers: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            eta: DEFAULT_ETA,
            t_max: DEFAULT_T_MAX,
            patience: DEFAULT_PATIENCE,
            placement: PlacementConfig::default(),
            canvas: COCO_CANVAS,
            seed: 0,
            iou_floor: DEFAULT_IOU_FLOOR,
            background: BackgroundMode::Segment,
            workers: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta {} outside [0, 1]", self.eta));
        }
        if self.t_max == 0 {
            return bad("t_max must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be positive".into());
        }
        if !(self.placement.tau > 0.0 && self.placement.tau <= 1.0) {
            return bad(format!("tau {} outside (0, 1]", self.placement.tau));
        }
        if self.placement.max_attempts == 0 {
            return bad("max_attempts must be positive".into());
        }
        if !(self.placement.extension_px >= 0.0) {
            return bad(format!("extension_px {} is negative", self.placement.extension_px));
        }
        if self.canvas.0 < 3 || self.canvas.1 < 3 {
            return bad(format!("canvas {}x{} too small", self.canvas.0, self.canvas.1));
        }
        if !(0.0..=1.0).contains(&self.iou_floor) {
            return bad(format!("iou_floor {} outside [0, 1]", self.iou_floor));
        }
        Ok(())
    }

    /// Placement settings with the dataset-wide area range filled in when unset.
    fn placement_for(&self, dataset: &SourceDataset) -> PlacementConfig {
        if self.placement.a_max > self.placement.a_min {
            self.placement
        } else {
            self.placement.with_area_range_of(dataset)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Occupant {
    pub placement: Placement,
    /// Latest observer confidence; `None` until the first screening after placement.
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanvasStats {
    pub placed: usize,
    pub removed: usize,
    pub rejected: usize,
    pub attempts: u64,
    pub observer_calls: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub background_image_id: u64,
    /// Paste order; later occupants cover earlier ones.
    pub occupants: Vec<Occupant>,
    /// Completed add-then-remove rounds.
    pub iteration: u32,
    pub full: bool,
    pub stats: CanvasStats,
}

impl Canvas {
    pub fn new(id: u64, dims: (u32, u32), background_image_id: u64) -> Self {
        Self {
            id,
            width: dims.0,
            height: dims.1,
            background_image_id,
            occupants: Vec::new(),
            iteration: 0,
            full: false,
            stats: CanvasStats::default(),
        }
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn placements(&self) -> Vec<Placement> {
        self.occupants.iter().map(|o| o.placement.clone()).collect()
    }

    /// Observer request for the current occupants, keyed by source annotation id.
    pub fn request(&self, pixels: Arc<PixelBuffer>) -> ObserverRequest {
        ObserverRequest {
            canvas_id: self.id,
            pixels,
            objects: self
                .occupants
                .iter()
                .map(|o| PlacedObject {
                    key: o.placement.candidate.source_annotation_id,
                    bbox: o.placement.placed_tight,
                    category_id: o.placement.candidate.category_id,
                })
                .collect(),
        }
    }
}

/// Candidates not yet placed on a canvas, visited cyclically from `cursor`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidatePool {
    pending: Vec<ObjectCandidate>,
    cursor: usize,
}

impl CandidatePool {
    pub fn new(candidates: Vec<ObjectCandidate>) -> Self {
        Self {
            pending: candidates,
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn pending(&self) -> &[ObjectCandidate] {
        &self.pending
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AddReport {
    pub accepted: usize,
    pub rejected: usize,
}

/// One add pass: offers pending candidates in pool order, at most one full
/// cycle, stopping early after `patience` consecutive rejections. Accepted
/// candidates leave the pool. Marks the canvas full when the pass accepted
/// nothing, hit the patience limit, or emptied the pool.
pub fn f_add<R: Rng + ?Sized>(
    canvas: &mut Canvas,
    pool: &mut CandidatePool,
    cfg: &EngineConfig,
    rng: &mut R,
) -> AddReport {
    let mut report = AddReport::default();
    let mut occupied = canvas.placements();
    let mut consecutive = 0;
    let mut remaining = pool.pending.len();
    let mut idx = pool.cursor;
    while remaining > 0 && !pool.pending.is_empty() {
        remaining -= 1;
        idx %= pool.pending.len();
        let fitted = resize_to_fit(&pool.pending[idx], canvas.dims());
        let outcome = try_place(&fitted, &occupied, canvas.dims(), &cfg.placement, rng);
        canvas.stats.attempts += u64::from(outcome.attempts());
        match outcome {
            PlaceOutcome::Placed { placement, .. } => {
                pool.pending.remove(idx);
                occupied.push(placement.clone());
                canvas.occupants.push(Occupant {
                    placement,
                    confidence: None,
                });
                report.accepted += 1;
                consecutive = 0;
            }
            PlaceOutcome::Rejected { .. } => {
                idx += 1;
                report.rejected += 1;
                consecutive += 1;
                if consecutive >= cfg.patience {
                    canvas.full = true;
                    break;
                }
            }
        }
    }
    pool.cursor = if pool.pending.is_empty() { 0 } else { idx % pool.pending.len() };
    if report.accepted == 0 || pool.pending.is_empty() {
        canvas.full = true;
    }
    canvas.stats.placed += report.accepted;
    canvas.stats.rejected += report.rejected;
    report
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemoveReport {
    pub removed: usize,
    /// Φ of the canvas as scored, before anything was removed.
    pub phi_scored: f64,
    pub phi_after: f64,
    pub removed_ids: Vec<u64>,
}

/// Scores every occupant against `pixels` (the rendered canvas) and drops
/// those below `eta`. Survivors keep their new scores.
pub fn f_remove(
    canvas: &mut Canvas,
    backend: &dyn ObserverBackend,
    pixels: Arc<PixelBuffer>,
    cfg: &EngineConfig,
) -> Result<RemoveReport, EngineError> {
    if canvas.occupants.is_empty() {
        return Ok(RemoveReport {
            removed: 0,
            phi_scored: 0.0,
            phi_after: 0.0,
            removed_ids: Vec::new(),
        });
    }
    let request = canvas.request(pixels);
    let scores = score_canvas(&request, backend, cfg.iou_floor).map_err(|source| {
        EngineError::Observer {
            canvas: canvas.id,
            source,
        }
    })?;
    canvas.stats.observer_calls += 1;
    for (occ, s) in canvas.occupants.iter_mut().zip(&scores) {
        debug_assert_eq!(occ.placement.candidate.source_annotation_id, s.key);
        occ.confidence = Some(s.confidence);
    }
    let phi_scored = information_density(canvas)?;
    let mut removed_ids = Vec::new();
    canvas.occupants.retain(|o| {
        let keep = o.confidence.is_some_and(|q| q >= cfg.eta);
        if !keep {
            removed_ids.push(o.placement.candidate.source_annotation_id);
        }
        keep
    });
    canvas.stats.removed += removed_ids.len();
    Ok(RemoveReport {
        removed: removed_ids.len(),
        phi_scored,
        phi_after: information_density(canvas)?,
        removed_ids,
    })
}

/// Area-weighted mean confidence over tight-box areas; 0 for an empty canvas.
pub fn information_density(canvas: &Canvas) -> Result<f64, EngineError> {
    let mut num = 0.0;
    let mut den = 0.0;
    for o in &canvas.occupants {
        let q = o.confidence.ok_or(EngineError::Unscored {
            canvas: canvas.id,
            annotation_id: o.placement.candidate.source_annotation_id,
        })?;
        let a = o.placement.placed_tight.area();
        num += a * q;
        den += a;
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Number of distinct source objects on the canvas.
pub fn diversity(canvas: &Canvas) -> usize {
    canvas
        .occupants
        .iter()
        .map(|o| o.placement.candidate.source_annotation_id)
        .collect::<HashSet<_>>()
        .len()
}

pub fn objective(canvas: &Canvas) -> Result<f64, EngineError> {
    Ok(information_density(canvas)? + diversity(canvas) as f64)
}

/// State after one add-then-remove round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: u32,
    pub accepted: usize,
    pub rejected: usize,
    pub removed: usize,
    pub phi_scored: f64,
    pub phi: f64,
    pub diversity: usize,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct CanvasResult {
    pub canvas: Canvas,
    pub image: DistilledImage,
    pub rounds: Vec<RoundRecord>,
    pub segment_candidates: usize,
}

/// Renders the current canvas state to feed the observer.
pub type Renderer<'a> = dyn Fn(&Canvas) -> Result<PixelBuffer, CompositorError> + Sync + 'a;

pub fn image_file_name(id: u64) -> String {
    format!("{id:06}.png")
}

/// Runs the full add-then-remove procedure for one canvas.
pub fn synthesize_canvas(
    id: u64,
    segment: &[u64],
    dataset: &SourceDataset,
    images: &dyn ImageSource,
    backend: &dyn ObserverBackend,
    cfg: &EngineConfig,
) -> Result<CanvasResult, EngineError> {
    let render = |c: &Canvas| render_canvas(c, dataset, images);
    synthesize_canvas_with(id, segment, dataset, &render, backend, cfg)
}

/// As [`synthesize_canvas`], with a caller-supplied renderer.
pub fn synthesize_canvas_with(
    id: u64,
    segment: &[u64],
    dataset: &SourceDataset,
    render: &Renderer<'_>,
    backend: &dyn ObserverBackend,
    cfg: &EngineConfig,
) -> Result<CanvasResult, EngineError> {
    if segment.is_empty() {
        return Err(EngineError::EmptySegment(id));
    }
    let mut rng = rng_for(&[cfg.seed, id]);
    let background = match cfg.background {
        BackgroundMode::Segment => segment[rng.random_range(0..segment.len())],
        BackgroundMode::Dataset => dataset.images[rng.random_range(0..dataset.images.len())].id,
    };
    let pcfg = cfg.placement_for(dataset);
    let mut candidates: Vec<ObjectCandidate> = segment
        .iter()
        .filter_map(|sid| dataset.image(*sid))
        .flat_map(|img| {
            img.objects
                .iter()
                .filter(|o| !o.iscrowd)
                .map(move |o| ObjectCandidate::new(img, o, &pcfg))
        })
        .collect();
    candidates.shuffle(&mut rng);
    let segment_candidates = candidates.len();
    if candidates.is_empty() {
        log::warn!("canvas {id}: segment has no usable objects; emitting background only");
    }
    let run_cfg = EngineConfig {
        placement: pcfg,
        ..*cfg
    };

    let mut canvas = Canvas::new(id, cfg.canvas, background);
    let mut pool = CandidatePool::new(candidates);
    let mut rounds = Vec::new();
    while canvas.iteration < cfg.t_max && !pool.is_empty() {
        let add = f_add(&mut canvas, &mut pool, &run_cfg, &mut rng);
        if add.accepted == 0 {
            break;
        }
        let pixels = render(&canvas).map_err(|source| EngineError::Render { canvas: id, source })?;
        let rm = f_remove(&mut canvas, backend, Arc::new(pixels), &run_cfg)?;
        canvas.iteration += 1;
        rounds.push(RoundRecord {
            round: canvas.iteration,
            accepted: add.accepted,
            rejected: add.rejected,
            removed: rm.removed,
            phi_scored: rm.phi_scored,
            phi: rm.phi_after,
            diversity: diversity(&canvas),
            objective: objective(&canvas)?,
        });
        log::debug!(
            "canvas {id} round {}: +{} -{} phi {:.4} n {}",
            canvas.iteration,
            add.accepted,
            rm.removed,
            rm.phi_after,
            canvas.occupants.len()
        );
    }

    let image = distilled_image(&canvas)?;
    Ok(CanvasResult {
        canvas,
        image,
        rounds,
        segment_candidates,
    })
}

fn distilled_image(canvas: &Canvas) -> Result<DistilledImage, EngineError> {
    let objects = canvas
        .occupants
        .iter()
        .map(|o| {
            Ok(DistilledObject {
                bbox: o.placement.placed_tight,
                category_id: o.placement.candidate.category_id,
                source_annotation_id: o.placement.candidate.source_annotation_id,
                confidence: o.confidence.ok_or(EngineError::Unscored {
                    canvas: canvas.id,
                    annotation_id: o.placement.candidate.source_annotation_id,
                })?,
            })
        })
        .collect::<Result<Vec<_>, EngineError>>()?;
    Ok(DistilledImage {
        id: canvas.id,
        file_name: image_file_name(canvas.id),
        width: canvas.width,
        height: canvas.height,
        objects,
        phi: information_density(canvas)?,
        diversity: diversity(canvas),
    })
}

/// Per-canvas manifest entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanvasRecord {
    pub id: u64,
    pub complete: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    pub segment_images: usize,
    pub segment_candidates: usize,
    pub background_image_id: Option<u64>,
    pub phi: f64,
    pub diversity: usize,
    pub objective: f64,
    pub iterations: u32,
    pub placed: usize,
    pub removed: usize,
    pub observer_calls: usize,
    pub elapsed_ms: u64,
}

pub struct CanvasOutcome {
    pub id: u64,
    pub segment: Vec<u64>,
    pub result: Result<CanvasResult, EngineError>,
    pub elapsed: Duration,
}

impl CanvasOutcome {
    pub fn record(&self) -> CanvasRecord {
        let mut rec = CanvasRecord {
            id: self.id,
            complete: self.result.is_ok(),
            error: None,
            segment_images: self.segment.len(),
            segment_candidates: 0,
            background_image_id: None,
            phi: 0.0,
            diversity: 0,
            objective: 0.0,
            iterations: 0,
            placed: 0,
            removed: 0,
            observer_calls: 0,
            elapsed_ms: self.elapsed.as_millis() as u64,
        };
        match &self.result {
            Ok(r) => {
                rec.segment_candidates = r.segment_candidates;
                rec.background_image_id = Some(r.canvas.background_image_id);
                rec.phi = r.image.phi;
                rec.diversity = r.image.diversity;
                rec.objective = r.image.phi + r.image.diversity as f64;
                rec.iterations = r.canvas.iteration;
                rec.placed = r.canvas.stats.placed;
                rec.removed = r.canvas.stats.removed;
                rec.observer_calls = r.canvas.stats.observer_calls;
            }
            Err(e) => rec.error = Some(e.to_string()),
        }
        rec
    }
}

pub struct DistillRun {
    /// One entry per segment, in plan order.
    pub outcomes: Vec<CanvasOutcome>,
    pub elapsed: Duration,
}

impl DistillRun {
    pub fn is_complete(&self) -> bool {
        self.outcomes.iter().all(|o| o.result.is_ok())
    }

    pub fn failures(&self) -> impl Iterator<Item = (u64, &EngineError)> {
        self.outcomes
            .iter()
            .filter_map(|o| o.result.as_ref().err().map(|e| (o.id, e)))
    }

    pub fn completed(&self) -> impl Iterator<Item = &CanvasResult> {
        self.outcomes.iter().filter_map(|o| o.result.as_ref().ok())
    }

    /// The synthesized dataset made of every completed canvas.
    pub fn dataset(&self, source: &SourceDataset) -> DistilledDataset {
        DistilledDataset {
            images: self.completed().map(|r| r.image.clone()).collect(),
            categories: source.categories.clone(),
        }
    }

    pub fn records(&self) -> Vec<CanvasRecord> {
        self.outcomes.iter().map(CanvasOutcome::record).collect()
    }

    pub fn canvas(&self, id: u64) -> Option<&Canvas> {
        self.completed().map(|r| &r.canvas).find(|c| c.id == id)
    }

    /// Writes every completed canvas and its annotations under `out`.
    pub fn emit(
        &self,
        source: &SourceDataset,
        images: &dyn ImageSource,
        out: &Path,
    ) -> Result<EmitSummary, AnnotationError> {
        emit_dataset(&self.dataset(source), out, |img| {
            let canvas = self.canvas(img.id).ok_or(CompositorError::MissingImage(img.id))?;
            render_canvas(canvas, source, images)
        })
    }
}

/// Synthesizes one canvas per plan segment on a pool of `cfg.workers`
/// threads. Canvas ids are 1-based segment positions. Canvas failures are
/// recorded in the outcome rather than aborting the run.
pub fn distill(
    dataset: &SourceDataset,
    plan: &SegmentPlan,
    images: &dyn ImageSource,
    backend: &dyn ObserverBackend,
    cfg: &EngineConfig,
) -> Result<DistillRun, EngineError> {
    let render = |c: &Canvas| render_canvas(c, dataset, images);
    distill_with(dataset, plan, &render, backend, cfg)
}

pub fn distill_with(
    dataset: &SourceDataset,
    plan: &SegmentPlan,
    render: &Renderer<'_>,
    backend: &dyn ObserverBackend,
    cfg: &EngineConfig,
) -> Result<DistillRun, EngineError> {
    cfg.validate()?;
    for seg in &plan.segments {
        if let Some(id) = seg.iter().find(|id| dataset.image(**id).is_none()) {
            return Err(EngineError::Config(format!("plan references unknown image {id}")));
        }
    }
    let started = Instant::now();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if cfg.workers > 0 {
        builder = builder.num_threads(cfg.workers);
    }
    let pool = builder
        .build()
        .map_err(|e| EngineError::Config(format!("worker pool: {e}")))?;
    let outcomes = pool.install(|| {
        plan.segments
            .par_iter()
            .enumerate()
            .map(|(k, seg)| {
                let id = k as u64 + 1;
                let t = Instant::now();
                let result = synthesize_canvas_with(id, seg, dataset, render, backend, cfg);
                if let Err(e) = &result {
                    log::error!("{e}");
                }
                CanvasOutcome {
                    id,
                    segment: seg.clone(),
                    result,
                    elapsed: t.elapsed(),
                }
            })
            .collect()
    });
    Ok(DistillRun {
        outcomes,
        elapsed: started.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{Category, SourceImage, SourceObject};
    use crate::bbox::{iou, BBox};
    use crate::observer::{ConstantBackend, Detection, HeuristicBackend, HeuristicParams};
    use crate::placement::FittedCandidate;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;
    use std::collections::HashMap;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn candidate(id: u64, tight: BBox) -> ObjectCandidate {
        ObjectCandidate {
            source_annotation_id: id,
            source_image_id: 1,
            category_id: 1 + id % 3,
            tight_box: tight,
            extended_box: tight,
            area: tight.area(),
        }
    }

    fn occupant(id: u64, at: (u32, u32), size: f64, q: Option<f64>) -> Occupant {
        let c = candidate(id, bx(0.0, 0.0, size, size));
        let fitted = resize_to_fit(&c, (100, 100));
        Occupant {
            placement: fitted.at(at.0, at.1),
            confidence: q,
        }
    }

    fn blank() -> Arc<PixelBuffer> {
        Arc::new(PixelBuffer::new(100, 100))
    }

    /// Scores by annotation id.
    struct ById(HashMap<u64, f64>);

    impl ObserverBackend for ById {
        fn detect(&self, r: &ObserverRequest) -> Result<Vec<Detection>, ObserverError> {
            Ok(r.objects
                .iter()
                .map(|o| Detection { bbox: o.bbox, category_id: o.category_id, score: self.0[&o.key] })
                .collect())
        }
        fn describe(&self) -> String {
            "by-id".into()
        }
    }

    struct Failing;

    impl ObserverBackend for Failing {
        fn detect(&self, _: &ObserverRequest) -> Result<Vec<Detection>, ObserverError> {
            Err(ObserverError::Transport("down".into()))
        }
        fn describe(&self) -> String {
            "failing".into()
        }
    }

    fn small_cfg() -> EngineConfig {
        EngineConfig {
            canvas: (100, 100),
            placement: PlacementConfig { a_min: 1.0, a_max: 10_000.0, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn add_places_single_small_candidate() {
        let mut canvas = Canvas::new(1, (100, 100), 1);
        let mut pool = CandidatePool::new(vec![candidate(1, bx(0.0, 0.0, 10.0, 10.0))]);
        let r = f_add(&mut canvas, &mut pool, &small_cfg(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(r.accepted, 1);
        assert_eq!(canvas.occupants.len(), 1);
        assert!(pool.is_empty());
        assert!(canvas.full);
    }

    #[test]
    fn add_with_empty_pool_changes_nothing() {
        let mut canvas = Canvas::new(1, (100, 100), 1);
        let before = canvas.occupants.clone();
        let mut pool = CandidatePool::default();
        let r = f_add(&mut canvas, &mut pool, &small_cfg(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(r, AddReport::default());
        assert_eq!(canvas.occupants, before);
        assert_eq!(pool.cursor(), 0);
    }

    #[test]
    fn patience_declares_full_and_leaves_rest_of_pool() {
        // A full-canvas occupant: any same-size candidate would have IoU 1.
        let mut canvas = Canvas::new(1, (100, 100), 1);
        canvas.occupants.push(occupant(100, (0, 0), 100.0, Some(1.0)));
        let blockers: Vec<_> = (1..=3).map(|i| candidate(i, bx(0.0, 0.0, 100.0, 100.0))).collect();
        let tail: Vec<_> = (4..=6).map(|i| candidate(i, bx(0.0, 0.0, 5.0, 5.0))).collect();
        let mut pool = CandidatePool::new(blockers.iter().chain(&tail).cloned().collect());
        let cfg = EngineConfig { patience: 3, ..small_cfg() };
        let r = f_add(&mut canvas, &mut pool, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(r, AddReport { accepted: 0, rejected: 3 });
        assert!(canvas.full);
        assert_eq!(canvas.occupants.len(), 1);
        assert_eq!(pool.len(), 6);
        assert_eq!(&pool.pending()[3..], tail.as_slice());
        assert_eq!(pool.cursor(), 3);
    }

    #[test]
    fn remove_keeps_everything_at_or_above_eta() {
        let mut canvas = Canvas::new(1, (100, 100), 1);
        canvas.occupants.push(occupant(1, (0, 0), 10.0, None));
        canvas.occupants.push(occupant(2, (50, 50), 10.0, None));
        let r = f_remove(&mut canvas, &ConstantBackend { score: 0.2 }, blank(), &small_cfg()).unwrap();
        assert_eq!(r.removed, 0);
        assert_eq!(canvas.occupants.len(), 2);
        assert!(canvas.occupants.iter().all(|o| o.confidence == Some(0.2)));
    }

    #[test]
    fn remove_everything_below_eta() {
        let mut canvas = Canvas::new(1, (100, 100), 1);
        canvas.occupants.push(occupant(1, (0, 0), 10.0, None));
        canvas.occupants.push(occupant(2, (50, 50), 10.0, None));
        f_remove(&mut canvas, &ConstantBackend { score: 0.19 }, blank(), &small_cfg()).unwrap();
        assert!(canvas.occupants.is_empty());
        assert_eq!(information_density(&canvas).unwrap(), 0.0);
    }

    #[test]
    fn remove_threshold_partition() {
        let mut canvas = Canvas::new(1, (100, 100), 1);
        for (i, at) in [(0, 0), (40, 0), (0, 40)].into_iter().enumerate() {
            canvas.occupants.push(occupant(i as u64 + 1, at, 20.0, None));
        }
        let backend = ById(HashMap::from([(1, 0.1), (2, 0.3), (3, 0.9)]));
        let r = f_remove(&mut canvas, &backend, blank(), &small_cfg()).unwrap();
        assert_eq!(r.removed_ids, vec![1]);
        let left: Vec<_> = canvas.occupants.iter().map(|o| o.confidence.unwrap()).collect();
        assert_eq!(left, vec![0.3, 0.9]);
        // Equal areas: (0.1 + 0.3 + 0.9) / 3 before, (0.3 + 0.9) / 2 after.
        assert!((r.phi_scored - 1.3 / 3.0).abs() < 1e-12);
        assert!((r.phi_after - 0.6).abs() < 1e-12);
    }

    #[test]
    fn remove_propagates_observer_errors() {
        let mut canvas = Canvas::new(9, (100, 100), 1);
        canvas.occupants.push(occupant(1, (0, 0), 10.0, None));
        let err = f_remove(&mut canvas, &Failing, blank(), &small_cfg()).unwrap_err();
        assert!(matches!(err, EngineError::Observer { canvas: 9, .. }));
    }

    #[test]
    fn density_examples() {
        let mut canvas = Canvas::new(1, (100, 100), 1);
        assert_eq!(information_density(&canvas).unwrap(), 0.0);
        canvas.occupants.push(occupant(1, (0, 0), 10.0, Some(0.7)));
        assert_eq!(information_density(&canvas).unwrap(), 0.7);
        canvas.occupants[0].confidence = Some(0.4);
        canvas.occupants.push(occupant(2, (50, 50), 10.0, Some(0.8)));
        assert!((information_density(&canvas).unwrap() - 0.6).abs() < 1e-12);
        // Unequal areas weight by tight-box area: (100*0.4 + 400*0.8) / 500.
        canvas.occupants[1] = occupant(2, (50, 50), 20.0, Some(0.8));
        assert!((information_density(&canvas).unwrap() - 0.72).abs() < 1e-12);
    }

    #[test]
    fn unscored_occupant_is_a_state_error() {
        let mut canvas = Canvas::new(1, (100, 100), 1);
        canvas.occupants.push(occupant(5, (0, 0), 10.0, None));
        assert!(matches!(
            information_density(&canvas),
            Err(EngineError::Unscored { annotation_id: 5, .. })
        ));
    }

    #[test]
    fn diversity_and_objective() {
        let mut canvas = Canvas::new(1, (100, 100), 1);
        assert_eq!(diversity(&canvas), 0);
        assert_eq!(objective(&canvas).unwrap(), 0.0);
        for i in 0..5 {
            canvas.occupants.push(occupant(i, (i as u32 * 15, 0), 10.0, Some(0.6)));
        }
        assert_eq!(diversity(&canvas), 5);
        assert_eq!(diversity(&canvas), canvas.occupants.len());
        canvas.occupants.push(occupant(10, (0, 60), 10.0, Some(0.6)));
        canvas.occupants.push(occupant(11, (20, 60), 10.0, Some(0.6)));
        assert!((objective(&canvas).unwrap() - 7.6).abs() < 1e-12);
    }

    /// Images of 200x150 whose objects are listed per image.
    fn dataset(objects: &[&[(f64, f64, f64, f64)]]) -> SourceDataset {
        let mut ann = 0;
        let images = objects
            .iter()
            .enumerate()
            .map(|(i, objs)| SourceImage {
                id: i as u64 + 1,
                file_name: format!("{i}.png"),
                width: 200,
                height: 150,
                objects: objs
                    .iter()
                    .map(|&(x, y, w, h)| {
                        ann += 1;
                        SourceObject {
                            annotation_id: ann,
                            bbox: bx(x, y, w, h),
                            category_id: 1 + ann % 2,
                            iscrowd: false,
                        }
                    })
                    .collect(),
            })
            .collect();
        let cats = vec![
            Category { id: 1, name: "a".into(), supercategory: String::new() },
            Category { id: 2, name: "b".into(), supercategory: String::new() },
        ];
        SourceDataset::new(images, cats, "/nonexistent").unwrap()
    }

    fn flat_render(c: &Canvas) -> Result<PixelBuffer, CompositorError> {
        Ok(PixelBuffer::new(c.width, c.height))
    }

    fn run(
        ds: &SourceDataset,
        segment: &[u64],
        backend: &dyn ObserverBackend,
        cfg: &EngineConfig,
    ) -> CanvasResult {
        synthesize_canvas_with(1, segment, ds, &flat_render, backend, cfg).unwrap()
    }

    #[test]
    fn single_object_segment_with_permissive_backend() {
        let ds = dataset(&[&[(10.0, 10.0, 30.0, 20.0)]]);
        let r = run(&ds, &[1], &ConstantBackend { score: 1.0 }, &small_cfg());
        assert_eq!(r.image.objects.len(), 1);
        assert_eq!(r.image.phi, 1.0);
        assert_eq!(r.image.diversity, 1);
        assert_eq!(r.canvas.background_image_id, 1);
    }

    #[test]
    fn zero_scores_empty_the_canvas_after_first_remove() {
        let ds = dataset(&[&[(10.0, 10.0, 30.0, 20.0), (60.0, 60.0, 20.0, 20.0)]]);
        let r = run(&ds, &[1], &ConstantBackend { score: 0.0 }, &small_cfg());
        assert!(r.image.objects.is_empty());
        assert_eq!(r.canvas.stats.removed, 2);
        assert_eq!(r.rounds.len(), 1);
    }

    #[test]
    fn segment_without_objects_gives_background_only() {
        let ds = dataset(&[&[], &[]]);
        let r = run(&ds, &[1, 2], &ConstantBackend { score: 1.0 }, &small_cfg());
        assert!(r.image.objects.is_empty());
        assert_eq!(r.canvas.stats.observer_calls, 0);
    }

    #[test]
    fn synthesis_is_deterministic() {
        let objs: Vec<(f64, f64, f64, f64)> =
            (0..12).map(|i| (i as f64 * 10.0, 5.0 + i as f64 * 7.0, 30.0, 25.0)).collect();
        let ds = dataset(&[&objs, &objs[..5]]);
        let b = HeuristicBackend::new(HeuristicParams { seed: 3, ..Default::default() });
        let a = run(&ds, &[1, 2], &b, &small_cfg());
        let c = run(&ds, &[1, 2], &b, &small_cfg());
        assert_eq!(
            serde_json::to_string(&a.image).unwrap(),
            serde_json::to_string(&c.image).unwrap()
        );
        let other = synthesize_canvas_with(2, &[1, 2], &ds, &flat_render, &b, &small_cfg()).unwrap();
        assert_ne!(a.image.objects, other.image.objects);
    }

    #[test]
    fn objective_non_decreasing_with_fixed_scores() {
        // No occlusion term: each object's score is fixed by its size and key.
        let params = HeuristicParams { occlusion_weight: 0.0, jitter: 0.0, seed: 1, ..Default::default() };
        let b = HeuristicBackend::new(params);
        let objs: Vec<(f64, f64, f64, f64)> = (0..40)
            .map(|i| (i as f64 * 4.0, (i % 7) as f64 * 15.0, 8.0 + (i % 9) as f64 * 5.0, 10.0 + (i % 5) as f64 * 6.0))
            .collect();
        let ds = dataset(&[&objs[..20], &objs[20..]]);
        for seed in 0..20 {
            let cfg = EngineConfig { seed, patience: 4, t_max: 10, ..small_cfg() };
            let r = run(&ds, &[1, 2], &b, &cfg);
            let mut prev = 0.0;
            for round in &r.rounds {
                assert!(round.objective >= prev, "seed {seed}: {:?}", r.rounds);
                prev = round.objective;
            }
        }
    }

    #[test]
    fn removal_never_lowers_phi_and_invariants_hold() {
        let b = HeuristicBackend::new(HeuristicParams::default());
        let objs: Vec<(f64, f64, f64, f64)> =
            (0..30).map(|i| ((i * 5) as f64, (i * 3) as f64, 20.0 + (i % 4) as f64 * 10.0, 30.0)).collect();
        let ds = dataset(&[&objs]);
        for seed in 0..10 {
            let cfg = EngineConfig { seed, ..small_cfg() };
            let r = run(&ds, &[1], &b, &cfg);
            for round in &r.rounds {
                if round.diversity > 0 {
                    assert!(round.phi >= round.phi_scored - 1e-12);
                }
            }
            assert!(r.image.objects.iter().all(|o| o.confidence >= cfg.eta));
            assert!(r.canvas.iteration <= cfg.t_max);
            let occ = &r.canvas.occupants;
            for i in 0..occ.len() {
                for j in i + 1..occ.len() {
                    assert!(iou(&occ[i].placement.placed_extended, &occ[j].placement.placed_extended) < 0.6);
                }
            }
        }
    }

    #[test]
    fn distill_covers_every_segment_and_records_failures() {
        let objs: Vec<(f64, f64, f64, f64)> = (0..6).map(|i| (i as f64 * 20.0, 10.0, 25.0, 25.0)).collect();
        let ds = dataset(&[&objs, &objs, &objs, &objs]);
        let plan = crate::sampling::build_plan(&ds, 2, 4).unwrap();
        let cfg = EngineConfig { workers: 2, ..small_cfg() };
        let ok = distill_with(&ds, &plan, &flat_render, &ConstantBackend { score: 1.0 }, &cfg).unwrap();
        assert!(ok.is_complete());
        let out = ok.dataset(&ds);
        assert_eq!(out.images.len(), 2);
        let ids: Vec<u64> = out.images.iter().flat_map(|i| i.objects.iter().map(|o| o.source_annotation_id)).collect();
        assert_eq!(ids.iter().collect::<HashSet<_>>().len(), ids.len());

        let bad = distill_with(&ds, &plan, &flat_render, &Failing, &cfg).unwrap();
        assert!(!bad.is_complete());
        assert_eq!(bad.failures().count(), 2);
        assert!(bad.records().iter().all(|r| !r.complete && r.error.is_some()));
    }

    #[test]
    fn config_validation() {
        assert!(EngineConfig::default().validate().is_ok());
        assert!(EngineConfig { eta: 1.5, ..Default::default() }.validate().is_err());
        assert!(EngineConfig { t_max: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn fitted_candidates_stay_inside_small_canvas() {
        let c = candidate(1, bx(0.0, 0.0, 300.0, 120.0));
        let f: FittedCandidate = resize_to_fit(&c, (100, 100));
        let mut canvas = Canvas::new(1, (100, 100), 1);
        let mut pool = CandidatePool::new(vec![c]);
        f_add(&mut canvas, &mut pool, &small_cfg(), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(canvas.occupants[0].placement.placed_extended.w, f.patch_size.0 as f64);
        assert!(canvas.occupants[0].placement.placed_extended.within(100.0, 100.0));
    }
}
