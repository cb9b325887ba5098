//! Deterministic stand-in for a pretrained detector.
//!
//! Each placed object yields one detection whose score drops with how much
//! of it later pastes cover and with how small it is:
//!
//! `score = clamp(base - occlusion_weight * occluded - small_weight * small + noise, 0, 1)`
//!
//! where `occluded` is the covered fraction of the tight box and
//! `small = max(0, 1 - sqrt(area) / small_side)`. Noise and box jitter come
//! from a stream seeded by `(seed, canvas_id, key)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Detection, ObserverBackend, ObserverError, ObserverRequest};
use crate::bbox::{union_area, BBox};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeuristicParams {
    pub base: f64,
    pub occlusion_weight: f64,
    pub small_weight: f64,
    /// Side length (px) at and above which no small-object penalty applies.
    pub small_side: f64,
    /// Half-width of the uniform score noise.
    pub noise: f64,
    /// Maximum per-coordinate box jitter in pixels.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for HeuristicParams {
    fn default() -> Self {
        Self {
            base: 0.9,
            occlusion_weight: 0.8,
            small_weight: 0.5,
            small_side: 32.0,
            noise: 0.1,
            jitter: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeuristicBackend {
    pub params: HeuristicParams,
}

impl HeuristicBackend {
    pub fn new(params: HeuristicParams) -> Self {
        Self { params }
    }
}

/// Fraction of `objects[index]` covered by the objects listed after it.
pub fn occlusion_fraction(objects: &[BBox], index: usize) -> f64 {
    let own = objects[index];
    let covers: Vec<BBox> = objects[index + 1..]
        .iter()
        .filter_map(|b| own.intersection(b))
        .collect();
    (union_area(&covers) / own.area()).clamp(0.0, 1.0)
}

pub fn small_penalty(area: f64, small_side: f64) -> f64 {
    if small_side <= 0.0 {
        return 0.0;
    }
    (1.0 - area.sqrt() / small_side).max(0.0)
}

impl ObserverBackend for HeuristicBackend {
    fn detect(&self, req: &ObserverRequest) -> Result<Vec<Detection>, ObserverError> {
        let p = &self.params;
        let boxes: Vec<BBox> = req.objects.iter().map(|o| o.bbox).collect();
        let (cw, ch) = (req.pixels.width as f64, req.pixels.height as f64);
        let mut out = Vec::with_capacity(boxes.len());
        for (i, o) in req.objects.iter().enumerate() {
            let mut rng = rng_for(&[p.seed, req.canvas_id, o.key]);
            let noise = if p.noise > 0.0 {
                rng.random_range(-p.noise..=p.noise)
            } else {
                0.0
            };
            let (dx, dy) = if p.jitter > 0.0 {
                (
                    rng.random_range(-p.jitter..=p.jitter),
                    rng.random_range(-p.jitter..=p.jitter),
                )
            } else {
                (0.0, 0.0)
            };
            let score = (p.base
                - p.occlusion_weight * occlusion_fraction(&boxes, i)
                - p.small_weight * small_penalty(o.bbox.area(), p.small_side)
                + noise)
                .clamp(0.0, 1.0);
            let bbox = o
                .bbox
                .translate(dx, dy)
                .clamp_to(cw, ch)
                .unwrap_or(o.bbox);
            out.push(Detection {
                bbox,
                category_id: o.category_id,
                score,
            });
        }
        Ok(out)
    }

    fn describe(&self) -> String {
        format!("heuristic({:?})", self.params)
    }
}
