//! Confidence oracle for placed objects.
//!
//! A backend runs detection on a rendered canvas; [`score_canvas`] matches
//! its detections back to the objects that were pasted and returns one
//! confidence per object. Backends:
//!
//! - [`HeuristicBackend`]: seeded, pixel-free stand-in for a detector.
//! - [`ExecBackend`]: newline-delimited JSON over a child process's stdio.
//! - [`HttpBackend`]: the same records POSTed to `<url>/score`.
//! - [`ConstantBackend`]: detects every object exactly, with a fixed score.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::{iou, BBox};
use crate::compositor::PixelBuffer;

mod heuristic;
mod transport;
pub mod wire;

pub use heuristic::{HeuristicBackend, HeuristicParams};
pub use transport::{ExecBackend, HttpBackend, TransportConfig};

/// IoU a detection needs with a placed object to count as a match.
pub const DEFAULT_IOU_FLOOR: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObserverError {
    #[error("observer transport failure: {0}")]
    Transport(String),
    #[error("observer timed out after {0:?}")]
    Timeout(Duration),
    #[error("observer protocol violation: {message} (payload: {excerpt:?})")]
    Protocol { message: String, excerpt: String },
    #[error("invalid observer spec {0:?}")]
    Spec(String),
}

impl ObserverError {
    pub fn protocol(message: impl Into<String>, payload: &str) -> Self {
        const MAX: usize = 160;
        let excerpt = if payload.len() > MAX {
            let mut end = MAX;
            while !payload.is_char_boundary(end) {
                end -= 1;
            }
            format!("{}...", &payload[..end])
        } else {
            payload.to_string()
        };
        ObserverError::Protocol {
            message: message.into(),
            excerpt,
        }
    }

    pub fn is_retriable(&self) -> bool {
        matches!(self, ObserverError::Transport(_))
    }
}

/// An object that was pasted onto the canvas under inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub key: u64,
    /// Tight box, canvas coordinates.
    pub bbox: BBox,
    pub category_id: u64,
}

/// Objects are listed in paste order: later entries occlude earlier ones.
#[derive(Debug, Clone)]
pub struct ObserverRequest {
    pub canvas_id: u64,
    pub pixels: Arc<PixelBuffer>,
    pub objects: Vec<PlacedObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub category_id: u64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObserverScore {
    pub key: u64,
    pub confidence: f64,
}

pub trait ObserverBackend: Send + Sync {
    fn detect(&self, request: &ObserverRequest) -> Result<Vec<Detection>, ObserverError>;

    fn describe(&self) -> String;
}

impl<B: ObserverBackend + ?Sized> ObserverBackend for Box<B> {
    fn detect(&self, request: &ObserverRequest) -> Result<Vec<Detection>, ObserverError> {
        (**self).detect(request)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<B: ObserverBackend + ?Sized> ObserverBackend for Arc<B> {
    fn detect(&self, request: &ObserverRequest) -> Result<Vec<Detection>, ObserverError> {
        (**self).detect(request)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

/// Greedy matching: detections in descending score order each take the
/// unmatched same-category object with the highest IoU at or above
/// `iou_floor`. Unmatched objects get 0.
pub fn match_detections(
    detections: &[Detection],
    objects: &[PlacedObject],
    iou_floor: f64,
) -> HashMap<u64, f64> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));

    let mut matched = vec![false; objects.len()];
    let mut out: HashMap<u64, f64> = objects.iter().map(|o| (o.key, 0.0)).collect();
    for d in order.into_iter().map(|i| &detections[i]) {
        let mut best: Option<(usize, f64)> = None;
        for (j, o) in objects.iter().enumerate() {
            if matched[j] || o.category_id != d.category_id {
                continue;
            }
            let v = iou(&d.bbox, &o.bbox);
            if v >= iou_floor && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            matched[j] = true;
            out.insert(objects[j].key, d.score);
        }
    }
    out
}

/// Runs the backend and returns one score per requested object, in request order.
pub fn score_canvas(
    request: &ObserverRequest,
    backend: &dyn ObserverBackend,
    iou_floor: f64,
) -> Result<Vec<ObserverScore>, ObserverError> {
    let detections = backend.detect(request)?;
    for d in &detections {
        if !(0.0..=1.0).contains(&d.score) {
            return Err(ObserverError::protocol(
                format!("detection score {} outside [0, 1]", d.score),
                &format!("{d:?}"),
            ));
        }
    }
    let matched = match_detections(&detections, &request.objects, iou_floor);
    Ok(request
        .objects
        .iter()
        .map(|o| ObserverScore {
            key: o.key,
            confidence: matched[&o.key],
        })
        .collect())
}

/// Reports every object exactly at its box with the same score.
#[derive(Debug, Clone, Copy)]
pub struct ConstantBackend {
    pub score: f64,
}

impl ObserverBackend for ConstantBackend {
    fn detect(&self, request: &ObserverRequest) -> Result<Vec<Detection>, ObserverError> {
        Ok(request
            .objects
            .iter()
            .map(|o| Detection {
                bbox: o.bbox,
                category_id: o.category_id,
                score: self.score,
            })
            .collect())
    }

    fn describe(&self) -> String {
        format!("constant({})", self.score)
    }
}

/// Parsed `--observer` value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ObserverSpec {
    Heuristic,
    Constant(f64),
    Exec(String),
    Http(String),
}

impl std::str::FromStr for ObserverSpec {
    type Err = ObserverError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "heuristic" {
            return Ok(ObserverSpec::Heuristic);
        }
        if let Some(v) = s.strip_prefix("constant:") {
            return v
                .parse::<f64>()
                .ok()
                .filter(|v| (0.0..=1.0).contains(v))
                .map(ObserverSpec::Constant)
                .ok_or_else(|| ObserverError::Spec(s.to_string()));
        }
        if let Some(cmd) = s.strip_prefix("exec:").filter(|c| !c.trim().is_empty()) {
            return Ok(ObserverSpec::Exec(cmd.to_string()));
        }
        if let Some(url) = s.strip_prefix("http:").filter(|u| !u.is_empty()) {
            // Accept both `http:host:port` and `http:http://host:port`.
            let url = if url.starts_with("http://") || url.starts_with("https://") {
                url.to_string()
            } else {
                format!("http://{}", url.trim_start_matches("//"))
            };
            return Ok(ObserverSpec::Http(url));
        }
        Err(ObserverError::Spec(s.to_string()))
    }
}

impl std::fmt::Display for ObserverSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ObserverSpec::Heuristic => f.write_str("heuristic"),
            ObserverSpec::Constant(v) => write!(f, "constant:{v}"),
            ObserverSpec::Exec(cmd) => write!(f, "exec:{cmd}"),
            ObserverSpec::Http(url) => write!(f, "http:{url}"),
        }
    }
}

impl From<ObserverSpec> for String {
    fn from(s: ObserverSpec) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for ObserverSpec {
    type Error = ObserverError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl ObserverSpec {
    pub fn build(
        &self,
        heuristic: HeuristicParams,
        transport: TransportConfig,
    ) -> Result<Box<dyn ObserverBackend>, ObserverError> {
        Ok(match self {
            ObserverSpec::Heuristic => Box::new(HeuristicBackend::new(heuristic)),
            ObserverSpec::Constant(score) => Box::new(ConstantBackend { score: *score }),
            ObserverSpec::Exec(cmd) => Box::new(ExecBackend::new(cmd.clone(), transport)),
            ObserverSpec::Http(url) => Box::new(HttpBackend::new(url.clone(), transport)?),
        })
    }
}

/// One protocol conformance check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Sends a fixture canvas with two known objects and checks the reply.
pub fn selftest(backend: &dyn ObserverBackend) -> Vec<SelftestCheck> {
    let request = fixture_request();
    let mut checks = Vec::new();
    let detections = match backend.detect(&request) {
        Ok(d) => {
            checks.push(SelftestCheck {
                name: "reply",
                passed: true,
                detail: format!("{} detections, canvas_id echoed", d.len()),
            });
            d
        }
        Err(e) => {
            checks.push(SelftestCheck {
                name: "reply",
                passed: false,
                detail: e.to_string(),
            });
            return checks;
        }
    };
    let bad_scores: Vec<f64> = detections
        .iter()
        .map(|d| d.score)
        .filter(|s| !(0.0..=1.0).contains(s))
        .collect();
    checks.push(SelftestCheck {
        name: "score-range",
        passed: bad_scores.is_empty(),
        detail: if bad_scores.is_empty() {
            "all scores in [0, 1]".into()
        } else {
            format!("out of range: {bad_scores:?}")
        },
    });
    let (w, h) = (request.pixels.width as f64, request.pixels.height as f64);
    let outside = detections
        .iter()
        .filter(|d| !d.bbox.clamp_to(w, h).is_some_and(|c| c.area() > 0.0))
        .count();
    checks.push(SelftestCheck {
        name: "box-geometry",
        passed: outside == 0,
        detail: format!("{outside} detections entirely off-canvas"),
    });
    match score_canvas(&request, backend, DEFAULT_IOU_FLOOR) {
        Ok(scores) => checks.push(SelftestCheck {
            name: "one-score-per-object",
            passed: scores.len() == request.objects.len(),
            detail: format!("{scores:?}"),
        }),
        Err(e) => checks.push(SelftestCheck {
            name: "one-score-per-object",
            passed: false,
            detail: e.to_string(),
        }),
    }
    checks
}

/// 160x120 gray canvas with a red and a blue rectangle.
pub fn fixture_request() -> ObserverRequest {
    let mut px = PixelBuffer::new(160, 120);
    px.data.fill(128);
    let rects = [(10u32, 20u32, 50u32, 40u32, [220u8, 30, 30]), (90, 50, 40, 60, [30, 30, 220])];
    for &(x, y, w, h, rgb) in &rects {
        for yy in y..y + h {
            for xx in x..x + w {
                px.put_pixel(xx, yy, rgb);
            }
        }
    }
    ObserverRequest {
        canvas_id: 4242,
        pixels: Arc::new(px),
        objects: rects
            .iter()
            .enumerate()
            .map(|(k, &(x, y, w, h, _))| PlacedObject {
                key: k as u64,
                bbox: BBox::new(x as f64, y as f64, w as f64, h as f64).unwrap(),
                category_id: k as u64 + 1,
            })
            .collect(),
    }
}
