//! Observer wire records: one JSON object per line.
//!
//! Request:  `{"canvas_id":1,"image_b64":"<png>","objects":[{"key":0,"bbox":[x,y,w,h],"category_id":3}]}`
//! Response: `{"canvas_id":1,"detections":[{"bbox":[x,y,w,h],"category_id":3,"score":0.9}]}`
//!
//! A server may instead answer `{"canvas_id":1,"error":"..."}`.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{Detection, ObserverError, ObserverRequest, PlacedObject};
use crate::bbox::BBox;
use crate::compositor::{decode_image, encode_png, PixelBuffer};

#[derive(Debug, Serialize, Deserialize)]
pub struct WireObject {
    pub key: u64,
    pub bbox: [f64; 4],
    pub category_id: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireRequest {
    pub canvas_id: u64,
    pub image_b64: String,
    pub objects: Vec<WireObject>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireDetection {
    pub bbox: [f64; 4],
    pub category_id: u64,
    pub score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireResponse {
    pub canvas_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<Vec<WireDetection>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Serializes a request as a single line, without the trailing newline.
pub fn encode_request(req: &ObserverRequest) -> Result<String, ObserverError> {
    let png = encode_png(&req.pixels).map_err(|e| ObserverError::Transport(e.to_string()))?;
    let wire = WireRequest {
        canvas_id: req.canvas_id,
        image_b64: STANDARD.encode(png),
        objects: req
            .objects
            .iter()
            .map(|o| WireObject {
                key: o.key,
                bbox: o.bbox.to_array(),
                category_id: o.category_id,
            })
            .collect(),
    };
    serde_json::to_string(&wire).map_err(|e| ObserverError::Transport(e.to_string()))
}

/// Parses a response line and checks that it answers `canvas_id`.
pub fn decode_response(line: &str, canvas_id: u64) -> Result<Vec<Detection>, ObserverError> {
    let line = line.trim_end_matches(['\r', '\n']);
    let resp: WireResponse = serde_json::from_str(line)
        .map_err(|e| ObserverError::protocol(format!("malformed response: {e}"), line))?;
    if resp.canvas_id != canvas_id {
        return Err(ObserverError::protocol(
            format!("canvas_id {} does not echo request {canvas_id}", resp.canvas_id),
            line,
        ));
    }
    if let Some(msg) = resp.error {
        return Err(ObserverError::protocol(format!("observer reported: {msg}"), line));
    }
    let dets = resp
        .detections
        .ok_or_else(|| ObserverError::protocol("response lacks \"detections\"", line))?;
    dets.into_iter()
        .map(|d| {
            let [x, y, w, h] = d.bbox;
            let bbox = BBox::new(x, y, w, h)
                .ok_or_else(|| ObserverError::protocol(format!("invalid bbox {:?}", d.bbox), line))?;
            if !(0.0..=1.0).contains(&d.score) {
                return Err(ObserverError::protocol(
                    format!("score {} outside [0, 1]", d.score),
                    line,
                ));
            }
            Ok(Detection {
                bbox,
                category_id: d.category_id,
                score: d.score,
            })
        })
        .collect()
}

/// Server side: parses a request line back into an [`ObserverRequest`].
pub fn decode_request(line: &str) -> Result<ObserverRequest, ObserverError> {
    let wire: WireRequest = serde_json::from_str(line.trim_end())
        .map_err(|e| ObserverError::protocol(format!("malformed request: {e}"), line))?;
    let png = STANDARD
        .decode(wire.image_b64.as_bytes())
        .map_err(|e| ObserverError::protocol(format!("bad base64: {e}"), line))?;
    let pixels: PixelBuffer = decode_image(&png, std::path::Path::new("<request>"))
        .map_err(|e| ObserverError::protocol(e.to_string(), line))?;
    let objects = wire
        .objects
        .into_iter()
        .map(|o| {
            let [x, y, w, h] = o.bbox;
            Ok(PlacedObject {
                key: o.key,
                bbox: BBox::new(x, y, w, h).ok_or_else(|| {
                    ObserverError::protocol(format!("invalid bbox {:?}", o.bbox), line)
                })?,
                category_id: o.category_id,
            })
        })
        .collect::<Result<_, ObserverError>>()?;
    Ok(ObserverRequest {
        canvas_id: wire.canvas_id,
        pixels: std::sync::Arc::new(pixels),
        objects,
    })
}

/// Server side: serializes detections as a response line (no newline).
pub fn encode_response(canvas_id: u64, detections: &[Detection]) -> String {
    let resp = WireResponse {
        canvas_id,
        detections: Some(
            detections
                .iter()
                .map(|d| WireDetection {
                    bbox: d.bbox.to_array(),
                    category_id: d.category_id,
                    score: d.score,
                })
                .collect(),
        ),
        error: None,
    };
    serde_json::to_string(&resp).expect("response serializes")
}

pub fn encode_error(canvas_id: u64, message: &str) -> String {
    serde_json::to_string(&WireResponse {
        canvas_id,
        detections: None,
        error: Some(message.to_string()),
    })
    .expect("response serializes")
}

/// Best-effort canvas id extraction from a request that failed to parse.
pub fn sniff_canvas_id(line: &str) -> u64 {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("canvas_id").and_then(|c| c.as_u64()))
        .unwrap_or(0)
}
