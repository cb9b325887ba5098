//! Optimization-free dataset condensation for object detection.
//!
//! A large annotated dataset is cut into segments, and each segment becomes
//! one synthesized image: source objects are copy-pasted onto a background
//! under an overlap limit, scored by an observer detector, and screened by
//! confidence until the canvas is full.

pub mod annotation;
pub mod bbox;
pub mod compositor;
pub mod engine;
pub mod observer;
pub mod placement;
pub mod sampling;
pub mod seed;
pub mod synthetic;
pub mod theorem;

pub use annotation::{DistilledDataset, DistilledImage, SourceDataset};
pub use bbox::BBox;
pub use engine::{distill, EngineConfig};
pub use observer::{ObserverBackend, ObserverSpec};
