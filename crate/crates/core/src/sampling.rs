//! Sampling controller: splits the source images into one segment per
//! synthesized image, so no source object can land on two canvases.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::SourceDataset;

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("compression ratio {0} outside (0, 1]")]
    Ratio(f64),
    #[error("ipd {ipd} exceeds the {images} source images")]
    TooManySegments { ipd: usize, images: usize },
    #[error("ipd must be positive")]
    ZeroIpd,
}

/// Number of synthesized images for a compression ratio: `max(1, round(ratio * |images|))`.
pub fn compute_ipd(image_count: usize, ratio: f64) -> Result<usize, SamplingError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(SamplingError::Ratio(ratio));
    }
    Ok(((ratio * image_count as f64).round() as usize).max(1))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub ipd: usize,
    pub segments: Vec<Vec<u64>>,
    pub seed: u64,
}

/// Shuffles the image ids with `seed` and cuts them into `ipd` contiguous
/// segments whose sizes differ by at most one (larger segments first).
pub fn build_plan(
    dataset: &SourceDataset,
    ipd: usize,
    seed: u64,
) -> Result<SegmentPlan, SamplingError> {
    let mut ids = dataset.image_ids();
    if ipd == 0 {
        return Err(SamplingError::ZeroIpd);
    }
    if ipd > ids.len() {
        return Err(SamplingError::TooManySegments {
            ipd,
            images: ids.len(),
        });
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let base = ids.len() / ipd;
    let extra = ids.len() % ipd;
    let mut segments = Vec::with_capacity(ipd);
    let mut rest = ids.as_slice();
    for k in 0..ipd {
        let (head, tail) = rest.split_at(base + usize::from(k < extra));
        segments.push(head.to_vec());
        rest = tail;
    }
    Ok(SegmentPlan {
        ipd,
        segments,
        seed,
    })
}

impl SegmentPlan {
    /// One line per segment: canvas index, a tab, then space-separated image ids.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, seg) in self.segments.iter().enumerate() {
            let _ = write!(out, "{k}\t");
            for (i, id) in seg.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{id}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_text(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{Category, SourceImage, SourceObject};
    use crate::bbox::BBox;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn dataset(n: usize, objects_per_image: usize) -> SourceDataset {
        let images = (0..n as u64)
            .map(|id| SourceImage {
                id: id + 100,
                file_name: format!("{id}.png"),
                width: 64,
                height: 64,
                objects: (0..objects_per_image as u64)
                    .map(|k| SourceObject {
                        annotation_id: id * 1000 + k,
                        bbox: BBox::new(1.0, 1.0, 10.0, 10.0).unwrap(),
                        category_id: 1,
                        iscrowd: false,
                    })
                    .collect(),
            })
            .collect();
        let cats = vec![Category { id: 1, name: "a".into(), supercategory: String::new() }];
        SourceDataset::new(images, cats, "/nonexistent").unwrap()
    }

    #[test]
    fn ipd_examples() {
        // round(0.01 * 117266) = round(1172.66)
        assert_eq!(compute_ipd(117_266, 0.01).unwrap(), 1173);
        assert_eq!(compute_ipd(1000, 1.0).unwrap(), 1000);
        assert_eq!(compute_ipd(10, 0.001).unwrap(), 1);
        assert_eq!(compute_ipd(10, 0.0), Err(SamplingError::Ratio(0.0)));
        assert_eq!(compute_ipd(10, 1.5), Err(SamplingError::Ratio(1.5)));
        assert!(compute_ipd(10, f64::NAN).is_err());
    }

    #[test]
    fn ten_images_two_segments() {
        let d = dataset(10, 1);
        let plan = build_plan(&d, 2, 7).unwrap();
        assert_eq!(plan.segments.iter().map(Vec::len).collect::<Vec<_>>(), [5, 5]);
        let all: HashSet<u64> = plan.segments.concat().into_iter().collect();
        assert_eq!(all, d.image_ids().into_iter().collect());
    }

    #[test]
    fn seven_images_three_segments() {
        let plan = build_plan(&dataset(7, 1), 3, 1).unwrap();
        assert_eq!(plan.segments.iter().map(Vec::len).collect::<Vec<_>>(), [3, 2, 2]);
    }

    #[test]
    fn same_seed_same_plan() {
        let d = dataset(33, 2);
        assert_eq!(build_plan(&d, 4, 99).unwrap(), build_plan(&d, 4, 99).unwrap());
        assert_eq!(
            build_plan(&d, 4, 99).unwrap().to_text(),
            build_plan(&d, 4, 99).unwrap().to_text()
        );
    }

    #[test]
    fn too_many_segments() {
        assert_eq!(
            build_plan(&dataset(3, 1), 4, 0),
            Err(SamplingError::TooManySegments { ipd: 4, images: 3 })
        );
    }

    #[test]
    fn plan_text_format() {
        let plan = SegmentPlan { ipd: 2, segments: vec![vec![3, 1], vec![2]], seed: 0 };
        assert_eq!(plan.to_text(), "0\t3 1\n1\t2\n");
    }

    proptest! {
        #[test]
        fn partition_invariants(n in 1usize..80, frac in 0.0..1.0f64, seed in any::<u64>()) {
            let d = dataset(n, 3);
            let ipd = 1 + ((n - 1) as f64 * frac) as usize;
            let plan = build_plan(&d, ipd, seed).unwrap();
            prop_assert_eq!(plan.segments.len(), ipd);
            let sizes: Vec<usize> = plan.segments.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);

            // Every annotation id appears exactly once across segments.
            let mut seen = HashSet::new();
            for seg in &plan.segments {
                for id in seg {
                    for o in &d.image(*id).unwrap().objects {
                        prop_assert!(seen.insert(o.annotation_id));
                    }
                }
            }
            prop_assert_eq!(seen.len(), d.total_objects);
        }
    }
}
