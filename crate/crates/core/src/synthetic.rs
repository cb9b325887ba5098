//! Procedurally generated datasets with deterministic pixels, for tests,
//! benchmarks and demos without real data.

use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use lru::LruCache;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{
    write_source_dataset, AnnotationError, Category, SourceDataset, SourceImage, SourceObject,
    ANNOTATION_FILE, IMAGE_DIR,
};
use crate::bbox::BBox;
use crate::compositor::{encode_png, CompositorError, ImageSource, PixelBuffer};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub images: usize,
    pub objects_per_image: usize,
    pub categories: usize,
    /// Inclusive range of image widths.
    pub width: (u32, u32),
    pub height: (u32, u32),
    /// Inclusive range of object side lengths.
    pub side: (u32, u32),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            images: 500,
            objects_per_image: 6,
            categories: 10,
            width: (200, 320),
            height: (160, 240),
            side: (12, 72),
            seed: 7,
        }
    }
}

/// Builds the annotation side of the dataset. Categories are assigned
/// round-robin over annotation ids, so counts are balanced.
pub fn synthetic_dataset(spec: &SyntheticSpec, images_root: impl Into<PathBuf>) -> SourceDataset {
    let categories = (1..=spec.categories as u64)
        .map(|c| Category {
            id: c,
            name: format!("class{c:02}"),
            supercategory: format!("group{}", c % 3),
        })
        .collect();
    let mut next_ann = 1u64;
    let images = (1..=spec.images as u64)
        .map(|id| {
            let mut rng = rng_for(&[spec.seed, id]);
            let w = rng.random_range(spec.width.0..=spec.width.1);
            let h = rng.random_range(spec.height.0..=spec.height.1);
            let objects = (0..spec.objects_per_image)
                .map(|_| {
                    let ow = rng.random_range(spec.side.0..=spec.side.1.min(w - 1));
                    let oh = rng.random_range(spec.side.0..=spec.side.1.min(h - 1));
                    let x = rng.random_range(0..=w - ow);
                    let y = rng.random_range(0..=h - oh);
                    let ann = next_ann;
                    next_ann += 1;
                    SourceObject {
                        annotation_id: ann,
                        bbox: BBox::new(x as f64, y as f64, ow as f64, oh as f64)
                            .expect("positive side"),
                        category_id: 1 + (ann - 1) % spec.categories as u64,
                        iscrowd: false,
                    }
                })
                .collect();
            SourceImage {
                id,
                file_name: format!("synth_{id:05}.png"),
                width: w,
                height: h,
                objects,
            }
        })
        .collect();
    SourceDataset::new(images, categories, images_root).expect("generated dataset is consistent")
}

fn category_color(category: u64) -> [u8; 3] {
    let h = category.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    [(h >> 8) as u8 | 0x40, (h >> 24) as u8 | 0x40, (h >> 40) as u8 | 0x40]
}

/// Gradient background with each object drawn as a striped rectangle in
/// its category color.
pub fn synthetic_pixels(image: &SourceImage, seed: u64) -> PixelBuffer {
    let mut rng = rng_for(&[seed, image.id, 0xb9]);
    let base: [u8; 3] = [rng.random(), rng.random(), rng.random()];
    let (w, h) = (image.width, image.height);
    let mut buf = PixelBuffer::new(w, h);
    for y in 0..h {
        for x in 0..w {
            // g < 120, so every channel stays below 256.
            let g = ((x * 64 / w) + (y * 56 / h)) as u8;
            buf.put_pixel(x, y, [base[0] / 2 + g, base[1] / 2 + g / 2, base[2] / 2 + (120 - g)]);
        }
    }
    for o in &image.objects {
        let c = category_color(o.category_id);
        let x0 = o.bbox.x as u32;
        let y0 = o.bbox.y as u32;
        let x1 = (o.bbox.right().ceil() as u32).min(w);
        let y1 = (o.bbox.bottom().ceil() as u32).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let stripe = ((x - x0) / 4 + (y - y0) / 4) % 2 == 0;
                let px = if stripe { c } else { [c[0] / 2, c[1] / 2, c[2] / 2] };
                buf.put_pixel(x, y, px);
            }
        }
    }
    buf
}

/// Generates pixels on demand and keeps the most recent ones.
pub struct SyntheticImages {
    seed: u64,
    cache: Mutex<LruCache<u64, Arc<PixelBuffer>>>,
}

impl SyntheticImages {
    pub fn new(seed: u64, capacity: usize) -> Self {
        Self {
            seed,
            cache: Mutex::new(LruCache::new(
                NonZeroUsize::new(capacity.max(1)).expect("nonzero"),
            )),
        }
    }
}

impl ImageSource for SyntheticImages {
    fn load(&self, image: &SourceImage) -> Result<Arc<PixelBuffer>, CompositorError> {
        if let Some(hit) = self.cache.lock().unwrap_or_else(|p| p.into_inner()).get(&image.id) {
            return Ok(hit.clone());
        }
        let buf = Arc::new(synthetic_pixels(image, self.seed));
        self.cache
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .put(image.id, buf.clone());
        Ok(buf)
    }
}

/// Writes `annotations.json` and `images/*.png` under `root`; returns the
/// dataset with `images_root` pointing at the written images.
pub fn write_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<SourceDataset, AnnotationError> {
    let image_dir = root.join(IMAGE_DIR);
    std::fs::create_dir_all(&image_dir).map_err(|source| AnnotationError::Io {
        path: image_dir.clone(),
        source,
    })?;
    let dataset = synthetic_dataset(spec, &image_dir);
    dataset.images.par_iter().try_for_each(|img| {
        let png = encode_png(&synthetic_pixels(img, spec.seed))
            .map_err(|source| AnnotationError::Render { id: img.id, source })?;
        let path = image_dir.join(&img.file_name);
        std::fs::write(&path, png).map_err(|source| AnnotationError::Io { path, source })
    })?;
    write_source_dataset(&dataset, &root.join(ANNOTATION_FILE))?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::parse_dataset;
    use crate::compositor::FsImageSource;

    fn tiny() -> SyntheticSpec {
        SyntheticSpec { images: 12, objects_per_image: 3, categories: 4, ..Default::default() }
    }

    #[test]
    fn balanced_and_in_bounds() {
        let ds = synthetic_dataset(&SyntheticSpec::default(), "/tmp");
        assert_eq!(ds.images.len(), 500);
        assert_eq!(ds.total_objects, 3000);
        let mut counts = [0usize; 10];
        for img in &ds.images {
            for o in &img.objects {
                counts[o.category_id as usize - 1] += 1;
                assert!(o.bbox.within(img.width as f64, img.height as f64));
            }
        }
        assert!(counts.iter().all(|&c| c == 300));
    }

    #[test]
    fn pixels_are_deterministic() {
        let ds = synthetic_dataset(&tiny(), "/tmp");
        let a = synthetic_pixels(&ds.images[0], 1);
        assert_eq!(a, synthetic_pixels(&ds.images[0], 1));
        assert_ne!(a, synthetic_pixels(&ds.images[0], 2));
    }

    #[test]
    fn written_dataset_parses_back_with_same_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny();
        let written = write_synthetic(&spec, dir.path()).unwrap();
        let (parsed, report) =
            parse_dataset(&dir.path().join(ANNOTATION_FILE), &dir.path().join(IMAGE_DIR)).unwrap();
        assert_eq!(report.clamped + report.dropped_degenerate, 0);
        assert_eq!(parsed.images, written.images);
        let fs = FsImageSource::for_dataset(&parsed, 1 << 24);
        let mem = SyntheticImages::new(spec.seed, 4);
        for img in &parsed.images {
            assert_eq!(*fs.load(img).unwrap(), *mem.load(img).unwrap());
        }
    }
}
