//! Pixel work: background preparation, patch cropping, hard-edge pasting
//! and PNG encoding.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use lru::LruCache;
use thiserror::Error;

use crate::annotation::{SourceDataset, SourceImage};
use crate::bbox::BBox;
use crate::engine::Canvas;

#[derive(Debug, Error)]
pub enum CompositorError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("png encoding failed: {0}")]
    Encode(String),
    #[error("region {w}x{h} at ({x},{y}) exceeds {bound_w}x{bound_h} buffer")]
    OutOfBounds {
        x: i64,
        y: i64,
        w: u32,
        h: u32,
        bound_w: u32,
        bound_h: u32,
    },
    #[error("unknown source image {0}")]
    MissingImage(u64),
}

pub type Result<T, E = CompositorError> = std::result::Result<T, E>;

/// Row-major 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelBuffer {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl PixelBuffer {
    /// Black buffer.
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize * 3],
        }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Option<Self> {
        (data.len() == width as usize * height as usize * 3).then_some(Self {
            width,
            height,
            data,
        })
    }

    pub fn byte_len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let o = self.offset(x, y);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn put_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let o = self.offset(x, y);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Copies out the `w x h` region at `(x, y)`.
    pub fn crop(&self, x: u32, y: u32, w: u32, h: u32) -> Result<PixelBuffer> {
        if x as u64 + w as u64 > self.width as u64 || y as u64 + h as u64 > self.height as u64 {
            return Err(CompositorError::OutOfBounds {
                x: x as i64,
                y: y as i64,
                w,
                h,
                bound_w: self.width,
                bound_h: self.height,
            });
        }
        let mut out = Vec::with_capacity(w as usize * h as usize * 3);
        for row in y..y + h {
            let start = self.offset(x, row);
            out.extend_from_slice(&self.data[start..start + w as usize * 3]);
        }
        Ok(PixelBuffer {
            width: w,
            height: h,
            data: out,
        })
    }
}

/// Bilinear resample with pixel centers at half-integer positions and edge
/// clamping. Same-size input is returned unchanged.
pub fn resize_bilinear(src: &PixelBuffer, width: u32, height: u32) -> PixelBuffer {
    if src.width == width && src.height == height {
        return src.clone();
    }
    let taps = |dst: u32, src_len: u32| -> Vec<(usize, usize, f64)> {
        let scale = src_len as f64 / dst as f64;
        (0..dst)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src_len as usize - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = taps(width, src.width);
    let ys = taps(height, src.height);

    let mut out = PixelBuffer::new(width, height);
    let stride = src.width as usize * 3;
    for (dy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (dx, &(x0, x1, fx)) in xs.iter().enumerate() {
            let o = (dy * width as usize + dx) * 3;
            for c in 0..3 {
                let p = |x: usize, y: usize| src.data[y * stride + x * 3 + c] as f64;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out.data[o + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Resizes a background image to the canvas dimensions.
pub fn prepare_background(source: &PixelBuffer, width: u32, height: u32) -> PixelBuffer {
    resize_bilinear(source, width, height)
}

/// Overwrites the rectangle at `(x, y)` with `patch`. No blending.
pub fn paste(canvas: &mut PixelBuffer, patch: &PixelBuffer, x: u32, y: u32) -> Result<()> {
    if x as u64 + patch.width as u64 > canvas.width as u64
        || y as u64 + patch.height as u64 > canvas.height as u64
    {
        return Err(CompositorError::OutOfBounds {
            x: x as i64,
            y: y as i64,
            w: patch.width,
            h: patch.height,
            bound_w: canvas.width,
            bound_h: canvas.height,
        });
    }
    let row_bytes = patch.width as usize * 3;
    for row in 0..patch.height {
        let dst = canvas.offset(x, y + row);
        let src = row as usize * row_bytes;
        canvas.data[dst..dst + row_bytes].copy_from_slice(&patch.data[src..src + row_bytes]);
    }
    Ok(())
}

/// Integer pixel rectangle covering a box: floor of the near edges, ceil of the far ones.
pub fn pixel_rect(b: &BBox) -> (u32, u32, u32, u32) {
    let x0 = b.x.floor().max(0.0) as u32;
    let y0 = b.y.floor().max(0.0) as u32;
    let x1 = b.right().ceil() as u32;
    let y1 = b.bottom().ceil() as u32;
    (x0, y0, x1.saturating_sub(x0).max(1), y1.saturating_sub(y0).max(1))
}

/// Pixel dimensions of a patch of size `w x h` after uniform scaling by `scale`.
pub fn scaled_dims(w: u32, h: u32, scale: f64) -> (u32, u32) {
    if scale >= 1.0 {
        return (w, h);
    }
    let s = |v: u32| ((v as f64 * scale).round() as u32).max(1);
    (s(w), s(h))
}

/// Crops the extended box out of the source and downsamples by `scale` when below 1.
pub fn crop_extended(source: &PixelBuffer, extended: &BBox, scale: f64) -> Result<PixelBuffer> {
    let (x, y, w, h) = pixel_rect(extended);
    let patch = source.crop(x, y, w, h)?;
    let (sw, sh) = scaled_dims(w, h, scale);
    Ok(resize_bilinear(&patch, sw, sh))
}

pub fn encode_png(buf: &PixelBuffer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(&buf.data, buf.width, buf.height, ExtendedColorType::Rgb8)
        .map_err(|e| CompositorError::Encode(e.to_string()))?;
    Ok(out)
}

pub fn decode_image(bytes: &[u8], origin: &Path) -> Result<PixelBuffer> {
    let img = image::load_from_memory(bytes).map_err(|e| CompositorError::Decode {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(PixelBuffer {
        width: w,
        height: h,
        data: rgb.into_raw(),
    })
}

/// Supplies decoded source pixels, sized to the image record's dimensions.
pub trait ImageSource: Send + Sync {
    fn load(&self, image: &SourceImage) -> Result<Arc<PixelBuffer>>;
}

/// Reads PNG/JPEG files below a root directory, with a byte-bounded LRU cache.
pub struct FsImageSource {
    root: PathBuf,
    capacity_bytes: usize,
    cache: Mutex<CacheState>,
}

struct CacheState {
    entries: LruCache<u64, Arc<PixelBuffer>>,
    bytes: usize,
}

impl FsImageSource {
    pub fn new(root: impl Into<PathBuf>, capacity_bytes: usize) -> Self {
        Self {
            root: root.into(),
            capacity_bytes,
            cache: Mutex::new(CacheState {
                entries: LruCache::unbounded(),
                bytes: 0,
            }),
        }
    }

    pub fn for_dataset(dataset: &SourceDataset, capacity_bytes: usize) -> Self {
        Self::new(dataset.images_root.clone(), capacity_bytes)
    }

    pub fn cached_bytes(&self) -> usize {
        self.cache.lock().unwrap().bytes
    }
}

impl ImageSource for FsImageSource {
    fn load(&self, image: &SourceImage) -> Result<Arc<PixelBuffer>> {
        if let Some(hit) = self.cache.lock().unwrap().entries.get(&image.id) {
            return Ok(Arc::clone(hit));
        }
        let path = self.root.join(&image.file_name);
        let bytes = std::fs::read(&path).map_err(|source| CompositorError::Io {
            path: path.clone(),
            source,
        })?;
        let mut buf = decode_image(&bytes, &path)?;
        if buf.width != image.width || buf.height != image.height {
            log::warn!(
                "{}: decoded {}x{}, record says {}x{}; resizing",
                path.display(),
                buf.width,
                buf.height,
                image.width,
                image.height
            );
            buf = resize_bilinear(&buf, image.width, image.height);
        }
        let buf = Arc::new(buf);

        let mut cache = self.cache.lock().unwrap();
        let size = buf.byte_len();
        if size <= self.capacity_bytes {
            if let Some(old) = cache.entries.put(image.id, Arc::clone(&buf)) {
                cache.bytes -= old.byte_len();
            }
            cache.bytes += size;
            while cache.bytes > self.capacity_bytes {
                match cache.entries.pop_lru() {
                    Some((_, evicted)) => cache.bytes -= evicted.byte_len(),
                    None => break,
                }
            }
        }
        Ok(buf)
    }
}

/// Background plus every occupant pasted in acceptance order.
pub fn render_canvas(
    canvas: &Canvas,
    dataset: &SourceDataset,
    images: &dyn ImageSource,
) -> Result<PixelBuffer> {
    let bg_image = dataset
        .image(canvas.background_image_id)
        .ok_or(CompositorError::MissingImage(canvas.background_image_id))?;
    let bg = images.load(bg_image)?;
    let mut out = prepare_background(&bg, canvas.width, canvas.height);
    for occ in &canvas.occupants {
        let p = &occ.placement;
        let src_image = dataset
            .image(p.candidate.source_image_id)
            .ok_or(CompositorError::MissingImage(p.candidate.source_image_id))?;
        let src = images.load(src_image)?;
        let patch = crop_extended(&src, &p.candidate.extended_box, p.scale)?;
        paste(&mut out, &patch, p.position.0, p.position.1)?;
    }
    Ok(out)
}
