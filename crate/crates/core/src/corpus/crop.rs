//! Face crop normalization to the fixed 200×256 frame.
//!
//! The detector box is grown (never shrunk) along one axis until it has the
//! 200:256 aspect ratio, keeping its centre; the window is then shifted to lie
//! inside the image, shrinking only if the image itself is too small. The
//! window is resampled with bilinear interpolation using half-pixel-centre
//! alignment: output pixel `(dx, dy)` samples source coordinate
//! `x0 + (dx + 0.5) * cw / 200 - 0.5` (likewise for y), edges clamp, and the
//! interpolated value is rounded half up.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;

use super::{FaceRecord, Manifest};
use crate::error::{Error, Result};
use crate::imagebuf::ImageBuffer;

pub const FACE_WIDTH: u32 = 200;
pub const FACE_HEIGHT: u32 = 256;

/// Axis-aligned face box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl BBox {
    pub fn full(img: &ImageBuffer) -> Self {
        Self { x: 0, y: 0, width: img.width(), height: img.height() }
    }
}

/// Source of face boxes; the detector itself lives outside this crate.
pub trait FaceDetector: Sync {
    fn detect(&self, record: &FaceRecord, image: &ImageBuffer) -> Result<BBox>;
}

/// Treats the whole frame as the face (for pre-cropped corpora).
pub struct FullFrame;

impl FaceDetector for FullFrame {
    fn detect(&self, _record: &FaceRecord, image: &ImageBuffer) -> Result<BBox> {
        Ok(BBox::full(image))
    }
}

/// Boxes read from a CSV with header `filename,x,y,width,height`, keyed by
/// the image file name.
pub struct BBoxTable {
    boxes: BTreeMap<String, BBox>,
}

#[derive(Deserialize)]
struct BBoxRow {
    filename: String,
    x: u32,
    y: u32,
    width: u32,
    height: u32,
}

impl BBoxTable {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let mut boxes = BTreeMap::new();
        for row in reader.deserialize::<BBoxRow>() {
            let r = row?;
            boxes.insert(r.filename, BBox { x: r.x, y: r.y, width: r.width, height: r.height });
        }
        Ok(Self { boxes })
    }
}

impl FaceDetector for BBoxTable {
    fn detect(&self, record: &FaceRecord, _image: &ImageBuffer) -> Result<BBox> {
        let name = Path::new(&record.image_ref).file_name().and_then(|n| n.to_str()).unwrap_or_default();
        self.boxes.get(name).copied().ok_or_else(|| Error::FaceNotFound(record.image_ref.clone()))
    }
}

/// Crop window `(x0, y0, width, height)` in continuous pixel units.
fn crop_window(img_w: u32, img_h: u32, bbox: BBox) -> (f64, f64, f64, f64) {
    let aspect = FACE_WIDTH as f64 / FACE_HEIGHT as f64;
    let (w, h) = (bbox.width as f64, bbox.height as f64);
    let cx = bbox.x as f64 + w / 2.0;
    let cy = bbox.y as f64 + h / 2.0;
    let (mut cw, mut ch) = if w / h < aspect { (h * aspect, h) } else { (w, w / aspect) };
    cw = cw.min(img_w as f64);
    ch = ch.min(img_h as f64);
    let x0 = (cx - cw / 2.0).clamp(0.0, img_w as f64 - cw);
    let y0 = (cy - ch / 2.0).clamp(0.0, img_h as f64 - ch);
    (x0, y0, cw, ch)
}

pub fn normalize_crop(image: &ImageBuffer, bbox: BBox) -> Result<ImageBuffer> {
    if bbox.width == 0 || bbox.height == 0 {
        return Err(Error::EmptyBBox);
    }
    if bbox.x as u64 + bbox.width as u64 > image.width() as u64
        || bbox.y as u64 + bbox.height as u64 > image.height() as u64
    {
        return Err(Error::BBoxOutOfBounds {
            bbox: [bbox.x, bbox.y, bbox.width, bbox.height],
            width: image.width(),
            height: image.height(),
        });
    }
    let (x0, y0, cw, ch) = crop_window(image.width(), image.height(), bbox);
    let sx = cw / FACE_WIDTH as f64;
    let sy = ch / FACE_HEIGHT as f64;
    let max_x = (image.width() - 1) as f64;
    let max_y = (image.height() - 1) as f64;

    let mut out = ImageBuffer::filled(FACE_WIDTH, FACE_HEIGHT, [0, 0, 0]);
    for dy in 0..FACE_HEIGHT {
        let y = (y0 + (dy as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let yi = y.floor() as u32;
        let yj = (yi + 1).min(image.height() - 1);
        let fy = y - yi as f64;
        for dx in 0..FACE_WIDTH {
            let x = (x0 + (dx as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let xi = x.floor() as u32;
            let xj = (xi + 1).min(image.width() - 1);
            let fx = x - xi as f64;
            let (p00, p10, p01, p11) = (image.get(xi, yi), image.get(xj, yi), image.get(xi, yj), image.get(xj, yj));
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
                let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                rgb[c] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.put(dx, dy, rgb);
        }
    }
    Ok(out)
}

/// Crops every ORIG record to 200×256 and writes PNGs under `out_dir`.
///
/// Returns the normalized manifest; records whose detector fails are
/// returned separately instead of being dropped silently.
pub fn normalize_manifest(
    manifest: &Manifest,
    detector: &dyn FaceDetector,
    out_dir: &Path,
) -> Result<(Manifest, Vec<(String, Error)>)> {
    std::fs::create_dir_all(out_dir)?;
    let results: Vec<(FaceRecord, Result<PathBuf>)> = manifest
        .orig()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|r| {
            let outcome = (|| {
                let img = ImageBuffer::open(&r.image_ref)?;
                let bbox = detector.detect(r, &img)?;
                let cropped = normalize_crop(&img, bbox)?;
                let path = out_dir.join(format!("{}.png", r.identity_id));
                cropped.save_png(&path)?;
                Ok(path)
            })();
            ((*r).clone(), outcome)
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, outcome) in results {
        match outcome {
            Ok(path) => records.push(FaceRecord {
                image_ref: path.display().to_string(),
                width: FACE_WIDTH,
                height: FACE_HEIGHT,
                ..r
            }),
            Err(e) => failures.push((r.record_id, e)),
        }
    }
    Ok((Manifest::new(format!("{} (normalized)", manifest.provenance), records)?, failures))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_image(w: u32, h: u32, seed: u64) -> ImageBuffer {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    #[test]
    fn full_frame_at_target_size_is_identity() {
        let img = random_image(200, 256, 1);
        let out = normalize_crop(&img, BBox::full(&img)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn half_scale_matches_box_average() {
        let img = random_image(400, 512, 2);
        let out = normalize_crop(&img, BBox::full(&img)).unwrap();
        assert_eq!((out.width(), out.height()), (200, 256));
        // Independent reference: at exactly 2x, half-pixel-centre bilinear is
        // the mean of each 2x2 block, rounded half up.
        let reference = |x: u32, y: u32| -> [u8; 3] {
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                let s: u32 = [(0, 0), (1, 0), (0, 1), (1, 1)]
                    .iter()
                    .map(|(ox, oy)| img.get(2 * x + ox, 2 * y + oy)[c] as u32)
                    .sum();
                rgb[c] = ((s + 2) / 4) as u8;
            }
            rgb
        };
        for (x, y) in [(0, 0), (199, 0), (0, 255), (199, 255), (57, 131)] {
            assert_eq!(out.get(x, y), reference(x, y), "pixel ({x},{y})");
        }
        for y in 0..256 {
            for x in 0..200 {
                assert_eq!(out.get(x, y), reference(x, y));
            }
        }
    }

    #[test]
    fn empty_and_out_of_bounds_boxes() {
        let img = random_image(50, 60, 3);
        let zero = BBox { x: 3, y: 3, width: 0, height: 10 };
        assert!(matches!(normalize_crop(&img, zero), Err(Error::EmptyBBox)));
        let oob = BBox { x: 40, y: 0, width: 20, height: 10 };
        assert!(matches!(normalize_crop(&img, oob), Err(Error::BBoxOutOfBounds { .. })));
    }

    #[test]
    fn window_expands_to_aspect_and_stays_centred() {
        // Square 100x100 box in the middle of a 1000x1000 frame widens in height.
        let (x0, y0, cw, ch) = crop_window(1000, 1000, BBox { x: 450, y: 450, width: 100, height: 100 });
        assert!((cw / ch - 200.0 / 256.0).abs() < 1e-12);
        assert_eq!(cw, 100.0);
        assert!((x0 + cw / 2.0 - 500.0).abs() < 1e-9 && (y0 + ch / 2.0 - 500.0).abs() < 1e-9);
        // A box touching the top edge shifts down rather than leaving the frame.
        let (_, y0, _, _) = crop_window(1000, 1000, BBox { x: 450, y: 0, width: 100, height: 100 });
        assert_eq!(y0, 0.0);
    }

    #[test]
    fn any_box_yields_target_size() {
        let img = random_image(120, 90, 4);
        for bbox in [
            BBox { x: 0, y: 0, width: 120, height: 90 },
            BBox { x: 10, y: 5, width: 30, height: 70 },
            BBox { x: 100, y: 80, width: 20, height: 10 },
        ] {
            let out = normalize_crop(&img, bbox).unwrap();
            assert_eq!((out.width(), out.height()), (FACE_WIDTH, FACE_HEIGHT));
        }
    }
}
