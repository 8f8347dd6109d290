//! Mask occlusion compositing.
//!
//! The mask is the hexagon nose-bridge L → nose-bridge R → cheek R → chin R →
//! chin L → cheek L. A pixel is covered when its centre lies inside the
//! polygon (even-odd rule). Covered pixels take `mask_color` scaled by a
//! linear shade from 1.0 at the polygon's top row to [`SHADE_BOTTOM`] at its
//! bottom row, rounded half up.

use serde::{Deserialize, Serialize};

use crate::corpus::FaceRecord;
use crate::error::{Error, Result};
use crate::imagebuf::ImageBuffer;

pub const N95_BLUE: [u8; 3] = [74, 134, 212];
pub const SHADE_BOTTOM: f64 = 0.75;

/// The six anchor points, `[x, y]` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskLandmarks {
    pub nose_bridge_left: [f64; 2],
    pub nose_bridge_right: [f64; 2],
    pub cheek_left: [f64; 2],
    pub cheek_right: [f64; 2],
    pub chin_left: [f64; 2],
    pub chin_right: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskGeometry {
    pub landmarks: MaskLandmarks,
    pub mask_color: [u8; 3],
}

impl MaskGeometry {
    pub fn new(landmarks: MaskLandmarks) -> Self {
        Self { landmarks, mask_color: N95_BLUE }
    }

    /// Polygon vertices in drawing order, clamped to the image bounds.
    pub fn polygon(&self, width: u32, height: u32) -> Vec<[f64; 2]> {
        let l = &self.landmarks;
        [l.nose_bridge_left, l.nose_bridge_right, l.cheek_right, l.chin_right, l.chin_left, l.cheek_left]
            .iter()
            .map(|p| [p[0].clamp(0.0, width as f64), p[1].clamp(0.0, height as f64)])
            .collect()
    }
}

/// Supplies mask anchors for a face; fails with [`Error::FaceNotFound`] when
/// no face is located.
pub trait LandmarkProvider: Sync {
    fn landmarks(&self, record: &FaceRecord, image: &ImageBuffer) -> Result<MaskGeometry>;
}

/// Anchors at fixed fractions of the frame, for face-centred crops.
#[derive(Clone, Copy, Debug, Default)]
pub struct FixedLandmarks;

impl FixedLandmarks {
    pub fn geometry(width: u32, height: u32) -> MaskGeometry {
        let (w, h) = (width as f64, height as f64);
        MaskGeometry::new(MaskLandmarks {
            nose_bridge_left: [0.38 * w, 0.50 * h],
            nose_bridge_right: [0.62 * w, 0.50 * h],
            cheek_right: [0.80 * w, 0.62 * h],
            chin_right: [0.66 * w, 0.92 * h],
            chin_left: [0.34 * w, 0.92 * h],
            cheek_left: [0.20 * w, 0.62 * h],
        })
    }
}

impl LandmarkProvider for FixedLandmarks {
    fn landmarks(&self, _record: &FaceRecord, image: &ImageBuffer) -> Result<MaskGeometry> {
        Ok(Self::geometry(image.width(), image.height()))
    }
}

fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segments_cross(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

fn is_simple(poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    for i in 0..n {
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if !adjacent && segments_cross(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

fn contains(poly: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (pi, pj) = (poly[i], poly[j]);
        if (pi[1] > y) != (pj[1] > y) && x < (pj[0] - pi[0]) * (y - pi[1]) / (pj[1] - pi[1]) + pi[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

pub fn apply_mask(img: &ImageBuffer, geometry: &MaskGeometry) -> Result<ImageBuffer> {
    let poly = geometry.polygon(img.width(), img.height());
    let mut out = img.clone();
    if signed_area(&poly).abs() < 1e-9 {
        return Ok(out);
    }
    if !is_simple(&poly) {
        return Err(Error::SelfIntersectingPolygon);
    }
    let top = poly.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let bottom = poly.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let x_min = poly.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min).floor().max(0.0) as u32;
    let x_max = (poly.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max).ceil() as u32).min(img.width());
    let y_min = top.floor().max(0.0) as u32;
    let y_max = (bottom.ceil() as u32).min(img.height());
    for y in y_min..y_max {
        let yc = y as f64 + 0.5;
        let t = ((yc - top) / (bottom - top)).clamp(0.0, 1.0);
        let shade = 1.0 - (1.0 - SHADE_BOTTOM) * t;
        let rgb = geometry.mask_color.map(|c| (c as f64 * shade).round() as u8);
        for x in x_min..x_max {
            if contains(&poly, x as f64 + 0.5, yc) {
                out.put(x, y, rgb);
            }
        }
    }
    Ok(out)
}

/// Locates the face with `provider` and applies the mask.
pub fn mask_face(img: &ImageBuffer, record: &FaceRecord, provider: &dyn LandmarkProvider) -> Result<ImageBuffer> {
    let geometry = provider.landmarks(record, img)?;
    apply_mask(img, &geometry)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> MaskGeometry {
        let ym = (y0 + y1) / 2.0;
        MaskGeometry::new(MaskLandmarks {
            nose_bridge_left: [x0, y0],
            nose_bridge_right: [x1, y0],
            cheek_right: [x1, ym],
            chin_right: [x1, y1],
            chin_left: [x0, y1],
            cheek_left: [x0, ym],
        })
    }

    fn checker(w: u32, h: u32) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |x, y| if (x + y) % 2 == 0 { [250, 250, 250] } else { [3, 3, 3] })
    }

    #[test]
    fn degenerate_polygon_is_identity() {
        let img = checker(20, 20);
        let point = rect(5.0, 5.0, 5.0, 5.0);
        assert_eq!(apply_mask(&img, &point).unwrap(), img);
        let line = rect(2.0, 5.0, 15.0, 5.0);
        assert_eq!(apply_mask(&img, &line).unwrap(), img);
    }

    #[test]
    fn rectangle_changes_exactly_its_pixels() {
        let img = checker(30, 40);
        let out = apply_mask(&img, &rect(4.0, 6.0, 17.0, 31.0)).unwrap();
        let mut changed = 0;
        for y in 0..40 {
            for x in 0..30 {
                let inside = (4..17).contains(&x) && (6..31).contains(&y);
                assert_eq!(out.get(x, y) != img.get(x, y), inside, "pixel ({x},{y})");
                changed += inside as usize;
            }
        }
        assert_eq!(changed, 13 * 25);
        // top row is full colour, bottom row darker
        assert_eq!(out.get(4, 6), [74, 134, 212].map(|c: u8| (c as f64 * (1.0 - 0.25 * 0.5 / 25.0)).round() as u8));
        assert!(out.get(4, 30)[2] < out.get(4, 6)[2]);
    }

    #[test]
    fn self_intersecting_rejected() {
        let img = checker(20, 20);
        let mut g = rect(2.0, 2.0, 18.0, 18.0);
        std::mem::swap(&mut g.landmarks.chin_left, &mut g.landmarks.chin_right);
        assert!(matches!(apply_mask(&img, &g), Err(Error::SelfIntersectingPolygon)));
    }

    #[test]
    fn out_of_bounds_vertices_are_clamped() {
        let img = checker(10, 10);
        let out = apply_mask(&img, &rect(-5.0, -5.0, 50.0, 50.0)).unwrap();
        assert!(out.pixels().chunks_exact(3).all(|p| p[2] > p[0]));
    }

    #[test]
    fn fixed_landmarks_form_simple_polygon() {
        let g = FixedLandmarks::geometry(200, 256);
        assert!(is_simple(&g.polygon(200, 256)));
        let img = checker(200, 256);
        let out = apply_mask(&img, &g).unwrap();
        assert_ne!(out, img);
        assert_eq!(out.get(100, 20), img.get(100, 20));
    }
}
