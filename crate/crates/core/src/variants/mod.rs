//! Seeded adversarial image filters.
//!
//! Every filter is a pure function of `(input bytes, parameters, seed)` and
//! preserves image dimensions:
//!
//! - [`rgb_noise`] adds uniform integer noise in `[-B, B]` with
//!   `B = round(amplitude * 255)`, independently per channel and pixel, then
//!   clamps to `[0, 255]`.
//! - [`spread`] visits pixels in raster order and swaps each one with a
//!   uniformly chosen partner within Chebyshev distance `radius`.
//! - [`greyscale`] replaces each pixel with its luma
//!   `round(0.299 R + 0.587 G + 0.114 B)` (half up).
//! - [`apply_mask`] paints an N95-style mask polygon with a vertical shade.

mod generate;
mod mask;

pub use generate::{apply_variant, generate_variants, variant_path, variant_seed, VariantFailure, VariantJob, VariantOutcome};
pub use mask::{apply_mask, mask_face, FixedLandmarks, LandmarkProvider, MaskGeometry, MaskLandmarks, N95_BLUE};

use crate::error::{Error, Result};
use crate::imagebuf::ImageBuffer;
use crate::seed;

/// Per-channel noise bound for an amplitude: `round(amplitude * 255)`.
pub fn noise_bound(amplitude: f64) -> u32 {
    (amplitude * 255.0).round() as u32
}

/// Noise value for channel `c` of pixel `(x, y)`.
#[inline]
pub fn noise_at(seed: u64, bound: u32, x: u32, y: u32, c: u32) -> i32 {
    let span = 2 * bound as u64 + 1;
    seed::below(seed::mix(seed, &[x as u64, y as u64, c as u64]), span) as i32 - bound as i32
}

pub fn rgb_noise(img: &ImageBuffer, amplitude: f64, seed: u64) -> Result<ImageBuffer> {
    if !(amplitude > 0.0 && amplitude <= 1.0) {
        return Err(Error::BadAmplitude(amplitude));
    }
    let bound = noise_bound(amplitude);
    let mut out = img.clone();
    if bound == 0 {
        return Ok(out);
    }
    let width = img.width();
    for (i, px) in out.pixels_mut().chunks_exact_mut(3).enumerate() {
        let (x, y) = (i as u32 % width, i as u32 / width);
        for (c, v) in px.iter_mut().enumerate() {
            let n = noise_at(seed, bound, x, y, c as u32);
            *v = (*v as i32 + n).clamp(0, 255) as u8;
        }
    }
    Ok(out)
}

/// Swap partner (linear index) for pixel `p` in the spread schedule.
#[inline]
pub fn spread_partner(width: u32, height: u32, radius: u32, seed: u64, p: usize) -> usize {
    let (x, y) = ((p % width as usize) as i64, (p / width as usize) as i64);
    let r = radius as i64;
    let (x_lo, x_hi) = ((x - r).max(0), (x + r).min(width as i64 - 1));
    let (y_lo, y_hi) = ((y - r).max(0), (y + r).min(height as i64 - 1));
    let wx = (x_hi - x_lo + 1) as u64;
    let wy = (y_hi - y_lo + 1) as u64;
    let k = seed::below(seed::mix(seed, &[p as u64]), wx * wy);
    let qx = x_lo + (k % wx) as i64;
    let qy = y_lo + (k / wx) as i64;
    (qy * width as i64 + qx) as usize
}

/// The full swap schedule `(p, q)` in application order.
pub fn spread_schedule(width: u32, height: u32, radius: u32, seed: u64) -> impl Iterator<Item = (usize, usize)> {
    let n = width as usize * height as usize;
    (0..n).map(move |p| (p, spread_partner(width, height, radius, seed, p)))
}

pub fn spread(img: &ImageBuffer, radius: u32, seed: u64) -> Result<ImageBuffer> {
    if radius < 1 {
        return Err(Error::BadRadius(radius));
    }
    let mut out = img.clone();
    let px = out.pixels_mut();
    for (p, q) in spread_schedule(img.width(), img.height(), radius, seed) {
        if p != q {
            for c in 0..3 {
                px.swap(3 * p + c, 3 * q + c);
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn luma(rgb: [u8; 3]) -> u8 {
    ((299 * rgb[0] as u32 + 587 * rgb[1] as u32 + 114 * rgb[2] as u32 + 500) / 1000) as u8
}

pub fn greyscale(img: &ImageBuffer) -> ImageBuffer {
    let mut out = img.clone();
    for px in out.pixels_mut().chunks_exact_mut(3) {
        let y = luma([px[0], px[1], px[2]]);
        px.fill(y);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_image(w: u32, h: u32, seed: u64) -> ImageBuffer {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    #[test]
    fn tiny_amplitude_is_identity() {
        let img = random_image(16, 16, 1);
        // round(0.001 * 255) = 0
        assert_eq!(rgb_noise(&img, 0.001, 42).unwrap(), img);
    }

    #[test]
    fn bad_amplitude() {
        let img = random_image(2, 2, 1);
        for a in [0.0, -0.1, 1.01, f64::NAN] {
            assert!(matches!(rgb_noise(&img, a, 1), Err(Error::BadAmplitude(_))));
        }
    }

    #[test]
    fn rgb_noise_is_deterministic() {
        let img = random_image(32, 32, 2);
        assert_eq!(rgb_noise(&img, 0.3, 42).unwrap(), rgb_noise(&img, 0.3, 42).unwrap());
        assert_ne!(rgb_noise(&img, 0.3, 42).unwrap(), rgb_noise(&img, 0.3, 43).unwrap());
    }

    /// Exact E|out - in| and Var|out - in| for one input value under the
    /// declared law, by enumerating all 2B+1 noise values.
    fn abs_delta_moments(v: u8, bound: i32) -> (f64, f64) {
        let span = (2 * bound + 1) as f64;
        let (mut m1, mut m2) = (0.0, 0.0);
        for n in -bound..=bound {
            let d = ((v as i32 + n).clamp(0, 255) - v as i32).abs() as f64;
            m1 += d / span;
            m2 += d * d / span;
        }
        (m1, m2 - m1 * m1)
    }

    #[test]
    fn rgb_noise_statistics_match_enumerated_law() {
        let img = random_image(64, 64, 3);
        let out = rgb_noise(&img, 0.3, 42).unwrap();
        let bound = noise_bound(0.3) as i32;
        assert_eq!(bound, 77);
        let mut max_delta = 0;
        let mut observed = 0.0;
        let (mut expected, mut variance) = (0.0, 0.0);
        for (a, b) in img.pixels().iter().zip(out.pixels()) {
            let d = (*a as i32 - *b as i32).abs();
            max_delta = max_delta.max(d);
            observed += d as f64;
            let (m, v) = abs_delta_moments(*a, bound);
            expected += m;
            variance += v;
        }
        assert_eq!(max_delta, 77);
        let n = img.pixels().len() as f64;
        let sigma = variance.sqrt() / n;
        assert!(((observed - expected) / n).abs() < 3.0 * sigma, "mean |d| {} vs {}", observed / n, expected / n);
    }

    #[test]
    fn spread_single_pixel_identity() {
        let img = random_image(1, 1, 4);
        assert_eq!(spread(&img, 3, 9).unwrap(), img);
    }

    #[test]
    fn spread_rejects_zero_radius() {
        assert!(matches!(spread(&random_image(3, 3, 0), 0, 1), Err(Error::BadRadius(0))));
    }

    #[test]
    fn spread_matches_replayed_schedule() {
        // 4x4 with distinct values; replay the swaps on a label grid.
        let img = ImageBuffer::from_fn(4, 4, |x, y| {
            let v = (y * 4 + x) as u8;
            [v, v.wrapping_add(100), v.wrapping_mul(3)]
        });
        let seed = 1234;
        let out = spread(&img, 1, seed).unwrap();
        let mut labels: Vec<usize> = (0..16).collect();
        for p in 0..16 {
            let (px, py) = (p % 4, p / 4);
            let q = spread_partner(4, 4, 1, seed, p);
            let (qx, qy) = (q % 4, q / 4);
            assert!(px.abs_diff(qx) <= 1 && py.abs_diff(qy) <= 1);
            labels.swap(p, q);
        }
        for (pos, &src) in labels.iter().enumerate() {
            let (x, y) = ((pos % 4) as u32, (pos / 4) as u32);
            let (sx, sy) = ((src % 4) as u32, (src / 4) as u32);
            assert_eq!(out.get(x, y), img.get(sx, sy));
        }
        assert_ne!(out, img);
    }

    #[test]
    fn greyscale_examples() {
        let img = ImageBuffer::new(2, 1, vec![128, 128, 128, 255, 0, 0]).unwrap();
        let g = greyscale(&img);
        assert_eq!(g.get(0, 0), [128, 128, 128]);
        assert_eq!(g.get(1, 0), [76, 76, 76]);
    }

    fn sorted_pixels(img: &ImageBuffer) -> Vec<[u8; 3]> {
        let mut v: Vec<[u8; 3]> = img.pixels().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        v.sort_unstable();
        v
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn noise_bound_holds(w in 1u32..24, h in 1u32..24, img_seed: u64, seed: u64, a in 0.01f64..=1.0) {
            let img = random_image(w, h, img_seed);
            let out = rgb_noise(&img, a, seed).unwrap();
            let bound = noise_bound(a) as i32;
            for (x, y) in img.pixels().iter().zip(out.pixels()) {
                prop_assert!((*x as i32 - *y as i32).abs() <= bound);
            }
        }

        #[test]
        fn spread_preserves_multiset(w in 1u32..24, h in 1u32..24, r in 1u32..6, img_seed: u64, seed: u64) {
            let img = random_image(w, h, img_seed);
            let out = spread(&img, r, seed).unwrap();
            prop_assert_eq!(sorted_pixels(&img), sorted_pixels(&out));
        }

        #[test]
        fn greyscale_idempotent(w in 1u32..16, h in 1u32..16, img_seed: u64) {
            let g = greyscale(&random_image(w, h, img_seed));
            prop_assert!(g.pixels().chunks_exact(3).all(|c| c[0] == c[1] && c[1] == c[2]));
            prop_assert_eq!(greyscale(&g), g);
        }
    }
}
