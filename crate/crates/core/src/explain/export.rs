use std::path::Path;

use ndarray::Array2;
use ndarray_npy::NpzWriter;

use super::SaliencyMap;
use crate::error::{Error, Result};
use crate::imagebuf::ImageBuffer;

pub const HEAT_ALPHA: f64 = 0.5;

/// Blue → cyan → yellow → red ramp for `t` in `[0, 1]`.
fn heat(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let stops = [[0.0, 0.0, 255.0], [0.0, 255.0, 255.0], [255.0, 255.0, 0.0], [255.0, 0.0, 0.0]];
    let s = t * 3.0;
    let i = (s.floor() as usize).min(2);
    let f = s - i as f64;
    [0, 1, 2].map(|c| stops[i][c] + (stops[i + 1][c] - stops[i][c]) * f)
}

/// Heat-map colouring of `map` blended over `base` (same size).
pub fn heat_overlay(base: &ImageBuffer, map: &SaliencyMap) -> Result<ImageBuffer> {
    if base.width() as usize != map.width || base.height() as usize != map.height {
        return Err(Error::DimMismatch(format!(
            "image is {}x{}, map is {}x{}",
            base.width(),
            base.height(),
            map.width,
            map.height
        )));
    }
    Ok(ImageBuffer::from_fn(base.width(), base.height(), |x, y| {
        let h = heat(map.upsampled[y as usize * map.width + x as usize]);
        let p = base.get(x, y);
        [0, 1, 2].map(|c| ((1.0 - HEAT_ALPHA) * p[c] as f64 + HEAT_ALPHA * h[c]).round() as u8)
    }))
}

/// Writes `<name>_grid` and `<name>_upsampled` float arrays per map.
pub fn save_npz(maps: &[(&str, &SaliencyMap)], path: &Path) -> Result<()> {
    let npz_err = |e: &dyn std::fmt::Display| Error::Io(std::io::Error::other(e.to_string()));
    let mut npz = NpzWriter::new(std::fs::File::create(path)?);
    for (name, m) in maps {
        let grid = Array2::from_shape_vec((m.grid_height, m.grid_width), m.grid.clone()).map_err(|e| npz_err(&e))?;
        let up = Array2::from_shape_vec((m.height, m.width), m.upsampled.clone()).map_err(|e| npz_err(&e))?;
        npz.add_array(format!("{name}_grid"), &grid).map_err(|e| npz_err(&e))?;
        npz.add_array(format!("{name}_upsampled"), &up).map_err(|e| npz_err(&e))?;
    }
    npz.finish().map_err(|e| npz_err(&e))?;
    Ok(())
}

/// Tiles equally sized images row by row with a white gutter.
pub fn compose_grid(tiles: &[ImageBuffer], cols: usize, gutter: u32) -> Result<ImageBuffer> {
    let first = tiles.first().ok_or(Error::EmptyGroup)?;
    let (w, h) = (first.width(), first.height());
    if tiles.iter().any(|t| t.width() != w || t.height() != h) {
        return Err(Error::DimMismatch("grid tiles differ in size".into()));
    }
    let cols = cols.clamp(1, tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let out_w = cols as u32 * (w + gutter) + gutter;
    let out_h = rows as u32 * (h + gutter) + gutter;
    let mut out = ImageBuffer::filled(out_w, out_h, [255, 255, 255]);
    for (i, t) in tiles.iter().enumerate() {
        let ox = gutter + (i % cols) as u32 * (w + gutter);
        let oy = gutter + (i / cols) as u32 * (h + gutter);
        for y in 0..h {
            for x in 0..w {
                out.put(ox + x, oy + y, t.get(x, y));
            }
        }
    }
    Ok(out)
}
