//! Grad-CAM saliency, group averages and face-zone profiles.
//!
//! The target score is the pre-softmax logit of the requested class. The
//! hooked activation is a conv block's post-ReLU output (before pooling),
//! by default the last block's.

mod export;

pub use export::{compose_grid, heat_overlay, save_npz, HEAT_ALPHA};

use serde::{Deserialize, Serialize};

use crate::audit::GroupKey;
use crate::error::{Error, Result};
use crate::imagebuf::resize_grid;
use crate::model::Network;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    /// Row-major, `grid_height × grid_width`, non-negative.
    pub grid: Vec<f64>,
    pub grid_width: usize,
    pub grid_height: usize,
    /// Row-major, `height × width`, min-max normalized to `[0, 1]`.
    pub upsampled: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub target_class: usize,
    /// Source record, or `group:<key>` for an average.
    pub record_id: String,
    /// Number of maps averaged (1 for a single image).
    pub count: usize,
    /// Grad-CAM channel weights (spatial mean of the target gradient).
    pub channel_weights: Vec<f64>,
}

/// Min-max normalization; an all-zero input stays zero and a constant
/// positive input becomes all ones.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        return vec![0.0; values.len()];
    }
    if max - min <= f64::EPSILON * max {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - min) / (max - min)).collect()
}

/// Grad-CAM for `target_class` on a prepared network input.
///
/// `block` selects the conv block to hook; `None` means the last one.
pub fn gradcam_input(
    net: &Network,
    input: &[f64],
    target_class: usize,
    block: Option<usize>,
    record_id: &str,
) -> Result<SaliencyMap> {
    let block = block.unwrap_or_else(|| net.conv_blocks().saturating_sub(1));
    let idx = net.conv_output_index(block).ok_or(Error::NoConvLayer)?;
    let classes = net.config().classes();
    if target_class >= classes {
        return Err(Error::LabelMismatch(format!("class index {target_class} of {classes}")));
    }
    let trace = net.trace(input)?;
    let mut seed = vec![0.0; classes];
    seed[target_class] = 1.0;
    let (_, grad) = net.backward(&trace, &[(net.layers().len(), &seed)], Some(idx));
    let grad = grad.expect("captured gradient");
    // the ReLU's input has the same spatial layout; `shape(idx)` may be flattened
    let shape = net.shape(idx - 1);
    let plane = shape.h * shape.w;
    let acts = &trace.acts[idx];
    let weights: Vec<f64> =
        (0..shape.c).map(|k| grad[k * plane..(k + 1) * plane].iter().sum::<f64>() / plane as f64).collect();
    let mut grid = vec![0.0; plane];
    for (k, w) in weights.iter().enumerate() {
        for (g, a) in grid.iter_mut().zip(&acts[k * plane..(k + 1) * plane]) {
            *g += w * a;
        }
    }
    grid.iter_mut().for_each(|v| *v = v.max(0.0));
    let input_shape = net.input_shape();
    let up = resize_grid(&grid, shape.w, shape.h, input_shape.w, input_shape.h);
    Ok(SaliencyMap {
        grid,
        grid_width: shape.w,
        grid_height: shape.h,
        upsampled: min_max_normalize(&up),
        width: input_shape.w,
        height: input_shape.h,
        target_class,
        record_id: record_id.to_owned(),
        count: 1,
        channel_weights: weights,
    })
}

pub fn gradcam(
    net: &Network,
    image: &crate::ImageBuffer,
    target_class: usize,
    block: Option<usize>,
    record_id: &str,
) -> Result<SaliencyMap> {
    gradcam_input(net, &net.input_from_image(image)?, target_class, block, record_id)
}

/// Pixelwise mean of `maps`, renormalized.
///
/// Maps are summed in a canonical order (by record id, then contents) so
/// the result does not depend on the order of `maps`.
pub fn group_average_map(maps: &[SaliencyMap], group: &GroupKey) -> Result<SaliencyMap> {
    let first = maps.first().ok_or(Error::EmptyGroup)?;
    for m in maps {
        if (m.width, m.height, m.grid_width, m.grid_height) != (first.width, first.height, first.grid_width, first.grid_height)
        {
            return Err(Error::DimMismatch(format!(
                "{} is {}x{} (grid {}x{}), expected {}x{} (grid {}x{})",
                m.record_id, m.width, m.height, m.grid_width, m.grid_height, first.width, first.height, first.grid_width,
                first.grid_height
            )));
        }
        if m.target_class != first.target_class {
            return Err(Error::DimMismatch(format!(
                "{} targets class {}, expected {}",
                m.record_id, m.target_class, first.target_class
            )));
        }
    }
    let mut order: Vec<&SaliencyMap> = maps.iter().collect();
    order.sort_by(|a, b| {
        a.record_id.cmp(&b.record_id).then_with(|| {
            a.upsampled.iter().zip(&b.upsampled).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let n = maps.len() as f64;
    let mean = |get: &dyn Fn(&SaliencyMap) -> &[f64]| -> Vec<f64> {
        let mut acc = vec![0.0; get(first).len()];
        for m in &order {
            for (a, v) in acc.iter_mut().zip(get(m)) {
                *a += v;
            }
        }
        acc.iter().map(|v| v / n).collect()
    };
    let upsampled = mean(&|m| &m.upsampled);
    let grid = mean(&|m| &m.grid);
    Ok(SaliencyMap {
        grid,
        grid_width: first.grid_width,
        grid_height: first.grid_height,
        upsampled: min_max_normalize(&upsampled),
        width: first.width,
        height: first.height,
        target_class: first.target_class,
        record_id: format!("group:{group}"),
        count: maps.len(),
        channel_weights: Vec::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Zone {
    Forehead,
    Nose,
    Mouth,
    Periphery,
}

impl Zone {
    pub const ALL: [Zone; 4] = [Zone::Forehead, Zone::Nose, Zone::Mouth, Zone::Periphery];

    /// Zone of the pixel whose centre sits at fractional position `(fx, fy)`.
    ///
    /// forehead: rows 10–35 %, all columns; nose: rows 35–60 % × columns
    /// 35–65 %; mouth: rows 60–75 % × columns 30–70 %; periphery: the rest.
    /// Intervals are half-open.
    pub fn at(fx: f64, fy: f64) -> Zone {
        let within = |v: f64, lo: f64, hi: f64| v >= lo && v < hi;
        if within(fy, 0.10, 0.35) {
            Zone::Forehead
        } else if within(fy, 0.35, 0.60) && within(fx, 0.35, 0.65) {
            Zone::Nose
        } else if within(fy, 0.60, 0.75) && within(fx, 0.30, 0.70) {
            Zone::Mouth
        } else {
            Zone::Periphery
        }
    }
}

/// Share of saliency mass per face zone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionProfile {
    pub forehead: f64,
    pub nose: f64,
    pub mouth: f64,
    pub periphery: f64,
}

impl RegionProfile {
    pub fn get(&self, zone: Zone) -> f64 {
        match zone {
            Zone::Forehead => self.forehead,
            Zone::Nose => self.nose,
            Zone::Mouth => self.mouth,
            Zone::Periphery => self.periphery,
        }
    }

    /// The zone holding the most mass.
    pub fn dominant(&self) -> Zone {
        Zone::ALL.into_iter().fold(Zone::Periphery, |best, z| if self.get(z) > self.get(best) { z } else { best })
    }
}

/// Mass fraction of the upsampled map in each zone. A zero map returns the
/// zones' area fractions.
pub fn region_profile(map: &SaliencyMap) -> RegionProfile {
    let total: f64 = map.upsampled.iter().sum();
    let uniform = total <= 0.0;
    let mut mass = [0.0f64; 4];
    for y in 0..map.height {
        let fy = (y as f64 + 0.5) / map.height as f64;
        for x in 0..map.width {
            let fx = (x as f64 + 0.5) / map.width as f64;
            let v = if uniform { 1.0 } else { map.upsampled[y * map.width + x] };
            mass[Zone::at(fx, fy) as usize] += v;
        }
    }
    let sum: f64 = mass.iter().sum();
    RegionProfile { forehead: mass[0] / sum, nose: mass[1] / sum, mouth: mass[2] / sum, periphery: mass[3] / sum }
}

#[cfg(test)]
mod tests;
