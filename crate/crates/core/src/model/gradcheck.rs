//! Central finite-difference checks of analytic parameter gradients.

use rand::Rng;
use serde::Serialize;

use super::{loss_and_grads, Batch, LossSpec, Network};
use crate::error::Result;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradSample {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub samples: Vec<GradSample>,
}

impl GradCheck {
    pub fn max_relative_error(&self, floor: f64) -> f64 {
        self.samples.iter().map(|s| s.relative_error(floor)).fold(0.0, f64::max)
    }
}

/// Compares analytic gradients with `(L(θ+h) - L(θ-h)) / 2h` at `count`
/// parameter coordinates drawn uniformly (with the seed) across all tensors.
pub fn gradient_check(
    net: &Network,
    batch: &Batch<'_>,
    spec: &LossSpec,
    count: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheck> {
    let (_, grads) = loss_and_grads(net, batch, spec)?;
    let sizes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = seed::rng(seed);
    let mut probe = net.clone();
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let mut flat = rng.gen_range(0..total);
        let mut tensor = 0;
        while flat >= sizes[tensor] {
            flat -= sizes[tensor];
            tensor += 1;
        }
        let original = probe.params()[tensor][flat];
        probe.params_mut()[tensor][flat] = original + h;
        let plus = loss_and_grads(&probe, batch, spec)?.0.loss;
        probe.params_mut()[tensor][flat] = original - h;
        let minus = loss_and_grads(&probe, batch, spec)?.0.loss;
        probe.params_mut()[tensor][flat] = original;
        samples.push(GradSample { tensor, index: flat, analytic: grads[tensor][flat], numeric: (plus - minus) / (2.0 * h) });
    }
    Ok(GradCheck { samples })
}
