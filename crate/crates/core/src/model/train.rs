//! Losses, the Adam optimizer and the batched training step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Grads, Network};
use crate::error::{Error, Result};

/// Softmax cross-entropy (binary cross-entropy for two classes).
/// Returns `(loss, dloss/dlogits)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let p = super::softmax(logits);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[label];
    let mut grad = p;
    grad[label] -= 1.0;
    (loss, grad)
}

const NORM_EPS: f64 = 1e-12;

/// `h / sqrt(|h|² + 1e-12)`; returns the unit vector and the norm used.
pub fn l2_normalize(h: &[f64]) -> (Vec<f64>, f64) {
    let norm = (h.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
    (h.iter().map(|v| v / norm).collect(), norm)
}

/// Gradient w.r.t. `h` given the gradient w.r.t. `e = l2_normalize(h)`.
pub fn l2_normalize_backward(e: &[f64], norm: f64, de: &[f64]) -> Vec<f64> {
    let dot: f64 = e.iter().zip(de).map(|(a, b)| a * b).sum();
    e.iter().zip(de).map(|(ev, dv)| (dv - ev * dot) / norm).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `max(0, |a - p|² - |a - n|² + margin)`.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(Error::DimMismatch(format!(
            "triplet embeddings of dimension {}, {}, {}",
            anchor.len(),
            positive.len(),
            negative.len()
        )));
    }
    Ok((sq_dist(anchor, positive) - sq_dist(anchor, negative) + margin).max(0.0))
}

/// Triplet loss with gradients `(loss, d_anchor, d_positive, d_negative)`.
/// The hinge is treated as inactive at exactly zero.
pub fn triplet_loss_grad(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let raw = sq_dist(a, p) - sq_dist(a, n) + margin;
    if raw <= 0.0 {
        let z = vec![0.0; a.len()];
        return (0.0, z.clone(), z.clone(), z);
    }
    let da = n.iter().zip(p).map(|(nv, pv)| 2.0 * (nv - pv)).collect();
    let dp = a.iter().zip(p).map(|(av, pv)| -2.0 * (av - pv)).collect();
    let dn = a.iter().zip(n).map(|(av, nv)| 2.0 * (av - nv)).collect();
    (raw, da, dp, dn)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub w_triplet: f64,
    pub w_bce: f64,
    pub margin: f64,
}

impl LossSpec {
    pub const CLASSIFICATION: LossSpec = LossSpec { w_triplet: 0.0, w_bce: 1.0, margin: 0.2 };

    pub fn combined(w_triplet: f64, w_bce: f64, margin: f64) -> Self {
        Self { w_triplet, w_bce, margin }
    }
}

/// One contrastive training unit; the classification term uses the anchor label.
#[derive(Clone, Debug)]
pub struct TripletExample {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    pub anchor_label: usize,
}

pub enum Batch<'a> {
    Classification(&'a [(Vec<f64>, usize)]),
    Triplets(&'a [TripletExample]),
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        match self {
            Batch::Classification(b) => b.len(),
            Batch::Triplets(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Batch-mean loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// `w_triplet * triplet + w_bce * bce`.
    pub loss: f64,
    pub triplet: f64,
    pub bce: f64,
    /// Triplets whose hinge is zero.
    pub satisfied: usize,
    pub examples: usize,
}

fn add_into(acc: &mut Grads, g: Grads) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

struct ExampleOut {
    grads: Grads,
    triplet: f64,
    bce: f64,
    satisfied: bool,
}

fn classification_example(net: &Network, input: &[f64], label: usize, scale: f64) -> Result<ExampleOut> {
    let trace = net.trace(input)?;
    let (loss, mut d) = cross_entropy(trace.logits(), label);
    d.iter_mut().for_each(|v| *v *= scale);
    let n = net.layers().len();
    let (grads, _) = net.backward(&trace, &[(n, &d)], None);
    Ok(ExampleOut { grads, triplet: 0.0, bce: loss, satisfied: false })
}

fn triplet_example(net: &Network, ex: &TripletExample, spec: &LossSpec, scale: f64) -> Result<ExampleOut> {
    let emb = net
        .embedding_index()
        .ok_or_else(|| Error::Config("triplet loss needs a hidden dense layer for the embedding".into()))?;
    let n = net.layers().len();
    let ta = net.trace(&ex.anchor)?;
    let tp = net.trace(&ex.positive)?;
    let tn = net.trace(&ex.negative)?;
    let (ea, na) = l2_normalize(&ta.acts[emb]);
    let (ep, np) = l2_normalize(&tp.acts[emb]);
    let (en, nn) = l2_normalize(&tn.acts[emb]);
    let (triplet, da, dp, dn) = triplet_loss_grad(&ea, &ep, &en, spec.margin);
    let (bce, mut dlogits) = cross_entropy(ta.logits(), ex.anchor_label);
    dlogits.iter_mut().for_each(|v| *v *= scale * spec.w_bce);

    let wt = scale * spec.w_triplet;
    let scaled = |g: Vec<f64>| -> Vec<f64> { g.into_iter().map(|v| v * wt).collect() };
    let ha = scaled(l2_normalize_backward(&ea, na, &da));
    let grads = if triplet > 0.0 && spec.w_triplet != 0.0 {
        let hp = scaled(l2_normalize_backward(&ep, np, &dp));
        let hn = scaled(l2_normalize_backward(&en, nn, &dn));
        let (mut g, _) = net.backward(&ta, &[(n, &dlogits), (emb, &ha)], None);
        add_into(&mut g, net.backward(&tp, &[(emb, &hp)], None).0);
        add_into(&mut g, net.backward(&tn, &[(emb, &hn)], None).0);
        g
    } else {
        net.backward(&ta, &[(n, &dlogits)], None).0
    };
    Ok(ExampleOut { grads, triplet, bce, satisfied: triplet == 0.0 })
}

/// Batch-mean loss and its parameter gradients.
///
/// Examples are evaluated in parallel and reduced in batch order, so the
/// result is bitwise reproducible.
pub fn loss_and_grads(net: &Network, batch: &Batch<'_>, spec: &LossSpec) -> Result<(StepMetrics, Grads)> {
    let count = batch.len();
    if count == 0 {
        return Ok((StepMetrics::default(), net.zero_grads()));
    }
    let scale = 1.0 / count as f64;
    let outs: Vec<Result<ExampleOut>> = match batch {
        Batch::Classification(items) => items
            .par_iter()
            .map(|(x, y)| classification_example(net, x, *y, scale * spec.w_bce))
            .collect(),
        Batch::Triplets(items) => items.par_iter().map(|ex| triplet_example(net, ex, spec, scale)).collect(),
    };
    let mut grads = net.zero_grads();
    let mut m = StepMetrics { examples: count, ..Default::default() };
    for out in outs {
        let out = out?;
        m.triplet += out.triplet;
        m.bce += out.bce;
        m.satisfied += out.satisfied as usize;
        add_into(&mut grads, out.grads);
    }
    m.triplet *= scale;
    m.bce *= scale;
    m.loss = match batch {
        Batch::Classification(_) => spec.w_bce * m.bce,
        Batch::Triplets(_) => spec.w_triplet * m.triplet + spec.w_bce * m.bce,
    };
    if matches!(batch, Batch::Classification(_)) {
        m.satisfied = 0;
    }
    Ok((m, grads))
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(net: &Network, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: net.zero_grads(), v: net.zero_grads() }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Grads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in net.params_mut().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// One optimizer update on `batch`. Fails without touching the parameters
/// when the loss is not finite.
pub fn train_step(net: &mut Network, opt: &mut Adam, batch: &Batch<'_>, spec: &LossSpec) -> Result<StepMetrics> {
    let (metrics, grads) = loss_and_grads(net, batch, spec)?;
    if !metrics.loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: opt.t as usize,
            detail: format!("loss {} (triplet {}, bce {})", metrics.loss, metrics.triplet, metrics.bce),
        });
    }
    opt.step(net, &grads);
    Ok(metrics)
}
