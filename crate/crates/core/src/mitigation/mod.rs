//! Bias mitigation: k-shot fine-tuning, triplet contrastive fine-tuning and
//! the two-stage schemes used for the country task.
//!
//! Trainers are functional: they read a [`Checkpoint`] and return a new one
//! together with a [`TrainLog`]. Every stochastic choice (batch order,
//! anchor selection, negative draws) is derived from `TrainingConfig::seed`.

mod experiment;
mod triplets;

pub use experiment::{run_experiment, ExperimentResult, ExperimentSpec, RepeatResult, Scheme};
pub use triplets::{build_triplets, AnchorPolicy, Triplet, TripletSpec, CANONICAL_OPPOSITE_PROBABILITY};

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::Task;
use crate::corpus::{FaceRecord, Gender, ImageStore, Manifest};
use crate::error::{Error, Result};
use crate::model::{train_step, Adam, Batch, Checkpoint, LossSpec, Network, StepMetrics, TripletExample};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossMix {
    pub w_triplet: f64,
    pub w_bce: f64,
}

impl Default for LossMix {
    fn default() -> Self {
        Self { w_triplet: 0.8, w_bce: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Used by contrastive training; few-shot fine-tuning is plain cross-entropy.
    pub loss_mix: LossMix,
    pub batch_size: usize,
    pub seed: u64,
    pub repeats: usize,
}

impl TrainingConfig {
    pub fn few_shot() -> Self {
        Self { learning_rate: 1e-5, epochs: 10, loss_mix: LossMix::default(), batch_size: 8, seed: 0, repeats: 3 }
    }

    pub fn contrastive() -> Self {
        Self { epochs: 40, ..Self::few_shot() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let LossMix { w_triplet, w_bce } = self.loss_mix;
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.repeats == 0 {
            return Err(Error::Config("epochs, batch_size and repeats must be at least 1".into()));
        }
        if w_triplet < 0.0 || w_bce < 0.0 || (w_triplet + w_bce - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("loss weights {w_triplet} and {w_bce} must be non-negative and sum to 1")));
        }
        Ok(())
    }
}

/// One optimizer update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: usize,
    pub epoch: usize,
    pub step: usize,
    pub w_triplet: f64,
    pub w_bce: f64,
    #[serde(flatten)]
    pub metrics: StepMetrics,
}

/// Example-weighted means over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: usize,
    pub epoch: usize,
    pub loss: f64,
    pub triplet: f64,
    pub bce: f64,
    /// Fraction of the epoch's triplets with a zero hinge when their batch was
    /// evaluated; `None` for classification epochs.
    pub satisfaction: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// `(stage, description)` at each stage start.
    pub stages: Vec<(usize, String)>,
    /// Satisfaction of the last epoch's triplets under the final parameters.
    pub final_satisfaction: Option<f64>,
}

impl TrainLog {
    fn append(&mut self, other: TrainLog) {
        self.steps.extend(other.steps);
        self.epochs.extend(other.epochs);
        self.stages.extend(other.stages);
        if other.final_satisfaction.is_some() {
            self.final_satisfaction = other.final_satisfaction;
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Network inputs memoized by `image_ref`.
pub struct InputCache<'a> {
    store: &'a dyn ImageStore,
    inputs: HashMap<String, Vec<f64>>,
}

impl<'a> InputCache<'a> {
    pub fn new(store: &'a dyn ImageStore) -> Self {
        Self { store, inputs: HashMap::new() }
    }

    /// Loads every listed record not yet cached, in parallel.
    pub fn preload(&mut self, net: &Network, records: &[&FaceRecord]) -> Result<()> {
        let mut missing: Vec<&str> = records.iter().map(|r| r.image_ref.as_str()).filter(|r| !self.inputs.contains_key(*r)).collect();
        missing.sort_unstable();
        missing.dedup();
        let loaded: Vec<(String, Vec<f64>)> = missing
            .par_iter()
            .map(|r| Ok((r.to_string(), net.input_from_image(&self.store.load(r)?)?)))
            .collect::<Result<_>>()?;
        self.inputs.extend(loaded);
        Ok(())
    }

    pub fn get(&self, record: &FaceRecord) -> &[f64] {
        &self.inputs[&record.image_ref]
    }
}

fn labels_for(net: &Network, records: &[&FaceRecord], task: Task) -> Result<Vec<usize>> {
    records.iter().map(|r| net.config().class_index(&task.truth(r))).collect()
}

const SHUFFLE: u64 = 0x5348_5546;
const TRIPLETS: u64 = 0x5452_4950;

fn epoch_order(len: usize, seed: u64, stage: usize, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut seed::rng(seed::mix(seed, &[SHUFFLE, stage as u64, epoch as u64])));
    order
}

fn epoch_summary(stage: usize, epoch: usize, steps: &[StepLog], spec: &LossSpec, triplets: bool) -> EpochLog {
    let n: usize = steps.iter().map(|s| s.metrics.examples).sum();
    let mean = |f: fn(&StepMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            steps.iter().map(|s| f(&s.metrics) * s.metrics.examples as f64).sum::<f64>() / n as f64
        }
    };
    let triplet = mean(|m| m.triplet);
    let bce = mean(|m| m.bce);
    let satisfied: usize = steps.iter().map(|s| s.metrics.satisfied).sum();
    EpochLog {
        stage,
        epoch,
        loss: if triplets { spec.w_triplet * triplet + spec.w_bce * bce } else { spec.w_bce * bce },
        triplet,
        bce,
        satisfaction: (triplets && n > 0).then(|| satisfied as f64 / n as f64),
    }
}

fn finish(base: &Checkpoint, net: &Network, log: &TrainLog, hashes: Vec<String>, stage: &str) -> Checkpoint {
    let mut prov = base.provenance.clone();
    prov.dataset_hashes.extend(hashes);
    prov.epochs += log.epochs.len();
    prov.loss_curve.extend(log.epochs.iter().map(|e| e.loss));
    prov.stages.push(stage.to_owned());
    Checkpoint::from_network(net, prov)
}

/// Cross-entropy fine-tuning on `shots` (typically from
/// [`crate::corpus::sample_kshot`]). Labels come from `task`.
pub fn finetune_kshot(
    base: &Checkpoint,
    shots: &Manifest,
    store: &dyn ImageStore,
    task: Task,
    config: &TrainingConfig,
) -> Result<TrainOutcome> {
    finetune_stage(base, shots, store, task, config, 0)
}

fn finetune_stage(
    base: &Checkpoint,
    shots: &Manifest,
    store: &dyn ImageStore,
    task: Task,
    config: &TrainingConfig,
    stage: usize,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut net = base.network()?;
    let records: Vec<&FaceRecord> = shots.records.iter().collect();
    let labels = labels_for(&net, &records, task)?;
    let mut cache = InputCache::new(store);
    cache.preload(&net, &records)?;
    let spec = LossSpec::CLASSIFICATION;
    let mut opt = Adam::new(&net, config.learning_rate);
    let mut log = TrainLog { stages: vec![(stage, format!("finetune {} records", records.len()))], ..Default::default() };
    for epoch in 0..config.epochs {
        let order = epoch_order(records.len(), config.seed, stage, epoch);
        let mut steps = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(Vec<f64>, usize)> = chunk.iter().map(|&i| (cache.get(records[i]).to_vec(), labels[i])).collect();
            let metrics = train_step(&mut net, &mut opt, &Batch::Classification(&batch), &spec)?;
            steps.push(StepLog { stage, epoch, step: opt.t as usize, w_triplet: 0.0, w_bce: 1.0, metrics });
        }
        log.epochs.push(epoch_summary(stage, epoch, &steps, &spec, false));
        log.steps.extend(steps);
    }
    let checkpoint = finish(base, &net, &log, vec![shots.content_hash()], &format!("finetune[{}]", task.name()));
    Ok(TrainOutcome { checkpoint, log })
}

/// Triplet contrastive fine-tuning with loss `w_t · triplet + w_b · CE`, the
/// cross-entropy term on anchor labels. Triplets are rebuilt every epoch.
pub fn contrastive_train(
    base: &Checkpoint,
    pool: &Manifest,
    store: &dyn ImageStore,
    spec: &TripletSpec,
    config: &TrainingConfig,
) -> Result<TrainOutcome> {
    contrastive_stage(base, pool, store, spec, config, 0)
}

fn contrastive_stage(
    base: &Checkpoint,
    pool: &Manifest,
    store: &dyn ImageStore,
    spec: &TripletSpec,
    config: &TrainingConfig,
    stage: usize,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut net = base.network()?;
    net.embedding_index()
        .ok_or_else(|| Error::Config("contrastive training needs a hidden dense layer for the embedding".into()))?;
    let loss = LossSpec::combined(config.loss_mix.w_triplet, config.loss_mix.w_bce, spec.margin);
    let mut cache = InputCache::new(store);
    let mut opt = Adam::new(&net, config.learning_rate);
    let mut log = TrainLog { stages: vec![(stage, format!("contrastive on {}", pool.provenance))], ..Default::default() };
    let mut last = Vec::new();
    for epoch in 0..config.epochs {
        let triplets = build_triplets(pool, spec, seed::mix(config.seed, &[TRIPLETS, stage as u64, epoch as u64]))?;
        let records: Vec<&FaceRecord> = triplets.iter().flat_map(|t| [t.anchor, t.positive, t.negative]).collect();
        cache.preload(&net, &records)?;
        let examples = triplet_examples(&net, &cache, &triplets, spec.task)?;
        let order = epoch_order(examples.len(), config.seed, stage, epoch);
        let mut steps = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TripletExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let metrics = train_step(&mut net, &mut opt, &Batch::Triplets(&batch), &loss)?;
            steps.push(StepLog {
                stage,
                epoch,
                step: opt.t as usize,
                w_triplet: loss.w_triplet,
                w_bce: loss.w_bce,
                metrics,
            });
        }
        log.epochs.push(epoch_summary(stage, epoch, &steps, &loss, true));
        log.steps.extend(steps);
        last = examples;
    }
    log.final_satisfaction = Some(satisfaction(&net, &last, spec.margin)?);
    let checkpoint = finish(base, &net, &log, vec![pool.content_hash()], &format!("contrastive[{}]", spec.task.name()));
    Ok(TrainOutcome { checkpoint, log })
}

fn triplet_examples(net: &Network, cache: &InputCache<'_>, triplets: &[Triplet<'_>], task: Task) -> Result<Vec<TripletExample>> {
    triplets
        .iter()
        .map(|t| {
            Ok(TripletExample {
                anchor: cache.get(t.anchor).to_vec(),
                positive: cache.get(t.positive).to_vec(),
                negative: cache.get(t.negative).to_vec(),
                anchor_label: net.config().class_index(&task.truth(t.anchor))?,
            })
        })
        .collect()
}

/// Fraction of `examples` whose triplet hinge is zero under `net`.
pub fn satisfaction(net: &Network, examples: &[TripletExample], margin: f64) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let emb = net.embedding_index().ok_or(Error::Config("network has no embedding layer".into()))?;
    let embed = |x: &[f64]| -> Result<Vec<f64>> { Ok(crate::model::l2_normalize(&net.trace(x)?.acts[emb]).0) };
    let hits: Vec<bool> = examples
        .par_iter()
        .map(|t| Ok(crate::model::triplet_loss(&embed(&t.anchor)?, &embed(&t.positive)?, &embed(&t.negative)?, margin)? == 0.0))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / examples.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoStageScheme {
    FinetuneThenFinetune,
    ContrastiveThenContrastive,
}

/// Two sequential country-task stages; an empty stage manifest is skipped.
/// Contrastive stages use `spec` with its task forced to [`Task::Country`].
pub fn two_stage_country(
    base: &Checkpoint,
    stage1: &Manifest,
    stage2: &Manifest,
    store: &dyn ImageStore,
    scheme: TwoStageScheme,
    configs: &[TrainingConfig; 2],
    spec: &TripletSpec,
) -> Result<TrainOutcome> {
    let classes = &base.config.class_names;
    for m in [stage1, stage2] {
        for c in m.countries() {
            if !classes.iter().any(|n| n == c.code()) {
                return Err(Error::LabelMismatch(c.code().to_owned()));
            }
        }
    }
    let spec = TripletSpec { task: Task::Country, ..spec.clone() };
    let mut current = base.clone();
    let mut log = TrainLog::default();
    for (stage, (manifest, config)) in [stage1, stage2].into_iter().zip(configs).enumerate() {
        if manifest.is_empty() {
            continue;
        }
        let out = match scheme {
            TwoStageScheme::FinetuneThenFinetune => finetune_stage(&current, manifest, store, Task::Country, config, stage)?,
            TwoStageScheme::ContrastiveThenContrastive => contrastive_stage(&current, manifest, store, &spec, config, stage)?,
        };
        current = out.checkpoint;
        log.append(out.log);
    }
    Ok(TrainOutcome { checkpoint: current, log })
}

/// Runs `f(index, seed)` once per repeat with seeds from
/// [`seed::repeat_seed`], in parallel; results keep repeat order.
pub fn run_repeats<T: Send>(repeats: usize, seed: u64, f: impl Fn(usize, u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    (0..repeats).into_par_iter().map(|i| f(i, seed::repeat_seed(seed, i))).collect()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Holdout accuracy of a classifier, per true class and per gender.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// `label -> (correct, total)`.
    pub per_class: BTreeMap<String, (usize, usize)>,
    pub per_gender: BTreeMap<Gender, (usize, usize)>,
    /// Predicted label per record, in manifest order.
    pub predictions: Vec<String>,
}

fn pct((correct, total): (usize, usize)) -> f64 {
    if total == 0 {
        f64::NAN
    } else {
        100.0 * correct as f64 / total as f64
    }
}

impl Evaluation {
    pub fn class_accuracy(&self, label: &str) -> f64 {
        self.per_class.get(label).copied().map_or(f64::NAN, pct)
    }

    pub fn gender_accuracy(&self, gender: Gender) -> f64 {
        self.per_gender.get(&gender).copied().map_or(f64::NAN, pct)
    }

    /// Unweighted mean of per-class accuracies, in percent.
    pub fn macro_accuracy(&self) -> f64 {
        mean(&self.per_class.values().map(|c| pct(*c)).collect::<Vec<_>>())
    }

    /// Male minus female accuracy, in percentage points.
    pub fn gender_disparity(&self) -> f64 {
        self.gender_accuracy(Gender::Male) - self.gender_accuracy(Gender::Female)
    }
}

pub fn evaluate(checkpoint: &Checkpoint, holdout: &Manifest, store: &dyn ImageStore, task: Task) -> Result<Evaluation> {
    let net = checkpoint.network()?;
    let classes = &net.config().class_names;
    let predictions: Vec<String> = holdout
        .records
        .par_iter()
        .map(|r| {
            let logits = net.logits(&net.input_from_image(&store.load(&r.image_ref)?)?)?;
            let best = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
            Ok(classes[best].clone())
        })
        .collect::<Result<_>>()?;
    let mut eval = Evaluation::default();
    for (r, p) in holdout.records.iter().zip(&predictions) {
        let truth = task.truth(r);
        let hit = (*p == truth) as usize;
        let c = eval.per_class.entry(truth).or_default();
        c.0 += hit;
        c.1 += 1;
        let g = eval.per_gender.entry(r.gender).or_default();
        g.0 += hit;
        g.1 += 1;
    }
    eval.predictions = predictions;
    Ok(eval)
}
