//! File-driven experiments: a JSON spec in, run logs and result tables out.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    contrastive_train, evaluate, finetune_kshot, mean, run_repeats, two_stage_country, Evaluation, TrainOutcome,
    TrainingConfig, TripletSpec, TwoStageScheme,
};
use crate::audit::{report_from_outcomes, write_tables, GroupBy, Outcome};
use crate::backends::{BackendDescriptor, Task};
use crate::corpus::{sample_kshot, ImageStore, Manifest, VariantKind};
use crate::error::{Error, Result};
use crate::model::Checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    FewShot,
    Contrastive,
    FinetuneThenFinetune,
    ContrastiveThenContrastive,
}

/// Experiment description, usually read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub task: Task,
    pub scheme: Scheme,
    /// k for the k-shot sampler (few-shot, and the second stage of
    /// two-stage schemes when set).
    #[serde(default)]
    pub shots: Option<usize>,
    /// Share of sampled shots that use the adversarial image.
    #[serde(default)]
    pub adversarial_fraction: f64,
    #[serde(default)]
    pub triplet_spec: Option<TripletSpec>,
    pub training_config: TrainingConfig,
    /// Overrides `training_config` for the second stage.
    #[serde(default)]
    pub stage2_config: Option<TrainingConfig>,
    pub checkpoint: PathBuf,
    pub pool_manifest: PathBuf,
    #[serde(default)]
    pub stage2_manifest: Option<PathBuf>,
    pub holdout_manifest: PathBuf,
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub repeat: usize,
    pub seed: u64,
    pub macro_accuracy: f64,
    pub gender_disparity: f64,
    pub class_accuracy: BTreeMap<String, f64>,
    pub final_satisfaction: Option<f64>,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub baseline_macro_accuracy: f64,
    pub baseline_gender_disparity: f64,
    pub repeats: Vec<RepeatResult>,
    pub mean_macro_accuracy: f64,
    pub mean_gender_disparity: f64,
    pub outputs: Vec<PathBuf>,
}

fn train_once(
    spec: &ExperimentSpec,
    base: &Checkpoint,
    pool: &Manifest,
    stage2: Option<&Manifest>,
    store: &dyn ImageStore,
    seed: u64,
) -> Result<TrainOutcome> {
    let config = spec.training_config.clone().with_seed(seed);
    let triplets = spec.triplet_spec.clone().unwrap_or_default();
    let adversarial = spec.triplet_spec.as_ref().map_or_else(|| VariantKind::rgb(0.3), |t| t.positive.clone());
    let sample = |m: &Manifest| -> Result<Manifest> {
        match spec.shots {
            Some(k) => sample_kshot(m, k, spec.adversarial_fraction, &adversarial, seed),
            None => Ok(m.clone()),
        }
    };
    match spec.scheme {
        Scheme::FewShot => {
            let k = spec.shots.ok_or_else(|| Error::Config("few_shot needs `shots`".into()))?;
            let shots = sample_kshot(pool, k, spec.adversarial_fraction, &adversarial, seed)?;
            finetune_kshot(base, &shots, store, spec.task, &config)
        }
        Scheme::Contrastive => contrastive_train(base, pool, store, &TripletSpec { task: spec.task, ..triplets }, &config),
        Scheme::FinetuneThenFinetune | Scheme::ContrastiveThenContrastive => {
            if spec.task != Task::Country {
                return Err(Error::Config("two-stage schemes are defined for the country task".into()));
            }
            let stage2 = match stage2 {
                Some(m) => sample(m)?,
                None => Manifest::empty("none"),
            };
            let second = spec.stage2_config.clone().unwrap_or_else(|| spec.training_config.clone()).with_seed(seed);
            let scheme = if spec.scheme == Scheme::FinetuneThenFinetune {
                TwoStageScheme::FinetuneThenFinetune
            } else {
                TwoStageScheme::ContrastiveThenContrastive
            };
            two_stage_country(base, pool, &stage2, store, scheme, &[config, second], &triplets)
        }
    }
}

fn outcomes(holdout: &Manifest, eval: &Evaluation, task: Task) -> Vec<Outcome> {
    holdout
        .records
        .iter()
        .zip(&eval.predictions)
        .map(|(r, p)| if *p == task.truth(r) { Outcome::Correct } else { Outcome::Incorrect })
        .collect()
}

/// Trains `training_config.repeats` times with derived seeds, evaluates each
/// result and the base checkpoint on the holdout, and writes under `out_dir`:
/// `run_log.jsonl` (one line per optimizer step), `results.csv`,
/// `accuracy.csv`/`disparity.csv` in the audit table layout, `result.json`
/// and one checkpoint per repeat.
pub fn run_experiment(spec: &ExperimentSpec, store: &dyn ImageStore) -> Result<ExperimentResult> {
    spec.training_config.validate()?;
    let base = Checkpoint::load(&spec.checkpoint)?;
    let pool = Manifest::load(&spec.pool_manifest)?;
    let stage2 = spec.stage2_manifest.as_ref().map(Manifest::load).transpose()?;
    let holdout = Manifest::load(&spec.holdout_manifest)?;
    std::fs::create_dir_all(&spec.out_dir)?;

    let baseline = evaluate(&base, &holdout, store, spec.task)?;
    let runs = run_repeats(spec.training_config.repeats, spec.training_config.seed, |_, seed| {
        let out = train_once(spec, &base, &pool, stage2.as_ref(), store, seed)?;
        let eval = evaluate(&out.checkpoint, &holdout, store, spec.task)?;
        Ok((seed, out, eval))
    })?;

    let mut log = std::io::BufWriter::new(std::fs::File::create(spec.out_dir.join("run_log.jsonl"))?);
    let mut repeats = Vec::new();
    let mut tables = vec![(
        BackendDescriptor::local("baseline", spec.task, "base"),
        outcomes(&holdout, &baseline, spec.task),
    )];
    for (i, (seed, out, eval)) in runs.iter().enumerate() {
        for step in &out.log.steps {
            let mut line = serde_json::to_value(step)?;
            line["repeat"] = i.into();
            writeln!(log, "{line}")?;
        }
        let path = spec.out_dir.join(format!("repeat-{i}.ckpt"));
        out.checkpoint.save(&path)?;
        tables.push((BackendDescriptor::local(format!("r{i}"), spec.task, seed.to_string()), outcomes(&holdout, eval, spec.task)));
        repeats.push(RepeatResult {
            repeat: i,
            seed: *seed,
            macro_accuracy: eval.macro_accuracy(),
            gender_disparity: eval.gender_disparity(),
            class_accuracy: eval.per_class.keys().map(|k| (k.clone(), eval.class_accuracy(k))).collect(),
            final_satisfaction: out.log.final_satisfaction,
            checkpoint: path,
        });
    }
    log.flush()?;

    let mut outputs = vec![spec.out_dir.join("run_log.jsonl")];
    let results_path = spec.out_dir.join("results.csv");
    let mut w = csv::Writer::from_path(&results_path)?;
    let classes: Vec<String> = baseline.per_class.keys().cloned().collect();
    let mut header = vec!["repeat".to_owned(), "seed".into(), "macro_accuracy".into(), "gender_disparity".into()];
    header.extend(classes.iter().map(|c| format!("acc_{c}")));
    w.write_record(&header)?;
    for r in &repeats {
        let mut row = vec![r.repeat.to_string(), r.seed.to_string(), r.macro_accuracy.to_string(), r.gender_disparity.to_string()];
        row.extend(classes.iter().map(|c| r.class_accuracy.get(c).map_or(String::new(), |v| v.to_string())));
        w.write_record(&row)?;
    }
    w.flush()?;
    outputs.push(results_path);

    let report = report_from_outcomes(&holdout, &tables, GroupBy { country: false })?;
    outputs.extend(write_tables(&report, &spec.out_dir)?);
    outputs.extend(repeats.iter().map(|r| r.checkpoint.clone()));

    let result = ExperimentResult {
        baseline_macro_accuracy: baseline.macro_accuracy(),
        baseline_gender_disparity: baseline.gender_disparity(),
        mean_macro_accuracy: mean(&repeats.iter().map(|r| r.macro_accuracy).collect::<Vec<_>>()),
        mean_gender_disparity: mean(&repeats.iter().map(|r| r.gender_disparity).collect::<Vec<_>>()),
        repeats,
        outputs,
    };
    let result_path = spec.out_dir.join("result.json");
    std::fs::write(&result_path, serde_json::to_string_pretty(&result)?)?;
    Ok(ExperimentResult { outputs: [result.outputs.clone(), vec![result_path]].concat(), ..result })
}
