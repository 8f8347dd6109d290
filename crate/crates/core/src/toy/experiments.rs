use serde::{Deserialize, Serialize};

use super::{country_corpus, gender_corpus, toy_classifier, CountryCorpusSpec, GenderCorpusSpec, ToyCorpus, TOY_COUNTRIES};
use crate::backends::Task;
use crate::corpus::{build_holdout, sample_kshot, Gender, Manifest, MemoryStore, SplitSpec, VariantKind};
use crate::error::Result;
use crate::mitigation::{
    contrastive_train, evaluate, finetune_kshot, mean, run_repeats, two_stage_country, AnchorPolicy, Evaluation,
    TrainingConfig, TripletSpec, TwoStageScheme,
};
use crate::model::Checkpoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenderToyParams {
    pub source: GenderCorpusSpec,
    pub deploy: GenderCorpusSpec,
    pub split: SplitSpec,
    pub pretrain: TrainingConfig,
    pub model_seed: u64,
    pub shots: usize,
    pub few_shot: TrainingConfig,
    pub contrastive: TrainingConfig,
    pub triplets: TripletSpec,
    pub seed: u64,
}

impl Default for GenderToyParams {
    fn default() -> Self {
        let source = GenderCorpusSpec {
            prefix: "src".into(),
            males_per_country: 40,
            females_per_country: 10,
            cue_male: 0.9,
            cue_female: 0.1,
            signal: 0.35,
            noise: 0.08,
            seed: 11,
        };
        let deploy = GenderCorpusSpec {
            prefix: "dep".into(),
            males_per_country: 44,
            females_per_country: 24,
            cue_male: 1.0,
            cue_female: 1.0,
            seed: 12,
            ..source.clone()
        };
        Self {
            source,
            deploy,
            split: SplitSpec::default(),
            pretrain: TrainingConfig { learning_rate: 3e-4, epochs: 4, batch_size: 16, repeats: 1, ..TrainingConfig::few_shot() },
            model_seed: 5,
            shots: 2,
            few_shot: TrainingConfig::few_shot(),
            contrastive: TrainingConfig { batch_size: 4, ..TrainingConfig::contrastive() },
            triplets: TripletSpec { anchors: AnchorPolicy::AllIdentities, ..TripletSpec::default() },
            seed: 2024,
        }
    }
}

/// Pretrained biased model plus deployment holdout and few-shot pool.
#[derive(Clone, Debug)]
pub struct GenderSetup {
    pub source: ToyCorpus,
    pub deploy: ToyCorpus,
    pub holdout: Manifest,
    pub pool: Manifest,
    pub pretrained: Checkpoint,
    pub baseline: ToyRun,
}

/// Holdout accuracies (percent) of one model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    pub male: f64,
    pub female: f64,
    pub disparity: f64,
    pub macro_accuracy: f64,
}

impl ToyRun {
    pub fn of(eval: &Evaluation) -> Self {
        Self {
            male: eval.gender_accuracy(Gender::Male),
            female: eval.gender_accuracy(Gender::Female),
            disparity: eval.gender_disparity(),
            macro_accuracy: eval.macro_accuracy(),
        }
    }

    pub fn mean(runs: &[ToyRun]) -> Self {
        let m = |f: fn(&ToyRun) -> f64| mean(&runs.iter().map(f).collect::<Vec<_>>());
        Self { male: m(|r| r.male), female: m(|r| r.female), disparity: m(|r| r.disparity), macro_accuracy: m(|r| r.macro_accuracy) }
    }
}

fn gender_classes() -> Vec<String> {
    Gender::ALL.iter().map(|g| g.name().to_owned()).collect()
}

/// Builds the corpora, splits the deployment holdout and pretrains on the
/// source corpus.
pub fn gender_setup(params: &GenderToyParams) -> Result<GenderSetup> {
    let source = gender_corpus(&params.source)?;
    let deploy = gender_corpus(&params.deploy)?;
    let (holdout, pool) = build_holdout(&deploy.manifest, &params.split, params.seed)?;
    let holdout = holdout.filtered(holdout.provenance.clone(), |r| r.variant.is_orig());
    let init = Checkpoint::init(toy_classifier(gender_classes(), params.model_seed))?;
    let pretrain = params.pretrain.clone();
    let source_orig = source.manifest.filtered("toy source".into(), |r| r.variant.is_orig());
    let pretrained = finetune_kshot(&init, &source_orig, &source.store, Task::Gender, &pretrain)?.checkpoint;
    let baseline = ToyRun::of(&evaluate(&pretrained, &holdout, &deploy.store, Task::Gender)?);
    Ok(GenderSetup { source, deploy, holdout, pool, pretrained, baseline })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KshotToyReport {
    pub shots: usize,
    pub baseline: ToyRun,
    pub runs: Vec<ToyRun>,
    pub mean: ToyRun,
    /// `1 - mean disparity / baseline disparity`.
    pub relative_reduction: f64,
}

/// k-shot fine-tuning of the pretrained toy model, repeated with derived seeds.
pub fn kshot_experiment(setup: &GenderSetup, params: &GenderToyParams) -> Result<KshotToyReport> {
    let config = &params.few_shot;
    let runs = run_repeats(config.repeats, params.seed, |_, seed| {
        let shots = sample_kshot(&setup.pool, params.shots, 0.0, &VariantKind::rgb(0.3), seed)?;
        let out = finetune_kshot(&setup.pretrained, &shots, &setup.deploy.store, Task::Gender, &config.clone().with_seed(seed))?;
        Ok(ToyRun::of(&evaluate(&out.checkpoint, &setup.holdout, &setup.deploy.store, Task::Gender)?))
    })?;
    let mean = ToyRun::mean(&runs);
    Ok(KshotToyReport {
        shots: params.shots,
        baseline: setup.baseline,
        relative_reduction: 1.0 - mean.disparity / setup.baseline.disparity,
        runs,
        mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveToyReport {
    pub baseline: ToyRun,
    pub runs: Vec<ToyRun>,
    pub mean: ToyRun,
    /// Per run: satisfaction of the final epoch's triplets after training.
    pub final_satisfaction: Vec<f64>,
    /// Largest `|loss - (w_t·triplet + w_b·bce)|` over all logged steps.
    pub max_decomposition_error: f64,
    pub steps_logged: usize,
}

/// Triplet contrastive fine-tuning on the deployment pool.
pub fn contrastive_experiment(setup: &GenderSetup, params: &GenderToyParams) -> Result<ContrastiveToyReport> {
    let config = &params.contrastive;
    let spec = TripletSpec { task: Task::Gender, ..params.triplets.clone() };
    let outs = run_repeats(config.repeats, params.seed, |_, seed| {
        let out = contrastive_train(&setup.pretrained, &setup.pool, &setup.deploy.store, &spec, &config.clone().with_seed(seed))?;
        let run = ToyRun::of(&evaluate(&out.checkpoint, &setup.holdout, &setup.deploy.store, Task::Gender)?);
        let err = out
            .log
            .steps
            .iter()
            .map(|s| (s.metrics.loss - (s.w_triplet * s.metrics.triplet + s.w_bce * s.metrics.bce)).abs())
            .fold(0.0, f64::max);
        Ok((run, out.log.final_satisfaction.unwrap_or(0.0), err, out.log.steps.len()))
    })?;
    let runs: Vec<ToyRun> = outs.iter().map(|o| o.0).collect();
    Ok(ContrastiveToyReport {
        baseline: setup.baseline,
        mean: ToyRun::mean(&runs),
        runs,
        final_satisfaction: outs.iter().map(|o| o.1).collect(),
        max_decomposition_error: outs.iter().map(|o| o.2).fold(0.0, f64::max),
        steps_logged: outs.iter().map(|o| o.3).sum(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountryToyParams {
    /// Base pretraining corpus (source capture conditions).
    pub base: CountryCorpusSpec,
    /// First-stage corpus (source conditions, more identities).
    pub stage1: CountryCorpusSpec,
    /// Target corpus: the holdout and the second-stage shots come from here.
    pub target: CountryCorpusSpec,
    pub pretrain: TrainingConfig,
    pub model_seed: u64,
    pub shots: usize,
    pub stage_configs: [TrainingConfig; 2],
    pub triplets: TripletSpec,
    /// Identities per (country, gender) held out from the target corpus.
    pub holdout_per_cell: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for CountryToyParams {
    fn default() -> Self {
        let base = CountryCorpusSpec {
            prefix: "geo0".into(),
            per_cell: [6; 4],
            signal: 0.3,
            noise: 0.08,
            tint: [1.0, 1.0, 1.0],
            seed: 31,
        };
        // web-scraped first-stage data is country-imbalanced
        let stage1 = CountryCorpusSpec { prefix: "geo1".into(), per_cell: [40, 20, 8, 4], seed: 32, ..base.clone() };
        let target = CountryCorpusSpec {
            prefix: "far".into(),
            per_cell: [24; 4],
            tint: [0.8, 0.9, 1.1],
            seed: 33,
            ..base.clone()
        };
        let stage = TrainingConfig { repeats: 1, ..TrainingConfig::few_shot() };
        Self {
            base,
            stage1,
            target,
            pretrain: TrainingConfig { learning_rate: 1e-3, epochs: 3, batch_size: 16, repeats: 1, ..TrainingConfig::few_shot() },
            model_seed: 9,
            shots: 2,
            stage_configs: [TrainingConfig { learning_rate: 1e-4, ..stage.clone() }, stage],
            triplets: TripletSpec { task: Task::Country, anchors: AnchorPolicy::PerCell(8), ..TripletSpec::default() },
            holdout_per_cell: 20,
            repeats: 3,
            seed: 77,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountryToyReport {
    pub baseline_macro: f64,
    pub finetune_macro: Vec<f64>,
    pub contrastive_macro: Vec<f64>,
    pub mean_finetune_macro: f64,
    pub mean_contrastive_macro: f64,
}

/// Both two-stage schemes on the four-country toy, per repeat seed.
pub fn country_experiment(params: &CountryToyParams) -> Result<CountryToyReport> {
    let classes: Vec<String> = TOY_COUNTRIES.iter().map(|c| c.to_string()).collect();
    let base_corpus = country_corpus(&params.base)?;
    let stage1 = country_corpus(&params.stage1)?;
    let target = country_corpus(&params.target)?;
    let mut store = MemoryStore::new();
    for c in [&base_corpus, &stage1, &target] {
        for (k, v) in c.store.iter() {
            store.insert(k.clone(), v.clone());
        }
    }
    let holdout = target.manifest.filtered("toy country holdout".into(), |r| {
        r.variant.is_orig() && identity_index(&r.identity_id) < params.holdout_per_cell
    });
    let shots_pool =
        target.manifest.filtered("toy country pool".into(), |r| identity_index(&r.identity_id) >= params.holdout_per_cell);

    let init = Checkpoint::init(toy_classifier(classes, params.model_seed))?;
    let base_orig = base_corpus.manifest.filtered("toy country base".into(), |r| r.variant.is_orig());
    let pretrained = finetune_kshot(&init, &base_orig, &store, Task::Country, &params.pretrain)?.checkpoint;
    let baseline_macro = evaluate(&pretrained, &holdout, &store, Task::Country)?.macro_accuracy();

    let runs = run_repeats(params.repeats, params.seed, |_, seed| {
        let shots = sample_kshot(&shots_pool, params.shots, 0.0, &VariantKind::rgb(0.3), seed)?;
        let shots = shots.expand_from(&shots_pool).filtered(shots.provenance.clone(), |r| {
            r.variant.is_orig() || r.variant.same_filter(&params.triplets.positive)
        });
        let configs = [params.stage_configs[0].clone().with_seed(seed), params.stage_configs[1].clone().with_seed(seed)];
        let mut macros = [0.0; 2];
        for (i, scheme) in [TwoStageScheme::FinetuneThenFinetune, TwoStageScheme::ContrastiveThenContrastive].into_iter().enumerate() {
            let (s1, s2) = match scheme {
                TwoStageScheme::FinetuneThenFinetune => (
                    stage1.manifest.filtered("stage1".into(), |r| r.variant.is_orig()),
                    shots.filtered("stage2".into(), |r| r.variant.is_orig()),
                ),
                TwoStageScheme::ContrastiveThenContrastive => (stage1.manifest.clone(), shots.clone()),
            };
            let out = two_stage_country(&pretrained, &s1, &s2, &store, scheme, &configs, &params.triplets)?;
            macros[i] = evaluate(&out.checkpoint, &holdout, &store, Task::Country)?.macro_accuracy();
        }
        Ok(macros)
    })?;
    let finetune_macro: Vec<f64> = runs.iter().map(|r| r[0]).collect();
    let contrastive_macro: Vec<f64> = runs.iter().map(|r| r[1]).collect();
    Ok(CountryToyReport {
        baseline_macro,
        mean_finetune_macro: mean(&finetune_macro),
        mean_contrastive_macro: mean(&contrastive_macro),
        finetune_macro,
        contrastive_macro,
    })
}

/// Trailing index of a toy identity id (`prefix-CODE-G007` → 7).
fn identity_index(id: &str) -> usize {
    id.rsplit('-').next().and_then(|s| s.get(1..)).and_then(|s| s.parse().ok()).unwrap_or(0)
}
