//! Train the CNN gender classifier from scratch on a synthetic corpus,
//! evaluate it on a holdout and round-trip the checkpoint through disk.

use frs_audit::backends::Task;
use frs_audit::corpus::{build_holdout, Gender, SplitSpec};
use frs_audit::mitigation::{evaluate, finetune_kshot, TrainingConfig};
use frs_audit::model::Checkpoint;
use frs_audit::toy::{gender_corpus, toy_classifier, GenderCorpusSpec};

fn main() -> frs_audit::Result<()> {
    let corpus = gender_corpus(&GenderCorpusSpec {
        prefix: "train".into(),
        males_per_country: 60,
        females_per_country: 40,
        cue_male: 0.5,
        cue_female: 0.5,
        signal: 0.35,
        noise: 0.08,
        seed: 3,
    })?;
    let (holdout, pool) = build_holdout(&corpus.manifest, &SplitSpec::default(), 5)?;
    let train = pool.filtered("train".into(), |r| r.variant.is_orig());
    println!("training on {:?}", train.region_gender_counts());

    let classes = Gender::ALL.iter().map(|g| g.name().to_owned()).collect();
    let init = Checkpoint::init(toy_classifier(classes, 1))?;
    let config = TrainingConfig { learning_rate: 1e-3, epochs: 3, batch_size: 16, ..TrainingConfig::few_shot() };
    let before = evaluate(&init, &holdout, &corpus.store, Task::Gender)?;
    let trained = finetune_kshot(&init, &train, &corpus.store, Task::Gender, &config)?;
    let after = evaluate(&trained.checkpoint, &holdout, &corpus.store, Task::Gender)?;

    for e in &trained.log.epochs {
        println!("epoch {} mean loss {:.4}", e.epoch, e.loss);
    }
    println!("holdout macro accuracy: {:.1}% -> {:.1}%", before.macro_accuracy(), after.macro_accuracy());

    let path = std::env::temp_dir().join("frs-example-gender.ckpt");
    trained.checkpoint.save(&path)?;
    assert_eq!(Checkpoint::load(&path)?, trained.checkpoint);
    println!("checkpoint saved to {} and reloaded identically", path.display());
    Ok(())
}
