//! Split a synthetic corpus into a balanced holdout and a training pool, then
//! draw k-shot samples with and without adversarial images.

use frs_audit::corpus::{build_holdout, sample_kshot, SplitSpec, VariantKind};
use frs_audit::toy::{gender_corpus, GenderCorpusSpec};

fn main() -> frs_audit::Result<()> {
    let corpus = gender_corpus(&GenderCorpusSpec {
        prefix: "demo".into(),
        males_per_country: 50,
        females_per_country: 30,
        cue_male: 0.5,
        cue_female: 0.5,
        signal: 0.35,
        noise: 0.08,
        seed: 1,
    })?;
    let spec = SplitSpec::default();
    let (holdout, pool) = build_holdout(&corpus.manifest, &spec, 2024)?;
    println!("holdout: {} records ({} per country, {}:{} male:female)", holdout.len(), spec.per_country_total,
        spec.male_female_ratio.0, spec.male_female_ratio.1);
    println!("pool: {} records, {} identities", pool.len(), pool.identities().len());

    let adversarial = VariantKind::rgb(0.3);
    for (k, fraction) in [(1, 0.0), (1, 0.5), (2, 0.5)] {
        let shots = sample_kshot(&pool, k, fraction, &adversarial, 9)?;
        let adv = shots.records.iter().filter(|r| !r.variant.is_orig()).count();
        println!("k={k} fraction={fraction}: {} shots, {adv} adversarial", shots.len());
    }
    Ok(())
}
