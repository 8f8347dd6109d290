//! Held-out test split and k-shot sampling.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Country, FaceRecord, Gender, Manifest, VariantKind};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub per_country_total: usize,
    /// (male parts, female parts).
    pub male_female_ratio: (usize, usize),
    /// When set, the pool excludes every record of a held-out identity;
    /// otherwise only the held-out records themselves.
    pub disjoint: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { per_country_total: 60, male_female_ratio: (2, 1), disjoint: true }
    }
}

impl SplitSpec {
    /// Exact (male, female) counts per country.
    pub fn per_gender(&self) -> Result<(usize, usize)> {
        let (m, f) = self.male_female_ratio;
        let parts = m + f;
        if m == 0 || f == 0 {
            return Err(Error::InvalidSplit("ratio parts must be positive".into()));
        }
        if self.per_country_total % parts != 0 {
            return Err(Error::InvalidSplit(format!(
                "per_country_total {} is not divisible by ratio sum {parts}",
                self.per_country_total
            )));
        }
        let unit = self.per_country_total / parts;
        Ok((unit * m, unit * f))
    }
}

/// Sorted ORIG identities per (country, gender) cell.
fn cells(manifest: &Manifest) -> BTreeMap<(Country, Gender), Vec<&FaceRecord>> {
    let mut cells: BTreeMap<(Country, Gender), Vec<&FaceRecord>> = BTreeMap::new();
    for r in manifest.orig() {
        cells.entry((r.country.clone(), r.gender)).or_default().push(r);
    }
    for v in cells.values_mut() {
        v.sort_by(|a, b| a.identity_id.cmp(&b.identity_id));
    }
    cells
}

fn cell_seed(seed: u64, purpose: &str, country: &Country, gender: Gender) -> u64 {
    seed::derive(seed, &[purpose, country.code(), gender.short()])
}

/// Splits off a held-out test set with an exact per-country, per-gender
/// composition. Returns `(holdout, pool)`.
pub fn build_holdout(manifest: &Manifest, spec: &SplitSpec, seed: u64) -> Result<(Manifest, Manifest)> {
    let (n_male, n_female) = spec.per_gender()?;
    let cells = cells(manifest);
    let countries: BTreeSet<Country> = manifest.orig().map(|r| r.country.clone()).collect();

    let mut held = Vec::new();
    for country in &countries {
        for (gender, needed) in [(Gender::Male, n_male), (Gender::Female, n_female)] {
            let members = cells.get(&(country.clone(), gender)).map(Vec::as_slice).unwrap_or(&[]);
            if members.len() < needed {
                return Err(Error::InsufficientGroup {
                    country: country.clone(),
                    gender,
                    needed,
                    available: members.len(),
                });
            }
            let mut rng = seed::rng(cell_seed(seed, "holdout", country, gender));
            let mut picked = index::sample(&mut rng, members.len(), needed).into_vec();
            picked.sort_unstable();
            held.extend(picked.into_iter().map(|i| members[i].clone()));
        }
    }

    let held_ids: BTreeSet<String> = held.iter().map(|r| r.identity_id.clone()).collect();
    let held_records: BTreeSet<String> = held.iter().map(|r| r.record_id.clone()).collect();
    let pool = manifest.filtered(format!("{} (pool, seed {seed})", manifest.provenance), |r| {
        if spec.disjoint {
            !held_ids.contains(&r.identity_id)
        } else {
            !held_records.contains(&r.record_id)
        }
    });
    let holdout = Manifest::new(format!("{} (holdout, seed {seed})", manifest.provenance), held)?;
    Ok((holdout, pool))
}

/// Samples `k` identities per (country, gender) cell for few-shot fine-tuning.
///
/// `floor(adversarial_fraction * total)` of the returned records use the
/// `adversarial_kind` image of the sampled identity instead of its ORIG image.
/// Each cell first takes `floor(fraction * k)` adversarial slots; the
/// remaining slots go to distinct cells chosen by a seeded shuffle, so with
/// k=1 and a fraction of 0.5 exactly half of the cells use the adversarial
/// image.
pub fn sample_kshot(
    pool: &Manifest,
    k: usize,
    adversarial_fraction: f64,
    adversarial_kind: &VariantKind,
    seed: u64,
) -> Result<Manifest> {
    if !(0.0..=1.0).contains(&adversarial_fraction) {
        return Err(Error::Config(format!("adversarial fraction {adversarial_fraction} outside [0, 1]")));
    }
    let cells = cells(pool);
    let countries: BTreeSet<Country> = pool.orig().map(|r| r.country.clone()).collect();
    let keys: Vec<(Country, Gender)> =
        countries.iter().flat_map(|c| Gender::ALL.iter().map(move |g| (c.clone(), *g))).collect();

    let total = k * keys.len();
    let adversarial_total = (adversarial_fraction * total as f64 + 1e-9).floor() as usize;
    let base = (adversarial_fraction * k as f64 + 1e-9).floor() as usize;
    let mut extra = adversarial_total - base * keys.len();
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, &["kshot-remainder"])));
    let mut per_cell = vec![base; keys.len()];
    for &i in &order {
        if extra == 0 {
            break;
        }
        if per_cell[i] < k {
            per_cell[i] += 1;
            extra -= 1;
        }
    }

    let mut out = Vec::with_capacity(total);
    for ((country, gender), n_adv) in keys.iter().zip(per_cell) {
        let members = cells.get(&(country.clone(), *gender)).map(Vec::as_slice).unwrap_or(&[]);
        if members.len() < k {
            return Err(Error::InsufficientGroup { country: country.clone(), gender: *gender, needed: k, available: members.len() });
        }
        let mut rng = seed::rng(cell_seed(seed, "kshot", country, *gender));
        let picked = index::sample(&mut rng, members.len(), k).into_vec();
        for (slot, i) in picked.into_iter().enumerate() {
            let orig = members[i];
            if slot < n_adv {
                let adv = pool.find(&orig.identity_id, adversarial_kind).ok_or_else(|| Error::MissingVariant {
                    identity: orig.identity_id.clone(),
                    kind: adversarial_kind.tag(),
                })?;
                out.push(adv.clone());
            } else {
                out.push(orig.clone());
            }
        }
    }
    Manifest::new(
        format!("{}-shot sample ({}% {}) seed {seed}", k, adversarial_fraction * 100.0, adversarial_kind.tag()),
        out,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Region;

    pub(crate) fn synthetic(males: usize, females: usize, with_rgb: bool) -> Manifest {
        let mut records = Vec::new();
        for c in Country::CANONICAL {
            for (g, n) in [(Gender::Male, males), (Gender::Female, females)] {
                for i in 0..n {
                    let id = format!("{c}-{}-{i:03}", g.short());
                    let orig = FaceRecord {
                        record_id: FaceRecord::make_id(&id, &VariantKind::orig()),
                        identity_id: id.clone(),
                        display_name: id.clone(),
                        country: Country::new(c),
                        region: Region::of_canonical(c).unwrap(),
                        gender: g,
                        variant: VariantKind::orig(),
                        image_ref: format!("{id}.png"),
                        width: 200,
                        height: 256,
                    };
                    if with_rgb {
                        records.push(orig.derive_variant(VariantKind::rgb(0.3).with_seed(i as u64), format!("rgb/{id}.png")));
                    }
                    records.push(orig);
                }
            }
        }
        Manifest::new("synthetic", records).unwrap()
    }

    #[test]
    fn holdout_defaults_give_480() {
        let m = synthetic(45, 25, false);
        let (holdout, pool) = build_holdout(&m, &SplitSpec::default(), 7).unwrap();
        assert_eq!(holdout.len(), 480);
        for c in Country::canonical() {
            let males = holdout.records.iter().filter(|r| r.country == c && r.gender == Gender::Male).count();
            let females = holdout.records.iter().filter(|r| r.country == c && r.gender == Gender::Female).count();
            assert_eq!((males, females), (40, 20));
        }
        assert_eq!(pool.len(), m.len() - 480);
        let held = holdout.identities();
        assert!(pool.identities().is_disjoint(&held));
    }

    #[test]
    fn holdout_insufficient_males() {
        let m = synthetic(39, 25, false);
        match build_holdout(&m, &SplitSpec::default(), 0).unwrap_err() {
            Error::InsufficientGroup { gender, needed, available, .. } => {
                assert_eq!((gender, needed, available), (Gender::Male, 40, 39));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn holdout_is_deterministic() {
        let m = synthetic(45, 25, false);
        let a = build_holdout(&m, &SplitSpec::default(), 11).unwrap().0;
        let b = build_holdout(&m, &SplitSpec::default(), 11).unwrap().0;
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        let c = build_holdout(&m, &SplitSpec::default(), 12).unwrap().0;
        assert_ne!(a.identities(), c.identities());
    }

    #[test]
    fn indivisible_split_rejected() {
        let spec = SplitSpec { per_country_total: 61, ..SplitSpec::default() };
        assert!(matches!(spec.per_gender(), Err(Error::InvalidSplit(_))));
    }

    #[test]
    fn non_disjoint_pool_keeps_other_variants() {
        let m = synthetic(45, 25, true);
        let spec = SplitSpec { disjoint: false, ..SplitSpec::default() };
        let (holdout, pool) = build_holdout(&m, &spec, 1).unwrap();
        assert_eq!(pool.len(), m.len() - holdout.len());
        let (_, disjoint_pool) = build_holdout(&m, &SplitSpec::default(), 1).unwrap();
        assert_eq!(disjoint_pool.len(), m.len() - 2 * holdout.len());
    }

    #[test]
    fn kshot_sizes() {
        let m = synthetic(3, 3, true);
        let one = sample_kshot(&m, 1, 0.0, &VariantKind::rgb(0.3), 5).unwrap();
        assert_eq!(one.len(), 16);
        assert!(one.records.iter().all(|r| r.variant.is_orig()));
        let two = sample_kshot(&m, 2, 0.0, &VariantKind::rgb(0.3), 5).unwrap();
        assert_eq!(two.len(), 32);
        assert_eq!(two.identities().len(), 32);
    }

    #[test]
    fn kshot_half_adversarial() {
        let m = synthetic(3, 3, true);
        let two = sample_kshot(&m, 2, 0.5, &VariantKind::rgb(0.3), 9).unwrap();
        assert_eq!(two.len(), 32);
        assert_eq!(two.records.iter().filter(|r| !r.variant.is_orig()).count(), 16);
        let one = sample_kshot(&m, 1, 0.5, &VariantKind::rgb(0.3), 9).unwrap();
        assert_eq!(one.records.iter().filter(|r| !r.variant.is_orig()).count(), 8);
        let all = sample_kshot(&m, 2, 1.0, &VariantKind::rgb(0.3), 9).unwrap();
        assert!(all.records.iter().all(|r| !r.variant.is_orig()));
    }

    #[test]
    fn kshot_missing_variant_and_group() {
        let m = synthetic(3, 3, false);
        assert!(matches!(
            sample_kshot(&m, 1, 1.0, &VariantKind::rgb(0.3), 0),
            Err(Error::MissingVariant { .. })
        ));
        assert!(matches!(
            sample_kshot(&m, 4, 0.0, &VariantKind::rgb(0.3), 0),
            Err(Error::InsufficientGroup { needed: 4, available: 3, .. })
        ));
    }
}
