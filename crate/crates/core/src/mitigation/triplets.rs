use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backends::Task;
use crate::corpus::{Country, FaceRecord, Gender, Manifest, VariantKind};
use crate::error::{Error, Result};
use crate::seed;

pub const CANONICAL_OPPOSITE_PROBABILITY: f64 = 0.85;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    /// `k` anchors per (country, gender) cell, drawn by a seeded shuffle and
    /// cycling through the cell when it holds fewer than `k` identities.
    PerCell(usize),
    /// Every ORIG identity once.
    AllIdentities,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletSpec {
    pub task: Task,
    /// Variant supplying the positive (same identity as the anchor).
    pub positive: VariantKind,
    /// Gender task only: chance that the negative has the opposite gender.
    pub opposite_gender_probability: f64,
    pub margin: f64,
    pub anchors: AnchorPolicy,
}

impl Default for TripletSpec {
    fn default() -> Self {
        Self {
            task: Task::Gender,
            positive: VariantKind::rgb(0.3),
            opposite_gender_probability: 1.0,
            margin: 0.2,
            anchors: AnchorPolicy::PerCell(1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triplet<'a> {
    pub anchor: &'a FaceRecord,
    pub positive: &'a FaceRecord,
    pub negative: &'a FaceRecord,
}

const ANCHORS: u64 = 1;
const COIN: u64 = 2;
const PICK: u64 = 3;
const PICK_COUNTRY: u64 = 4;

/// Builds (anchor, positive, negative) triplets from the ORIG records of
/// `pool` and the positives' variant records.
///
/// Gender task: the negative is an ORIG record of another identity in the
/// anchor's country, of the opposite gender with probability
/// `opposite_gender_probability` (coin `i` comes from `mix(seed, [2, i])`)
/// and of the same gender otherwise. Country task: a uniformly chosen other
/// country, then a uniformly chosen ORIG record of it.
pub fn build_triplets<'a>(pool: &'a Manifest, spec: &TripletSpec, seed: u64) -> Result<Vec<Triplet<'a>>> {
    let p = spec.opposite_gender_probability;
    if !(0.0..=1.0).contains(&p) || !(spec.margin >= 0.0) {
        return Err(Error::Config(format!("bad triplet spec: probability {p}, margin {}", spec.margin)));
    }
    let mut origs: Vec<&FaceRecord> = pool.orig().collect();
    origs.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    let positives: HashMap<&str, &FaceRecord> = pool
        .records
        .iter()
        .filter(|r| r.variant.same_filter(&spec.positive))
        .map(|r| (r.identity_id.as_str(), r))
        .collect();
    if let Some(r) = origs.iter().find(|r| !positives.contains_key(r.identity_id.as_str())) {
        return Err(Error::MissingVariant { identity: r.identity_id.clone(), kind: spec.positive.tag() });
    }

    let mut cells: BTreeMap<(Country, Gender), Vec<&FaceRecord>> = BTreeMap::new();
    for r in &origs {
        cells.entry((r.country.clone(), r.gender)).or_default().push(r);
    }
    let mut by_country: BTreeMap<Country, Vec<&FaceRecord>> = BTreeMap::new();
    for r in &origs {
        by_country.entry(r.country.clone()).or_default().push(r);
    }
    match spec.task {
        Task::Gender => {
            for country in by_country.keys() {
                for g in Gender::ALL {
                    if !cells.contains_key(&(country.clone(), g)) {
                        return Err(Error::InsufficientGroup { country: country.clone(), gender: g, needed: 1, available: 0 });
                    }
                }
            }
        }
        Task::Country => {
            if by_country.len() < 2 {
                let (country, gender) = origs
                    .first()
                    .map(|r| (r.country.clone(), r.gender))
                    .unwrap_or((Country::new("*"), Gender::Male));
                return Err(Error::InsufficientGroup { country, gender, needed: 2, available: by_country.len() });
            }
        }
    }

    let anchors: Vec<&FaceRecord> = match spec.anchors {
        AnchorPolicy::AllIdentities => cells.values().flatten().copied().collect(),
        AnchorPolicy::PerCell(k) => cells
            .values()
            .enumerate()
            .flat_map(|(ci, members)| {
                let mut shuffled = members.clone();
                shuffled.shuffle(&mut seed::rng(seed::mix(seed, &[ANCHORS, ci as u64])));
                (0..k).map(move |j| shuffled[j % shuffled.len()])
            })
            .collect(),
    };

    let countries: Vec<&Country> = by_country.keys().collect();
    anchors
        .into_iter()
        .enumerate()
        .map(|(i, anchor)| {
            let i = i as u64;
            let candidates: Vec<&FaceRecord> = match spec.task {
                Task::Gender => {
                    let opposite = seed::unit(seed::mix(seed, &[COIN, i])) < p;
                    let gender = if opposite { anchor.gender.opposite() } else { anchor.gender };
                    let local: Vec<&FaceRecord> = cells[&(anchor.country.clone(), gender)]
                        .iter()
                        .copied()
                        .filter(|r| r.identity_id != anchor.identity_id)
                        .collect();
                    if local.is_empty() {
                        origs.iter().copied().filter(|r| r.gender == gender && r.identity_id != anchor.identity_id).collect()
                    } else {
                        local
                    }
                }
                Task::Country => {
                    let others: Vec<&&Country> = countries.iter().filter(|c| ***c != anchor.country).collect();
                    let pick = others[seed::below(seed::mix(seed, &[PICK_COUNTRY, i]), others.len() as u64) as usize];
                    by_country[*pick].clone()
                }
            };
            if candidates.is_empty() {
                return Err(Error::InsufficientGroup {
                    country: anchor.country.clone(),
                    gender: anchor.gender,
                    needed: 2,
                    available: 1,
                });
            }
            let negative = candidates[seed::below(seed::mix(seed, &[PICK, i]), candidates.len() as u64) as usize];
            Ok(Triplet { anchor, positive: positives[anchor.identity_id.as_str()], negative })
        })
        .collect()
}
