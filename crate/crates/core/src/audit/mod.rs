//! Per-group accuracy, male−female disparity and variant stability.
//!
//! Accuracies are exact rationals (percent) and are rounded to two decimals
//! only for display. Records a backend could not find a face in count as
//! incorrect and are also tallied separately.

mod report;

pub use report::{render_bar_chart, write_tables};

use std::collections::BTreeMap;
use std::fmt;

use num_rational::Ratio;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendDescriptor, Prediction, PredictionService};
use crate::corpus::{Country, FaceRecord, Gender, Manifest, Region};
use crate::error::{Error, Result};
use crate::seed;

/// Exact percentage.
pub type Percent = Ratio<i128>;

/// Parses a decimal percentage such as `"99.76"` or `"-8.14"` exactly.
pub fn parse_percent(text: &str) -> Result<Percent> {
    let t = text.trim();
    let (neg, digits) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t.strip_prefix('+').unwrap_or(t)),
    };
    let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
    let bad = || Error::Config(format!("not a decimal percentage: `{text}`"));
    if int.is_empty() && frac.is_empty() || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) || frac.len() > 12 {
        return Err(bad());
    }
    let scale = 10i128.pow(frac.len() as u32);
    let whole: i128 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
    let part: i128 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
    let v = Ratio::new(whole * scale + part, scale);
    Ok(if neg { -v } else { v })
}

/// Rounds half away from zero to two decimals.
pub fn format_percent(p: Percent) -> String {
    let hundredths = (p * Ratio::from_integer(100)).round().to_integer();
    let sign = if hundredths < 0 { "-" } else { "" };
    let a = hundredths.abs();
    format!("{sign}{}.{:02}", a / 100, a % 100)
}

pub fn percent_f64(p: Percent) -> f64 {
    *p.numer() as f64 / *p.denom() as f64
}

/// `male − female`, exact and signed.
pub fn disparity_of(male: Percent, female: Percent) -> Percent {
    male - female
}

/// Population standard deviation, two-pass.
pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

mod percent_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        percent: f64,
        exact: String,
    }

    pub fn serialize<S: Serializer>(p: &Percent, s: S) -> std::result::Result<S::Ok, S::Error> {
        Repr { percent: format_percent(*p).parse().unwrap_or(f64::NAN), exact: format!("{}/{}", p.numer(), p.denom()) }
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Percent, D::Error> {
        let r = Repr::deserialize(d)?;
        let (n, den) = r.exact.split_once('/').ok_or_else(|| serde::de::Error::custom("expected `num/den`"))?;
        let n: i128 = n.parse().map_err(serde::de::Error::custom)?;
        let den: i128 = den.parse().map_err(serde::de::Error::custom)?;
        if den == 0 {
            return Err(serde::de::Error::custom("zero denominator"));
        }
        Ok(Ratio::new(n, den))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub backend: String,
    /// Variant tag without seed (`ORIG`, `RGB0.3`, ...).
    pub variant: String,
    pub region: Region,
    pub country: Option<Country>,
    pub gender: Gender,
}

impl GroupKey {
    pub fn new(backend: &str, variant: &str, region: Region, gender: Gender) -> Self {
        Self { backend: backend.into(), variant: variant.into(), region, country: None, gender }
    }

    pub fn with_gender(&self, gender: Gender) -> Self {
        Self { gender, ..self.clone() }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.backend, self.variant, self.region.short())?;
        if let Some(c) = &self.country {
            write!(f, "/{c}")?;
        }
        write!(f, "/{}", self.gender.short())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub n: u64,
    pub correct: u64,
    pub face_not_found: u64,
    /// Other per-record failures (scored incorrect).
    pub failed: u64,
    /// `100 · correct / n`, or the mean of per-sample values in an averaged report.
    #[serde(with = "percent_serde")]
    pub accuracy: Percent,
}

impl GroupMetrics {
    fn empty() -> Self {
        Self { n: 0, correct: 0, face_not_found: 0, failed: 0, accuracy: Ratio::from_integer(0) }
    }

    fn add(&mut self, o: Outcome) {
        self.n += 1;
        match o {
            Outcome::Correct => self.correct += 1,
            Outcome::Incorrect => {}
            Outcome::FaceNotFound => self.face_not_found += 1,
            Outcome::Failed => self.failed += 1,
        }
        self.accuracy = Ratio::new(100 * self.correct as i128, self.n as i128);
    }
}

/// Scored result of one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Correct,
    Incorrect,
    FaceNotFound,
    Failed,
}

impl Outcome {
    pub fn score(truth: &str, result: &Result<Prediction>) -> Self {
        match result {
            Ok(p) if p.label == truth => Outcome::Correct,
            Ok(_) => Outcome::Incorrect,
            Err(Error::FaceNotDetected(_)) => Outcome::FaceNotFound,
            Err(_) => Outcome::Failed,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupBy {
    /// Also emit per-country groups.
    pub country: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub key: GroupKey,
    pub metrics: GroupMetrics,
}

/// All records of one variant for one backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TotalEntry {
    pub backend: String,
    pub variant: String,
    pub metrics: GroupMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisparityEntry {
    pub backend: String,
    pub variant: String,
    pub region: Region,
    pub country: Option<Country>,
    #[serde(with = "percent_serde")]
    pub disparity: Percent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityEntry {
    pub backend: String,
    pub variants: usize,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbortedBackend {
    pub backend: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub corpus_hash: String,
    pub seeds: Vec<u64>,
    /// Number of resamples averaged (1 for a plain audit).
    pub samples: usize,
    pub started_at: String,
    pub finished_at: String,
    pub std_convention: String,
    pub averaging: String,
    pub face_not_found_policy: String,
}

impl RunMetadata {
    fn new(manifest: &Manifest, seeds: Vec<u64>, samples: usize, started_at: String) -> Self {
        Self {
            corpus_hash: manifest.content_hash(),
            seeds,
            samples,
            started_at,
            finished_at: chrono::Utc::now().to_rfc3339(),
            std_convention: "population".into(),
            averaging: "micro".into(),
            face_not_found_policy: "scored incorrect, counted in face_not_found".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub metadata: RunMetadata,
    pub backends: Vec<BackendDescriptor>,
    pub groups: Vec<GroupEntry>,
    pub totals: Vec<TotalEntry>,
    pub disparities: Vec<DisparityEntry>,
    pub stability: Vec<StabilityEntry>,
    pub aborted: Vec<AbortedBackend>,
}

type Tally = (BTreeMap<GroupKey, GroupMetrics>, BTreeMap<(String, String), GroupMetrics>);

/// Folds scored records into group and per-variant totals. The result does
/// not depend on record order.
pub fn tally(backend: &str, scored: &[(&FaceRecord, Outcome)], group_by: GroupBy) -> Tally {
    let mut groups = BTreeMap::new();
    let mut totals = BTreeMap::new();
    for (r, o) in scored {
        let key = GroupKey::new(backend, &r.variant.tag(), r.region, r.gender);
        if group_by.country {
            let ck = GroupKey { country: Some(r.country.clone()), ..key.clone() };
            groups.entry(ck).or_insert_with(GroupMetrics::empty).add(*o);
        }
        groups.entry(key).or_insert_with(GroupMetrics::empty).add(*o);
        totals.entry((backend.to_owned(), r.variant.tag())).or_insert_with(GroupMetrics::empty).add(*o);
    }
    (groups, totals)
}

impl AuditReport {
    fn assemble(metadata: RunMetadata, backends: Vec<BackendDescriptor>, tally: Tally, aborted: Vec<AbortedBackend>) -> Self {
        let (groups, totals) = tally;
        let groups: Vec<GroupEntry> = groups.into_iter().map(|(key, metrics)| GroupEntry { key, metrics }).collect();
        let totals: Vec<TotalEntry> =
            totals.into_iter().map(|((backend, variant), metrics)| TotalEntry { backend, variant, metrics }).collect();
        let mut report =
            Self { metadata, backends, groups, totals, disparities: Vec::new(), stability: Vec::new(), aborted };
        report.disparities = report
            .groups
            .iter()
            .filter(|g| g.key.gender == Gender::Male)
            .filter_map(|g| {
                let d = report.disparity(&g.key).ok()?;
                Some(DisparityEntry {
                    backend: g.key.backend.clone(),
                    variant: g.key.variant.clone(),
                    region: g.key.region,
                    country: g.key.country.clone(),
                    disparity: d,
                })
            })
            .collect();
        let names: Vec<String> = report.backends.iter().map(|b| b.name.clone()).collect();
        report.stability = names
            .iter()
            .filter_map(|b| {
                let std = report.variant_stability(b).ok()?;
                Some(StabilityEntry { backend: b.clone(), variants: report.variant_accuracies(b).len(), std })
            })
            .collect();
        report
    }

    pub fn group(&self, key: &GroupKey) -> Option<&GroupMetrics> {
        self.groups.iter().find(|g| &g.key == key).map(|g| &g.metrics)
    }

    pub fn total(&self, backend: &str, variant: &str) -> Option<&GroupMetrics> {
        self.totals.iter().find(|t| t.backend == backend && t.variant == variant).map(|t| &t.metrics)
    }

    /// Male minus female accuracy for the non-gender parts of `key`.
    pub fn disparity(&self, key: &GroupKey) -> Result<Percent> {
        let cell = |g: Gender| {
            let k = key.with_gender(g);
            self.group(&k).map(|m| m.accuracy).ok_or_else(|| Error::MissingCell(k.to_string()))
        };
        Ok(disparity_of(cell(Gender::Male)?, cell(Gender::Female)?))
    }

    fn variant_accuracies(&self, backend: &str) -> Vec<f64> {
        self.totals.iter().filter(|t| t.backend == backend).map(|t| percent_f64(t.metrics.accuracy)).collect()
    }

    /// Population standard deviation of the per-variant overall accuracies.
    pub fn variant_stability(&self, backend: &str) -> Result<f64> {
        let acc = self.variant_accuracies(backend);
        if acc.len() < 2 {
            return Err(Error::InsufficientCells { needed: 2, found: acc.len() });
        }
        Ok(population_std(&acc))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&crate::error::read_text(path)?)
    }
}

/// Per-backend predictions for every record, or the reason the backend was dropped.
fn collect(manifest: &Manifest, services: &[&PredictionService]) -> Vec<(BackendDescriptor, std::result::Result<Vec<Outcome>, String>)> {
    let refs: Vec<String> = manifest.records.iter().map(|r| r.image_ref.clone()).collect();
    services
        .iter()
        .map(|svc| {
            let d = svc.backend().descriptor().clone();
            let results = svc.predict_batch(&refs);
            if let Some(Err(e)) = results.iter().find(|r| matches!(r, Err(Error::Auth(_)))) {
                return (d, Err(e.to_string()));
            }
            let outcomes =
                manifest.records.iter().zip(&results).map(|(r, p)| Outcome::score(&d.task.truth(r), p)).collect();
            (d, Ok(outcomes))
        })
        .collect()
}

/// Scores every record once per backend. An authentication failure drops
/// that backend's columns and is listed in [`AuditReport::aborted`].
pub fn run_audit(manifest: &Manifest, services: &[&PredictionService], group_by: GroupBy) -> Result<AuditReport> {
    let started = chrono::Utc::now().to_rfc3339();
    let mut groups = BTreeMap::new();
    let mut totals = BTreeMap::new();
    let mut backends = Vec::new();
    let mut aborted = Vec::new();
    for (d, outcomes) in collect(manifest, services) {
        match outcomes {
            Ok(outcomes) => {
                let scored: Vec<(&FaceRecord, Outcome)> = manifest.records.iter().zip(outcomes).collect();
                let (g, t) = tally(&d.name, &scored, group_by);
                groups.extend(g);
                totals.extend(t);
                backends.push(d);
            }
            Err(reason) => aborted.push(AbortedBackend { backend: d.name.clone(), reason }),
        }
    }
    Ok(AuditReport::assemble(RunMetadata::new(manifest, Vec::new(), 1, started), backends, (groups, totals), aborted))
}

/// Report for outcomes scored outside a [`PredictionService`], such as a
/// local model evaluated in memory. Each outcome list pairs with
/// `manifest.records`.
pub fn report_from_outcomes(
    manifest: &Manifest,
    backends: &[(BackendDescriptor, Vec<Outcome>)],
    group_by: GroupBy,
) -> Result<AuditReport> {
    let started = chrono::Utc::now().to_rfc3339();
    let mut groups = BTreeMap::new();
    let mut totals = BTreeMap::new();
    for (d, outcomes) in backends {
        if outcomes.len() != manifest.records.len() {
            return Err(Error::DimMismatch(format!(
                "{} outcomes for {} records",
                outcomes.len(),
                manifest.records.len()
            )));
        }
        let scored: Vec<(&FaceRecord, Outcome)> = manifest.records.iter().zip(outcomes.iter().copied()).collect();
        let (g, t) = tally(&d.name, &scored, group_by);
        groups.extend(g);
        totals.extend(t);
    }
    let descriptors = backends.iter().map(|(d, _)| d.clone()).collect();
    Ok(AuditReport::assemble(RunMetadata::new(manifest, Vec::new(), 1, started), descriptors, (groups, totals), Vec::new()))
}

/// Identity sets used by [`balanced_resample_audit`]: the fixed female set
/// and one male set per sample (without replacement inside a sample,
/// independent across samples).
pub fn balanced_samples(manifest: &Manifest, n_per_gender: usize, samples: usize, seed: u64) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut by_gender: BTreeMap<Gender, Vec<String>> = BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();
    for r in &manifest.records {
        if seen.insert(r.identity_id.clone()) {
            by_gender.entry(r.gender).or_default().push(r.identity_id.clone());
        }
    }
    let pick = |gender: Gender, labels: &[&str]| -> Result<Vec<String>> {
        let mut pool = by_gender.get(&gender).cloned().unwrap_or_default();
        pool.sort();
        if pool.len() < n_per_gender {
            return Err(Error::InsufficientGroup {
                country: Country::new("*"),
                gender,
                needed: n_per_gender,
                available: pool.len(),
            });
        }
        let mut rng = seed::rng(seed::derive(seed, labels));
        let mut chosen: Vec<String> =
            index::sample(&mut rng, pool.len(), n_per_gender).into_iter().map(|i| pool[i].clone()).collect();
        chosen.sort();
        Ok(chosen)
    };
    let females = pick(Gender::Female, &["balanced", "female"])?;
    let males =
        (0..samples).map(|s| pick(Gender::Male, &["balanced", "male", &s.to_string()])).collect::<Result<Vec<_>>>()?;
    Ok((females, males))
}

/// Averages `samples` audits, each over the fixed female set plus a fresh
/// male sample of the same size. Every image is predicted once.
///
/// Group accuracies are the mean of the per-sample accuracies over the
/// samples in which the group occurs; counts are summed over samples.
pub fn balanced_resample_audit(
    manifest: &Manifest,
    services: &[&PredictionService],
    n_per_gender: usize,
    samples: usize,
    seed: u64,
    group_by: GroupBy,
) -> Result<AuditReport> {
    if samples == 0 {
        return Err(Error::Config("balanced audit needs at least one sample".into()));
    }
    let started = chrono::Utc::now().to_rfc3339();
    let (females, males) = balanced_samples(manifest, n_per_gender, samples, seed)?;
    let mut backends = Vec::new();
    let mut aborted = Vec::new();
    let mut acc_groups: BTreeMap<GroupKey, Vec<GroupMetrics>> = BTreeMap::new();
    let mut acc_totals: BTreeMap<(String, String), Vec<GroupMetrics>> = BTreeMap::new();
    for (d, outcomes) in collect(manifest, services) {
        let outcomes = match outcomes {
            Ok(o) => o,
            Err(reason) => {
                aborted.push(AbortedBackend { backend: d.name.clone(), reason });
                continue;
            }
        };
        for male_set in &males {
            let scored: Vec<(&FaceRecord, Outcome)> = manifest
                .records
                .iter()
                .zip(&outcomes)
                .filter(|(r, _)| {
                    let set = if r.gender == Gender::Male { male_set } else { &females };
                    set.binary_search(&r.identity_id).is_ok()
                })
                .map(|(r, o)| (r, *o))
                .collect();
            let (g, t) = tally(&d.name, &scored, group_by);
            for (k, m) in g {
                acc_groups.entry(k).or_default().push(m);
            }
            for (k, m) in t {
                acc_totals.entry(k).or_default().push(m);
            }
        }
        backends.push(d);
    }
    let average = |ms: Vec<GroupMetrics>| -> GroupMetrics {
        let k = ms.len() as i128;
        let mut out = GroupMetrics::empty();
        for m in &ms {
            out.n += m.n;
            out.correct += m.correct;
            out.face_not_found += m.face_not_found;
            out.failed += m.failed;
            out.accuracy += m.accuracy;
        }
        out.accuracy /= Ratio::from_integer(k);
        out
    };
    let groups = acc_groups.into_iter().map(|(k, v)| (k, average(v))).collect();
    let totals = acc_totals.into_iter().map(|(k, v)| (k, average(v))).collect();
    let seeds = vec![seed];
    Ok(AuditReport::assemble(RunMetadata::new(manifest, seeds, samples, started), backends, (groups, totals), aborted))
}

#[cfg(test)]
mod tests;
