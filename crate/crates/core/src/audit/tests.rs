use std::collections::HashMap;
use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::backends::{content_hash, Backend, ConstantStub, Label, OracleStub, Task};
use crate::corpus::VariantKind;
use crate::imagebuf::ImageBuffer;

fn pct(s: &str) -> Percent {
    parse_percent(s).unwrap()
}

#[test]
fn percent_parsing_and_rounding() {
    assert_eq!(pct("99.76"), Ratio::new(9976, 100));
    assert_eq!(pct("-8.14"), Ratio::new(-814, 100));
    assert_eq!(pct("100"), Ratio::from_integer(100));
    assert_eq!(format_percent(Ratio::new(200, 3)), "66.67");
    assert_eq!(format_percent(Ratio::new(-1, 8)), "-0.13");
    assert_eq!(format_percent(Ratio::new(1, 200)), "0.01");
    assert!(parse_percent("12.a").is_err());
    assert!(parse_percent("").is_err());
}

#[test]
fn published_disparities_are_exact() {
    assert_eq!(disparity_of(pct("99.76"), pct("61.25")), pct("38.51"));
    assert_eq!(disparity_of(pct("98.93"), pct("88.35")), pct("10.58"));
    assert_eq!(disparity_of(pct("59.24"), pct("85.05")), pct("-25.81"));
    assert_eq!(disparity_of(pct("70"), pct("70")), Ratio::from_integer(0));
}

fn corpus(dir: &std::path::Path, spec: &[(&str, Gender)]) -> Manifest {
    let records = spec
        .iter()
        .enumerate()
        .map(|(i, (country, gender))| {
            let id = format!("id{i:03}");
            let path = dir.join(format!("{id}.png"));
            ImageBuffer::filled(3, 3, [i as u8, (i >> 8) as u8, 7]).save_png(&path).unwrap();
            FaceRecord {
                record_id: FaceRecord::make_id(&id, &VariantKind::orig()),
                identity_id: id.clone(),
                display_name: id,
                country: Country::new(country),
                region: Region::of_canonical(country).unwrap(),
                gender: *gender,
                variant: VariantKind::orig(),
                image_ref: path.display().to_string(),
                width: 3,
                height: 3,
            }
        })
        .collect();
    Manifest::new("audit-test", records).unwrap()
}

fn service(b: impl Backend + 'static) -> PredictionService {
    PredictionService::new(Arc::new(b), None)
}

fn four(dir: &std::path::Path) -> Manifest {
    corpus(dir, &[("AUS", Gender::Male), ("AUS", Gender::Female), ("IND", Gender::Male), ("IND", Gender::Female)])
}

#[test]
fn oracle_stub_scores_everything_correct() {
    let dir = tempfile::tempdir().unwrap();
    let m = four(dir.path());
    let svc = service(OracleStub::new(&m, Task::Gender).unwrap());
    let report = run_audit(&m, &[&svc], GroupBy::default()).unwrap();
    assert_eq!(report.groups.len(), 4);
    assert!(report.groups.iter().all(|g| g.metrics.accuracy == Ratio::from_integer(100)));
}

#[test]
fn always_male_stub() {
    let dir = tempfile::tempdir().unwrap();
    let m = four(dir.path());
    let svc = service(ConstantStub::new("always-male", Task::Gender, "Male"));
    let report = run_audit(&m, &[&svc], GroupBy::default()).unwrap();
    for region in [Region::GlobalNorth, Region::GlobalSouth] {
        let key = GroupKey::new("always-male", "ORIG", region, Gender::Male);
        assert_eq!(report.group(&key).unwrap().accuracy, Ratio::from_integer(100));
        assert_eq!(report.group(&key.with_gender(Gender::Female)).unwrap().accuracy, Ratio::from_integer(0));
        assert_eq!(report.disparity(&key).unwrap(), Ratio::from_integer(100));
        assert_eq!(report.disparity(&key.with_gender(Gender::Female)).unwrap(), Ratio::from_integer(100));
    }
    assert_eq!(report.disparities.len(), 2);
}

/// Answers from a per-content-hash table; unknown images have no face.
struct ByHash(crate::backends::BackendDescriptor, HashMap<String, String>);

impl Backend for ByHash {
    fn descriptor(&self) -> &crate::backends::BackendDescriptor {
        &self.0
    }

    fn classify(&self, image: &[u8]) -> Result<Label> {
        self.1
            .get(&content_hash(image))
            .map(|l| Label::new(l.clone(), None))
            .ok_or_else(|| Error::FaceNotDetected("by-hash".into()))
    }
}

fn planted(m: &Manifest, answer: impl Fn(usize, &FaceRecord) -> Option<&'static str>) -> ByHash {
    let mut table = HashMap::new();
    for (i, r) in m.records.iter().enumerate() {
        if let Some(a) = answer(i, r) {
            table.insert(content_hash(&std::fs::read(&r.image_ref).unwrap()), a.to_owned());
        }
    }
    ByHash(crate::backends::BackendDescriptor::local("planted", Task::Gender, "1"), table)
}

#[test]
fn planted_confusions_match_hand_counts() {
    let dir = tempfile::tempdir().unwrap();
    // GN: 3 male, 2 female; GS: 2 male, 4 female.
    let spec = [
        ("AUS", Gender::Male),
        ("ENG", Gender::Male),
        ("NZL", Gender::Male),
        ("RSA", Gender::Female),
        ("AUS", Gender::Female),
        ("IND", Gender::Male),
        ("PAK", Gender::Male),
        ("BAN", Gender::Female),
        ("WIN", Gender::Female),
        ("IND", Gender::Female),
        ("PAK", Gender::Female),
    ];
    let m = corpus(dir.path(), &spec);
    // Wrong: record 1 (GN M), 4 (GN F), 8 and 9 (GS F). No face: record 10 (GS F).
    let svc = service(planted(&m, |i, r| match i {
        10 => None,
        1 | 4 | 8 | 9 => Some(r.gender.opposite().name()),
        _ => Some(r.gender.name()),
    }));
    let report = run_audit(&m, &[&svc], GroupBy::default()).unwrap();
    let k = |region, gender| report.group(&GroupKey::new("planted", "ORIG", region, gender)).unwrap().clone();
    assert_eq!(k(Region::GlobalNorth, Gender::Male).accuracy, Ratio::new(200, 3));
    assert_eq!(k(Region::GlobalNorth, Gender::Female).accuracy, Ratio::from_integer(50));
    assert_eq!(k(Region::GlobalSouth, Gender::Male).accuracy, Ratio::from_integer(100));
    let gsf = k(Region::GlobalSouth, Gender::Female);
    assert_eq!((gsf.n, gsf.correct, gsf.face_not_found), (4, 1, 1));
    assert_eq!(gsf.accuracy, Ratio::from_integer(25));
    let key = GroupKey::new("planted", "ORIG", Region::GlobalSouth, Gender::Male);
    assert_eq!(report.disparity(&key).unwrap(), Ratio::from_integer(75));
    assert_eq!(report.total("planted", "ORIG").unwrap().correct, 6);
}

#[test]
fn missing_cell_and_insufficient_cells() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), &[("AUS", Gender::Male), ("IND", Gender::Male), ("IND", Gender::Female)]);
    let svc = service(OracleStub::new(&m, Task::Gender).unwrap());
    let report = run_audit(&m, &[&svc], GroupBy::default()).unwrap();
    let gn = GroupKey::new("stub", "ORIG", Region::GlobalNorth, Gender::Male);
    assert!(matches!(report.disparity(&gn), Err(Error::MissingCell(_))));
    assert!(matches!(report.variant_stability("stub"), Err(Error::InsufficientCells { needed: 2, found: 1 })));
}

fn report_with_variant_accuracies(accs: &[(u64, u64)]) -> AuditReport {
    let totals = accs
        .iter()
        .enumerate()
        .map(|(i, &(correct, n))| {
            let metrics = GroupMetrics {
                n,
                correct,
                face_not_found: 0,
                failed: 0,
                accuracy: Ratio::new(100 * correct as i128, n as i128),
            };
            ((String::from("b"), format!("V{i}")), metrics)
        })
        .collect();
    let meta = RunMetadata {
        corpus_hash: String::new(),
        seeds: vec![],
        samples: 1,
        started_at: String::new(),
        finished_at: String::new(),
        std_convention: "population".into(),
        averaging: "micro".into(),
        face_not_found_policy: String::new(),
    };
    let d = crate::backends::BackendDescriptor::local("b", Task::Gender, "1");
    AuditReport::assemble(meta, vec![d], (BTreeMap::new(), totals), vec![])
}

#[test]
fn variant_stability_examples() {
    assert_eq!(report_with_variant_accuracies(&[(7, 10), (7, 10), (14, 20)]).variant_stability("b").unwrap(), 0.0);
    let r = report_with_variant_accuracies(&[(4, 10), (6, 10)]);
    assert!((r.variant_stability("b").unwrap() - 10.0).abs() < 1e-12);
    assert_eq!(r.stability[0].variants, 2);

    let planted = [(90, 100), (85, 100), (61, 100), (77, 100), (99, 100), (70, 100)];
    let r = report_with_variant_accuracies(&planted);
    // Welford's running variance as an independent oracle.
    let (mut count, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for &(c, n) in &planted {
        let x = 100.0 * c as f64 / n as f64;
        count += 1.0;
        let d = x - mean;
        mean += d / count;
        m2 += d * (x - mean);
    }
    assert!((r.variant_stability("b").unwrap() - (m2 / count).sqrt()).abs() < 1e-9);
}

#[test]
fn auth_failure_aborts_only_that_backend() {
    struct Denied(crate::backends::BackendDescriptor);
    impl Backend for Denied {
        fn descriptor(&self) -> &crate::backends::BackendDescriptor {
            &self.0
        }
        fn classify(&self, _: &[u8]) -> Result<Label> {
            Err(Error::Auth("bad key".into()))
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let m = four(dir.path());
    let ok = service(OracleStub::new(&m, Task::Gender).unwrap());
    let denied = service(Denied(crate::backends::BackendDescriptor::local("denied", Task::Gender, "1")));
    let report = run_audit(&m, &[&ok, &denied], GroupBy::default()).unwrap();
    assert_eq!(report.aborted.len(), 1);
    assert_eq!(report.aborted[0].backend, "denied");
    assert!(report.groups.iter().all(|g| g.key.backend == "stub"));
}

#[test]
fn report_json_round_trips_and_tables_render() {
    let dir = tempfile::tempdir().unwrap();
    let m = four(dir.path());
    let a = service(OracleStub::new(&m, Task::Gender).unwrap());
    let b = service(ConstantStub::new("always-male", Task::Gender, "Male"));
    let report = run_audit(&m, &[&a, &b], GroupBy { country: true }).unwrap();
    assert_eq!(AuditReport::from_json(&report.to_json().unwrap()).unwrap(), report);
    let paths = write_tables(&report, &dir.path().join("tables")).unwrap();
    let acc = std::fs::read_to_string(&paths[0]).unwrap();
    assert_eq!(acc.lines().next().unwrap(), "variant,region,stub_M,stub_F,always-male_M,always-male_F");
    assert!(acc.contains("ORIG,GN,100.00,100.00,100.00,0.00"));
    let svg = render_bar_chart(&report);
    assert!(svg.starts_with("<svg") && svg.contains("always-male"));
}

fn balanced_corpus(dir: &std::path::Path, males: usize, females: usize) -> Manifest {
    let mut spec = Vec::new();
    for i in 0..males {
        spec.push((Country::CANONICAL[i % 8], Gender::Male));
    }
    for i in 0..females {
        spec.push((Country::CANONICAL[(i * 3) % 8], Gender::Female));
    }
    corpus(dir, &spec)
}

#[test]
fn balanced_with_exact_male_pool_repeats_one_audit() {
    let dir = tempfile::tempdir().unwrap();
    let m = balanced_corpus(dir.path(), 6, 6);
    let svc = service(planted(&m, |i, r| Some(if i % 3 == 0 { r.gender.opposite().name() } else { r.gender.name() })));
    let averaged = balanced_resample_audit(&m, &[&svc], 6, 5, 42, GroupBy::default()).unwrap();
    let plain = run_audit(&m, &[&svc], GroupBy::default()).unwrap();
    for g in &plain.groups {
        assert_eq!(averaged.group(&g.key).unwrap().accuracy, g.metrics.accuracy, "{}", g.key);
    }
}

#[test]
fn balanced_matches_brute_force_enumeration() {
    let dir = tempfile::tempdir().unwrap();
    let m = balanced_corpus(dir.path(), 20, 7);
    let wrong = |i: usize| i % 4 == 1 || i % 7 == 3;
    let svc = service(planted(&m, |i, r| Some(if wrong(i) { r.gender.opposite().name() } else { r.gender.name() })));
    let report = balanced_resample_audit(&m, &[&svc], 5, 5, 9, GroupBy::default()).unwrap();
    let (females, males) = balanced_samples(&m, 5, 5, 9).unwrap();
    assert_eq!(females.len(), 5);
    assert!(males.iter().all(|s| s.len() == 5));
    assert_ne!(males[0], males[1]);

    let index: HashMap<&str, usize> = m.records.iter().enumerate().map(|(i, r)| (r.identity_id.as_str(), i)).collect();
    for region in [Region::GlobalNorth, Region::GlobalSouth] {
        for gender in Gender::ALL {
            let mut per_sample = Vec::new();
            for male_set in &males {
                let set = if gender == Gender::Male { male_set } else { &females };
                let members: Vec<usize> =
                    set.iter().map(|id| index[id.as_str()]).filter(|&i| m.records[i].region == region).collect();
                if !members.is_empty() {
                    let correct = members.iter().filter(|&&i| !wrong(i)).count() as i128;
                    per_sample.push(Ratio::new(100 * correct, members.len() as i128));
                }
            }
            let key = GroupKey::new("planted", "ORIG", region, gender);
            match report.group(&key) {
                Some(g) => {
                    let mean = per_sample.iter().sum::<Percent>() / Ratio::from_integer(per_sample.len() as i128);
                    assert_eq!(g.accuracy, mean, "{key}");
                }
                None => assert!(per_sample.is_empty()),
            }
        }
    }
}

#[test]
fn balanced_needs_enough_identities() {
    let dir = tempfile::tempdir().unwrap();
    let m = balanced_corpus(dir.path(), 4, 6);
    let svc = service(OracleStub::new(&m, Task::Gender).unwrap());
    let err = balanced_resample_audit(&m, &[&svc], 5, 5, 1, GroupBy::default()).unwrap_err();
    assert!(matches!(err, Error::InsufficientGroup { gender: Gender::Male, needed: 5, available: 4, .. }));
}

fn synthetic_records(outcomes: &[(u8, u8, u8, u8)]) -> (Vec<FaceRecord>, Vec<Outcome>) {
    let variants = [VariantKind::orig(), VariantKind::grey(), VariantKind::rgb(0.3)];
    let mut recs = Vec::new();
    let mut outs = Vec::new();
    for (i, &(c, g, v, o)) in outcomes.iter().enumerate() {
        let country = Country::CANONICAL[c as usize % 8];
        let variant = variants[v as usize % 3].clone();
        let id = format!("p{i}");
        recs.push(FaceRecord {
            record_id: FaceRecord::make_id(&id, &variant),
            identity_id: id.clone(),
            display_name: id,
            country: Country::new(country),
            region: Region::of_canonical(country).unwrap(),
            gender: Gender::ALL[g as usize % 2],
            variant,
            image_ref: String::new(),
            width: 1,
            height: 1,
        });
        outs.push([Outcome::Correct, Outcome::Incorrect, Outcome::FaceNotFound, Outcome::Failed][o as usize % 4]);
    }
    (recs, outs)
}

proptest! {
    #[test]
    fn groups_reconcile_with_totals(outcomes in prop::collection::vec((0u8..8, 0u8..2, 0u8..3, 0u8..4), 1..120)) {
        let (recs, outs) = synthetic_records(&outcomes);
        let scored: Vec<(&FaceRecord, Outcome)> = recs.iter().zip(outs.iter().copied()).collect();
        let (groups, totals) = tally("b", &scored, GroupBy { country: true });
        for ((_, variant), t) in &totals {
            let region_level: Vec<&GroupMetrics> =
                groups.iter().filter(|(k, _)| &k.variant == variant && k.country.is_none()).map(|(_, m)| m).collect();
            prop_assert_eq!(region_level.iter().map(|m| m.n).sum::<u64>(), t.n);
            prop_assert_eq!(region_level.iter().map(|m| m.correct).sum::<u64>(), t.correct);
            let country_level: Vec<&GroupMetrics> =
                groups.iter().filter(|(k, _)| &k.variant == variant && k.country.is_some()).map(|(_, m)| m).collect();
            prop_assert_eq!(country_level.iter().map(|m| m.n).sum::<u64>(), t.n);
        }
        prop_assert_eq!(totals.values().map(|t| t.n).sum::<u64>(), recs.len() as u64);
    }

    #[test]
    fn tally_is_order_independent(outcomes in prop::collection::vec((0u8..8, 0u8..2, 0u8..3, 0u8..4), 1..60), rot in 0usize..60) {
        let (recs, outs) = synthetic_records(&outcomes);
        let mut scored: Vec<(&FaceRecord, Outcome)> = recs.iter().zip(outs.iter().copied()).collect();
        let a = tally("b", &scored, GroupBy::default());
        let k = rot % scored.len();
        scored.rotate_left(k);
        scored.reverse();
        prop_assert_eq!(a, tally("b", &scored, GroupBy::default()));
    }

    #[test]
    fn disparity_is_antisymmetric(m in 0i128..10_000, f in 0i128..10_000) {
        let (m, f) = (Ratio::new(m, 100), Ratio::new(f, 100));
        prop_assert_eq!(disparity_of(m, f), -disparity_of(f, m));
    }
}
