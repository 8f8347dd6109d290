use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    AuditArgs, Command, Context, CountryArgs, CountryScheme, ExplainArgs, HoldoutArgs, IngestArgs, KshotArgs, ReportArgs,
    RunInfo, TrainArgs, TripletArgs, VariantsArgs,
};
use crate::audit::{
    balanced_resample_audit, format_percent, render_bar_chart, run_audit, write_tables, AuditReport, GroupBy, GroupKey,
};
use crate::backends::{
    AzureFace, Backend, BackendDescriptor, Cache, ConstantStub, FacePlusPlus, LocalBackend, OracleStub, PredictionService,
    Rekognition, RemoteBackend, ReqwestTransport, ServiceOptions, SystemClock, Task, Transport,
};
use crate::corpus::{
    build_holdout, ingest, normalize_manifest, sample_kshot, BBoxTable, Country, CountryRegistry, FileStore, FullFrame,
    ImageStore, Manifest, Region, SplitSpec,
};
use crate::error::{Error, Result};
use crate::explain::{compose_grid, gradcam, group_average_map, heat_overlay, region_profile, save_npz, SaliencyMap};
use crate::imagebuf::ImageBuffer;
use crate::mitigation::{run_experiment, ExperimentResult, ExperimentSpec, Scheme, TrainingConfig, TripletSpec};
use crate::model::Checkpoint;
use crate::variants::{generate_variants, FixedLandmarks, VariantJob};

pub(super) fn dispatch(ctx: &Context, command: Command) -> Result<RunInfo> {
    match command {
        Command::Ingest(a) => ingest_cmd(ctx, a),
        Command::Variants(a) => variants_cmd(ctx, a),
        Command::Audit(a) => audit_cmd(ctx, a),
        Command::Holdout(a) => holdout_cmd(ctx, a),
        Command::Kshot(a) => kshot_cmd(ctx, a),
        Command::TrainFewshot(a) => {
            let spec = experiment_spec(ctx, &a, Scheme::FewShot, TrainingConfig::few_shot(), None, |_| Ok(()))?;
            train(ctx, spec, &a)
        }
        Command::TrainContrastive(a) => {
            let spec = experiment_spec(ctx, &a.train, Scheme::Contrastive, TrainingConfig::contrastive(), Some(&a.triplets), |_| {
                Ok(())
            })?;
            train(ctx, spec, &a.train)
        }
        Command::TrainCountry(a) => train_country(ctx, a),
        Command::Explain(a) => explain_cmd(ctx, a),
        Command::Report(a) => report_cmd(ctx, a),
        Command::ToyRepro(a) => super::toyrepro::toy_repro(ctx, a),
    }
}

/// Sanitizes an id for use as a file name.
pub(super) fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' }).collect()
}

pub(super) fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

#[derive(Deserialize)]
struct RegionRow {
    country: String,
    region: String,
}

fn ingest_cmd(ctx: &Context, a: IngestArgs) -> Result<RunInfo> {
    let labels = a.labels.clone().unwrap_or_else(|| a.images.join("labels.csv"));
    let mut registry = CountryRegistry::default();
    let mut inputs = vec![labels.clone()];
    if let Some(path) = &a.regions {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        for row in reader.deserialize::<RegionRow>() {
            let row = row?;
            registry.declare(Country::new(&row.country), row.region.parse::<Region>()?);
        }
        inputs.push(path.clone());
    }
    let manifest = ingest(&a.images, &labels, &registry)?;
    let (manifest, failures) = if a.no_crop {
        (manifest, Vec::new())
    } else {
        let crops = ctx.path("crops");
        match &a.bboxes {
            Some(b) => {
                inputs.push(b.clone());
                normalize_manifest(&manifest, &BBoxTable::read(b)?, &crops)?
            }
            None => normalize_manifest(&manifest, &FullFrame, &crops)?,
        }
    };
    manifest.save(ctx.path("manifest.json"))?;
    let failures: Vec<Value> =
        failures.iter().map(|(image, e)| json!({ "image": image, "kind": e.kind(), "message": e.to_string() })).collect();
    write_json(&ctx.path("crop_failures.json"), &failures)?;
    println!("ingested {} records from {} ({} crop failures)", manifest.len(), a.images.display(), failures.len());
    Ok(RunInfo {
        inputs,
        config: json!({ "images": a.images, "crop": !a.no_crop }),
        summary: json!({ "records": manifest.len(), "crop_failures": failures.len(), "corpus_hash": manifest.content_hash() }),
        ..Default::default()
    })
}

fn variants_cmd(ctx: &Context, a: VariantsArgs) -> Result<RunInfo> {
    let manifest = Manifest::load(&a.manifest)?;
    let job = VariantJob { out_dir: ctx.path("variants"), master_seed: ctx.seed(), landmarks: &FixedLandmarks };
    let outcome = generate_variants(&manifest, &a.kinds, &job)?;
    outcome.manifest.save(ctx.path("manifest.json"))?;
    let failures: Vec<Value> = outcome
        .failures
        .iter()
        .map(|f| json!({ "identity_id": f.identity_id, "kind": f.kind, "error": f.error.to_string() }))
        .collect();
    write_json(&ctx.path("failures.json"), &failures)?;
    let counts: BTreeMap<String, usize> = a.kinds.iter().map(|k| (k.tag(), outcome.count(k))).collect();
    for (tag, n) in &counts {
        println!("{tag}: {n} images");
    }
    Ok(RunInfo {
        inputs: vec![a.manifest],
        seeds: vec![ctx.seed()],
        config: json!({ "kinds": a.kinds.iter().map(|k| k.tag()).collect::<Vec<_>>() }),
        summary: json!({ "counts": counts, "failures": failures.len() }),
    })
}

fn transport() -> Result<Arc<dyn Transport>> {
    Ok(Arc::new(ReqwestTransport::new(Duration::from_secs(30))?))
}

fn build_backend(spec: &str, manifest: &Manifest, task: Task, rate: f64, inputs: &mut Vec<PathBuf>) -> Result<Arc<dyn Backend>> {
    let remote = |name: &str| BackendDescriptor::remote(name, task, rate, "v1");
    Ok(match spec.split_once(':') {
        None if spec == "stub" => Arc::new(OracleStub::new(manifest, task)?),
        None if spec == "rekognition" => Arc::new(RemoteBackend::new(remote(spec)?, Box::new(Rekognition::from_env()?), transport()?)?),
        None if spec == "azure" => Arc::new(RemoteBackend::new(remote(spec)?, Box::new(AzureFace::from_env()?), transport()?)?),
        None if spec == "facepp" => Arc::new(RemoteBackend::new(remote(spec)?, Box::new(FacePlusPlus::from_env()?), transport()?)?),
        Some(("constant", label)) => Arc::new(ConstantStub::new(format!("constant-{label}"), task, label)),
        Some(("local", rest)) => {
            let (path, name) = match rest.split_once('@') {
                Some((p, n)) => (PathBuf::from(p), n.to_owned()),
                None => {
                    let p = PathBuf::from(rest);
                    let n = p.file_stem().map_or("local".into(), |s| s.to_string_lossy().into_owned());
                    (p, n)
                }
            };
            let ckpt = Checkpoint::load(&path)?;
            inputs.push(path);
            Arc::new(LocalBackend::new(name, task, &ckpt)?)
        }
        _ => return Err(Error::Config(format!("unknown backend `{spec}`"))),
    })
}

fn print_report(report: &AuditReport) {
    for t in &report.totals {
        println!("{:<16} {:<8} accuracy {:>7}%  (n={})", t.backend, t.variant, format_percent(t.metrics.accuracy), t.metrics.n);
    }
    for d in report.disparities.iter().filter(|d| d.country.is_none()) {
        println!("{:<16} {:<8} {:<2} disparity {:>7}", d.backend, d.variant, d.region.short(), format_percent(d.disparity));
    }
    for a in &report.aborted {
        println!("{} aborted: {}", a.backend, a.reason);
    }
}

fn emit_report(ctx: &Context, report: &AuditReport) -> Result<()> {
    report.save(ctx.path("report.json"))?;
    write_tables(report, &ctx.out)?;
    std::fs::write(ctx.path("accuracy.svg"), render_bar_chart(report))?;
    Ok(())
}

fn audit_cmd(ctx: &Context, a: AuditArgs) -> Result<RunInfo> {
    let mut inputs = Vec::new();
    let manifest = match (&a.manifest, &a.corpus) {
        (Some(m), _) => {
            inputs.push(m.clone());
            Manifest::load(m)?
        }
        (None, Some(dir)) => {
            inputs.push(dir.join("labels.csv"));
            ingest(dir, dir.join("labels.csv"), &CountryRegistry::default())?
        }
        (None, None) => return Err(Error::Config("audit needs --manifest or --corpus".into())),
    };
    let services: Vec<PredictionService> = a
        .backend
        .iter()
        .map(|spec| {
            let backend = build_backend(spec, &manifest, a.task, a.rate_limit, &mut inputs)?;
            let log = ctx.path(&format!("calls-{}.jsonl", file_stem(&backend.descriptor().name)));
            let options = ServiceOptions { retries: a.retries, workers: a.workers.max(1), log_path: Some(log), ..Default::default() };
            let cache = a.cache.as_ref().map(Cache::new);
            Ok(PredictionService::with_clock(backend, cache, Arc::new(SystemClock::default()), options))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&PredictionService> = services.iter().collect();
    let group_by = GroupBy { country: a.by_country };
    let report = match a.balanced {
        Some(n) => balanced_resample_audit(&manifest, &refs, n, a.samples, ctx.seed(), group_by)?,
        None => run_audit(&manifest, &refs, group_by)?,
    };
    emit_report(ctx, &report)?;
    print_report(&report);
    if report.backends.is_empty() && !report.aborted.is_empty() {
        let reasons: Vec<String> = report.aborted.iter().map(|b| format!("{}: {}", b.backend, b.reason)).collect();
        return Err(Error::Auth(reasons.join("; ")));
    }
    let calls: usize = services.iter().map(|s| s.calls().iter().filter(|c| !c.cache_hit).count()).sum();
    Ok(RunInfo {
        inputs,
        seeds: a.balanced.map(|_| ctx.seed()).into_iter().collect(),
        config: json!({
            "backends": a.backend, "task": a.task, "by_country": a.by_country,
            "balanced": a.balanced, "samples": a.samples, "cache": a.cache,
        }),
        summary: json!({
            "records": manifest.len(),
            "backend_calls": calls,
            "aborted": report.aborted.iter().map(|b| &b.backend).collect::<Vec<_>>(),
        }),
    })
}

fn holdout_cmd(ctx: &Context, a: HoldoutArgs) -> Result<RunInfo> {
    let manifest = Manifest::load(&a.manifest)?;
    let (m, f) = a
        .ratio
        .split_once(':')
        .and_then(|(m, f)| Some((m.trim().parse().ok()?, f.trim().parse().ok()?)))
        .ok_or_else(|| Error::Config(format!("ratio `{}` is not of the form M:F", a.ratio)))?;
    let spec = SplitSpec { per_country_total: a.per_country, male_female_ratio: (m, f), disjoint: !a.overlap };
    let (holdout, pool) = build_holdout(&manifest, &spec, ctx.seed())?;
    holdout.save(ctx.path("holdout.json"))?;
    pool.save(ctx.path("pool.json"))?;
    let with_variants = holdout.expand_from(&manifest);
    with_variants.save(ctx.path("holdout_variants.json"))?;
    println!("holdout {} records, pool {} records, holdout incl. variants {}", holdout.len(), pool.len(), with_variants.len());
    Ok(RunInfo {
        inputs: vec![a.manifest],
        seeds: vec![ctx.seed()],
        config: serde_json::to_value(&spec)?,
        summary: json!({ "holdout": holdout.len(), "pool": pool.len() }),
    })
}

fn kshot_cmd(ctx: &Context, a: KshotArgs) -> Result<RunInfo> {
    let pool = Manifest::load(&a.manifest)?;
    let shots = sample_kshot(&pool, a.k, a.adversarial_fraction, &a.adversarial_kind, ctx.seed())?;
    shots.save(ctx.path("shots.json"))?;
    let adversarial = shots.records.iter().filter(|r| !r.variant.is_orig()).count();
    println!("{} shots ({} adversarial)", shots.len(), adversarial);
    Ok(RunInfo {
        inputs: vec![a.manifest],
        seeds: vec![ctx.seed()],
        config: json!({ "k": a.k, "adversarial_fraction": a.adversarial_fraction, "adversarial_kind": a.adversarial_kind.tag() }),
        summary: json!({ "shots": shots.len(), "adversarial": adversarial }),
    })
}

/// Recursive JSON object merge; `patch` wins on conflicts.
pub(super) fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn set<T: serde::Serialize>(v: &mut Value, key: &str, value: &Option<T>) -> Result<()> {
    if let Some(x) = value {
        v[key] = serde_json::to_value(x)?;
    }
    Ok(())
}

fn anchors_value(text: &str) -> Result<Value> {
    let t = text.trim().to_ascii_lowercase();
    if t == "all" || t == "all-identities" || t == "all_identities" {
        return Ok(json!("all_identities"));
    }
    let k = t
        .strip_prefix("per-cell:")
        .or_else(|| t.strip_prefix("per_cell:"))
        .and_then(|k| k.parse::<usize>().ok())
        .ok_or_else(|| Error::Config(format!("anchors `{text}`: expected `all` or `per-cell:<k>`")))?;
    Ok(json!({ "per_cell": k }))
}

/// Builds an [`ExperimentSpec`] from defaults, the optional spec file, the
/// environment (seed, out) and flags, in increasing priority.
fn experiment_spec(
    ctx: &Context,
    a: &TrainArgs,
    scheme: Scheme,
    preset: TrainingConfig,
    triplets: Option<&TripletArgs>,
    extra: impl FnOnce(&mut Value) -> Result<()>,
) -> Result<ExperimentSpec> {
    let mut v = json!({ "task": Task::Gender, "scheme": scheme, "training_config": preset });
    if triplets.is_some() {
        v["triplet_spec"] = serde_json::to_value(TripletSpec::default())?;
    }
    if let Some(path) = &a.spec {
        merge(&mut v, serde_json::from_str(&crate::error::read_text(path)?)?);
    }
    set(&mut v, "task", &a.task)?;
    set(&mut v, "checkpoint", &a.checkpoint)?;
    set(&mut v, "pool_manifest", &a.pool)?;
    set(&mut v, "holdout_manifest", &a.holdout)?;
    set(&mut v, "shots", &a.shots)?;
    set(&mut v, "adversarial_fraction", &a.adversarial_fraction)?;
    let tc = &mut v["training_config"];
    set(tc, "learning_rate", &a.lr)?;
    set(tc, "epochs", &a.epochs)?;
    set(tc, "batch_size", &a.batch_size)?;
    set(tc, "repeats", &a.repeats)?;
    set(tc, "seed", &ctx.seed)?;
    if let Some(t) = triplets {
        let ts = &mut v["triplet_spec"];
        set(ts, "margin", &t.margin)?;
        set(ts, "opposite_gender_probability", &t.opposite_p)?;
        set(ts, "positive", &t.positive)?;
        if let Some(text) = &t.anchors {
            ts["anchors"] = anchors_value(text)?;
        }
        if let Some(w) = t.w_triplet {
            v["training_config"]["loss_mix"] = json!({ "w_triplet": w, "w_bce": 1.0 - w });
        }
    }
    v["out_dir"] = serde_json::to_value(&ctx.out)?;
    extra(&mut v)?;
    for (key, flag) in [("checkpoint", "--checkpoint"), ("pool_manifest", "--pool"), ("holdout_manifest", "--holdout")] {
        if v.get(key).is_none_or(Value::is_null) {
            return Err(Error::Config(format!("missing `{key}`: pass {flag} or set it in the spec file")));
        }
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("experiment spec: {e}")))
}

fn print_experiment(result: &ExperimentResult) {
    println!("{:<10} {:>8} {:>10}", "run", "macro %", "disparity");
    println!("{:<10} {:>8.2} {:>10.2}", "baseline", result.baseline_macro_accuracy, result.baseline_gender_disparity);
    for r in &result.repeats {
        println!("{:<10} {:>8.2} {:>10.2}", format!("repeat {}", r.repeat), r.macro_accuracy, r.gender_disparity);
    }
    println!("{:<10} {:>8.2} {:>10.2}", "mean", result.mean_macro_accuracy, result.mean_gender_disparity);
}

fn train(ctx: &Context, spec: ExperimentSpec, a: &TrainArgs) -> Result<RunInfo> {
    let result = run_experiment(&spec, &FileStore::new())?;
    print_experiment(&result);
    let mut inputs: Vec<PathBuf> = a.spec.iter().cloned().collect();
    inputs.extend([spec.checkpoint.clone(), spec.pool_manifest.clone(), spec.holdout_manifest.clone()]);
    inputs.extend(spec.stage2_manifest.clone());
    write_json(&ctx.path("spec.json"), &spec)?;
    Ok(RunInfo {
        inputs,
        seeds: result.repeats.iter().map(|r| r.seed).collect(),
        config: serde_json::to_value(&spec)?,
        summary: json!({
            "baseline_macro_accuracy": result.baseline_macro_accuracy,
            "baseline_gender_disparity": result.baseline_gender_disparity,
            "mean_macro_accuracy": result.mean_macro_accuracy,
            "mean_gender_disparity": result.mean_gender_disparity,
        }),
    })
}

fn train_country(ctx: &Context, a: CountryArgs) -> Result<RunInfo> {
    let default_scheme = match a.scheme {
        Some(CountryScheme::Finetune) => Scheme::FinetuneThenFinetune,
        _ => Scheme::ContrastiveThenContrastive,
    };
    let spec = experiment_spec(ctx, &a.train, default_scheme, TrainingConfig::few_shot(), Some(&a.triplets), |v| {
        v["task"] = json!(Task::Country);
        if a.scheme.is_some() {
            v["scheme"] = serde_json::to_value(default_scheme)?;
        }
        set(v, "stage2_manifest", &a.stage2)?;
        if let Some(lr) = a.stage2_lr {
            let mut second = v.get("stage2_config").filter(|s| !s.is_null()).unwrap_or(&v["training_config"]).clone();
            second["learning_rate"] = json!(lr);
            v["stage2_config"] = second;
        }
        Ok(())
    })?;
    if !matches!(spec.scheme, Scheme::FinetuneThenFinetune | Scheme::ContrastiveThenContrastive) {
        return Err(Error::Config("train-country runs a two-stage scheme".into()));
    }
    train(ctx, spec, &a.train)
}

fn explain_cmd(ctx: &Context, a: ExplainArgs) -> Result<RunInfo> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let net = ckpt.network()?;
    let manifest = Manifest::load(&a.manifest)?;
    let records: Vec<_> = manifest.records.iter().take(a.limit.unwrap_or(usize::MAX)).collect();
    if records.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let store = FileStore::new();
    let explained: Vec<(ImageBuffer, SaliencyMap)> = records
        .par_iter()
        .map(|r| {
            let img = store.load(&r.image_ref)?;
            let label = a.class.clone().unwrap_or_else(|| a.task.truth(r));
            let map = gradcam(&net, &img, net.config().class_index(&label)?, a.block, &r.record_id)?;
            Ok((img, map))
        })
        .collect::<Result<_>>()?;

    let overlays_dir = ctx.path("overlays");
    std::fs::create_dir_all(&overlays_dir)?;
    let mut overlays = Vec::new();
    let mut per_record = Vec::new();
    for (r, (img, map)) in records.iter().zip(&explained) {
        let overlay = heat_overlay(img, map)?;
        overlay.save_png(overlays_dir.join(format!("{}.png", file_stem(&r.record_id))))?;
        overlays.push(overlay);
        let profile = region_profile(map);
        per_record.push(json!({
            "record_id": r.record_id, "identity_id": r.identity_id, "country": r.country, "region": r.region,
            "gender": r.gender, "variant": r.variant.tag(), "target": net.config().class_names[map.target_class],
            "profile": profile, "dominant": profile.dominant(),
        }));
    }
    let names: Vec<String> = records.iter().map(|r| file_stem(&r.record_id)).collect();
    let named: Vec<(&str, &SaliencyMap)> = names.iter().map(String::as_str).zip(explained.iter().map(|e| &e.1)).collect();
    save_npz(&named, &ctx.path("maps.npz"))?;
    compose_grid(&overlays, a.cols, 4)?.save_png(ctx.path("grid.png"))?;
    write_json(&ctx.path("saliency.json"), &per_record)?;

    let mut groups: BTreeMap<(String, Region, crate::corpus::Gender, usize), Vec<SaliencyMap>> = BTreeMap::new();
    for (r, (_, map)) in records.iter().zip(&explained) {
        groups.entry((r.variant.tag(), r.region, r.gender, map.target_class)).or_default().push(map.clone());
    }
    let mut group_out = Vec::new();
    for ((variant, region, gender, target), maps) in &groups {
        let key = GroupKey::new("local", variant, *region, *gender);
        let avg = group_average_map(maps, &key)?;
        let stem = format!("group_{}_{}_{}_{}", file_stem(variant), region.short(), gender.short(), target);
        let grey = ImageBuffer::filled(avg.width as u32, avg.height as u32, [128, 128, 128]);
        heat_overlay(&grey, &avg)?.save_png(ctx.path(&format!("{stem}.png")))?;
        let profile = region_profile(&avg);
        println!("{key} target {}: dominant {:?} over {} maps", net.config().class_names[*target], profile.dominant(), maps.len());
        group_out.push(json!({
            "group": key.to_string(), "target": net.config().class_names[*target], "count": maps.len(),
            "profile": profile, "dominant": profile.dominant(), "image": format!("{stem}.png"),
        }));
    }
    write_json(&ctx.path("groups.json"), &group_out)?;
    Ok(RunInfo {
        inputs: vec![a.checkpoint, a.manifest],
        config: json!({ "task": a.task, "class": a.class, "block": a.block, "limit": a.limit }),
        summary: json!({ "maps": explained.len(), "groups": group_out.len() }),
        ..Default::default()
    })
}

fn report_cmd(ctx: &Context, a: ReportArgs) -> Result<RunInfo> {
    let report = AuditReport::load(&a.report)?;
    emit_report(ctx, &report)?;
    print_report(&report);
    Ok(RunInfo {
        inputs: vec![a.report],
        summary: json!({ "backends": report.backends.len(), "groups": report.groups.len() }),
        ..Default::default()
    })
}
