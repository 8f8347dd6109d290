use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde_json::{json, Value};

use super::commands::{file_stem, write_json};
use super::{Context, RunInfo, ToyArgs, ToyWhich};
use crate::backends::Task;
use crate::corpus::{ImageStore, Manifest, MemoryStore};
use crate::error::{Error, Result};
use crate::mitigation::{ExperimentSpec, Scheme};
use crate::toy::{
    contrastive_experiment, country_experiment, gender_setup, kshot_experiment, CountryToyParams, GenderSetup,
    GenderToyParams, ToyRun,
};

fn run_row(table: &mut String, name: &str, r: &ToyRun) {
    let _ = writeln!(
        table,
        "| {name} | {:.2} | {:.2} | {:.2} | {:.2} |",
        r.male, r.female, r.disparity, r.macro_accuracy
    );
}

fn run_table(title: &str, baseline: &ToyRun, runs: &[ToyRun], mean: &ToyRun) -> String {
    let mut t = format!("## {title}\n\n| run | male % | female % | disparity | macro % |\n|---|---|---|---|---|\n");
    run_row(&mut t, "baseline", baseline);
    for (i, r) in runs.iter().enumerate() {
        run_row(&mut t, &format!("seed {i}"), r);
    }
    run_row(&mut t, "mean", mean);
    t
}

fn csv_rows(experiment: &str, baseline: &ToyRun, runs: &[ToyRun], mean: &ToyRun, csv: &mut String) {
    let mut push = |run: &str, r: &ToyRun| {
        let _ = writeln!(csv, "{experiment},{run},{:.4},{:.4},{:.4},{:.4}", r.male, r.female, r.disparity, r.macro_accuracy);
    };
    push("baseline", baseline);
    for (i, r) in runs.iter().enumerate() {
        push(&format!("seed{i}"), r);
    }
    push("mean", mean);
}

pub(super) fn toy_repro(ctx: &Context, a: ToyArgs) -> Result<RunInfo> {
    let mut gender = GenderToyParams::default();
    let mut country = CountryToyParams::default();
    if let Some(seed) = ctx.seed {
        gender.seed = seed;
        country.seed = seed;
    }
    let wants = |w: ToyWhich| a.which == w || a.which == ToyWhich::All;
    let needs_gender = wants(ToyWhich::Mitigation) || wants(ToyWhich::Contrastive) || a.export;

    let mut markdown = String::from("# Synthetic mitigation experiments\n\n");
    let mut csv = String::from("experiment,run,male,female,disparity,macro\n");
    let mut results = BTreeMap::<&str, Value>::new();

    let setup = if needs_gender { Some(gender_setup(&gender)?) } else { None };
    if let Some(setup) = &setup {
        if wants(ToyWhich::Mitigation) {
            let r = kshot_experiment(setup, &gender)?;
            markdown += &run_table(&format!("{}-shot fine-tuning", r.shots), &r.baseline, &r.runs, &r.mean);
            let _ = writeln!(markdown, "\nrelative disparity reduction: {:.1} %\n", 100.0 * r.relative_reduction);
            csv_rows("kshot", &r.baseline, &r.runs, &r.mean, &mut csv);
            results.insert("kshot", serde_json::to_value(&r)?);
        }
        if wants(ToyWhich::Contrastive) {
            let r = contrastive_experiment(setup, &gender)?;
            markdown += &run_table("Contrastive fine-tuning", &r.baseline, &r.runs, &r.mean);
            let sat: Vec<String> = r.final_satisfaction.iter().map(|s| format!("{s:.3}")).collect();
            let _ = writeln!(
                markdown,
                "\nfinal triplet satisfaction per seed: {}\nmax loss decomposition error: {:.2e} over {} logged steps\n",
                sat.join(", "),
                r.max_decomposition_error,
                r.steps_logged
            );
            csv_rows("contrastive", &r.baseline, &r.runs, &r.mean, &mut csv);
            results.insert("contrastive", serde_json::to_value(&r)?);
        }
    }
    if wants(ToyWhich::Country) {
        let r = country_experiment(&country)?;
        markdown += "## Two-stage country task\n\n| seed | fine-tune macro % | contrastive macro % |\n|---|---|---|\n";
        for (i, (f, c)) in r.finetune_macro.iter().zip(&r.contrastive_macro).enumerate() {
            let _ = writeln!(markdown, "| {i} | {f:.2} | {c:.2} |");
        }
        let _ = writeln!(markdown, "| mean | {:.2} | {:.2} |", r.mean_finetune_macro, r.mean_contrastive_macro);
        let _ = writeln!(markdown, "\nbaseline macro accuracy: {:.2} %\n", r.baseline_macro);
        for (i, (f, c)) in r.finetune_macro.iter().zip(&r.contrastive_macro).enumerate() {
            let _ = writeln!(csv, "country,seed{i}-finetune,,,,{f:.4}");
            let _ = writeln!(csv, "country,seed{i}-contrastive,,,,{c:.4}");
        }
        results.insert("country", serde_json::to_value(&r)?);
    }

    print!("{markdown}");
    std::fs::write(ctx.path("toy_results.md"), &markdown)?;
    std::fs::write(ctx.path("toy_results.csv"), &csv)?;
    write_json(&ctx.path("toy_results.json"), &results)?;

    let mut exported = Value::Null;
    if a.export {
        let setup = setup.as_ref().expect("gender setup is built when exporting");
        exported = export(&ctx.path("toy-data"), setup, &gender, &ctx.path("toy-runs"))?;
        println!("exported toy data to {}", ctx.path("toy-data").display());
    }
    let mut seeds = Vec::new();
    if needs_gender {
        seeds.extend([gender.seed, gender.model_seed]);
    }
    if wants(ToyWhich::Country) {
        seeds.extend([country.seed, country.model_seed]);
    }
    Ok(RunInfo {
        seeds,
        config: json!({ "which": format!("{:?}", a.which).to_lowercase(), "gender": gender, "country": country }),
        summary: json!({ "results": results, "export": exported }),
        ..Default::default()
    })
}

fn materialize(manifest: &Manifest, store: &MemoryStore, images: &Path, provenance: &str) -> Result<Manifest> {
    let mut out = manifest.clone();
    out.provenance = provenance.to_owned();
    for r in &mut out.records {
        let path = images.join(format!("{}.png", file_stem(&r.record_id)));
        if !path.exists() {
            store.load(&r.image_ref)?.save_png(&path)?;
        }
        r.image_ref = path.display().to_string();
    }
    Ok(out)
}

/// Writes the deployment pool/holdout as PNG files with absolute paths, the
/// pretrained checkpoint and two ready-to-run experiment specs.
fn export(dir: &Path, setup: &GenderSetup, params: &GenderToyParams, runs: &Path) -> Result<Value> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images)?;
    let images = images.canonicalize()?;
    let dir = dir.canonicalize()?;
    let pool = materialize(&setup.pool, &setup.deploy.store, &images, "toy deployment pool")?;
    let holdout = materialize(&setup.holdout, &setup.deploy.store, &images, "toy deployment holdout")?;
    pool.save(dir.join("pool.json"))?;
    holdout.save(dir.join("holdout.json"))?;
    setup.pretrained.save(dir.join("pretrained.ckpt"))?;
    let runs = if runs.is_absolute() { runs.to_path_buf() } else { std::env::current_dir()?.join(runs) };
    let base = ExperimentSpec {
        task: Task::Gender,
        scheme: Scheme::FewShot,
        shots: Some(params.shots),
        adversarial_fraction: 0.0,
        triplet_spec: None,
        training_config: params.few_shot.clone(),
        stage2_config: None,
        checkpoint: dir.join("pretrained.ckpt"),
        pool_manifest: dir.join("pool.json"),
        stage2_manifest: None,
        holdout_manifest: dir.join("holdout.json"),
        out_dir: runs.join("fewshot"),
    };
    let contrastive = ExperimentSpec {
        scheme: Scheme::Contrastive,
        shots: None,
        triplet_spec: Some(params.triplets.clone()),
        training_config: params.contrastive.clone(),
        out_dir: runs.join("contrastive"),
        ..base.clone()
    };
    write_json(&dir.join("fewshot.json"), &base)?;
    write_json(&dir.join("contrastive.json"), &contrastive)?;
    if pool.is_empty() || holdout.is_empty() {
        return Err(Error::EmptyGroup);
    }
    Ok(json!({ "dir": dir, "pool": pool.len(), "holdout": holdout.len() }))
}
