use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_frs-audit"));
    c.env_remove("FRS_OUT").env_remove("FRS_SEED").env_remove("FRS_CACHE");
    c
}

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/tiny")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn run_json(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("run.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn stub_audit_of_tiny_corpus_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("audit");
    let o = run(&["audit", "--backend", "stub", "--corpus", s(&tiny()), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("100.00%"), "{stdout}");

    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["totals"].as_array().unwrap().len(), 1);
    for f in ["accuracy.csv", "disparity.csv", "accuracy.svg", "calls-stub.jsonl"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let info = run_json(&out);
    assert_eq!(info["status"], "ok");
    assert_eq!(info["subcommand"], "audit");
    let outputs: Vec<&str> = info["outputs"].as_array().unwrap().iter().map(|o| o["path"].as_str().unwrap()).collect();
    assert!(outputs.contains(&"report.json"));
    assert!(!outputs.contains(&"run.json"));
    assert_eq!(info["inputs"][0]["path"].as_str().unwrap(), s(&tiny().join("labels.csv")));
}

fn tree_hashes(root: &Path) -> Vec<(String, String)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) {
        for e in std::fs::read_dir(dir).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.extension().is_some_and(|x| x == "png") {
                let name = p.strip_prefix(root).unwrap().display().to_string();
                out.push((name, hex::encode(Sha256::digest(std::fs::read(&p).unwrap()))));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

#[test]
fn variant_generation_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let ingest = dir.path().join("ingest");
    assert!(run(&["ingest", "--images", s(&tiny()), "--no-crop", "--out", s(&ingest)]).status.success());
    let manifest = ingest.join("manifest.json");
    let gen = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = run(&["variants", "--manifest", s(&manifest), "--kinds", "grey,rgb0.3", "--seed", seed, "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        tree_hashes(&out.join("variants"))
    };
    let a = gen("a", "7");
    let b = gen("b", "7");
    let c = gen("c", "8");
    assert_eq!(a.len(), 32);
    assert_eq!(a, b);
    let subset = |v: &[(String, String)], tag: &str| v.iter().filter(|(n, _)| n.starts_with(tag)).cloned().collect::<Vec<_>>();
    assert_eq!(subset(&a, "GREY"), subset(&c, "GREY"), "greyscale is deterministic");
    assert_ne!(subset(&a, "RGB"), subset(&c, "RGB"), "RGB noise depends on the seed");
}

#[test]
fn seed_can_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("h");
    let manifest = dir.path().join("ingest");
    assert!(run(&["ingest", "--images", s(&tiny()), "--no-crop", "--out", s(&manifest)]).status.success());
    let o = bin()
        .args(["holdout", "--manifest", s(&manifest.join("manifest.json")), "--per-country", "2", "--ratio", "1:1"])
        .env("FRS_SEED", "41")
        .env("FRS_OUT", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(run_json(&out)["seeds"], serde_json::json!([41]));
    for f in ["holdout.json", "pool.json", "holdout_variants.json"] {
        assert!(out.join(f).exists());
    }
}

#[test]
fn usage_data_and_backend_failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["audit", "--backend", "stub", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["exit_code"], 2);

    let o = run(&["audit", "--backend", "nope", "--corpus", s(&tiny()), "--out", s(&dir.path().join("u"))]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "Config");

    let missing = dir.path().join("absent.json");
    let out = dir.path().join("d");
    let o = run(&["variants", "--manifest", s(&missing), "--kinds", "grey", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr_json(&o);
    assert!(err["message"].as_str().unwrap().contains("absent.json"), "{err}");
    let info = run_json(&out);
    assert_eq!(info["status"], "failed");
    assert_eq!(info["error"]["kind"], err["error"]);

    let out = dir.path().join("b");
    let o = bin()
        .args(["audit", "--backend", "azure", "--corpus", s(&tiny()), "--out", s(&out)])
        .env_remove("AZURE_FACE_KEY")
        .env_remove("AZURE_FACE_ENDPOINT")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stderr_json(&o)["exit_code"], 4);
}

#[test]
fn every_subcommand_has_help() {
    for sub in [
        "ingest", "variants", "audit", "holdout", "kshot", "train-fewshot", "train-contrastive", "train-country", "explain",
        "report", "toy-repro",
    ] {
        let o = run(&[sub, "--help"]);
        assert!(o.status.success(), "{sub}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"), "{sub}");
    }
    assert_eq!(run(&[]).status.code(), Some(2));
}

#[test]
fn report_rerenders_a_saved_audit() {
    let dir = tempfile::tempdir().unwrap();
    let audit = dir.path().join("a");
    let o = run(&["audit", "--backend", "stub", "--backend", "constant:Female", "--corpus", s(&tiny()), "--out", s(&audit)]);
    assert!(o.status.success());
    let rep = dir.path().join("r");
    let o = run(&["report", "--report", s(&audit.join("report.json")), "--out", s(&rep)]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(audit.join("accuracy.csv")).unwrap(), std::fs::read(rep.join("accuracy.csv")).unwrap());
    assert!(String::from_utf8_lossy(&o.stdout).contains("constant-Female"));
}

#[test]
fn toy_export_feeds_the_training_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy");
    let o = run(&["toy-repro", "mitigation", "--export", "--out", s(&toy)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("| baseline |") && stdout.contains("| mean |"), "{stdout}");
    assert!(stdout.contains("relative disparity reduction"));
    let data = toy.join("toy-data");

    let fs = dir.path().join("fs");
    let o = run(&["train-fewshot", "--spec", s(&data.join("fewshot.json")), "--repeats", "1", "--out", s(&fs)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["results.csv", "run_log.jsonl", "repeat-0.ckpt", "spec.json"] {
        assert!(fs.join(f).exists(), "{f}");
    }
    let spec: Value = serde_json::from_str(&std::fs::read_to_string(fs.join("spec.json")).unwrap()).unwrap();
    assert_eq!(spec["training_config"]["repeats"], 1);
    assert_eq!(spec["out_dir"].as_str().unwrap(), s(&fs));

    let ex = dir.path().join("ex");
    let o = run(&[
        "explain", "--checkpoint", s(&data.join("pretrained.ckpt")), "--manifest", s(&data.join("holdout.json")), "--limit", "4",
        "--out", s(&ex),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["maps.npz", "grid.png", "saliency.json", "groups.json"] {
        assert!(ex.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_dir(ex.join("overlays")).unwrap().count(), 4);

    let o = run(&["train-country", "--spec", s(&data.join("fewshot.json")), "--out", s(&dir.path().join("c"))]);
    assert_eq!(o.status.code(), Some(2));
}
