use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{greyscale, mask_face, rgb_noise, spread, LandmarkProvider};
use crate::corpus::{FaceRecord, Filter, Manifest, VariantKind};
use crate::error::{Error, Result};
use crate::imagebuf::ImageBuffer;
use crate::seed;

/// Per-image seed: a function of the master seed, the identity and the
/// filter tag, so it does not depend on corpus order.
pub fn variant_seed(master_seed: u64, identity_id: &str, kind: &VariantKind) -> u64 {
    seed::derive(master_seed, &[identity_id, &kind.tag()])
}

/// Applies one filter to an ORIG image.
pub fn apply_variant(
    img: &ImageBuffer,
    kind: &VariantKind,
    seed: u64,
    record: &FaceRecord,
    landmarks: &dyn LandmarkProvider,
) -> Result<ImageBuffer> {
    match kind.kind() {
        Filter::Orig => Ok(img.clone()),
        Filter::Rgb => rgb_noise(img, kind.amplitude().unwrap_or_default(), seed),
        Filter::Sprd => spread(img, kind.radius().unwrap_or(VariantKind::DEFAULT_SPREAD_RADIUS), seed),
        Filter::Grey => Ok(greyscale(img)),
        Filter::Mask => mask_face(img, record, landmarks),
    }
}

pub struct VariantJob<'a> {
    pub out_dir: PathBuf,
    pub master_seed: u64,
    pub landmarks: &'a dyn LandmarkProvider,
}

#[derive(Debug)]
pub struct VariantFailure {
    pub identity_id: String,
    pub kind: String,
    pub error: Error,
}

#[derive(Debug)]
pub struct VariantOutcome {
    /// Input records plus one record per successfully generated variant.
    pub manifest: Manifest,
    pub failures: Vec<VariantFailure>,
}

impl VariantOutcome {
    pub fn count(&self, kind: &VariantKind) -> usize {
        self.manifest.records.iter().filter(|r| r.variant.same_filter(kind)).count()
    }
}

#[derive(Serialize)]
struct LogLine<'a> {
    record_id: &'a str,
    identity_id: &'a str,
    kind: String,
    seed: Option<u64>,
    path: Option<String>,
    sha256: Option<String>,
    status: &'static str,
    error: Option<String>,
}

/// Output path of a variant image: `<out>/<tag>/<identity_id>.png`.
pub fn variant_path(out_dir: &Path, identity_id: &str, kind: &VariantKind) -> PathBuf {
    out_dir.join(kind.tag()).join(format!("{identity_id}.png"))
}

/// Generates every requested variant of every ORIG record, writing PNGs and a
/// JSON-lines log (`generation.jsonl`) under `job.out_dir`.
///
/// A failing image is left out of that variant set only and listed in
/// [`VariantOutcome::failures`].
pub fn generate_variants(manifest: &Manifest, kinds: &[VariantKind], job: &VariantJob<'_>) -> Result<VariantOutcome> {
    std::fs::create_dir_all(&job.out_dir)?;
    let mut origs: Vec<&FaceRecord> = manifest.orig().collect();
    origs.sort_by(|a, b| a.record_id.cmp(&b.record_id));

    type Produced = (FaceRecord, String, std::result::Result<(FaceRecord, String), Error>);
    let produced: Vec<Vec<Produced>> = origs
        .par_iter()
        .map(|orig| {
            let image = ImageBuffer::open(&orig.image_ref);
            kinds
                .iter()
                .filter(|k| !k.is_orig())
                .map(|kind| {
                    let seed = variant_seed(job.master_seed, &orig.identity_id, kind);
                    let kind_seeded = kind.clone().with_seed(seed);
                    let result = match &image {
                        Ok(img) => apply_variant(img, kind, seed, orig, job.landmarks).and_then(|out| {
                            let path = variant_path(&job.out_dir, &orig.identity_id, kind);
                            let bytes = out.encode_png();
                            if let Some(parent) = path.parent() {
                                std::fs::create_dir_all(parent)?;
                            }
                            std::fs::write(&path, &bytes)?;
                            let rec = FaceRecord {
                                width: out.width(),
                                height: out.height(),
                                ..orig.derive_variant(kind_seeded.clone(), path.display().to_string())
                            };
                            Ok((rec, hex::encode(Sha256::digest(&bytes))))
                        }),
                        Err(e) => Err(Error::UnreadableImage { path: orig.image_ref.clone(), reason: e.to_string() }),
                    };
                    ((*orig).clone(), kind.tag(), result)
                })
                .collect()
        })
        .collect();

    let mut records = manifest.records.clone();
    let mut failures = Vec::new();
    let mut log = std::io::BufWriter::new(std::fs::File::create(job.out_dir.join("generation.jsonl"))?);
    for (orig, kind, result) in produced.into_iter().flatten() {
        let line = match result {
            Ok((rec, digest)) => {
                let line = LogLine {
                    record_id: &rec.record_id,
                    identity_id: &rec.identity_id,
                    kind: rec.variant.tag(),
                    seed: rec.variant.seed(),
                    path: Some(rec.image_ref.clone()),
                    sha256: Some(digest),
                    status: "ok",
                    error: None,
                };
                let text = serde_json::to_string(&line)?;
                records.push(rec);
                text
            }
            Err(error) => {
                let text = serde_json::to_string(&LogLine {
                    record_id: &orig.record_id,
                    identity_id: &orig.identity_id,
                    kind: kind.clone(),
                    seed: None,
                    path: None,
                    sha256: None,
                    status: "failed",
                    error: Some(error.to_string()),
                })?;
                failures.push(VariantFailure { identity_id: orig.identity_id.clone(), kind, error });
                text
            }
        };
        writeln!(log, "{line}")?;
    }
    log.flush()?;
    let manifest = Manifest::new(format!("{} + variants (seed {})", manifest.provenance, job.master_seed), records)?;
    Ok(VariantOutcome { manifest, failures })
}
