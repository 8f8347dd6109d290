//! Ingest the bundled tiny corpus and normalize every image to a 200x256 crop.
//!
//! ```text
//! cargo run --example ingest_and_crop
//! ```

use std::path::Path;

use frs_audit::corpus::{ingest, normalize_manifest, CountryRegistry, FullFrame};

fn main() -> frs_audit::Result<()> {
    let tiny = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/tiny");
    let manifest = ingest(&tiny, tiny.join("labels.csv"), &CountryRegistry::default())?;
    println!("{} records, corpus hash {}", manifest.len(), &manifest.content_hash()[..16]);
    for ((region, gender), n) in manifest.region_gender_counts() {
        println!("  {} {}: {n}", region.short(), gender.short());
    }

    let out = std::env::temp_dir().join("frs-example-crops");
    let (cropped, failures) = normalize_manifest(&manifest, &FullFrame, &out)?;
    println!("wrote {} crops to {} ({} failures)", cropped.len(), out.display(), failures.len());
    Ok(())
}
