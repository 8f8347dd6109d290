//! Audit the tiny corpus with the oracle stub and a constant "Female"
//! backend, print group accuracies and disparities, then run a balanced
//! resampling audit.

use std::path::Path;
use std::sync::Arc;

use frs_audit::audit::{balanced_resample_audit, format_percent, run_audit, write_tables, GroupBy};
use frs_audit::backends::{ConstantStub, OracleStub, PredictionService, Task};
use frs_audit::corpus::{ingest, CountryRegistry};

fn main() -> frs_audit::Result<()> {
    let tiny = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/tiny");
    let manifest = ingest(&tiny, tiny.join("labels.csv"), &CountryRegistry::default())?;

    let stub = PredictionService::new(Arc::new(OracleStub::new(&manifest, Task::Gender)?), None);
    let female = PredictionService::new(Arc::new(ConstantStub::new("always-female", Task::Gender, "Female")), None);
    let services = [&stub, &female];

    let report = run_audit(&manifest, &services, GroupBy { country: true })?;
    for g in report.groups.iter().filter(|g| g.key.country.is_none()) {
        println!("{:<40} {:>7}%  n={}", g.key.to_string(), format_percent(g.metrics.accuracy), g.metrics.n);
    }
    for d in report.disparities.iter().filter(|d| d.country.is_none()) {
        println!("{} {} disparity (male - female): {}", d.backend, d.region.short(), format_percent(d.disparity));
    }

    let balanced = balanced_resample_audit(&manifest, &services, 4, 3, 7, GroupBy::default())?;
    for t in &balanced.totals {
        println!("balanced {:<14} {:>7}%", t.backend, format_percent(t.metrics.accuracy));
    }

    let out = std::env::temp_dir().join("frs-example-audit");
    std::fs::create_dir_all(&out)?;
    let files = write_tables(&report, &out)?;
    println!("tables: {files:?}");
    Ok(())
}
