//! Triplet contrastive fine-tuning: anchors are original images, positives
//! their RGB-noise variants, negatives opposite-gender identities from the
//! same country. Reports accuracies and triplet satisfaction.

use frs_audit::mitigation::{build_triplets, TripletSpec};
use frs_audit::toy::{contrastive_experiment, gender_setup, GenderToyParams};

fn main() -> frs_audit::Result<()> {
    let params = GenderToyParams::default();
    let setup = gender_setup(&params)?;

    let sample = build_triplets(&setup.pool, &TripletSpec::default(), 1)?;
    if let Some(t) = sample.first() {
        println!("example triplet: {} / {} / {}", t.anchor.record_id, t.positive.record_id, t.negative.record_id);
    }

    let report = contrastive_experiment(&setup, &params)?;
    println!("baseline disparity {:.2}, macro {:.2}", report.baseline.disparity, report.baseline.macro_accuracy);
    for (i, (r, s)) in report.runs.iter().zip(&report.final_satisfaction).enumerate() {
        println!("seed {i}: disparity {:.2}, macro {:.2}, final satisfaction {s:.3}", r.disparity, r.macro_accuracy);
    }
    println!("loss decomposition error at most {:.1e} over {} steps", report.max_decomposition_error, report.steps_logged);
    Ok(())
}
