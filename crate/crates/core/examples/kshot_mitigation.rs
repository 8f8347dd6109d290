//! k-shot fine-tuning as a bias mitigation: a model pretrained on
//! male-heavy data with a spurious cue is fine-tuned on two identities per
//! (country, gender) cell of the deployment corpus.

use frs_audit::toy::{gender_setup, kshot_experiment, GenderToyParams};

fn main() -> frs_audit::Result<()> {
    let params = GenderToyParams::default();
    let setup = gender_setup(&params)?;
    let report = kshot_experiment(&setup, &params)?;
    println!("{:<10} {:>7} {:>7} {:>10}", "run", "male", "female", "disparity");
    let row = |name: &str, r: &frs_audit::toy::ToyRun| {
        println!("{name:<10} {:>7.2} {:>7.2} {:>10.2}", r.male, r.female, r.disparity)
    };
    row("baseline", &report.baseline);
    for (i, r) in report.runs.iter().enumerate() {
        row(&format!("seed {i}"), r);
    }
    row("mean", &report.mean);
    println!("{}-shot relative disparity reduction: {:.1}%", report.shots, 100.0 * report.relative_reduction);
    Ok(())
}
