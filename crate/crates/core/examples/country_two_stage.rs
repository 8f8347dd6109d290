//! Two-stage country classification: an imbalanced first stage followed by a
//! 2-shot second stage on colour-shifted target data, trained either with
//! plain fine-tuning or with country-task triplets.

use frs_audit::toy::{country_experiment, CountryToyParams};

fn main() -> frs_audit::Result<()> {
    let params = CountryToyParams::default();
    let report = country_experiment(&params)?;
    println!("baseline macro accuracy {:.2}%", report.baseline_macro);
    println!("{:<6} {:>10} {:>12}", "seed", "fine-tune", "contrastive");
    for (i, (f, c)) in report.finetune_macro.iter().zip(&report.contrastive_macro).enumerate() {
        println!("{i:<6} {f:>10.2} {c:>12.2}");
    }
    println!("{:<6} {:>10.2} {:>12.2}", "mean", report.mean_finetune_macro, report.mean_contrastive_macro);
    Ok(())
}
