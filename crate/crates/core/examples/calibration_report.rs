//! Baseline, temperature scaling and PEP side by side on the test split.
//!
//! ```text
//! cargo run --release --example calibration_report
//! ```

use pep_core::commands;
use pep_core::config::RunConfig;
use pep_core::{train, SplitTag};

fn main() -> pep_core::Result<()> {
    let config = RunConfig::overtrained_blobs(1);
    let splits = config.load_data()?;
    let (train_set, val_set) = (splits.part(SplitTag::Train)?, splits.part(SplitTag::Validation)?);
    let spec = config.network(train_set.dim(), splits.class_count())?;
    let series = train::train_on(&spec, &train_set, &val_set, &config.train_config())?;
    let theta = &series.last().expect("trained").params;

    let report = commands::report(&config, &spec, theta, &splits)?;
    println!("sigma* = {:.4}, T* = {:.3}", report.sigma_star, report.temperature);
    println!(
        "{:<9} {:>8} {:>8} {:>8} {:>8}",
        "method", "NLL", "Brier", "ECE %", "err %"
    );
    for (name, r) in [("baseline", &report.baseline), ("ts", &report.ts), ("pep", &report.pep)] {
        println!(
            "{name:<9} {:>8.4} {:>8.5} {:>8.2} {:>8.2}",
            r.nll, r.brier, r.ece_percent, r.top1_error_percent
        );
    }
    println!("\nreliability (pep):");
    print!("{}", report.pep.bins.to_csv());
    Ok(())
}
