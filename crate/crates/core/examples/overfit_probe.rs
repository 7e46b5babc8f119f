//! Overfitting against PEP gain, one point per training epoch.
//!
//! ```text
//! cargo run --release --example overfit_probe
//! ```

use pep_core::commands;
use pep_core::config::RunConfig;
use pep_core::{train, SplitTag};

fn main() -> pep_core::Result<()> {
    let config = RunConfig::overtrained_blobs(0);
    let splits = config.load_data()?;
    let (train_set, val_set) = (splits.part(SplitTag::Train)?, splits.part(SplitTag::Validation)?);
    let spec = config.network(train_set.dim(), splits.class_count())?;
    let series = train::train_on(&spec, &train_set, &val_set, &config.train_config())?;

    let rows = commands::overfit_probe(&config, &series, &splits)?;
    println!("{:>5} {:>10} {:>8} {:>10}", "epoch", "gap", "sigma*", "gain");
    for r in rows.iter().step_by(4) {
        println!(
            "{:>5} {:>10.4} {:>8.4} {:>10.4}",
            r.epoch, r.overfit_gap, r.sigma_star, r.pep_effect_observed
        );
    }
    let gaps: Vec<f64> = rows.iter().map(|r| r.overfit_gap).collect();
    let gains: Vec<f64> = rows.iter().map(|r| r.pep_effect_observed).collect();
    println!("pearson r = {:.3}", commands::pearson(&gaps, &gains));
    Ok(())
}
