//! The log-likelihood of the perturbation ensemble as a function of sigma,
//! scanned on a grid and maximized by golden-section search.
//!
//! ```text
//! cargo run --release --example sigma_curve
//! ```

use pep_core::config::RunConfig;
use pep_core::pep;
use pep_core::{train, SplitTag};

fn main() -> pep_core::Result<()> {
    let config = RunConfig::overtrained_blobs(0);
    let splits = config.load_data()?;
    let (train_set, val_set) = (splits.part(SplitTag::Train)?, splits.part(SplitTag::Validation)?);
    let spec = config.network(train_set.dim(), splits.class_count())?;
    let series = train::train_on(&spec, &train_set, &val_set, &config.train_config())?;
    let theta = &series.last().expect("trained").params;

    let search = config.search_config();
    let grid: Vec<f64> = (0..25)
        .map(|i| search.sigma_low + (search.sigma_high - search.sigma_low) * i as f64 / 24.0)
        .collect();
    let curve = pep::scan_sigma(&spec, theta, &search, &grid, &val_set)?;
    let found = pep::golden_section_sigma(&spec, theta, &search, &val_set)?;

    let (lo, hi) = curve
        .points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.ensemble_ll), hi.max(p.ensemble_ll))
        });
    println!("baseline L = {:.4}", found.baseline_ll);
    for p in &curve.points {
        let bar = ((p.ensemble_ll - lo) / (hi - lo) * 50.0).round() as usize;
        println!("{:>8.4} {:>8.4} {}", p.sigma, p.ensemble_ll, "#".repeat(bar));
    }
    println!(
        "golden-section sigma* = {:.4} after {} evaluations, L(sigma*) = {:.4}",
        found.sigma_star,
        found.curve.len(),
        found.ll_at_sigma_star
    );
    Ok(())
}
