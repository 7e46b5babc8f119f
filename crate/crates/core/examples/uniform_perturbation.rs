//! Gaussian against variance-matched uniform perturbations.
//!
//! ```text
//! cargo run --release --example uniform_perturbation
//! ```

use pep_core::commands::{self, Method};
use pep_core::config::RunConfig;
use pep_core::pep::NoiseDistribution;
use pep_core::{train, SplitTag};

fn main() -> pep_core::Result<()> {
    let base = RunConfig::overtrained_blobs(2);
    let splits = base.load_data()?;
    let (train_set, val_set) = (splits.part(SplitTag::Train)?, splits.part(SplitTag::Validation)?);
    let test_set = splits.part(SplitTag::Test)?;
    let spec = base.network(train_set.dim(), splits.class_count())?;
    let series = train::train_on(&spec, &train_set, &val_set, &base.train_config())?;
    let theta = &series.last().expect("trained").params;

    let nll = commands::evaluate(&base, &spec, theta, Method::Baseline, &test_set)?.nll;
    println!("baseline test NLL {nll:.4}");
    for dist in [NoiseDistribution::Gaussian, NoiseDistribution::Uniform] {
        let mut config = base.clone();
        config.search.distribution = dist;
        config.perturb.distribution = dist;
        let sigma = commands::pep_search(&config, &spec, theta, &val_set)?.sigma_star;
        let r = commands::evaluate(&config, &spec, theta, Method::Pep { sigma }, &test_set)?;
        println!(
            "{dist:?}: sigma* {sigma:.4}, test NLL {:.4}, ECE {:.2}%",
            r.nll, r.ece_percent
        );
    }
    Ok(())
}
