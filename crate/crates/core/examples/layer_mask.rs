//! Perturbing only some layers: all weights, the output layer alone, and
//! every parameter including biases.
//!
//! ```text
//! cargo run --release --example layer_mask
//! ```

use pep_core::commands::{self, Method};
use pep_core::config::RunConfig;
use pep_core::pep::Mask;
use pep_core::{train, SplitTag};

fn main() -> pep_core::Result<()> {
    let base = RunConfig::overtrained_blobs(3);
    let splits = base.load_data()?;
    let (train_set, val_set) = (splits.part(SplitTag::Train)?, splits.part(SplitTag::Validation)?);
    let test_set = splits.part(SplitTag::Test)?;
    let spec = base.network(train_set.dim(), splits.class_count())?;
    let series = train::train_on(&spec, &train_set, &val_set, &base.train_config())?;
    let theta = &series.last().expect("trained").params;

    let last = spec.layers().len() - 1;
    for mask in [Mask::Weights, Mask::parse(&format!("{last}:weight"))?, Mask::All] {
        let mut config = base.clone();
        config.search.mask = mask.clone();
        config.perturb.mask = mask.clone();
        let sigma = commands::pep_search(&config, &spec, theta, &val_set)?.sigma_star;
        let r = commands::evaluate(&config, &spec, theta, Method::Pep { sigma }, &test_set)?;
        println!("mask {:<10} sigma* {sigma:.4}  test NLL {:.4}", mask.to_string(), r.nll);
    }
    Ok(())
}
