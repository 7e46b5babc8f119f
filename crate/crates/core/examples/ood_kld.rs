//! Train on five of ten blob classes and compare how well the confidence
//! histograms separate seen from unseen classes, with and without PEP.
//!
//! ```text
//! cargo run --release --example ood_kld
//! ```

use pep_core::commands::{self, Method};
use pep_core::config::RunConfig;
use pep_core::{train, SplitTag};

fn main() -> pep_core::Result<()> {
    for seed in 0..3 {
        let mut config = RunConfig::overtrained_blobs(seed);
        config.data.classes = Some(5);
        let splits = config.load_data()?;
        let (train_set, val_set) = (splits.part(SplitTag::Train)?, splits.part(SplitTag::Validation)?);
        let spec = config.network(train_set.dim(), splits.class_count())?;
        let series = train::train_on(&spec, &train_set, &val_set, &config.train_config())?;
        let theta = &series.last().expect("trained").params;

        let sigma = commands::pep_search(&config, &spec, theta, &val_set)?.sigma_star;
        let inside = splits.part(SplitTag::Test)?;
        let outside = splits.held_out()?.expect("classes restricted above");
        let r = commands::ood(
            &config,
            &spec,
            theta,
            Method::Pep { sigma },
            inside.features(),
            outside.features(),
        )?;
        println!(
            "seed {seed}: sigma* {sigma:.4}, symmetrized KLD baseline {:.3}, pep {:.3}",
            r.kld_baseline, r.kld_method
        );
    }
    Ok(())
}
