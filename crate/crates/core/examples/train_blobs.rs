//! Train the over-trained blobs model and watch validation NLL turn upward.
//!
//! ```text
//! cargo run --release --example train_blobs -- [seed]
//! ```

use pep_core::config::RunConfig;
use pep_core::train;
use pep_core::SplitTag;

fn main() -> pep_core::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let config = RunConfig::overtrained_blobs(seed);
    let splits = config.load_data()?;
    let train_set = splits.part(SplitTag::Train)?;
    let val_set = splits.part(SplitTag::Validation)?;
    let spec = config.network(train_set.dim(), splits.class_count())?;
    println!(
        "{} train / {} validation examples, {} parameters",
        train_set.len(),
        val_set.len(),
        spec.param_count()
    );

    let series = train::train_on(&spec, &train_set, &val_set, &config.train_config())?;
    let best = series
        .checkpoints
        .iter()
        .min_by(|a, b| a.val_nll.total_cmp(&b.val_nll))
        .expect("at least one epoch");
    println!("{:>5} {:>10} {:>10}", "epoch", "train_nll", "val_nll");
    for c in series.checkpoints.iter().filter(|c| c.epoch % 5 == 0 || c.epoch == 1) {
        println!("{:>5} {:>10.4} {:>10.4}", c.epoch, c.train_nll, c.val_nll);
    }
    println!("lowest validation NLL {:.4} at epoch {}", best.val_nll, best.epoch);
    Ok(())
}
