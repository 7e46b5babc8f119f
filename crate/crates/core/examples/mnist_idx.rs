//! Train and calibrate on IDX files (the MNIST distribution format).
//!
//! ```text
//! cargo run --release --example mnist_idx -- train-images-idx3-ubyte train-labels-idx1-ubyte
//! ```
//!
//! Without arguments a small synthetic 8x8 image set is written as an IDX
//! pair to a temporary directory and used instead.

use std::path::PathBuf;

use pep_core::commands;
use pep_core::config::RunConfig;
use pep_core::data::{synth_blobs, write_idx};
use pep_core::{train, SplitTag};

fn synthetic_pair(dir: &std::path::Path) -> pep_core::Result<(PathBuf, PathBuf)> {
    let blobs = synth_blobs(10, 200, 64, 1.5, 5)?;
    // Squash into [0, 1] so the pixels survive the u8 round trip.
    let pixels = blobs.features().map(|v| 1.0 / (1.0 + (-v).exp()));
    let images = pep_core::Dataset::new(pixels, blobs.labels().to_vec(), 10)?;
    let (img, lbl) = (dir.join("images.idx3"), dir.join("labels.idx1"));
    write_idx(&images, 8, 8, &img, &lbl)?;
    Ok((img, lbl))
}

fn main() -> pep_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let tmp = std::env::temp_dir().join("pep-mnist-example");
    std::fs::create_dir_all(&tmp).map_err(|e| pep_core::Error::Io {
        path: tmp.clone(),
        source: e,
    })?;
    let (images, labels) = match args.as_slice() {
        [i, l] => (PathBuf::from(i), PathBuf::from(l)),
        _ => synthetic_pair(&tmp)?,
    };

    let mut config = RunConfig::default();
    config.set(
        "data.dataset",
        &format!("idx:{},{}", images.display(), labels.display()),
    )?;
    config.set("data.subset", "2000")?;
    config.set("network.hidden", "128")?;
    config.set("train.learning_rate", "0.003")?;
    config.set("train.epochs", "30")?;
    config.set("search.sigma_low", "0.001")?;
    config.set("search.sigma_high", "0.2")?;
    let splits = config.load_data()?;
    let (train_set, val_set) = (splits.part(SplitTag::Train)?, splits.part(SplitTag::Validation)?);
    println!("{} training images of {} pixels", train_set.len(), train_set.dim());
    let spec = config.network(train_set.dim(), splits.class_count())?;
    let series = train::train_on(&spec, &train_set, &val_set, &config.train_config())?;
    let theta = &series.last().expect("trained").params;

    let r = commands::report(&config, &spec, theta, &splits)?;
    let show = |name: &str, m: &pep_core::metrics::CalibrationReport| {
        println!(
            "{name:<9} NLL {:.4}  Brier {:.5}  ECE {:.2}%  err {:.2}%",
            m.nll, m.brier, m.ece_percent, m.top1_error_percent
        )
    };
    println!("sigma* = {:.4}, T* = {:.3}", r.sigma_star, r.temperature);
    if let Some(fit) = r.temperature_fit.as_ref().filter(|f| !f.flags.is_empty()) {
        println!("temperature fit flags: {:?}", fit.flags);
    }
    show("baseline", &r.baseline);
    show("ts", &r.ts);
    show("pep", &r.pep);
    Ok(())
}
