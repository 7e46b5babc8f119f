//! Curvature of the log-likelihood and the gain it predicts for small sigma,
//! against the gain observed from a large Monte-Carlo ensemble.
//!
//! ```text
//! cargo run --release --example curvature_probe
//! ```

use pep_core::curvature::{self, CurvatureOptions};
use pep_core::data::synth_blobs;
use pep_core::train::{self, TrainConfig};
use pep_core::NetworkSpec;

fn main() -> pep_core::Result<()> {
    let data = synth_blobs(3, 30, 2, 1.2, 4)?;
    let spec = NetworkSpec::mlp(2, &[4], 3)?;
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 16,
        learning_rate: 0.02,
        ..TrainConfig::default()
    };
    let series = train::train_on(&spec, &data, &data, &cfg)?;
    let theta = &series.last().expect("trained").params;
    let opts = CurvatureOptions::default();

    let lap = curvature::laplacian_loglik(&spec, theta, &data, &opts)?;
    let fisher = curvature::fisher_trace(&spec, theta, &data, &opts.mask)?;
    println!(
        "{} parameters, {} examples: Laplacian {:.3}, Fisher trace {:.3}",
        theta.len(),
        data.len(),
        lap.value,
        fisher
    );
    println!(
        "{:>7} {:>12} {:>12} {:>12} {:>10}",
        "sigma", "predicted", "direct", "observed", "obs s.e."
    );
    for sigma in [0.005, 0.01, 0.02, 0.05, 0.1] {
        let r = curvature::curvature_report(&spec, theta, &data, sigma, 20_000, &opts)?;
        println!(
            "{sigma:>7} {:>12.5} {:>12.5} {:>12.5} {:>10.5}",
            r.pep_effect_predicted, r.pep_effect_direct, r.pep_effect_observed, r.observed_std_error
        );
    }
    Ok(())
}
