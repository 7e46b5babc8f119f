//! Temperature scaling: one scalar dividing the logits, fitted on
//! validation log-likelihood with the same golden-section machinery as the
//! sigma search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::golden;
use crate::matrix::Matrix;
use crate::nn::{self, ProbMatrix};

pub const DEFAULT_BRACKET: (f64, f64) = (0.05, 20.0);
pub const DEFAULT_ITERATIONS: usize = 40;
const GRID_POINTS: usize = 21;

pub fn scale_logits(logits: &Matrix, temperature: f64) -> Result<ProbMatrix> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::config(
            "ts.temperature",
            format!("temperature must be positive, got {temperature}"),
        ));
    }
    nn::softmax(&logits.map(|z| z / temperature))
}

/// Mean log-likelihood of `labels` after dividing logits by `temperature`.
pub fn scaled_log_likelihood(logits: &Matrix, labels: &[usize], temperature: f64) -> Result<f64> {
    let scaled = logits.map(|z| z / temperature);
    let ll = nn::log_likelihoods_from_logits(&scaled, labels)?;
    if ll.is_empty() {
        return Err(Error::EmptyDataset("temperature fit on no examples".into()));
    }
    Ok(ll.iter().sum::<f64>() / ll.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureFlag {
    /// The fitted temperature sits at an end of the bracket.
    AtBracketEdge,
    /// A point of the 21-point log-spaced guard grid beat the fit.
    GridDisagrees,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub nll_before: f64,
    pub nll_after: f64,
    pub bracket: (f64, f64),
    pub flags: Vec<TemperatureFlag>,
}

/// Golden-section maximization of validation mean log-likelihood over `T`.
///
/// `T = 1` is always evaluated as a guard, so the fitted NLL never exceeds the
/// unscaled NLL.
pub fn fit_temperature(
    logits: &Matrix,
    labels: &[usize],
    bracket: (f64, f64),
    iterations: usize,
) -> Result<TemperatureFit> {
    let (low, high) = bracket;
    if !(low > 0.0) {
        return Err(Error::config("ts.bracket", "bracket must be positive"));
    }
    let before = scaled_log_likelihood(logits, labels, 1.0)?;
    let outcome = golden::maximize(|t| scaled_log_likelihood(logits, labels, t), low, high, iterations)?;
    let mut best_t = outcome.argmax;
    let mut best = scaled_log_likelihood(logits, labels, best_t)?;
    if (low..=high).contains(&1.0) && before > best {
        best_t = 1.0;
        best = before;
    }
    let mut flags = Vec::new();
    let width = outcome.bracket.1 - outcome.bracket.0;
    if outcome.bracket.0 - low < width || high - outcome.bracket.1 < width {
        flags.push(TemperatureFlag::AtBracketEdge);
    }
    let ratio = (high / low).ln() / (GRID_POINTS - 1) as f64;
    for g in 0..GRID_POINTS {
        let t = low * (ratio * g as f64).exp();
        if scaled_log_likelihood(logits, labels, t)? > best + 1e-9 {
            flags.push(TemperatureFlag::GridDisagrees);
            break;
        }
    }
    Ok(TemperatureFit {
        temperature: best_t,
        nll_before: -before,
        nll_after: -best,
        bracket,
        flags,
    })
}
