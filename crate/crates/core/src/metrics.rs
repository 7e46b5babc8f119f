//! Proper scoring rules, reliability binning, ECE, and the symmetrized
//! KL divergence between confidence histograms.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{per_example_log_likelihood, ProbMatrix};

pub const DEFAULT_ECE_BINS: usize = 15;

/// Probability mass added to every histogram bin before normalizing.
pub const KLD_SMOOTHING: f64 = 1e-6;

/// Mean negative log-likelihood, with the count of floored rows.
pub fn nll(probs: &ProbMatrix, labels: &[usize]) -> Result<(f64, usize)> {
    let ll = per_example_log_likelihood(probs, labels)?;
    if ll.values.is_empty() {
        return Err(Error::EmptyDataset("NLL of no examples".into()));
    }
    Ok((-ll.mean(), ll.floored))
}

/// `(1 / NK) sum_i sum_k (y_ik - p_ik)^2`.
pub fn brier(probs: &ProbMatrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != probs.rows() || probs.rows() == 0 {
        return Err(Error::Shape {
            layer: 0,
            detail: format!("{} rows but {} labels", probs.rows(), labels.len()),
        });
    }
    let k = probs.classes();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        for (c, &p) in probs.row(i).iter().enumerate() {
            let t = if c == y { 1.0 } else { 0.0 };
            total += (t - p) * (t - p);
        }
    }
    Ok(total / (probs.rows() * k) as f64)
}

/// `(max_k p_ik, argmax_k p_ik)` per row; ties go to the lowest class.
pub fn confidences(probs: &ProbMatrix) -> Vec<(f64, usize)> {
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            (row[best], best)
        })
        .collect()
}

pub fn accuracy(probs: &ProbMatrix, labels: &[usize]) -> f64 {
    let c = confidences(probs);
    c.iter().zip(labels).filter(|((_, pred), &y)| *pred == y).count() as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    /// Confidence interval `(lower, upper]`.
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<Bin>,
}

impl ReliabilityBins {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// `bin,lower,upper,count,accuracy,confidence`, bins numbered from 1.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin,lower,upper,count,accuracy,confidence\n");
        for (m, b) in self.bins.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{:?},{:?},{},{:?},{:?}",
                m + 1,
                b.lower,
                b.upper,
                b.count,
                b.accuracy,
                b.confidence
            );
        }
        s
    }
}

/// Index of the `((m-1)/M, m/M]` bin holding `confidence`, zero-based.
/// Confidence exactly 0 goes to the first bin.
fn bin_index(confidence: f64, bins: usize) -> usize {
    let scaled = confidence * bins as f64;
    (scaled.ceil() as usize).clamp(1, bins) - 1
}

pub fn reliability(probs: &ProbMatrix, labels: &[usize], bins: usize) -> Result<ReliabilityBins> {
    if bins == 0 {
        return Err(Error::config("metrics.ece_bins", "need at least one bin"));
    }
    if labels.len() != probs.rows() {
        return Err(Error::Shape {
            layer: 0,
            detail: format!("{} rows but {} labels", probs.rows(), labels.len()),
        });
    }
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    for ((c, pred), &y) in confidences(probs).into_iter().zip(labels) {
        let b = bin_index(c, bins);
        count[b] += 1;
        conf[b] += c;
        if pred == y {
            correct[b] += 1;
        }
    }
    let bins = (0..bins)
        .map(|m| Bin {
            lower: m as f64 / bins as f64,
            upper: (m + 1) as f64 / bins as f64,
            count: count[m],
            accuracy: if count[m] == 0 {
                0.0
            } else {
                correct[m] as f64 / count[m] as f64
            },
            confidence: if count[m] == 0 { 0.0 } else { conf[m] / count[m] as f64 },
        })
        .collect();
    Ok(ReliabilityBins { bins })
}

/// Expected calibration error in percent; empty bins contribute nothing.
pub fn ece(bins: &ReliabilityBins) -> f64 {
    let n = bins.total();
    if n == 0 {
        return 0.0;
    }
    100.0
        * bins
            .bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.confidence).abs())
            .sum::<f64>()
}

/// Normalized, smoothed histogram of values in `[0, 1]` over equal bins.
fn histogram(values: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![KLD_SMOOTHING; bins];
    let w = 1.0 / values.len() as f64;
    for &v in values {
        let b = ((v * bins as f64).floor() as usize).min(bins - 1);
        h[b] += w;
    }
    let total: f64 = h.iter().sum();
    h.into_iter().map(|v| v / total).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

/// `KL(p || q) + KL(q || p)` for two already-normalized distributions.
pub fn symmetrized_kl(p: &[f64], q: &[f64]) -> f64 {
    kl(p, q) + kl(q, p)
}

/// Symmetrized KL divergence between the confidence histograms of two
/// samples. Bins are equal-width on `[0, 1]`, each smoothed by
/// [`KLD_SMOOTHING`] before normalization.
pub fn symmetrized_kld(in_conf: &[f64], out_conf: &[f64], bins: usize) -> Result<f64> {
    if in_conf.is_empty() || out_conf.is_empty() {
        return Err(Error::EmptyDataset("confidence sample is empty".into()));
    }
    if bins == 0 {
        return Err(Error::config("ood.bins", "need at least one bin"));
    }
    if in_conf.iter().chain(out_conf).any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Numeric("confidences must lie in [0, 1]".into()));
    }
    Ok(symmetrized_kl(&histogram(in_conf, bins), &histogram(out_conf, bins)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Provenance {
    Baseline,
    Pep { sigma: f64, members: usize, seed: u64 },
    Ts { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub nll: f64,
    pub brier: f64,
    pub ece_percent: f64,
    pub accuracy: f64,
    pub top1_error_percent: f64,
    pub examples: usize,
    pub floored: usize,
    pub bins: ReliabilityBins,
    pub provenance: Provenance,
}

pub fn calibration_report(
    probs: &ProbMatrix,
    labels: &[usize],
    ece_bins: usize,
    provenance: Provenance,
) -> Result<CalibrationReport> {
    let (nll, floored) = nll(probs, labels)?;
    let bins = reliability(probs, labels, ece_bins)?;
    let accuracy = accuracy(probs, labels);
    Ok(CalibrationReport {
        nll,
        brier: brier(probs, labels)?,
        ece_percent: ece(&bins),
        accuracy,
        top1_error_percent: 100.0 * (1.0 - accuracy),
        examples: labels.len(),
        floored,
        bins,
        provenance,
    })
}
