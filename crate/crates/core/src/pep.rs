//! Parameter ensembling by perturbation.
//!
//! A trained parameter vector `theta*` is turned into an ensemble by adding
//! isotropic noise of scale `sigma` to selected parameter segments; the
//! ensemble prediction is the average of the members' softmax outputs. The
//! scale is chosen by golden-section search on validation log-likelihood.
//!
//! Member `j` draws its noise from its own stream, derived from
//! `(seed, j)`, one standardized value per parameter coordinate in layout
//! order, whether or not the coordinate is masked. The draw for a coordinate
//! therefore depends only on `(seed, j, coordinate)`, and the same member
//! noise is reused for every `sigma` (common random numbers).

use std::fmt::Write as _;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::golden;
use crate::matrix::Matrix;
use crate::nn::{self, NetworkSpec, ParamVector, ProbMatrix, SegmentKind, PROB_FLOOR};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseDistribution {
    Gaussian,
    /// Uniform on `[-sigma * sqrt(3), sigma * sqrt(3)]`, variance `sigma^2`.
    Uniform,
}

/// Which parameter segments receive noise.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mask {
    /// Every weight matrix, no biases.
    #[default]
    Weights,
    All,
    Segments(Vec<(usize, SegmentKind)>),
}

impl Mask {
    /// Coordinate ranges selected by the mask.
    pub fn ranges(&self, params: &ParamVector) -> Result<Vec<std::ops::Range<usize>>> {
        let ranges: Vec<_> = match self {
            Mask::Weights => params
                .layout()
                .iter()
                .filter(|s| s.kind == SegmentKind::Weight)
                .map(|s| s.range())
                .collect(),
            Mask::All => std::iter::once(0..params.len()).collect(),
            Mask::Segments(segs) => {
                let mut out = Vec::with_capacity(segs.len());
                for &(layer, kind) in segs {
                    let seg = params
                        .layout()
                        .iter()
                        .find(|s| s.layer == layer && s.kind == kind)
                        .ok_or_else(|| {
                            Error::config("perturb.mask", format!("no {kind:?} segment in layer {layer}"))
                        })?;
                    out.push(seg.range());
                }
                out
            }
        };
        if ranges.iter().all(|r| r.is_empty()) {
            return Err(Error::config("perturb.mask", "mask selects no parameters"));
        }
        Ok(ranges)
    }

    /// Parse `weights`, `all`, or a comma list like `0:weight,1:bias`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "weights" => Ok(Mask::Weights),
            "all" => Ok(Mask::All),
            list => {
                let mut segs = Vec::new();
                for item in list.split(',').map(str::trim) {
                    let bad = || Error::config("perturb.mask", format!("cannot parse segment `{item}`"));
                    let (layer, kind) = item.split_once(':').ok_or_else(bad)?;
                    let layer = layer.parse().map_err(|_| bad())?;
                    let kind = match kind {
                        "weight" | "weights" => SegmentKind::Weight,
                        "bias" | "biases" => SegmentKind::Bias,
                        _ => return Err(bad()),
                    };
                    segs.push((layer, kind));
                }
                if segs.is_empty() {
                    return Err(Error::config("perturb.mask", "empty mask"));
                }
                Ok(Mask::Segments(segs))
            }
        }
    }
}

impl std::fmt::Display for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mask::Weights => f.write_str("weights"),
            Mask::All => f.write_str("all"),
            Mask::Segments(segs) => {
                let parts: Vec<String> = segs
                    .iter()
                    .map(|(l, k)| format!("{l}:{}", if *k == SegmentKind::Weight { "weight" } else { "bias" }))
                    .collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub sigma: f64,
    pub members: usize,
    pub distribution: NoiseDistribution,
    pub mask: Mask,
    pub seed: u64,
}

impl PerturbConfig {
    pub fn gaussian(sigma: f64, members: usize, seed: u64) -> Self {
        PerturbConfig {
            sigma,
            members,
            distribution: NoiseDistribution::Gaussian,
            mask: Mask::Weights,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::config("perturb.sigma", "must be a finite value >= 0"));
        }
        if self.members == 0 {
            return Err(Error::config("perturb.members", "must be at least 1"));
        }
        Ok(())
    }
}

/// Standardized noise (zero mean, unit variance) for member `j`, one value
/// per coordinate.
pub fn member_noise(seed: u64, member: usize, len: usize, distribution: NoiseDistribution) -> Vec<f64> {
    let mut r = rng::stream(seed, "pep-member", member as u64);
    let half_width = 3f64.sqrt();
    (0..len)
        .map(|_| match distribution {
            NoiseDistribution::Gaussian => StandardNormal.sample(&mut r),
            NoiseDistribution::Uniform => r.random_range(-half_width..=half_width),
        })
        .collect()
}

/// Draw ensemble member `j` around `theta_star`.
pub fn sample_member(theta_star: &ParamVector, config: &PerturbConfig, member: usize) -> Result<ParamVector> {
    config.validate()?;
    let ranges = config.mask.ranges(theta_star)?;
    if config.sigma == 0.0 {
        return Ok(theta_star.clone());
    }
    let noise = member_noise(config.seed, member, theta_star.len(), config.distribution);
    let mut values = theta_star.values().to_vec();
    for r in ranges {
        for k in r {
            values[k] += config.sigma * noise[k];
        }
    }
    theta_star.with_values(values)
}

/// Arithmetic mean of probability matrices, summed in the given order.
pub fn average_probs(members: &[ProbMatrix]) -> Result<ProbMatrix> {
    let first = members
        .first()
        .ok_or_else(|| Error::config("perturb.members", "cannot average zero members"))?;
    let (rows, cols) = (first.rows(), first.classes());
    let mut acc = Matrix::zeros(rows, cols);
    for m in members {
        if m.rows() != rows || m.classes() != cols {
            return Err(Error::Shape {
                layer: 0,
                detail: "ensemble members disagree on output shape".into(),
            });
        }
        for (a, &p) in acc.as_mut_slice().iter_mut().zip(m.matrix().as_slice()) {
            *a += p;
        }
    }
    let k = members.len() as f64;
    Ok(ProbMatrix::new_unchecked(acc.map(|v| v / k)))
}

/// Logits of every member, member index ascending.
fn member_logits(
    spec: &NetworkSpec,
    theta_star: &ParamVector,
    config: &PerturbConfig,
    features: &Matrix,
) -> Result<Vec<Matrix>> {
    (0..config.members)
        .into_par_iter()
        .map(|j| nn::forward(spec, &sample_member(theta_star, config, j)?, features))
        .collect()
}

/// Ensemble prediction: the mean of the members' softmax outputs.
pub fn ensemble_predict(
    spec: &NetworkSpec,
    theta_star: &ParamVector,
    config: &PerturbConfig,
    features: &Matrix,
) -> Result<ProbMatrix> {
    config.validate()?;
    config.mask.ranges(theta_star)?;
    if config.sigma == 0.0 {
        // Every member equals theta_star, so the average is the baseline.
        return nn::softmax(&nn::forward(spec, theta_star, features)?);
    }
    let probs = member_logits(spec, theta_star, config, features)?
        .iter()
        .map(nn::softmax)
        .collect::<Result<Vec<_>>>()?;
    average_probs(&probs)
}

/// `ln L_i(theta_j)` for each member `j` (outer) and example `i` (inner).
pub fn member_log_likelihoods(
    spec: &NetworkSpec,
    theta_star: &ParamVector,
    config: &PerturbConfig,
    data: &Dataset,
) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    config.mask.ranges(theta_star)?;
    if config.sigma == 0.0 {
        let ll = nn::log_likelihoods_from_logits(&nn::forward(spec, theta_star, data.features())?, data.labels())?;
        return Ok(vec![ll; config.members]);
    }
    member_logits(spec, theta_star, config, data.features())?
        .iter()
        .map(|z| nn::log_likelihoods_from_logits(z, data.labels()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleLogLik {
    /// Mean over examples of `ln((1/m) sum_j L_i(theta_j))`.
    pub ensemble: f64,
    /// Mean over examples of `ln L_i(theta_j)`, one entry per member.
    pub members: Vec<f64>,
    /// Examples whose ensemble probability fell below the floor.
    pub floored: usize,
}

/// Combine per-member per-example log-likelihoods into ensemble statistics.
///
/// The ensemble term is a log-mean-exp over members for each example.
pub fn combine_member_log_likelihoods(member_lls: &[Vec<f64>]) -> Result<EnsembleLogLik> {
    let m = member_lls.len();
    let n = member_lls.first().map_or(0, Vec::len);
    if m == 0 || n == 0 {
        return Err(Error::EmptyDataset("no members or no examples".into()));
    }
    let floor = PROB_FLOOR.ln();
    let mut floored = 0;
    let mut total = 0.0;
    for i in 0..n {
        let max = member_lls.iter().map(|ll| ll[i]).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = member_lls.iter().map(|ll| (ll[i] - max).exp()).sum();
        let mut v = max + (s / m as f64).ln();
        if v < floor || v.is_nan() {
            floored += 1;
            v = floor;
        }
        total += v;
    }
    let members = member_lls.iter().map(|ll| ll.iter().sum::<f64>() / n as f64).collect();
    Ok(EnsembleLogLik {
        ensemble: total / n as f64,
        members,
        floored,
    })
}

pub fn ensemble_log_likelihood(
    spec: &NetworkSpec,
    theta_star: &ParamVector,
    config: &PerturbConfig,
    data: &Dataset,
) -> Result<EnsembleLogLik> {
    combine_member_log_likelihoods(&member_log_likelihoods(spec, theta_star, config, data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSearchConfig {
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub iterations: usize,
    pub members: usize,
    pub seed: u64,
    pub distribution: NoiseDistribution,
    pub mask: Mask,
}

impl Default for SigmaSearchConfig {
    fn default() -> Self {
        SigmaSearchConfig {
            sigma_low: 5e-5,
            sigma_high: 5e-3,
            iterations: 7,
            members: 5,
            seed: 0,
            distribution: NoiseDistribution::Gaussian,
            mask: Mask::Weights,
        }
    }
}

impl SigmaSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_low > 0.0) {
            return Err(Error::config("search.sigma_low", "must be positive"));
        }
        if !(self.sigma_low < self.sigma_high) || !self.sigma_high.is_finite() {
            return Err(Error::config("search.sigma_high", "must exceed sigma_low"));
        }
        if self.iterations == 0 {
            return Err(Error::config("search.iterations", "must be at least 1"));
        }
        if self.members == 0 {
            return Err(Error::config("search.members", "must be at least 1"));
        }
        Ok(())
    }

    pub fn perturb(&self, sigma: f64) -> PerturbConfig {
        PerturbConfig {
            sigma,
            members: self.members,
            distribution: self.distribution,
            mask: self.mask.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaPoint {
    pub sigma: f64,
    pub ensemble_ll: f64,
    pub member_lls: Vec<f64>,
}

/// `L(sigma)` and member traces, sigma strictly increasing.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SigmaCurve {
    pub points: Vec<SigmaPoint>,
}

impl SigmaCurve {
    fn from_unsorted(mut points: Vec<SigmaPoint>) -> Self {
        points.sort_by(|a, b| a.sigma.total_cmp(&b.sigma));
        points.dedup_by(|a, b| a.sigma == b.sigma);
        SigmaCurve { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Point with the largest ensemble log-likelihood.
    pub fn best(&self) -> Option<&SigmaPoint> {
        self.points
            .iter()
            .max_by(|a, b| a.ensemble_ll.total_cmp(&b.ensemble_ll))
    }

    /// `sigma,ensemble_ll,member_ll_1..member_ll_m`.
    pub fn to_csv(&self) -> String {
        let m = self.points.first().map_or(0, |p| p.member_lls.len());
        let mut s = String::from("sigma,ensemble_ll");
        for j in 1..=m {
            let _ = write!(s, ",member_ll_{j}");
        }
        s.push('\n');
        for p in &self.points {
            let _ = write!(s, "{:?},{:?}", p.sigma, p.ensemble_ll);
            for v in &p.member_lls {
                let _ = write!(s, ",{v:?}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchWarning {
    /// Both interior probes scored below the unperturbed model.
    NoPepBenefit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSearch {
    pub sigma_star: f64,
    pub curve: SigmaCurve,
    /// Mean log-likelihood of the unperturbed model.
    pub baseline_ll: f64,
    /// `L(sigma_star)` under the search's noise stream.
    pub ll_at_sigma_star: f64,
    pub bracket: (f64, f64),
    pub warnings: Vec<SearchWarning>,
}

const NO_BENEFIT_TOLERANCE: f64 = 1e-9;

/// `L(sigma)` at each grid value, using the search's common noise stream.
pub fn scan_sigma(
    spec: &NetworkSpec,
    theta_star: &ParamVector,
    search: &SigmaSearchConfig,
    grid: &[f64],
    data: &Dataset,
) -> Result<SigmaCurve> {
    let points = grid
        .iter()
        .map(|&sigma| {
            let e = ensemble_log_likelihood(spec, theta_star, &search.perturb(sigma), data)?;
            Ok(SigmaPoint {
                sigma,
                ensemble_ll: e.ensemble,
                member_lls: e.members,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SigmaCurve::from_unsorted(points))
}

/// Golden-section search for the sigma maximizing validation `L(sigma)`.
///
/// The returned curve holds `iterations + 2` points: the `iterations + 1`
/// golden-section probes and a guard evaluation at `sigma_low`.
pub fn golden_section_sigma(
    spec: &NetworkSpec,
    theta_star: &ParamVector,
    search: &SigmaSearchConfig,
    validation: &Dataset,
) -> Result<SigmaSearch> {
    search.validate()?;
    let baseline_ll = nn::mean_log_likelihood(spec, theta_star, validation.features(), validation.labels())?;
    let mut points = Vec::with_capacity(search.iterations + 2);
    let outcome = golden::maximize(
        |sigma| {
            let e = ensemble_log_likelihood(spec, theta_star, &search.perturb(sigma), validation)?;
            points.push(SigmaPoint {
                sigma,
                ensemble_ll: e.ensemble,
                member_lls: e.members,
            });
            Ok(e.ensemble)
        },
        search.sigma_low,
        search.sigma_high,
        search.iterations,
    )?;
    let mut warnings = Vec::new();
    if points[..2]
        .iter()
        .all(|p| p.ensemble_ll < baseline_ll - NO_BENEFIT_TOLERANCE)
    {
        warnings.push(SearchWarning::NoPepBenefit);
    }
    let guard = ensemble_log_likelihood(spec, theta_star, &search.perturb(search.sigma_low), validation)?;
    points.push(SigmaPoint {
        sigma: search.sigma_low,
        ensemble_ll: guard.ensemble,
        member_lls: guard.members,
    });
    let at_star = ensemble_log_likelihood(spec, theta_star, &search.perturb(outcome.argmax), validation)?;
    Ok(SigmaSearch {
        sigma_star: outcome.argmax,
        curve: SigmaCurve::from_unsorted(points),
        baseline_ll,
        ll_at_sigma_star: at_star.ensemble,
        bracket: outcome.bracket,
        warnings,
    })
}
