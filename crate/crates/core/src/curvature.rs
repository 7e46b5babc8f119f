//! Local analysis of the perturbation gain.
//!
//! For small `sigma` the ensemble log-likelihood gains
//!
//! ```text
//! B(sigma) = sigma^2 / 2 * sum_i  lap L_i / L_i
//!          = sigma^2 / 2 * (lap LL + tr F)
//! ```
//!
//! over the summed log-likelihood `LL = sum_i ln L_i`, where `lap` is the
//! Laplacian over the perturbed coordinates and `tr F = sum_i |grad ln L_i|^2`
//! is the trace of the empirical Fisher information. This module estimates
//! each piece independently so the identities can be checked numerically.
//!
//! Everything here uses the summed convention; per-example means are only
//! formed when reporting.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{self, NetworkSpec, ParamVector};
use crate::pep::{self, Mask, NoiseDistribution, PerturbConfig};
use crate::rng;

/// Largest model the probes will run on.
pub const MAX_PARAMS: usize = 100_000;
/// Up to this many perturbed coordinates the Laplacian is an exact
/// coordinate loop; above it, a Hutchinson estimate.
pub const EXACT_LIMIT: usize = 300;

/// `1e-4 * max(1, |theta|_inf)`.
pub fn default_step(theta: &[f64]) -> f64 {
    1e-4 * theta.iter().fold(1.0f64, |m, v| m.max(v.abs()))
}

/// Sum of unmixed central second differences of `f` at `x`.
pub fn laplacian_fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::config("curvature.step", "step must be positive"));
    }
    let f0 = f(x);
    let mut y = x.to_vec();
    let mut total = 0.0;
    for k in 0..x.len() {
        y[k] = x[k] + h;
        let up = f(&y);
        y[k] = x[k] - h;
        let down = f(&y);
        y[k] = x[k];
        let d = ((up - f0) + (down - f0)) / (h * h);
        if !d.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite second difference at coordinate {k}"
            )));
        }
        total += d;
    }
    Ok(total)
}

/// Second-order approximation of `E[f(x)]`, `x ~ N(mu, sigma^2 I)`:
/// `f(mu) + sigma^2 / 2 * lap f(mu)`.
pub fn taylor_expectation<F: Fn(&[f64]) -> f64>(f: F, mu: &[f64], sigma: f64, h: f64) -> Result<f64> {
    let f0 = f(mu);
    if !f0.is_finite() {
        return Err(Error::Numeric("f(mu) is not finite".into()));
    }
    Ok(f0 + 0.5 * sigma * sigma * laplacian_fd(&f, mu, h)?)
}

/// Monte-Carlo estimate of `E[f(x)]`, `x ~ N(mu, sigma^2 I)`, with its
/// standard error.
pub fn mc_expectation<F: Fn(&[f64]) -> f64>(
    f: F,
    mu: &[f64],
    sigma: f64,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if samples < 2 {
        return Err(Error::config("curvature.samples", "need at least 2 samples"));
    }
    let mut r = rng::stream(seed, "mc-expectation", 0);
    let mut x = mu.to_vec();
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for s in 0..samples {
        for (xi, &m) in x.iter_mut().zip(mu) {
            let z: f64 = StandardNormal.sample(&mut r);
            *xi = m + sigma * z;
        }
        let v = f(&x);
        let delta = v - mean;
        mean += delta / (s + 1) as f64;
        m2 += delta * (v - mean);
    }
    let var = m2 / (samples - 1) as f64;
    Ok((mean, (var / samples as f64).sqrt()))
}

/// An estimate with its standard error (zero for exact coordinate loops).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

/// Hutchinson trace estimate `mean_v v^T H v` with Rademacher probes on the
/// coordinates in `support`, `H v` by central differences of `grad`.
pub fn hutchinson_trace<G>(grad: G, x: &[f64], support: &[usize], h: f64, probes: usize, seed: u64) -> Result<Estimate>
where
    G: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    if probes < 2 {
        return Err(Error::config("curvature.probes", "need at least 2 probes"));
    }
    let samples: Vec<f64> = (0..probes)
        .into_par_iter()
        .map(|p| {
            let v = rademacher(x.len(), support, seed, p);
            let (up, down) = shifted(x, &v, h);
            let (gu, gd) = (grad(&up)?, grad(&down)?);
            Ok(v.iter()
                .zip(gu.iter().zip(&gd))
                .map(|(vi, (a, b))| vi * (a - b))
                .sum::<f64>()
                / (2.0 * h))
        })
        .collect::<Result<_>>()?;
    Ok(mean_and_se(&samples))
}

fn rademacher(len: usize, support: &[usize], seed: u64, probe: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, "hutchinson", probe as u64);
    let mut v = vec![0.0; len];
    for &k in support {
        v[k] = if r.random::<bool>() { 1.0 } else { -1.0 };
    }
    v
}

fn shifted(x: &[f64], v: &[f64], h: f64) -> (Vec<f64>, Vec<f64>) {
    (
        x.iter().zip(v).map(|(a, b)| a + h * b).collect(),
        x.iter().zip(v).map(|(a, b)| a - h * b).collect(),
    )
}

fn mean_and_se(samples: &[f64]) -> Estimate {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Estimate {
        value: mean,
        std_error: (var / n).sqrt(),
    }
}

/// How `lap L_i / L_i` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioForm {
    /// Finite differences of `L_i` itself, normalized by `L_i(theta)`.
    Direct,
    /// `lap ln L_i + |grad ln L_i|^2`, which avoids forming tiny `L_i`.
    ViaLogLikelihood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureOptions {
    /// Finite-difference step; `None` picks [`default_step`].
    pub step: Option<f64>,
    pub probes: usize,
    pub seed: u64,
    /// Coordinates the perturbation (and so the Laplacian) acts on.
    pub mask: Mask,
    pub ratio_form: RatioForm,
    /// Coordinate count above which Hutchinson probes replace the exact loop.
    pub exact_limit: usize,
}

impl Default for CurvatureOptions {
    fn default() -> Self {
        CurvatureOptions {
            step: None,
            probes: 1000,
            seed: 0,
            mask: Mask::All,
            ratio_form: RatioForm::ViaLogLikelihood,
            exact_limit: EXACT_LIMIT,
        }
    }
}

impl CurvatureOptions {
    pub fn step_for(&self, params: &ParamVector) -> f64 {
        self.step.unwrap_or_else(|| default_step(params.values()))
    }
}

/// Network, parameters and data bundled for the probes.
struct Probe<'a> {
    spec: &'a NetworkSpec,
    params: &'a ParamVector,
    features: &'a Matrix,
    labels: &'a [usize],
    support: Vec<usize>,
    h: f64,
}

impl<'a> Probe<'a> {
    fn new(spec: &'a NetworkSpec, params: &'a ParamVector, data: &'a Dataset, opts: &CurvatureOptions) -> Result<Self> {
        if params.len() > MAX_PARAMS {
            return Err(Error::ModelTooLarge {
                params: params.len(),
                limit: MAX_PARAMS,
            });
        }
        if data.is_empty() {
            return Err(Error::EmptyDataset("curvature probe on no data".into()));
        }
        let h = opts.step_for(params);
        if !(h > 0.0) {
            return Err(Error::config("curvature.step", "step must be positive"));
        }
        let support = opts.mask.ranges(params)?.into_iter().flatten().collect();
        Ok(Probe {
            spec,
            params,
            features: data.features(),
            labels: data.labels(),
            support,
            h,
        })
    }

    fn exact(&self, opts: &CurvatureOptions) -> bool {
        self.support.len() <= opts.exact_limit
    }

    fn log_likelihoods(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let p = self.params.with_values(theta.to_vec())?;
        nn::log_likelihoods_from_logits(&nn::forward(self.spec, &p, self.features)?, self.labels)
    }

    fn per_example_gradients(&self, theta: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let p = self.params.with_values(theta.to_vec())?;
        nn::per_example_gradients(self.spec, &p, self.features, self.labels)
    }

    fn total_gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let p = self.params.with_values(theta.to_vec())?;
        Ok(nn::gradient(self.spec, &p, self.features, self.labels)?.into_values())
    }

    /// Per-example `lap ln L_i` and `lap L_i / L_i` from the coordinate loop,
    /// plus whether every second difference sat below the rounding floor.
    fn coordinate_loop(&self) -> Result<(Vec<f64>, Vec<f64>, bool)> {
        let theta = self.params.values();
        let ll0 = self.log_likelihoods(theta)?;
        let n = ll0.len();
        let h2 = self.h * self.h;
        let floor = 16.0 * f64::EPSILON * ll0.iter().map(|v| v.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
        let cols: Vec<(Vec<f64>, Vec<f64>, f64)> = self
            .support
            .par_iter()
            .map(|&k| {
                let mut y = theta.to_vec();
                y[k] = theta[k] + self.h;
                let up = self.log_likelihoods(&y)?;
                y[k] = theta[k] - self.h;
                let down = self.log_likelihoods(&y)?;
                let mut log_lap = Vec::with_capacity(n);
                let mut ratio = Vec::with_capacity(n);
                let mut raw = 0.0;
                for i in 0..n {
                    let (a, b) = (up[i] - ll0[i], down[i] - ll0[i]);
                    raw += a + b;
                    log_lap.push((a + b) / h2);
                    ratio.push((a.exp_m1() + b.exp_m1()) / h2);
                }
                if log_lap.iter().chain(&ratio).any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite second difference at coordinate {k}"
                    )));
                }
                Ok((log_lap, ratio, raw.abs()))
            })
            .collect::<Result<_>>()?;
        let mut log_lap = vec![0.0; n];
        let mut ratio = vec![0.0; n];
        let mut ill_conditioned = !cols.is_empty();
        for (l, r, raw) in cols {
            for i in 0..n {
                log_lap[i] += l[i];
                ratio[i] += r[i];
            }
            if raw > floor {
                ill_conditioned = false;
            }
        }
        Ok((log_lap, ratio, ill_conditioned))
    }

    /// Hutchinson estimates of per-example `v^T H_i v` for `ln L_i` (and of
    /// `v^T (hess L_i) v / L_i` when `direct`), averaged over probes.
    fn hutchinson_per_example(&self, probes: usize, seed: u64, direct: bool) -> Result<Vec<Vec<f64>>> {
        let theta = self.params.values();
        let ll0 = self.log_likelihoods(theta)?;
        (0..probes)
            .into_par_iter()
            .map(|p| {
                let v = rademacher(theta.len(), &self.support, seed, p);
                let (up, down) = shifted(theta, &v, self.h);
                let (gu, lu) = self.per_example_gradients(&up)?;
                let (gd, ld) = self.per_example_gradients(&down)?;
                let dot = |g: &[f64]| g.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
                Ok((0..ll0.len())
                    .map(|i| {
                        let (a, b) = (dot(&gu[i]), dot(&gd[i]));
                        if direct {
                            // grad L_i(theta') / L_i(theta) = exp(ll_i(theta') - ll_i(theta)) grad ln L_i(theta')
                            ((lu[i] - ll0[i]).exp() * a - (ld[i] - ll0[i]).exp() * b) / (2.0 * self.h)
                        } else {
                            (a - b) / (2.0 * self.h)
                        }
                    })
                    .collect())
            })
            .collect()
    }

    fn fisher_terms(&self) -> Result<Vec<f64>> {
        let (grads, _) = self.per_example_gradients(self.params.values())?;
        Ok(grads
            .iter()
            .map(|g| self.support.iter().map(|&k| g[k] * g[k]).sum())
            .collect())
    }
}

/// Laplacian of the summed log-likelihood over the masked coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplacianEstimate {
    pub value: f64,
    pub std_error: f64,
    pub exact: bool,
    /// The chosen step left every difference at the rounding floor.
    pub ill_conditioned: bool,
}

pub fn laplacian_loglik(
    spec: &NetworkSpec,
    params: &ParamVector,
    data: &Dataset,
    opts: &CurvatureOptions,
) -> Result<LaplacianEstimate> {
    let probe = Probe::new(spec, params, data, opts)?;
    if probe.exact(opts) {
        let (log_lap, _, ill_conditioned) = probe.coordinate_loop()?;
        Ok(LaplacianEstimate {
            value: log_lap.iter().sum(),
            std_error: 0.0,
            exact: true,
            ill_conditioned,
        })
    } else {
        let est = hutchinson_trace(
            |t| probe.total_gradient(t),
            params.values(),
            &probe.support,
            probe.h,
            opts.probes,
            opts.seed,
        )?;
        Ok(LaplacianEstimate {
            value: est.value,
            std_error: est.std_error,
            exact: false,
            ill_conditioned: false,
        })
    }
}

/// Hutchinson estimate of the log-likelihood Laplacian regardless of size.
pub fn laplacian_loglik_hutchinson(
    spec: &NetworkSpec,
    params: &ParamVector,
    data: &Dataset,
    opts: &CurvatureOptions,
) -> Result<Estimate> {
    let probe = Probe::new(spec, params, data, opts)?;
    hutchinson_trace(
        |t| probe.total_gradient(t),
        params.values(),
        &probe.support,
        probe.h,
        opts.probes,
        opts.seed,
    )
}

/// `sum_i |grad ln L_i|^2` over the masked coordinates.
pub fn fisher_trace(spec: &NetworkSpec, params: &ParamVector, data: &Dataset, mask: &Mask) -> Result<f64> {
    let opts = CurvatureOptions {
        mask: mask.clone(),
        ..CurvatureOptions::default()
    };
    Ok(Probe::new(spec, params, data, &opts)?.fisher_terms()?.iter().sum())
}

pub fn pep_effect_predicted(laplacian: f64, fisher_trace: f64, sigma: f64) -> f64 {
    0.5 * sigma * sigma * (laplacian + fisher_trace)
}

/// Per-example `lap L_i / L_i`.
pub fn likelihood_laplacian_ratios(
    spec: &NetworkSpec,
    params: &ParamVector,
    data: &Dataset,
    opts: &CurvatureOptions,
) -> Result<Vec<f64>> {
    let probe = Probe::new(spec, params, data, opts)?;
    if probe.exact(opts) {
        let (log_lap, ratio, _) = probe.coordinate_loop()?;
        return match opts.ratio_form {
            RatioForm::Direct => Ok(ratio),
            RatioForm::ViaLogLikelihood => Ok(log_lap.iter().zip(probe.fisher_terms()?).map(|(l, f)| l + f).collect()),
        };
    }
    let direct = opts.ratio_form == RatioForm::Direct;
    let per_probe = probe.hutchinson_per_example(opts.probes, opts.seed, direct)?;
    let n = data.len();
    let mut acc = vec![0.0; n];
    for row in &per_probe {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let mut out: Vec<f64> = acc.into_iter().map(|v| v / per_probe.len() as f64).collect();
    if !direct {
        for (o, f) in out.iter_mut().zip(probe.fisher_terms()?) {
            *o += f;
        }
    }
    Ok(out)
}

/// `sigma^2 / 2 * sum_i lap L_i / L_i`.
pub fn pep_effect_direct(
    spec: &NetworkSpec,
    params: &ParamVector,
    data: &Dataset,
    sigma: f64,
    opts: &CurvatureOptions,
) -> Result<f64> {
    if !(sigma >= 0.0) {
        return Err(Error::config("curvature.sigma", "sigma must be >= 0"));
    }
    if sigma == 0.0 {
        return Ok(0.0);
    }
    let ratios = likelihood_laplacian_ratios(spec, params, data, opts)?;
    Ok(0.5 * sigma * sigma * ratios.iter().sum::<f64>())
}

/// Observed gain `L(sigma) - LL(theta)` (summed) from an `members`-member
/// Gaussian ensemble, with a delta-method Monte-Carlo standard error.
pub fn pep_effect_observed(
    spec: &NetworkSpec,
    params: &ParamVector,
    data: &Dataset,
    sigma: f64,
    members: usize,
    seed: u64,
    mask: &Mask,
) -> Result<Estimate> {
    let cfg = PerturbConfig {
        sigma,
        members,
        distribution: NoiseDistribution::Gaussian,
        mask: mask.clone(),
        seed,
    };
    let lls = pep::member_log_likelihoods(spec, params, &cfg, data)?;
    let base = nn::log_likelihoods_from_logits(&nn::forward(spec, params, data.features())?, data.labels())?;
    let n = base.len();
    let m = lls.len();
    let mut gap = 0.0;
    let mut z = vec![0.0; m];
    for i in 0..n {
        let max = lls.iter().map(|l| l[i]).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = lls.iter().map(|l| (l[i] - max).exp()).sum();
        let lme = max + (s / m as f64).ln();
        gap += lme - base[i];
        for (zj, l) in z.iter_mut().zip(&lls) {
            *zj += (l[i] - lme).exp();
        }
    }
    let se = if m > 1 { mean_and_se(&z).std_error } else { f64::NAN };
    Ok(Estimate {
        value: gap,
        std_error: se,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub laplacian_loglik: f64,
    pub laplacian_std_error: f64,
    pub fisher_trace: f64,
    pub pep_effect_predicted: f64,
    pub pep_effect_direct: f64,
    pub pep_effect_observed: f64,
    pub observed_std_error: f64,
    pub sigma: f64,
    pub examples: usize,
    pub coordinates: usize,
    pub exact_laplacian: bool,
    pub ill_conditioned: bool,
    pub probes: usize,
    pub step: f64,
    pub seed: u64,
    pub members: usize,
    pub ratio_form: RatioForm,
    pub convention: String,
}

/// Every gain-related quantity at one `sigma`.
pub fn curvature_report(
    spec: &NetworkSpec,
    params: &ParamVector,
    data: &Dataset,
    sigma: f64,
    members: usize,
    opts: &CurvatureOptions,
) -> Result<CurvatureReport> {
    let probe = Probe::new(spec, params, data, opts)?;
    let lap = laplacian_loglik(spec, params, data, opts)?;
    let fisher = fisher_trace(spec, params, data, &opts.mask)?;
    let direct = pep_effect_direct(spec, params, data, sigma, opts)?;
    let observed = pep_effect_observed(
        spec,
        params,
        data,
        sigma,
        members,
        rng::derive_seed(opts.seed, "observed", 0),
        &opts.mask,
    )?;
    Ok(CurvatureReport {
        laplacian_loglik: lap.value,
        laplacian_std_error: lap.std_error,
        fisher_trace: fisher,
        pep_effect_predicted: pep_effect_predicted(lap.value, fisher, sigma),
        pep_effect_direct: direct,
        pep_effect_observed: observed.value,
        observed_std_error: observed.std_error,
        sigma,
        examples: data.len(),
        coordinates: probe.support.len(),
        exact_laplacian: lap.exact,
        ill_conditioned: lap.ill_conditioned,
        probes: if lap.exact { 0 } else { opts.probes },
        step: probe.h,
        seed: opts.seed,
        members,
        ratio_form: opts.ratio_form,
        convention: "summed".into(),
    })
}
