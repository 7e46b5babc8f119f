//! The experimental workflows behind the `pep` binary.
//!
//! Each workflow comes in two layers: an in-memory function that returns a
//! typed result (used by the examples and tests), and a `cmd_*` wrapper that
//! loads inputs from a [`RunConfig`] and writes its artifacts under
//! `config.output`. Outputs contain no timestamps, so identical configs give
//! byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint;
use crate::config::{RunConfig, Splits};
use crate::curvature::{self, CurvatureReport};
use crate::data::{Dataset, DatasetDescriptor, SplitTag};
use crate::error::{Error, Result};
use crate::metrics::{self, CalibrationReport, Provenance};
use crate::nn::{self, NetworkSpec, ParamVector, ProbMatrix};
use crate::pep::{self, SearchWarning, SigmaSearch};
use crate::temperature::{self, TemperatureFit};
use crate::train::{self, CheckpointSeries};

/// Post-hoc prediction method with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Baseline,
    Pep { sigma: f64 },
    Ts { temperature: f64 },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Pep { .. } => "pep",
            Method::Ts { .. } => "ts",
        }
    }

    /// Resolve `baseline`, `pep` or `ts`, taking parameters from the config.
    pub fn resolve(name: &str, config: &RunConfig) -> Result<Self> {
        match name {
            "baseline" => Ok(Method::Baseline),
            "pep" => config
                .perturb
                .sigma
                .map(|sigma| Method::Pep { sigma })
                .ok_or_else(|| Error::config("perturb.sigma", "method pep needs a sigma")),
            "ts" => config
                .ts
                .temperature
                .map(|temperature| Method::Ts { temperature })
                .ok_or_else(|| Error::config("ts.temperature", "method ts needs a temperature")),
            other => Err(Error::config(
                "method",
                format!("expected baseline, pep or ts, got `{other}`"),
            )),
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(format!("cannot serialize: {e}")))?;
    text.push('\n');
    write(path, text)
}

fn check_compatible(spec: &NetworkSpec, data: &Dataset) -> Result<()> {
    if spec.input_width() != data.dim() {
        return Err(Error::Shape {
            layer: 0,
            detail: format!(
                "checkpoint expects {} features, dataset has {}",
                spec.input_width(),
                data.dim()
            ),
        });
    }
    if spec.class_count() != data.class_count() {
        return Err(Error::Shape {
            layer: spec.layers().len() - 1,
            detail: format!(
                "checkpoint predicts {} classes, dataset has {}",
                spec.class_count(),
                data.class_count()
            ),
        });
    }
    Ok(())
}

fn load_model(path: &Path, splits: &Splits) -> Result<(NetworkSpec, ParamVector)> {
    let (spec, params) = checkpoint::load(path)?;
    check_compatible(&spec, &splits.part(SplitTag::Train)?)?;
    Ok((spec, params))
}

/// Predictive probabilities of `method` on `features`.
pub fn predict(
    config: &RunConfig,
    spec: &NetworkSpec,
    params: &ParamVector,
    method: Method,
    features: &crate::Matrix,
) -> Result<ProbMatrix> {
    match method {
        Method::Baseline => nn::softmax(&nn::forward(spec, params, features)?),
        Method::Pep { sigma } => pep::ensemble_predict(spec, params, &config.perturb_config(sigma), features),
        Method::Ts { temperature } => temperature::scale_logits(&nn::forward(spec, params, features)?, temperature),
    }
}

fn provenance(config: &RunConfig, method: Method) -> Provenance {
    match method {
        Method::Baseline => Provenance::Baseline,
        Method::Pep { sigma } => {
            let p = config.perturb_config(sigma);
            Provenance::Pep {
                sigma,
                members: p.members,
                seed: p.seed,
            }
        }
        Method::Ts { temperature } => Provenance::Ts { temperature },
    }
}

pub fn evaluate(
    config: &RunConfig,
    spec: &NetworkSpec,
    params: &ParamVector,
    method: Method,
    data: &Dataset,
) -> Result<CalibrationReport> {
    let probs = predict(config, spec, params, method, data.features())?;
    metrics::calibration_report(&probs, data.labels(), config.ece_bins, provenance(config, method))
}

// ---- train ----

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub params: usize,
    pub final_train_nll: f64,
    pub final_val_nll: f64,
    pub checkpoint_dir: PathBuf,
}

pub fn checkpoint_dir(config: &RunConfig) -> PathBuf {
    config.output.join("checkpoints")
}

/// Train the configured network; the series is also written to disk.
pub fn cmd_train(config: &RunConfig) -> Result<(TrainSummary, CheckpointSeries)> {
    config.validate()?;
    let splits = config.load_data()?;
    let train_set = splits.part(SplitTag::Train)?;
    let val_set = splits.part(SplitTag::Validation)?;
    let spec = config.network(train_set.dim(), splits.class_count())?;
    let dir = checkpoint_dir(config);
    let series = match train::train_on(&spec, &train_set, &val_set, &config.train_config()) {
        Ok(series) => series,
        Err(Error::Diverged { epoch, completed }) => {
            if !completed.is_empty() {
                completed.write_dir(&dir)?;
            }
            return Err(Error::Diverged { epoch, completed });
        }
        Err(e) => return Err(e),
    };
    series.write_dir(&dir)?;
    let last = series.last().expect("training runs at least one epoch");
    Ok((
        TrainSummary {
            epochs: series.len(),
            params: spec.param_count(),
            final_train_nll: last.train_nll,
            final_val_nll: last.val_nll,
            checkpoint_dir: dir,
        },
        series,
    ))
}

// ---- pep-search ----

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PepSearchResult {
    pub sigma_star: f64,
    #[serde(rename = "L_at_sigma_star")]
    pub l_at_sigma_star: f64,
    #[serde(rename = "L_baseline")]
    pub l_baseline: f64,
    pub bracket: (f64, f64),
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub iterations: usize,
    pub members: usize,
    pub evaluations: usize,
    pub warnings: Vec<SearchWarning>,
}

pub fn pep_search(
    config: &RunConfig,
    spec: &NetworkSpec,
    params: &ParamVector,
    validation: &Dataset,
) -> Result<SigmaSearch> {
    let search = config.search_config();
    pep::golden_section_sigma(spec, params, &search, validation)
}

pub fn cmd_pep_search(config: &RunConfig, checkpoint: &Path) -> Result<PepSearchResult> {
    config.validate()?;
    let splits = config.load_data()?;
    let (spec, params) = load_model(checkpoint, &splits)?;
    let s = pep_search(config, &spec, &params, &splits.part(SplitTag::Validation)?)?;
    let result = PepSearchResult {
        sigma_star: s.sigma_star,
        l_at_sigma_star: s.ll_at_sigma_star,
        l_baseline: s.baseline_ll,
        bracket: s.bracket,
        sigma_low: config.search.sigma_low,
        sigma_high: config.search.sigma_high,
        iterations: config.search.iterations,
        members: config.search.members,
        evaluations: s.curve.len(),
        warnings: s.warnings.clone(),
    };
    write(&config.output.join("sigma_curve.csv"), s.curve.to_csv())?;
    write_json(&config.output.join("pep_search.json"), &result)?;
    Ok(result)
}

// ---- evaluate ----

pub fn cmd_evaluate(
    config: &RunConfig,
    checkpoint: &Path,
    method: Method,
    split: SplitTag,
) -> Result<CalibrationReport> {
    config.validate()?;
    let splits = config.load_data()?;
    let (spec, params) = load_model(checkpoint, &splits)?;
    let report = evaluate(config, &spec, &params, method, &splits.part(split)?)?;
    let stem = format!("{}_{}", method.name(), split.name());
    write_json(&config.output.join(format!("evaluate_{stem}.json")), &report)?;
    write(
        &config.output.join(format!("reliability_{stem}.csv")),
        report.bins.to_csv(),
    )?;
    Ok(report)
}

// ---- probe ----

pub fn cmd_probe(config: &RunConfig, checkpoint: &Path, split: SplitTag) -> Result<CurvatureReport> {
    config.validate()?;
    let sigma = config
        .perturb
        .sigma
        .ok_or_else(|| Error::config("perturb.sigma", "probe needs a sigma"))?;
    let splits = config.load_data()?;
    let (spec, params) = load_model(checkpoint, &splits)?;
    let report = curvature::curvature_report(
        &spec,
        &params,
        &splits.part(split)?,
        sigma,
        config.perturb.members,
        &config.curvature_options(),
    )?;
    write_json(&config.output.join("curvature.json"), &report)?;
    Ok(report)
}

// ---- overfit-probe ----

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverfitRow {
    pub epoch: usize,
    pub overfit_gap: f64,
    pub sigma_star: f64,
    pub pep_effect_observed: f64,
}

/// For every checkpoint: test-minus-train NLL, sigma* on validation, and the
/// gain `L(sigma*) - baseline` on test under the search's noise stream.
pub fn overfit_probe(config: &RunConfig, series: &CheckpointSeries, splits: &Splits) -> Result<Vec<OverfitRow>> {
    if series.is_empty() {
        return Err(Error::EmptyDataset("checkpoint series has no epochs".into()));
    }
    let train_set = splits.part(SplitTag::Train)?;
    let val_set = splits.part(SplitTag::Validation)?;
    let test_set = splits.part(SplitTag::Test)?;
    check_compatible(&series.spec, &test_set)?;
    let search = config.search_config();
    series
        .checkpoints
        .iter()
        .map(|c| {
            let s = pep::golden_section_sigma(&series.spec, &c.params, &search, &val_set)?;
            let on_test =
                pep::ensemble_log_likelihood(&series.spec, &c.params, &search.perturb(s.sigma_star), &test_set)?;
            let baseline = nn::mean_log_likelihood(&series.spec, &c.params, test_set.features(), test_set.labels())?;
            Ok(OverfitRow {
                epoch: c.epoch,
                overfit_gap: train::overfit_gap(&series.spec, &c.params, &train_set, &test_set)?,
                sigma_star: s.sigma_star,
                pep_effect_observed: on_test.ensemble - baseline,
            })
        })
        .collect()
}

pub fn overfit_csv(rows: &[OverfitRow]) -> String {
    let mut s = String::from("epoch,overfit_gap,sigma_star,pep_effect_observed\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:?},{:?},{:?}",
            r.epoch, r.overfit_gap, r.sigma_star, r.pep_effect_observed
        );
    }
    s
}

/// Sample Pearson correlation; NaN when either column is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len()) as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct OverfitSummary {
    pub rows: usize,
    pub pearson: f64,
}

pub fn cmd_overfit_probe(config: &RunConfig, checkpoints: &Path) -> Result<(OverfitSummary, Vec<OverfitRow>)> {
    config.validate()?;
    let splits = config.load_data()?;
    let series = CheckpointSeries::read_dir(checkpoints)?;
    let rows = overfit_probe(config, &series, &splits)?;
    write(&config.output.join("overfit_probe.csv"), overfit_csv(&rows))?;
    let gaps: Vec<f64> = rows.iter().map(|r| r.overfit_gap).collect();
    let effects: Vec<f64> = rows.iter().map(|r| r.pep_effect_observed).collect();
    Ok((
        OverfitSummary {
            rows: rows.len(),
            pearson: pearson(&gaps, &effects),
        },
        rows,
    ))
}

// ---- ood ----

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OodResult {
    pub kld_baseline: f64,
    pub kld_method: f64,
    pub method: String,
    pub bins: usize,
    pub in_examples: usize,
    pub out_examples: usize,
}

fn max_confidences(probs: &ProbMatrix) -> Vec<f64> {
    metrics::confidences(probs).into_iter().map(|(c, _)| c).collect()
}

/// Symmetrized KLD between in- and out-of-distribution confidence histograms,
/// for the baseline and for `method`.
pub fn ood(
    config: &RunConfig,
    spec: &NetworkSpec,
    params: &ParamVector,
    method: Method,
    inside: &crate::Matrix,
    outside: &crate::Matrix,
) -> Result<OodResult> {
    for (what, m) in [("in-distribution", inside), ("out-of-distribution", outside)] {
        if m.cols() != spec.input_width() {
            return Err(Error::Shape {
                layer: 0,
                detail: format!(
                    "{what} data has {} features, model expects {}",
                    m.cols(),
                    spec.input_width()
                ),
            });
        }
    }
    let kld = |method| -> Result<f64> {
        let a = max_confidences(&predict(config, spec, params, method, inside)?);
        let b = max_confidences(&predict(config, spec, params, method, outside)?);
        metrics::symmetrized_kld(&a, &b, config.kld_bins)
    };
    Ok(OodResult {
        kld_baseline: kld(Method::Baseline)?,
        kld_method: kld(method)?,
        method: method.name().into(),
        bins: config.kld_bins,
        in_examples: inside.rows(),
        out_examples: outside.rows(),
    })
}

/// Without explicit descriptors, the in-distribution set is the test split
/// restricted to `data.classes` and the out-of-distribution set is the
/// remaining test rows.
pub fn cmd_ood(
    config: &RunConfig,
    checkpoint: &Path,
    method: Method,
    inside: Option<&DatasetDescriptor>,
    outside: Option<&DatasetDescriptor>,
) -> Result<OodResult> {
    config.validate()?;
    let (spec, params) = checkpoint::load(checkpoint)?;
    let splits = if inside.is_none() || outside.is_none() {
        Some(config.load_data()?)
    } else {
        None
    };
    let inside = match inside {
        Some(d) => d.load()?,
        None => splits.as_ref().expect("loaded above").part(SplitTag::Test)?,
    };
    let outside = match outside {
        Some(d) => d.load()?,
        None => splits.as_ref().expect("loaded above").held_out()?.ok_or_else(|| {
            Error::config(
                "data.classes",
                "set data.classes or pass an out-of-distribution dataset",
            )
        })?,
    };
    let result = ood(config, &spec, &params, method, inside.features(), outside.features())?;
    write_json(&config.output.join("ood.json"), &result)?;
    Ok(result)
}

// ---- report ----

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub split: String,
    pub sigma_star: f64,
    pub temperature: f64,
    pub search_warnings: Vec<SearchWarning>,
    pub temperature_fit: Option<TemperatureFit>,
    pub baseline: CalibrationReport,
    pub ts: CalibrationReport,
    pub pep: CalibrationReport,
}

impl Report {
    pub fn table_csv(&self) -> String {
        let mut s = String::from("method,nll,brier,ece_percent,top1_error_percent,accuracy\n");
        for (name, r) in [("baseline", &self.baseline), ("ts", &self.ts), ("pep", &self.pep)] {
            let _ = writeln!(
                s,
                "{name},{:?},{:?},{:?},{:?},{:?}",
                r.nll, r.brier, r.ece_percent, r.top1_error_percent, r.accuracy
            );
        }
        s
    }
}

/// Fit sigma* and T* on validation (unless fixed in the config) and score all
/// three methods on the test split.
pub fn report(config: &RunConfig, spec: &NetworkSpec, params: &ParamVector, splits: &Splits) -> Result<Report> {
    let val_set = splits.part(SplitTag::Validation)?;
    let test_set = splits.part(SplitTag::Test)?;
    let (sigma_star, search_warnings) = match config.perturb.sigma {
        Some(s) => (s, Vec::new()),
        None => {
            let s = pep_search(config, spec, params, &val_set)?;
            (s.sigma_star, s.warnings)
        }
    };
    let (temperature, temperature_fit) = match config.ts.temperature {
        Some(t) => (t, None),
        None => {
            let fit = temperature::fit_temperature(
                &nn::forward(spec, params, val_set.features())?,
                val_set.labels(),
                (config.ts.low, config.ts.high),
                config.ts.iterations,
            )?;
            (fit.temperature, Some(fit))
        }
    };
    Ok(Report {
        split: SplitTag::Test.name().into(),
        sigma_star,
        temperature,
        search_warnings,
        temperature_fit,
        baseline: evaluate(config, spec, params, Method::Baseline, &test_set)?,
        ts: evaluate(config, spec, params, Method::Ts { temperature }, &test_set)?,
        pep: evaluate(config, spec, params, Method::Pep { sigma: sigma_star }, &test_set)?,
    })
}

pub fn cmd_report(config: &RunConfig, checkpoint: &Path) -> Result<Report> {
    config.validate()?;
    let splits = config.load_data()?;
    let (spec, params) = load_model(checkpoint, &splits)?;
    let r = report(config, &spec, &params, &splits)?;
    write_json(&config.output.join("report.json"), &r)?;
    write(&config.output.join("report.csv"), r.table_csv())?;
    for (name, rep) in [("baseline", &r.baseline), ("ts", &r.ts), ("pep", &r.pep)] {
        write(
            &config.output.join(format!("reliability_{name}_test.csv")),
            rep.bins.to_csv(),
        )?;
    }
    Ok(r)
}
